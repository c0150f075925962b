//! Synthetic paired LR/HR connectome populations, the on-disk dataset
//! layout, and k-fold splitting.
//!
//! A dataset directory holds `manifest.json`, `lr.csv` and `hr.csv`. The CSV
//! files have one subject per row, no header, and edge columns in
//! strict-upper-triangle row-major order.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::connectome::edge_count;
use crate::diffmath::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::rng;

pub const GENERATOR_VERSION: &str = "latent-tanh-v1";
const LATENT_DIM: usize = 16;
const NOISE_SCALE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_subjects: usize,
    pub n_l: usize,
    pub n_h: usize,
    pub n_f: usize,
    pub n_f_prime: usize,
    pub seed: u64,
    pub generator_version: String,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for (label, nodes, width) in [("n_f", self.n_l, self.n_f), ("n_f_prime", self.n_h, self.n_f_prime)] {
            if width != edge_count(nodes) {
                return Err(Error::Validation(format!(
                    "{label} = {width} is inconsistent with {nodes} nodes: expected r(r-1)/2 = {}",
                    edge_count(nodes)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `n_subjects × n_f` low-resolution edge features.
    pub lr: Tensor,
    /// `n_subjects × n_f′` high-resolution edge features.
    pub hr: Tensor,
}

impl Dataset {
    pub fn n_subjects(&self) -> usize {
        self.lr.rows()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            manifest: DatasetManifest {
                n_subjects: indices.len(),
                ..self.manifest.clone()
            },
            lr: self.lr.select_rows(indices),
            hr: self.hr.select_rows(indices),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub n_l: usize,
    pub n_h: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_subjects: 276,
            n_l: 35,
            n_h: 160,
        }
    }
}

impl SyntheticConfig {
    /// 60 subjects, 10 → 20 nodes.
    pub fn small() -> Self {
        SyntheticConfig {
            n_subjects: 60,
            n_l: 10,
            n_h: 20,
        }
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Draws a population sharing a 16-dimensional latent code per subject:
/// `lr = σ(B_l u + ε)`, `hr = σ(B_h tanh(C u) + ε)` with fixed seeded mixing
/// matrices, `ε ~ N(0, 0.05²)` and `σ` the logistic function.
pub fn generate_synthetic(config: SyntheticConfig, seed: u64) -> Result<Dataset> {
    let SyntheticConfig { n_subjects, n_l, n_h } = config;
    if n_l < 2 || n_h <= n_l {
        return Err(Error::Validation(format!(
            "need n_l >= 2 and n_h > n_l, got n_l = {n_l}, n_h = {n_h}"
        )));
    }
    if n_subjects == 0 {
        return Err(Error::Validation("need at least one subject".into()));
    }
    let (n_f, n_fp) = (edge_count(n_l), edge_count(n_h));
    let scale = 1.0 / (LATENT_DIM as f64).sqrt();

    let mut mix = rng::stream(seed, "synthetic-mixing", 0);
    let b_l = gaussian_matrix(LATENT_DIM, n_f, scale, &mut mix);
    let c = gaussian_matrix(LATENT_DIM, LATENT_DIM, 1.5 * scale, &mut mix);
    let b_h = gaussian_matrix(LATENT_DIM, n_fp, scale, &mut mix);

    let mut subjects = rng::stream(seed, "synthetic-subjects", 0);
    let u = gaussian_matrix(n_subjects, LATENT_DIM, 1.0, &mut subjects);
    let hidden = u.matmul(&c)?.map(f64::tanh);

    let mut noise = rng::stream(seed, "synthetic-noise", 0);
    let lr_noise = gaussian_matrix(n_subjects, n_f, NOISE_SCALE, &mut noise);
    let hr_noise = gaussian_matrix(n_subjects, n_fp, NOISE_SCALE, &mut noise);

    let lr = u.matmul(&b_l)?.zip_map(&lr_noise, |a, e| sigmoid(a + e))?;
    let hr = hidden.matmul(&b_h)?.zip_map(&hr_noise, |a, e| sigmoid(a + e))?;

    Ok(Dataset {
        manifest: DatasetManifest {
            n_subjects,
            n_l,
            n_h,
            n_f,
            n_f_prime: n_fp,
            seed,
            generator_version: GENERATOR_VERSION.to_string(),
        },
        lr,
        hr,
    })
}

pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&dataset.manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    write_matrix_csv(dir.join("lr.csv"), &dataset.lr)?;
    write_matrix_csv(dir.join("hr.csv"), &dataset.hr)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", manifest_path.display())))?;
    manifest.validate()?;
    let lr = read_matrix_csv(dir.join("lr.csv"), manifest.n_subjects, manifest.n_f)?;
    let hr = read_matrix_csv(dir.join("hr.csv"), manifest.n_subjects, manifest.n_f_prime)?;
    Ok(Dataset { manifest, lr, hr })
}

/// Comma-separated, no header, shortest round-trip decimal formatting.
pub fn write_matrix_csv(path: impl AsRef<Path>, matrix: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for row in matrix.row_iter() {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a headerless numeric CSV and checks it is `rows × cols`.
pub fn read_matrix_csv(path: impl AsRef<Path>, rows: usize, cols: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut n_rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if r >= rows {
            return Err(Error::Validation(format!(
                "{}: expected {rows} rows, found more",
                path.display()
            )));
        }
        if record.len() != cols {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                row: r + 1,
                col: record.len().min(cols) + 1,
                message: format!("expected {cols} columns, found {}", record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                file: path.to_path_buf(),
                row: r + 1,
                col: c + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            data.push(v);
        }
        n_rows += 1;
    }
    if n_rows != rows {
        return Err(Error::Validation(format!(
            "{}: expected {rows} rows, found {n_rows}",
            path.display()
        )));
    }
    Tensor::from_vec(rows, cols, data)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Validation(format!("{}: {e}", path.display()))
    }
}

/// Fold index per subject.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: Vec<usize>,
}

impl FoldSplit {
    /// Subject indices of fold `fold`, ascending.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k).map(|f| self.test_indices(f).len()).collect()
    }
}

/// Seeded shuffle, then contiguous folds whose sizes differ by at most one
/// (the first `n mod k` folds get the extra subject).
pub fn kfold(n_subjects: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Validation(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n_subjects {
        return Err(Error::Validation(format!(
            "cannot split {n_subjects} subjects into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut rng::stream(seed, "kfold", 0));
    let (base, extra) = (n_subjects / k, n_subjects % k);
    let mut assignments = vec![0; n_subjects];
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &subject in &order[pos..pos + size] {
            assignments[subject] = fold;
        }
        pos += size;
    }
    Ok(FoldSplit { k, assignments })
}
