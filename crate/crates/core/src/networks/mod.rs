//! Graph convolutional encoder-decoders, the alignment discriminator, and
//! checkpoint serialization.

mod checkpoint;
mod gcn;
mod model;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use gcn::{gcn_forward, glorot_uniform, normalize_adjacency, Activation, Adjacency, GcnLayer, Mode};
pub use model::{
    build_student, build_teacher, BoundDiscriminator, BoundGenerator, DenseLayer, Discriminator,
    Generator, ModelDims, Role, Teacher, DISCRIMINATOR_WIDTHS,
};
