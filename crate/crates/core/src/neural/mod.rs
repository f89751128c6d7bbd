//! Dense node classifiers trained from a handful of labels.

mod checkpoint;
mod gradcheck;
pub mod linalg;
mod model;
mod optim;
mod train;

pub use checkpoint::{decode_model, encode_model, load_model, save_model};
pub use gradcheck::{gradient_check, FD_STEP, GRAD_FLOOR};
pub use linalg::{Matrix, Scalar};
pub use model::{
    argmax_labels, cross_entropy_masked, gcn_forward, mlp_forward, neighbor_mean, propagate_features,
    sage_forward, transform_features, Layer, ModelKind, ModelSpec, Params, GRAPH_HIDDEN, MLPC_HIDDEN, N_CLASSES,
};
pub use optim::{optimizer_step, AdamState, AdamW};
pub use train::{
    predict, train_node_classifier, EpochRecord, Precision, TrainConfig, TrainedModel, ValidationMetric, EPOCHS,
    GRAPH_LR, MLPC_LR, WEIGHT_DECAY,
};
