//! Minimal CNN: kernels with reverse-mode gradients, Adam, training and
//! embedding export.

pub mod kernels;
mod model;
mod train;

pub use kernels::{argmax, softmax, Scalar};
pub use model::{forward_batch, loss_and_grad, Activation, ModelParams, ModelSpec, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT};
pub use train::{
    accuracy_from_predictions, batch_inputs, embeddings_bundle, evaluate, extract_embeddings, forward, image_input,
    load_embeddings, predict, records_from_bundle, save_embeddings, sidecar_path, train_erm, train_erm_with, Checkpoint,
    EmbeddingRecord, EpochLog, Evaluation, Loss, Optimizer, TrainConfig,
};
