//! Sequence recognition model: network, CTC, decoding, persistence, training.

pub mod checkpoint;
pub mod ctc;
pub mod decode;
pub mod network;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use ctc::{collapse_path, ctc_brute_force, ctc_loss, ctc_loss_var, min_alignment_length, CtcOutput};
pub use decode::{best_path, greedy_decode, GlossSequence, Vocabulary, BLANK};
pub use network::{CorrNet, ForwardVars, ModelConfig, StStage, StageMaps};
pub use optim::{batch_gradients, train_step, Adam, Example};
