//! Classical reference codecs: repetition coding, tail-biting
//! convolutional coding with exact maximum-likelihood Viterbi decoding,
//! and a trained linear feedback code.

pub mod conv;
pub mod linear;
pub mod repetition;

pub use conv::ConvCode;
pub use linear::{train_linear_feedback, LinearFeedbackModel};
pub use repetition::RepetitionCode;
