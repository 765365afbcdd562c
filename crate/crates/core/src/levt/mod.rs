//! Levenshtein-style non-autoregressive student.

mod decode;
mod model;
pub mod oracle;
mod train;

pub use decode::{output_cap, refine_corpus, refine_decode, Refinement};
pub use model::{EmbeddingMode, Head, HeadManifest, RollInConfig, StudentConfig, StudentModel};
pub use oracle::{oracle_actions, EditScript};
pub use train::{roll_in, student_train_step, train_student, RollIn, StudentLoss};

#[cfg(test)]
mod tests;
