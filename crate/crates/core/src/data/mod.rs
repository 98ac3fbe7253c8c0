//! Embedding dataset files, task splits and synthetic data.

mod format;
mod split;
mod synth;

pub use format::{read_dataset, write_dataset, EmbeddingDataset, Record, TextBank, MAGIC, NORM_WARN_TOL, VERSION};
pub use split::{make_split, EvalSet, Split, SplitSpec, Task};
pub use synth::{synth_generate, SynthConfig, SIGMA_LOW};
