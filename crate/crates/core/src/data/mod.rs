//! Tokenization, task records, few-shot formatting, CACLM splitting and the
//! synthetic corpus and task generators.

mod caclm;
mod fewshot;
mod synth;
mod task;
pub mod vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use caclm::{caclm_split, CaclmExample, SegmentLens};
pub use fewshot::{fewshot_input, format_fewshot, sample_mtf_batch, FewShotSet, MtfSample};
pub use synth::{synth_corpus, synth_tasks, Corpus, TaskSuite};
pub use task::{load_tasks_jsonl, write_tasks_jsonl, Metric, Task, TaskExample};

/// Independent RNG stream for `(seed, stream)`, e.g. one per training step, so
/// sampled data does not depend on how many draws earlier steps made.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
