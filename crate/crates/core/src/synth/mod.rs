//! Synthetic tagged corpus, the toy frame classifier and its CTC trainer.

mod corpus;
mod model;
mod train;

pub use corpus::{
    gen_corpus, load_corpus, manifest_line, read_manifest, word_embedding, write_corpus, EntityLexicon,
    IntentSpec, ManifestRecord, Span, SynthConfig, Utterance, FEATURE_DIR, SYNTH_PLACEHOLDER_COUNT,
};
pub use model::{predict, Forward, Params, ToyModel};
pub use train::{target_labels, train, Supervision, TrainConfig, TrainLog};
