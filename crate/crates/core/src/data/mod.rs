//! Corpus files, synthetic data, vocabularies and checkpoints.

pub mod checkpoint;
pub mod corpus;
pub mod synth;
pub mod vocab;

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, CheckpointMeta};
pub use corpus::{build_vocabs, read_corpus, write_corpus, ConstraintSpec, CorpusRecord, TokenConstraint};
pub use synth::{generate_homograph_corpus, homograph_accuracy, Homograph, SynthConfig, SynthCorpus};
pub use vocab::Vocab;
