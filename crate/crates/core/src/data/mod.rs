//! Deterministic synthetic corpus: generation, on-disk format and batching.

mod batch;
mod corpus;
pub mod text;

pub use batch::{make_batches, Batch};
pub use corpus::{gen_corpus, generate, load_corpus, save_corpus, Corpus, CorpusManifest, GenOptions, MelConfig, MelStats, Rules, SpeakerInfo, Utterance, CORPUS_VERSION};
pub use text::{
    realize, symbolic_features, LexEntry, Lexicon, Liaison, LinguisticSequence, Punct, Schwa, Sentence,
    SymbolicWordFeatures, ALPHABET_SIZE, N_STYLE_CLASSES,
};
