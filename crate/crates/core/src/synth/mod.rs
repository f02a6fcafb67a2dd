//! Corpus synthesis: level normalization, simulated reverberation and
//! SNR-controlled mixing.

mod corpus;
mod level;
mod rir;
pub mod signals;

pub use corpus::{
    build_corpus, corpus_digest, load_corpus, synthesize, write_corpus, CorpusSpec, Manifest,
    ManifestEntry, SourcePair, UtteranceRecord, INDEX_FILE,
};
pub use level::{
    active_level_dbov, active_power, measure_snr, mix_at_snr, normalize_level, ACTIVE_RANGE_DB,
    LEVEL_FRAME,
};
pub use rir::{reverberate, simulate_rir, RoomSpec, SPEED_OF_SOUND};
