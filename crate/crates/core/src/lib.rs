//! Query-by-humming retrieval engine.
//!
//! The pipeline runs peak-normalized PCM audio through a log-mel
//! spectrogram, embeds fixed-size patches with a small residual CNN trained
//! under an additive angular margin (ArcFace) loss, and retrieves songs by
//! squared-L2 search over unit-norm embeddings (flat, IVF or PQ index).
//! Retrieval quality is reported as MRR@10.
//!
//! Data-parallel loops (batch search, k-means assignment, batch embedding,
//! spectrogram extraction, corpus synthesis) go through [`par`], which uses
//! rayon when the `parallel` feature is enabled and plain iterators
//! otherwise. Both paths produce bit-identical results. Training runs
//! sequentially unless a caller opts in with
//! [`train_with`](embedder::train_with).

pub mod audio;
pub mod embedder;
pub mod eval;
pub mod index;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod spectrogram;
pub mod synth;

pub use audio::{AudioClip, AudioError, IngestConfig};
pub use embedder::{
    ArcFaceConfig, Embedder, EmbedderConfig, EmbedderError, EmbedderParams, Embedding,
    TrainConfig,
};
pub use eval::{EvalError, EvalReport};
pub use index::{AnyIndex, FlatIndex, IndexError, IvfIndex, PqIndex, SearchResult};
pub use par::Execution;
pub use spectrogram::{MelFilterbank, MelSpectrogram, SpectrogramConfig, SpectrogramError};
pub use pipeline::{PipelineError, RunConfig};
pub use synth::SynthCorpusConfig;
