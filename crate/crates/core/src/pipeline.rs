//! End-to-end orchestration: run configuration, preprocessing, training-set
//! assembly, gallery indexing and labeled evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{ingest_wav, normalize_peak, resample_linear, AudioClip, AudioError, IngestConfig};
use crate::embedder::{
    train_with, write_checkpoint, ArcFaceConfig, CheckpointError, Embedder, EmbedderConfig,
    EmbedderError, EmbedderParams, Embedding, LabeledMel, TrainConfig, TrainHistory,
};
use crate::eval::{EvalError, EvalReport};
use crate::index::{write_index, AnyIndex, FlatIndex, IndexError, IvfIndex, PqIndex, SearchResult};
use crate::par::{self, Execution};
use crate::spectrogram::array::ArrayError;
use crate::spectrogram::{MelExtractor, MelSpectrogram, SpectrogramConfig, SpectrogramError};
use crate::synth::{synth_corpus_with, SynthConfigError, SynthCorpusConfig};

/// Cutoff used for every retrieval evaluation.
pub const EVAL_K: usize = 10;
/// Recall cutoffs reported alongside MRR@10.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("labels error: {0}")]
    Labels(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Spectrogram(#[from] SpectrogramError),
    #[error(transparent)]
    Embedder(#[from] EmbedderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<SynthConfigError> for PipelineError {
    fn from(e: SynthConfigError) -> Self {
        PipelineError::Config(e.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    #[default]
    Flat,
    Ivf,
    Pq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub kind: IndexKind,
    /// IVF partition count.
    pub nlist: usize,
    /// IVF default probe count.
    pub nprobe: usize,
    /// PQ subspace count.
    pub m: usize,
    /// PQ centroids per subspace.
    pub ksub: usize,
    pub kmeans_iters: usize,
    pub rng_seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            kind: IndexKind::Flat,
            nlist: 16,
            nprobe: 4,
            m: 8,
            ksub: 16,
            kmeans_iters: crate::index::DEFAULT_KMEANS_ITERS,
            rng_seed: 0,
        }
    }
}

/// Extra hum renditions of every gallery song added to the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingDataConfig {
    /// Hum variants rendered for training; must not include the evaluation variant.
    pub hum_variants: Vec<u64>,
}

impl Default for TrainingDataConfig {
    fn default() -> Self {
        Self { hum_variants: vec![1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Base directory for relative command-line paths.
    pub root: Option<PathBuf>,
}

impl PathsConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ingest: IngestConfig,
    pub spectrogram: SpectrogramConfig,
    pub embedder: EmbedderConfig,
    pub arcface: ArcFaceConfig,
    pub train: TrainConfig,
    pub index: IndexConfig,
    pub synth: SynthCorpusConfig,
    pub training_data: TrainingDataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        self.ingest.validate().map_err(|e| cfg(e.to_string()))?;
        self.spectrogram
            .validate(self.ingest.target_sample_rate)
            .map_err(|e| cfg(e.to_string()))?;
        self.embedder.validate().map_err(|e| cfg(e.to_string()))?;
        self.arcface.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.synth.validate()?;
        if self.embedder.n_mels != self.spectrogram.n_mels {
            return Err(cfg(format!(
                "embedder expects {} mel bins, spectrogram produces {}",
                self.embedder.n_mels, self.spectrogram.n_mels
            )));
        }
        if self.training_data.hum_variants.contains(&self.synth.hum_variant) {
            return Err(cfg(format!(
                "training hum variant {} is also the evaluation variant",
                self.synth.hum_variant
            )));
        }
        Ok(())
    }

    /// Replaces every seed in the configuration with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.embedder.rng_seed = seed;
        self.train.rng_seed = seed;
        self.index.rng_seed = seed;
        self.synth.rng_seed = seed;
    }
}

/// WAV bytes or clips to log-mel spectrograms.
pub struct Preprocessor {
    ingest: IngestConfig,
    extractor: MelExtractor,
}

impl Preprocessor {
    pub fn new(ingest: &IngestConfig, spec: &SpectrogramConfig) -> Result<Self, PipelineError> {
        ingest.validate()?;
        Ok(Self {
            ingest: ingest.clone(),
            extractor: MelExtractor::new(spec, ingest.target_sample_rate)?,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self, PipelineError> {
        Self::new(&cfg.ingest, &cfg.spectrogram)
    }

    pub fn floor(&self) -> f32 {
        self.extractor.config().floor_value()
    }

    pub fn wav_to_mel(&self, bytes: &[u8], id: &str) -> Result<MelSpectrogram, PipelineError> {
        let clip = ingest_wav(bytes, &self.ingest, id)?;
        Ok(self.extractor.mel_spectrogram(&clip)?)
    }

    /// Resamples and peak-normalizes an in-memory clip, then extracts features.
    pub fn clip_to_mel(&self, clip: &AudioClip) -> Result<MelSpectrogram, PipelineError> {
        let clip = normalize_peak(&resample_linear(clip, self.ingest.target_sample_rate)?)?;
        Ok(self.extractor.mel_spectrogram(&clip)?)
    }

    pub fn clips_to_mels(&self, clips: &[AudioClip], exec: Execution) -> Result<Vec<MelSpectrogram>, PipelineError> {
        par::map(exec, clips, |c| self.clip_to_mel(c)).into_iter().collect()
    }
}

/// Parses `hum_filename TAB song_id` lines; blank lines are skipped.
pub fn parse_labels(text: &str) -> Result<Vec<(String, String)>, PipelineError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match line.split('\t').collect::<Vec<_>>().as_slice() {
            [file, song] if !file.is_empty() && !song.is_empty() => out.push((file.to_string(), song.to_string())),
            _ => return Err(PipelineError::Labels(format!("line {}: expected two tab-separated fields", n + 1))),
        }
    }
    Ok(out)
}

/// Dense class indices for the distinct song ids, in sorted order.
pub fn class_map<'a>(song_ids: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut ids: Vec<&str> = song_ids.into_iter().collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect()
}

/// Pairs each spectrogram with the class of its song id.
pub fn labeled_set(
    mels: &[(MelSpectrogram, String)],
    classes: &BTreeMap<String, usize>,
) -> Result<Vec<LabeledMel>, PipelineError> {
    mels.iter()
        .map(|(m, song)| {
            let label = *classes
                .get(song)
                .ok_or_else(|| PipelineError::Labels(format!("unknown song id {song:?}")))?;
            Ok(LabeledMel { values: m.values().clone(), label })
        })
        .collect()
}

pub fn train_embedder(
    cfg: &RunConfig,
    samples: &[LabeledMel],
    pad_value: f32,
) -> Result<(EmbedderParams, TrainHistory), PipelineError> {
    Ok(train_with(
        samples,
        pad_value,
        &cfg.embedder,
        &cfg.arcface,
        &cfg.train,
        Execution::Sequential,
    )?)
}

pub fn embed_all(
    embedder: &Embedder,
    mels: &[MelSpectrogram],
    floor: f32,
    exec: Execution,
) -> Result<Vec<Embedding>, PipelineError> {
    Ok(embedder.embed_batch(mels, floor, exec).into_iter().collect::<Result<_, _>>()?)
}

/// Builds the configured index over one embedding per song id.
pub fn build_index(cfg: &IndexConfig, gallery: &[Embedding], exec: Execution) -> Result<AnyIndex, PipelineError> {
    let dim = gallery.first().ok_or(IndexError::EmptyIndex)?.vector.len();
    let mut flat = FlatIndex::new(dim);
    for e in gallery {
        flat.add(e.song_id.clone(), &e.vector)?;
    }
    Ok(match cfg.kind {
        IndexKind::Flat => AnyIndex::Flat(flat),
        IndexKind::Ivf => AnyIndex::Ivf(IvfIndex::build_with(flat, cfg.nlist, cfg.nprobe, cfg.rng_seed, exec)?),
        IndexKind::Pq => AnyIndex::Pq(PqIndex::build(&flat, cfg.m, cfg.ksub, cfg.kmeans_iters, cfg.rng_seed, exec)?),
    })
}

/// Searches every query at k = 10 and scores it against its true song id.
pub fn evaluate(
    index: &AnyIndex,
    queries: &[(String, Vec<f32>)],
    truths: &[String],
    exec: Execution,
) -> Result<(Vec<SearchResult>, EvalReport), PipelineError> {
    let results = index.search_batch(queries, EVAL_K, exec)?;
    let report = EvalReport::from_results(&results, truths, &RECALL_KS)?;
    Ok((results, report))
}

/// Every artifact of a synthetic end-to-end run, serialized.
#[derive(Clone, Debug)]
pub struct SyntheticRun {
    pub history: TrainHistory,
    pub checkpoint: Vec<u8>,
    pub index: Vec<u8>,
    pub hum_report: EvalReport,
    pub self_report: EvalReport,
}

impl SyntheticRun {
    pub fn report_tsv(&self) -> String {
        self.hum_report.to_tsv()
    }
}

/// Synthesizes the corpus, trains on songs plus the training hum variants,
/// indexes the songs and evaluates the evaluation-variant hums and the songs
/// themselves as queries.
pub fn run_synthetic(cfg: &RunConfig, exec: Execution) -> Result<SyntheticRun, PipelineError> {
    cfg.validate()?;
    let pre = Preprocessor::from_config(cfg)?;
    let floor = pre.floor();
    let corpus = synth_corpus_with(&cfg.synth, exec)?;
    let song_mels = pre.clips_to_mels(&corpus.songs, exec)?;
    let song_ids: Vec<String> = corpus.songs.iter().map(|c| c.source_id().to_string()).collect();

    let mut train_mels: Vec<(MelSpectrogram, String)> =
        song_mels.iter().cloned().zip(song_ids.iter().cloned()).collect();
    for &variant in &cfg.training_data.hum_variants {
        let extra = synth_corpus_with(&SynthCorpusConfig { hum_variant: variant, ..cfg.synth.clone() }, exec)?;
        let clips: Vec<AudioClip> = extra.hums.iter().map(|h| h.clip.clone()).collect();
        let mels = pre.clips_to_mels(&clips, exec)?;
        train_mels.extend(mels.into_iter().zip(extra.hums.iter().map(|h| h.song_id.clone())));
    }
    let classes = class_map(song_ids.iter().map(String::as_str));
    let samples = labeled_set(&train_mels, &classes)?;
    let (params, history) = train_embedder(cfg, &samples, floor)?;

    let mut checkpoint = Vec::new();
    write_checkpoint(&mut checkpoint, &params)?;
    let embedder = Embedder::new(cfg.embedder.clone(), params)?;

    let gallery = embed_all(&embedder, &song_mels, floor, exec)?;
    let index = build_index(&cfg.index, &gallery, exec)?;
    let mut index_bytes = Vec::new();
    write_index(&mut index_bytes, &index)?;

    let hum_clips: Vec<AudioClip> = corpus.hums.iter().map(|h| h.clip.clone()).collect();
    let hum_mels = pre.clips_to_mels(&hum_clips, exec)?;
    let hum_emb = embed_all(&embedder, &hum_mels, floor, exec)?;
    let queries: Vec<(String, Vec<f32>)> = hum_emb.into_iter().map(|e| (e.song_id, e.vector)).collect();
    let truths: Vec<String> = corpus.hums.iter().map(|h| h.song_id.clone()).collect();
    let (_, hum_report) = evaluate(&index, &queries, &truths, exec)?;

    let self_queries: Vec<(String, Vec<f32>)> = gallery.iter().map(|e| (e.song_id.clone(), e.vector.clone())).collect();
    let (_, self_report) = evaluate(&index, &self_queries, &song_ids, exec)?;

    Ok(SyntheticRun { history, checkpoint, index: index_bytes, hum_report, self_report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(RunConfig::from_json("{}").is_ok());
        assert!(matches!(RunConfig::from_json(r#"{"trian": {}}"#), Err(PipelineError::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"lr": 0.1, "lrr": 1}}"#), Err(PipelineError::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"index": {"kind": "hnsw"}}"#), Err(PipelineError::Config(_))));
        let cfg = RunConfig::from_json(r#"{"index": {"kind": "pq", "m": 4}}"#).unwrap();
        assert_eq!(cfg.index.kind, IndexKind::Pq);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn config_cross_checks() {
        let mut cfg = RunConfig::default();
        cfg.embedder.n_mels = 40;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.training_data.hum_variants = vec![0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(99);
        assert_eq!(
            [cfg.embedder.rng_seed, cfg.train.rng_seed, cfg.index.rng_seed, cfg.synth.rng_seed],
            [99; 4]
        );
    }

    #[test]
    fn labels_parse() {
        let l = parse_labels("a.wav\tsong_0001\n\nb.wav\tsong_0002\n").unwrap();
        assert_eq!(l, vec![("a.wav".into(), "song_0001".into()), ("b.wav".into(), "song_0002".into())]);
        assert!(parse_labels("a.wav song\n").is_err());
        assert!(parse_labels("a\tb\tc\n").is_err());
    }

    #[test]
    fn classes_are_sorted_and_dense() {
        let c = class_map(["b", "a", "b", "c"]);
        assert_eq!(c.into_iter().collect::<Vec<_>>(), vec![("a".into(), 0), ("b".into(), 1), ("c".into(), 2)]);
    }

    #[test]
    fn gallery_rejects_duplicate_ids() {
        let e = Embedding { vector: vec![1.0, 0.0], song_id: "s".into() };
        assert!(matches!(
            build_index(&IndexConfig::default(), &[e.clone(), e], Execution::Sequential),
            Err(PipelineError::Index(IndexError::DuplicateId(_)))
        ));
    }
}
