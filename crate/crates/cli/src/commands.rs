//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::{info, warn};

use humsearch::embedder::{read_checkpoint, write_checkpoint, EmbedderError};
use humsearch::index::{load_index, read_embeddings, save_index, write_embeddings, IndexError};
use humsearch::par;
use humsearch::pipeline::{
    build_index, class_map, embed_all, evaluate, labeled_set, parse_labels, train_embedder,
    PipelineError, Preprocessor,
};
use humsearch::spectrogram::array::{load_array, save_array};
use humsearch::synth::{synth_corpus_with, write_corpus};
use humsearch::{AnyIndex, Embedder, Execution, MelSpectrogram, RunConfig};

use crate::files::{file_name, stem, walk};
use crate::{Cli, Command};

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Some input data could not be processed (exit 1).
    Data(anyhow::Error),
    /// Bad configuration, arguments or inputs (exit 2).
    Usage(anyhow::Error),
}

type Result<T> = std::result::Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

/// Exit-code class of a library error.
fn classify(e: PipelineError) -> Failure {
    match e {
        PipelineError::Audio(_)
        | PipelineError::Spectrogram(_)
        | PipelineError::Array(_)
        | PipelineError::Labels(_)
        | PipelineError::Eval(_) => data(e),
        _ => usage(e),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    let exec = Execution::default();
    let p = |path: &Path| cfg.paths.resolve(path);
    match &cli.command {
        Command::Synth { out, hum_variant } => {
            if let Some(v) = hum_variant {
                cfg.synth.hum_variant = *v;
            }
            synth(&cfg, &p(out), exec)
        }
        Command::Preprocess { wavs, out } => preprocess(&cfg, &p(wavs), &p(out), cli.force, exec),
        Command::Train { mels, labels, out } => {
            let mels: Vec<PathBuf> = mels.iter().map(|m| p(m)).collect();
            let labels: Vec<PathBuf> = labels.iter().map(|l| p(l)).collect();
            train(&cfg, &mels, &labels, &p(out))
        }
        Command::Embed { checkpoint, mels, out } => embed(&cfg, &p(checkpoint), &p(mels), &p(out), exec),
        Command::BuildIndex { embeddings, out } => build(&cfg, &p(embeddings), &p(out), exec),
        Command::Query { index, checkpoint, input, k } => query(&cfg, &p(index), &p(checkpoint), &p(input), *k),
        Command::Eval { index, checkpoint, hums, labels, out } => {
            eval(&cfg, &p(index), &p(checkpoint), &p(hums), &p(labels), &p(out), exec)
        }
    }
}

fn require_dir(dir: &Path, what: &str) -> Result<()> {
    if !dir.is_dir() {
        return Err(usage(anyhow!("{what} {} is not a directory", dir.display())));
    }
    Ok(())
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() && !parent.is_dir() => Err(usage(anyhow!(
            "parent directory {} does not exist",
            parent.display()
        ))),
        _ => Ok(()),
    }
}

fn synth(cfg: &RunConfig, out: &Path, exec: Execution) -> Result<()> {
    require_parent(out)?;
    let corpus = synth_corpus_with(&cfg.synth, exec).map_err(|e| usage(anyhow!(e.0)))?;
    write_corpus(&corpus, out).with_context(|| format!("writing {}", out.display())).map_err(usage)?;
    info!("wrote {} songs and {} hums to {}", corpus.songs.len(), corpus.hums.len(), out.display());
    println!("{}", serde_json::json!({ "songs": corpus.songs.len(), "hums": corpus.hums.len() }));
    Ok(())
}

fn preprocess(cfg: &RunConfig, wavs: &Path, out: &Path, force: bool, exec: Execution) -> Result<()> {
    require_dir(wavs, "input")?;
    let pre = Preprocessor::from_config(cfg).map_err(usage)?;
    let files = walk(wavs, "wav").map_err(usage)?;
    #[derive(PartialEq)]
    enum Outcome {
        Written,
        Skipped,
        Failed,
    }
    let outcomes = par::map(exec, &files, |rel| {
        let dst = out.join(rel).with_extension("mel");
        if dst.exists() && !force {
            return Outcome::Skipped;
        }
        let result = (|| -> anyhow::Result<()> {
            let bytes = fs::read(wavs.join(rel))?;
            let mel = pre.wav_to_mel(&bytes, &stem(rel))?;
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent)?;
            }
            save_array(mel.values().view(), &dst)?;
            Ok(())
        })();
        match result {
            Ok(()) => Outcome::Written,
            Err(e) => {
                warn!("{}: {e:#}", rel.display());
                Outcome::Failed
            }
        }
    });
    let count = |o: Outcome| outcomes.iter().filter(|x| **x == o).count();
    let (written, skipped, failed) = (count(Outcome::Written), count(Outcome::Skipped), count(Outcome::Failed));
    println!("{}", serde_json::json!({ "written": written, "skipped": skipped, "failed": failed }));
    if failed > 0 {
        let names: Vec<String> = files
            .iter()
            .zip(&outcomes)
            .filter(|(_, o)| **o == Outcome::Failed)
            .map(|(f, _)| f.display().to_string())
            .collect();
        return Err(data(anyhow!("{failed} file(s) failed: {}", names.join(", "))));
    }
    Ok(())
}

fn load_mel(path: &Path, id: &str, n_mels: usize) -> anyhow::Result<MelSpectrogram> {
    let values = load_array(path).with_context(|| path.display().to_string())?;
    if values.ncols() != n_mels {
        return Err(anyhow!("{}: {} mel bins, expected {n_mels}", path.display(), values.ncols()));
    }
    Ok(MelSpectrogram::new(values, id))
}

/// Hum file name to song id, merged across label files.
fn read_label_map(paths: &[PathBuf]) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for path in paths {
        let text = fs::read_to_string(path).with_context(|| path.display().to_string()).map_err(usage)?;
        for (file, song) in parse_labels(&text).map_err(usage)? {
            if let Some(prev) = map.insert(file.clone(), song.clone()) {
                if prev != song {
                    return Err(usage(anyhow!("{file} labeled both {prev} and {song}")));
                }
            }
        }
    }
    Ok(map)
}

fn train(cfg: &RunConfig, mel_dirs: &[PathBuf], label_files: &[PathBuf], out: &Path) -> Result<()> {
    require_parent(out)?;
    let labels = read_label_map(label_files)?;
    let mut mels = Vec::new();
    for dir in mel_dirs {
        require_dir(dir, "mel")?;
        for rel in walk(dir, "mel").map_err(usage)? {
            let id = stem(&rel);
            let song = labels.get(&format!("{id}.wav")).cloned().unwrap_or_else(|| id.clone());
            let mel = load_mel(&dir.join(&rel), &id, cfg.spectrogram.n_mels).map_err(data)?;
            mels.push((mel, song));
        }
    }
    let classes = class_map(mels.iter().map(|(_, s)| s.as_str()));
    info!("training on {} spectrograms over {} songs", mels.len(), classes.len());
    let samples = labeled_set(&mels, &classes).map_err(classify)?;
    let (params, history) = match train_embedder(cfg, &samples, cfg.spectrogram.floor_value()) {
        Err(PipelineError::Embedder(e @ EmbedderError::InsufficientData(_))) => return Err(usage(e)),
        other => other.map_err(classify)?,
    };
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &params).map_err(usage)?;
    fs::write(out, bytes).map_err(usage)?;
    let csv = out.with_extension("history.csv");
    fs::write(&csv, history.to_csv()).map_err(usage)?;
    let last = history.last().expect("at least one epoch");
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": out.display().to_string(),
            "history": csv.display().to_string(),
            "epochs": history.epochs.len(),
            "classes": classes.len(),
            "loss": last.loss,
            "accuracy": last.accuracy,
        })
    );
    Ok(())
}

fn load_embedder(cfg: &RunConfig, ckpt: &Path) -> Result<Embedder> {
    let file = fs::File::open(ckpt).with_context(|| ckpt.display().to_string()).map_err(usage)?;
    let params = read_checkpoint(std::io::BufReader::new(file))
        .with_context(|| ckpt.display().to_string())
        .map_err(usage)?;
    Embedder::new(cfg.embedder.clone(), params).context("checkpoint does not match the configured embedder").map_err(usage)
}

fn embed(cfg: &RunConfig, ckpt: &Path, mel_dir: &Path, out: &Path, exec: Execution) -> Result<()> {
    require_dir(mel_dir, "mel")?;
    require_parent(out)?;
    let embedder = load_embedder(cfg, ckpt)?;
    let files = walk(mel_dir, "mel").map_err(usage)?;
    let mels = files
        .iter()
        .map(|rel| load_mel(&mel_dir.join(rel), &stem(rel), cfg.spectrogram.n_mels))
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(data)?;
    let rows = embed_all(&embedder, &mels, cfg.spectrogram.floor_value(), exec).map_err(classify)?;
    let mut bytes = Vec::new();
    write_embeddings(&mut bytes, embedder.embed_dim(), &rows).map_err(usage)?;
    fs::write(out, bytes).map_err(usage)?;
    println!("{}", serde_json::json!({ "embedded": rows.len(), "dim": embedder.embed_dim() }));
    Ok(())
}

fn build(cfg: &RunConfig, emb: &Path, out: &Path, exec: Execution) -> Result<()> {
    require_parent(out)?;
    let file = fs::File::open(emb).with_context(|| emb.display().to_string()).map_err(usage)?;
    let (dim, rows) = read_embeddings(std::io::BufReader::new(file)).map_err(usage)?;
    if rows.is_empty() {
        return Err(usage(IndexError::EmptyIndex));
    }
    let index = build_index(&cfg.index, &rows, exec).map_err(usage)?;
    save_index(&index, out).map_err(usage)?;
    println!("{}", serde_json::json!({ "kind": index.kind_name(), "entries": index.len(), "dim": dim }));
    Ok(())
}

fn load_any_index(path: &Path) -> Result<AnyIndex> {
    load_index(path).with_context(|| path.display().to_string()).map_err(usage)
}

/// Spectrogram of a `.wav` (ingested) or `.mel` (loaded) file.
fn input_mel(cfg: &RunConfig, pre: &Preprocessor, path: &Path) -> anyhow::Result<MelSpectrogram> {
    let id = stem(path);
    match path.extension().and_then(|e| e.to_str()) {
        Some("mel") => load_mel(path, &id, cfg.spectrogram.n_mels),
        _ => {
            let bytes = fs::read(path).with_context(|| path.display().to_string())?;
            Ok(pre.wav_to_mel(&bytes, &id).with_context(|| path.display().to_string())?)
        }
    }
}

fn query(cfg: &RunConfig, index: &Path, ckpt: &Path, input: &Path, k: usize) -> Result<()> {
    let index = load_any_index(index)?;
    let embedder = load_embedder(cfg, ckpt)?;
    let pre = Preprocessor::from_config(cfg).map_err(usage)?;
    if !input.is_file() {
        return Err(usage(anyhow!("input {} does not exist", input.display())));
    }
    let mel = input_mel(cfg, &pre, input).map_err(data)?;
    let e = embedder.embed(&mel, pre.floor()).map_err(data)?;
    let result = index.search(&e.vector, k).map_err(usage)?;
    let mut out = String::from("rank\tsong_id\tsquared_distance\n");
    for (i, h) in result.hits.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t{}\n", i + 1, h.song_id, h.squared_distance));
    }
    print!("{out}");
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    index: &Path,
    ckpt: &Path,
    hums: &Path,
    labels: &Path,
    out: &Path,
    exec: Execution,
) -> Result<()> {
    require_dir(hums, "hum")?;
    require_parent(out)?;
    let index = load_any_index(index)?;
    let embedder = load_embedder(cfg, ckpt)?;
    let pre = Preprocessor::from_config(cfg).map_err(usage)?;
    let text = fs::read_to_string(labels).with_context(|| labels.display().to_string()).map_err(usage)?;
    let entries = parse_labels(&text).map_err(usage)?;
    if entries.is_empty() {
        return Err(usage(anyhow!("{} has no labels", labels.display())));
    }
    let known: BTreeSet<&str> = index.ids().iter().map(String::as_str).collect();
    let unknown: BTreeSet<&str> =
        entries.iter().map(|(_, s)| s.as_str()).filter(|s| !known.contains(s)).collect();
    if !unknown.is_empty() {
        return Err(data(anyhow!(
            "labels reference song ids missing from the index: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    // A labeled hum may be present as the WAV itself or as its preprocessed mel.
    let available: BTreeMap<String, PathBuf> = walk(hums, "wav")
        .and_then(|w| Ok(w.into_iter().chain(walk(hums, "mel")?)))
        .map_err(usage)?
        .map(|rel| (file_name(&rel), hums.join(rel)))
        .collect();
    let mut paths = Vec::with_capacity(entries.len());
    let mut missing = Vec::new();
    for (file, _) in &entries {
        let mel_name = format!("{}.mel", stem(Path::new(file)));
        match available.get(file).or_else(|| available.get(&mel_name)) {
            Some(p) => paths.push(p.clone()),
            None => missing.push(file.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(data(anyhow!("labeled hums not found: {}", missing.join(", "))));
    }
    let mels = par::map(exec, &paths, |p| input_mel(cfg, &pre, p))
        .into_iter()
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(data)?;
    let rows = embed_all(&embedder, &mels, pre.floor(), exec).map_err(classify)?;
    let queries: Vec<(String, Vec<f32>)> = rows.into_iter().map(|e| (e.song_id, e.vector)).collect();
    let truths: Vec<String> = entries.into_iter().map(|(_, s)| s).collect();
    let (_, report) = match evaluate(&index, &queries, &truths, exec) {
        Err(PipelineError::Index(e)) => return Err(usage(e)),
        other => other.map_err(classify)?,
    };
    fs::create_dir_all(out).map_err(usage)?;
    fs::write(out.join("report.tsv"), report.to_tsv()).map_err(usage)?;
    fs::write(out.join("summary.json"), report.summary_json()).map_err(usage)?;
    println!("{}", report.mrr_at_10);
    Ok(())
}
