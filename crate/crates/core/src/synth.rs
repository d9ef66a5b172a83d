//! Deterministic synthetic song/hum corpus.
//!
//! A song is a sequence of enveloped harmonic tones drawn from a note pool.
//! Each hum re-renders its song's notes with per-note pitch and duration
//! jitter plus white noise at a target SNR. Every song and hum draws from its
//! own seeded stream, so rendering order does not affect the output.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{encode_wav_pcm16, AudioClip};
use crate::par::{self, Execution};
use crate::rng;

const SONG_STREAM: u64 = 0x534f_4e47;
const HUM_STREAM: u64 = 0x4855_4d00;

/// Output peak of every rendered clip.
const RENDER_PEAK: f64 = 0.9;
const ATTACK_S: f64 = 0.01;
const RELEASE_S: f64 = 0.03;
const HARMONICS: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCorpusConfig {
    pub n_songs: usize,
    /// Fundamental frequencies in Hz.
    pub note_pool: Vec<f64>,
    pub notes_per_song: usize,
    /// Seconds per note.
    pub note_duration: f64,
    pub hums_per_song: usize,
    /// Half-width of the uniform per-note pitch jitter, in cents.
    pub pitch_jitter_cents: f64,
    /// Half-width of the uniform per-note duration scaling, as a fraction.
    pub tempo_jitter: f64,
    /// Additive white-noise SNR in dB; `None` disables noise.
    pub snr_db: Option<f64>,
    pub sample_rate: u32,
    /// Selects an independent family of hum renditions for the same songs
    /// (e.g. one for training, another for evaluation).
    pub hum_variant: u64,
    pub rng_seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            n_songs: 200,
            note_pool: chromatic(220.0, 25),
            notes_per_song: 8,
            note_duration: 0.3,
            hums_per_song: 1,
            pitch_jitter_cents: 20.0,
            tempo_jitter: 0.10,
            snr_db: Some(20.0),
            sample_rate: 16_000,
            hum_variant: 0,
            rng_seed: 2021,
        }
    }
}

/// `count` equal-tempered semitones starting at `base` Hz.
pub fn chromatic(base: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| base * 2f64.powf(i as f64 / 12.0))
        .collect()
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid synth config: {0}")]
pub struct SynthConfigError(pub String);

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<(), SynthConfigError> {
        let bad = |m: &str| Err(SynthConfigError(m.to_string()));
        if self.n_songs == 0 || self.notes_per_song == 0 || self.hums_per_song == 0 {
            return bad("counts must be >= 1");
        }
        if self.note_pool.is_empty() {
            return bad("note_pool is empty");
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be > 0");
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self
            .note_pool
            .iter()
            .any(|&f| !(f > 0.0 && f < nyquist && f.is_finite()))
        {
            return bad("note frequencies must lie in (0, sample_rate/2)");
        }
        if !(self.note_duration > 0.0 && self.note_duration.is_finite()) {
            return bad("note_duration must be > 0");
        }
        if !(self.pitch_jitter_cents >= 0.0 && self.pitch_jitter_cents.is_finite()) {
            return bad("pitch_jitter_cents must be >= 0");
        }
        if !(0.0..1.0).contains(&self.tempo_jitter) {
            return bad("tempo_jitter must be in [0, 1)");
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return bad("snr_db must be finite (use null to disable noise)");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hum {
    pub clip: AudioClip,
    pub song_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub songs: Vec<AudioClip>,
    pub hums: Vec<Hum>,
}

pub fn song_id(i: usize) -> String {
    format!("song_{i:04}")
}

pub fn hum_id(song: usize, hum: usize) -> String {
    format!("hum_{song:04}_{hum:02}")
}

#[derive(Clone, Copy, Debug)]
struct Note {
    freq: f64,
    duration: f64,
}

fn uniform_sym(rng: &mut rng::Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

fn render(notes: &[Note], sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut out = Vec::new();
    for note in notes {
        let n = (note.duration * sr).round().max(1.0) as usize;
        let attack = (ATTACK_S * sr).min(n as f64 / 2.0);
        let release = (RELEASE_S * sr).min(n as f64 / 2.0);
        let w = 2.0 * std::f64::consts::PI * note.freq / sr;
        for i in 0..n {
            let t = i as f64;
            let env = (t / attack).min(1.0).min((n as f64 - t) / release);
            let mut v = 0.0;
            for (h, amp) in HARMONICS.iter().enumerate() {
                let k = (h + 1) as f64;
                if note.freq * k < sr / 2.0 {
                    v += amp * (w * k * t).sin();
                }
            }
            out.push(env * v);
        }
    }
    out
}

fn finish(mut samples: Vec<f64>, sample_rate: u32, id: String) -> AudioClip {
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let g = RENDER_PEAK / peak;
        samples.iter_mut().for_each(|s| *s *= g);
    }
    let samples = samples.into_iter().map(|s| s as f32).collect();
    AudioClip::new(samples, sample_rate, id).expect("rendered clip is finite and nonempty")
}

fn song_notes(cfg: &SynthCorpusConfig, song: usize) -> Vec<Note> {
    let mut r = rng::stream(cfg.rng_seed, &[SONG_STREAM, song as u64]);
    (0..cfg.notes_per_song)
        .map(|_| Note {
            freq: cfg.note_pool[r.random_range(0..cfg.note_pool.len())],
            duration: cfg.note_duration,
        })
        .collect()
}

fn render_hum(cfg: &SynthCorpusConfig, song: usize, hum: usize, notes: &[Note]) -> AudioClip {
    let mut r = rng::stream(
        cfg.rng_seed,
        &[HUM_STREAM, cfg.hum_variant, song as u64, hum as u64],
    );
    let perturbed: Vec<Note> = notes
        .iter()
        .map(|n| {
            let cents = uniform_sym(&mut r, cfg.pitch_jitter_cents);
            let stretch = uniform_sym(&mut r, cfg.tempo_jitter);
            Note {
                freq: if cents == 0.0 { n.freq } else { n.freq * 2f64.powf(cents / 1200.0) },
                duration: if stretch == 0.0 { n.duration } else { n.duration * (1.0 + stretch) },
            }
        })
        .collect();
    let mut samples = render(&perturbed, cfg.sample_rate);
    if let Some(snr) = cfg.snr_db {
        let rms = (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt();
        let sigma = rms / 10f64.powf(snr / 20.0);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            samples.iter_mut().for_each(|s| *s += normal.sample(&mut r));
        }
    }
    finish(samples, cfg.sample_rate, hum_id(song, hum))
}

/// Songs plus `hums_per_song` hums per song, with the hum → song mapping.
pub fn synth_corpus(cfg: &SynthCorpusConfig) -> Result<SynthCorpus, SynthConfigError> {
    synth_corpus_with(cfg, Execution::default())
}

pub fn synth_corpus_with(
    cfg: &SynthCorpusConfig,
    exec: Execution,
) -> Result<SynthCorpus, SynthConfigError> {
    cfg.validate()?;
    let rendered = par::map_range(exec, cfg.n_songs, |i| {
        let notes = song_notes(cfg, i);
        let song = finish(render(&notes, cfg.sample_rate), cfg.sample_rate, song_id(i));
        let hums: Vec<Hum> = (0..cfg.hums_per_song)
            .map(|j| Hum {
                clip: render_hum(cfg, i, j, &notes),
                song_id: song_id(i),
            })
            .collect();
        (song, hums)
    });
    let mut songs = Vec::with_capacity(cfg.n_songs);
    let mut hums = Vec::with_capacity(cfg.n_songs * cfg.hums_per_song);
    for (s, h) in rendered {
        songs.push(s);
        hums.extend(h);
    }
    Ok(SynthCorpus { songs, hums })
}

/// Writes `songs/<id>.wav`, `hums/<id>.wav` (PCM16) and `labels.tsv`
/// (`hum_filename<TAB>song_id`, LF-terminated) under `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> std::io::Result<()> {
    let songs_dir = dir.join("songs");
    let hums_dir = dir.join("hums");
    fs::create_dir_all(&songs_dir)?;
    fs::create_dir_all(&hums_dir)?;
    for s in &corpus.songs {
        fs::write(songs_dir.join(format!("{}.wav", s.source_id())), encode_wav_pcm16(s))?;
    }
    let mut labels = Vec::new();
    for h in &corpus.hums {
        let name = format!("{}.wav", h.clip.source_id());
        fs::write(hums_dir.join(&name), encode_wav_pcm16(&h.clip))?;
        writeln!(labels, "{}\t{}", name, h.song_id)?;
    }
    fs::write(dir.join("labels.tsv"), labels)
}
