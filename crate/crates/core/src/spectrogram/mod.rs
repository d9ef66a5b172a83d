//! Log-mel spectrogram extraction.
//!
//! STFT with reflect center-padding and a periodic Hann window, magnitude
//! (not power) spectra, triangular HTK-mel filters and natural-log
//! compression with an energy floor.

pub mod array;

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlannerScalar};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::par::{self, Execution};

pub use array::{load_array, read_array, save_array, write_array, ArrayError, ARRAY_MAGIC};

#[derive(Debug, Error, PartialEq)]
pub enum SpectrogramError {
    #[error("invalid spectrogram config: {0}")]
    InvalidConfig(String),
    #[error("clip has {len} samples; reflect padding needs at least {needed}")]
    ClipTooShortForReflect { len: usize, needed: usize },
    #[error("mel filter {index} has no support at this FFT resolution")]
    DegenerateFilter { index: usize },
    #[error("clip sample rate {clip} Hz does not match extractor rate {expected} Hz")]
    SampleRateMismatch { clip: u32, expected: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramConfig {
    /// FFT size in samples.
    pub filter_length: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Defaults to half the sample rate.
    pub fmax: Option<f64>,
    /// Minimum linear mel energy before the log.
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            filter_length: 1024,
            hop_length: 256,
            win_length: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-5,
        }
    }
}

impl SpectrogramConfig {
    pub fn n_bins(&self) -> usize {
        self.filter_length / 2 + 1
    }

    pub fn fmax_for(&self, sample_rate: u32) -> f64 {
        self.fmax.unwrap_or(sample_rate as f64 / 2.0)
    }

    /// ln(log_floor): the value of a frame with no energy.
    pub fn floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    pub fn validate(&self, sample_rate: u32) -> Result<(), SpectrogramError> {
        let bad = |m: String| Err(SpectrogramError::InvalidConfig(m));
        if self.filter_length < 2 {
            return bad("filter_length must be >= 2".into());
        }
        if self.win_length == 0 || self.win_length > self.filter_length {
            return bad(format!(
                "win_length {} must be in 1..={}",
                self.win_length, self.filter_length
            ));
        }
        if self.hop_length == 0 {
            return bad("hop_length must be >= 1".into());
        }
        if self.n_mels == 0 {
            return bad("n_mels must be >= 1".into());
        }
        let fmax = self.fmax_for(sample_rate);
        if !(self.fmin >= 0.0 && self.fmin < fmax && fmax <= sample_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= fmin ({}) < fmax ({fmax}) <= sample_rate/2",
                self.fmin
            ));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad("log_floor must be > 0".into());
        }
        Ok(())
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters, `n_mels` rows by `filter_length/2 + 1` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Center frequency of each filter in Hz.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Index of the filter whose center is nearest `hz`.
    pub fn nearest_filter(&self, hz: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.centers.iter().enumerate() {
            if (c - hz).abs() < (self.centers[best] - hz).abs() {
                best = i;
            }
        }
        best
    }

    /// First and last FFT bin with a positive weight in row `i`.
    pub fn support(&self, i: usize) -> Option<(usize, usize)> {
        let row = self.weights.row(i);
        let first = row.iter().position(|&w| w > 0.0)?;
        let last = row.iter().rposition(|&w| w > 0.0)?;
        Some((first, last))
    }
}

pub fn build_mel_filterbank(
    cfg: &SpectrogramConfig,
    sample_rate: u32,
) -> Result<MelFilterbank, SpectrogramError> {
    cfg.validate(sample_rate)?;
    let n_bins = cfg.n_bins();
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax_for(sample_rate));
    let step = (mel_hi - mel_lo) / (cfg.n_mels + 1) as f64;
    let mut points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();
    // the mel round trip is inexact; keep the band edges exact
    points[0] = cfg.fmin;
    points[cfg.n_mels + 1] = cfg.fmax_for(sample_rate);
    let bin_hz = sample_rate as f64 / cfg.filter_length as f64;
    let mut weights = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            weights[(m, k)] = rise.min(fall).max(0.0);
        }
        if weights.row(m).iter().all(|&w| w <= 0.0) {
            return Err(SpectrogramError::DegenerateFilter { index: m });
        }
    }
    Ok(MelFilterbank {
        weights,
        centers: points[1..=cfg.n_mels].to_vec(),
    })
}

/// Periodic Hann window of `win_length`, zero-padded (centered) to
/// `filter_length`.
pub fn padded_hann(cfg: &SpectrogramConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.filter_length];
    let offset = (cfg.filter_length - cfg.win_length) / 2;
    let n = cfg.win_length as f64;
    for i in 0..cfg.win_length {
        w[offset + i] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos();
    }
    w
}

/// Number of STFT frames for a clip of `len` samples.
pub fn n_frames(len: usize, hop_length: usize) -> usize {
    len / hop_length + 1
}

/// Log-mel spectrogram matrix (frames × mel bins) with its source label.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Array2<f32>,
    source_id: String,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f32>, source_id: impl Into<String>) -> Self {
        Self {
            values,
            source_id: source_id.into(),
        }
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f32> {
        self.values
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }
}

/// Reusable extractor: owns the FFT plan, window and filterbank for one
/// (config, sample rate) pair. Immutable and shareable across threads.
#[derive(Clone)]
pub struct MelExtractor {
    cfg: SpectrogramConfig,
    sample_rate: u32,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor")
            .field("cfg", &self.cfg)
            .field("sample_rate", &self.sample_rate)
            .finish_non_exhaustive()
    }
}

impl MelExtractor {
    pub fn new(cfg: &SpectrogramConfig, sample_rate: u32) -> Result<Self, SpectrogramError> {
        let filterbank = build_mel_filterbank(cfg, sample_rate)?;
        // Scalar planner: the SIMD planners pick different kernels per CPU,
        // which would break cross-machine bit-exactness of .mel files.
        let fft = FftPlannerScalar::new().plan_fft_forward(cfg.filter_length);
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            window: padded_hann(cfg),
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// |DFT| of each windowed, center-padded frame: `n_frames × (filter_length/2 + 1)`.
    pub fn stft_magnitude(&self, samples: &[f32]) -> Result<Array2<f64>, SpectrogramError> {
        let n_fft = self.cfg.filter_length;
        let pad = n_fft / 2;
        let len = samples.len();
        if len < pad + 1 {
            return Err(SpectrogramError::ClipTooShortForReflect {
                len,
                needed: pad + 1,
            });
        }
        let mut padded = Vec::with_capacity(len + 2 * pad);
        padded.extend((0..pad).map(|i| samples[pad - i] as f64));
        padded.extend(samples.iter().map(|&s| s as f64));
        padded.extend((0..pad).map(|i| samples[len - 2 - i] as f64));

        let frames = n_frames(len, self.cfg.hop_length);
        let n_bins = self.cfg.n_bins();
        let mut out = Array2::<f64>::zeros((frames, n_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * self.cfg.hop_length;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, b) in buf[..n_bins].iter().enumerate() {
                out[(t, k)] = b.norm();
            }
        }
        Ok(out)
    }

    pub fn mel_spectrogram(&self, clip: &AudioClip) -> Result<MelSpectrogram, SpectrogramError> {
        if clip.sample_rate() != self.sample_rate {
            return Err(SpectrogramError::SampleRateMismatch {
                clip: clip.sample_rate(),
                expected: self.sample_rate,
            });
        }
        let mag = self.stft_magnitude(clip.samples())?;
        let energies = mag.dot(&self.filterbank.weights.t());
        let floor = self.cfg.log_floor;
        let values = energies.mapv(|e| e.max(floor).ln() as f32);
        Ok(MelSpectrogram::new(values, clip.source_id()))
    }

    pub fn mel_batch(
        &self,
        clips: &[AudioClip],
        exec: Execution,
    ) -> Vec<Result<MelSpectrogram, SpectrogramError>> {
        par::map(exec, clips, |c| self.mel_spectrogram(c))
    }
}

/// One-shot STFT magnitude at the given config.
pub fn stft_magnitude(
    clip: &AudioClip,
    cfg: &SpectrogramConfig,
) -> Result<Array2<f64>, SpectrogramError> {
    MelExtractor::new(cfg, clip.sample_rate())?.stft_magnitude(clip.samples())
}

/// One-shot log-mel spectrogram at the clip's sample rate.
pub fn mel_spectrogram(
    clip: &AudioClip,
    cfg: &SpectrogramConfig,
) -> Result<MelSpectrogram, SpectrogramError> {
    MelExtractor::new(cfg, clip.sample_rate())?.mel_spectrogram(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::normalize_peak;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const SR: u32 = 16000;

    fn tone(freq: f64, len: usize) -> AudioClip {
        let s = (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / SR as f64).sin() as f32)
            .collect();
        AudioClip::new(s, SR, "tone").unwrap()
    }

    #[test]
    fn zero_clip_gives_zero_magnitudes() {
        let clip = AudioClip::new(vec![0.0; 1024], SR, "z").unwrap();
        let m = stft_magnitude(&clip, &SpectrogramConfig::default()).unwrap();
        assert_eq!(m.dim(), (5, 513));
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_for_reflect() {
        let clip = AudioClip::new(vec![0.1; 512], SR, "s").unwrap();
        assert_eq!(
            stft_magnitude(&clip, &SpectrogramConfig::default()).unwrap_err(),
            SpectrogramError::ClipTooShortForReflect { len: 512, needed: 513 }
        );
        let clip = AudioClip::new(vec![0.1; 513], SR, "s").unwrap();
        assert_eq!(stft_magnitude(&clip, &SpectrogramConfig::default()).unwrap().nrows(), 3);
    }

    // Oracle: a Hann-windowed complex exponential at bin k has its DFT
    // energy at bins k-1, k, k+1 only (weights 1/4, 1/2, 1/4 of N/2), so
    // the interior-frame magnitude of a real sine at bin k peaks at k with
    // value N/4 and its neighbours hold N/8.
    #[test]
    fn bin_centered_sine_peaks_at_its_bin() {
        let cfg = SpectrogramConfig::default();
        for k in [10usize, 37, 100, 255] {
            let freq = k as f64 * SR as f64 / 1024.0;
            let mag = stft_magnitude(&tone(freq, 8192), &cfg).unwrap();
            for t in 2..mag.nrows() - 2 {
                let row = mag.row(t);
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                assert_eq!(arg, k, "frame {t}");
                assert!((row[k] - 256.0).abs() < 1e-6 * 256.0 + 1e-3, "{}", row[k]);
                assert!((row[k + 1] - 128.0).abs() < 1e-3);
                assert!(row[k + 3] < 1e-3);
            }
        }
    }

    #[test]
    fn mel_scale_formula() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn single_filter_spans_band_with_peak_at_mel_midpoint() {
        let cfg = SpectrogramConfig {
            n_mels: 1,
            ..SpectrogramConfig::default()
        };
        let fb = build_mel_filterbank(&cfg, SR).unwrap();
        let center = mel_to_hz(hz_to_mel(8000.0) / 2.0);
        assert!((fb.centers()[0] - center).abs() < 1e-9);
        let row = fb.weights().row(0);
        let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        // The triangle is asymmetric in Hz, so the peak bin is whichever of
        // the two bins bracketing the center sits higher on its slope.
        let bin_hz = SR as f64 / 1024.0;
        let below = (center / bin_hz).floor() as usize;
        assert!(arg == below || arg == below + 1, "{arg} vs {below}");
        assert!(row[arg] <= 1.0 && row[arg] > 0.99);
        assert_eq!(row[0], 0.0);
        assert_eq!(row[512], 0.0);
        assert!(row[1] > 0.0 && row[511] > 0.0);
    }

    #[test]
    fn default_filterbank_is_well_formed() {
        let fb = build_mel_filterbank(&SpectrogramConfig::default(), SR).unwrap();
        assert_eq!(fb.weights().dim(), (80, 513));
        assert!(fb.weights().iter().all(|&w| (0.0..=1.0).contains(&w)));
        let supports: Vec<_> = (0..80).map(|i| fb.support(i).unwrap()).collect();
        for w in supports.windows(2) {
            assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1, "{w:?}");
        }
        assert!(fb.centers().windows(2).all(|c| c[0] < c[1]));
    }

    #[test]
    fn too_many_mels_is_degenerate() {
        let cfg = SpectrogramConfig {
            n_mels: 400,
            ..SpectrogramConfig::default()
        };
        assert!(matches!(
            build_mel_filterbank(&cfg, SR),
            Err(SpectrogramError::DegenerateFilter { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let ok = SpectrogramConfig::default();
        assert!(ok.validate(SR).is_ok());
        assert!(SpectrogramConfig { win_length: 2048, ..ok.clone() }.validate(SR).is_err());
        assert!(SpectrogramConfig { hop_length: 0, ..ok.clone() }.validate(SR).is_err());
        assert!(SpectrogramConfig { fmax: Some(9000.0), ..ok.clone() }.validate(SR).is_err());
        assert!(SpectrogramConfig { fmin: 8000.0, ..ok.clone() }.validate(SR).is_err());
        assert!(SpectrogramConfig { log_floor: 0.0, ..ok }.validate(SR).is_err());
    }

    #[test]
    fn floor_frame_values() {
        let mut s = vec![0.0f32; 4096];
        s[4095] = 1.0;
        let clip = AudioClip::new(s, SR, "f").unwrap();
        let m = mel_spectrogram(&clip, &SpectrogramConfig::default()).unwrap();
        let floor = (1e-5f64).ln() as f32;
        assert!((floor - (-11.5129)).abs() < 1e-4);
        assert!(m.values().row(0).iter().all(|&v| v == floor));
        assert!(m.values().iter().all(|&v| v >= floor && v.is_finite()));
    }

    #[test]
    fn loudness_is_removed_by_upstream_normalization() {
        let x = tone(440.0, 16000);
        let cfg = SpectrogramConfig::default();
        let a = mel_spectrogram(&normalize_peak(&x).unwrap(), &cfg).unwrap();
        // exact scaling: bit-identical features
        let loud: Vec<f32> = x.samples().iter().map(|s| s * 4.0).collect();
        let loud = AudioClip::new(loud, SR, "tone").unwrap();
        let b = mel_spectrogram(&normalize_peak(&loud).unwrap(), &cfg).unwrap();
        assert_eq!(a, b);
        // inexact scaling: equal up to float rounding of the scaled input
        let loud: Vec<f32> = x.samples().iter().map(|s| s * 3.0).collect();
        let loud = AudioClip::new(loud, SR, "tone").unwrap();
        let b = mel_spectrogram(&normalize_peak(&loud).unwrap(), &cfg).unwrap();
        // compare energies: the log stretches rounding in near-empty bins
        let peak = a.values().iter().fold(f32::MIN, |m, &v| m.max(v)).exp() as f64;
        for (p, q) in a.values().iter().zip(b.values().iter()) {
            let (ep, eq) = ((*p as f64).exp(), (*q as f64).exp());
            assert!((ep - eq).abs() <= 1e-6 * peak, "{p} vs {q}");
        }
    }

    #[test]
    fn tone_lands_in_nearest_mel_filter() {
        let cfg = SpectrogramConfig::default();
        let ex = MelExtractor::new(&cfg, SR).unwrap();
        for freq in [440.0, 261.63, 1000.0, 3000.0] {
            let m = ex.mel_spectrogram(&tone(freq, 16000)).unwrap();
            let want = ex.filterbank().nearest_filter(freq);
            for t in 2..m.n_frames() - 2 {
                let row = m.values().row(t);
                let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                assert_eq!(arg, want, "freq {freq} frame {t}");
            }
        }
    }

    #[test]
    fn scaling_shifts_log_energies_by_ln_c() {
        let cfg = SpectrogramConfig::default();
        let x = tone(523.25, 8000);
        let c = 0.25f32;
        let y = AudioClip::new(x.samples().iter().map(|s| s * c).collect(), SR, "y").unwrap();
        let mx = stft_magnitude(&x, &cfg).unwrap();
        let my = stft_magnitude(&y, &cfg).unwrap();
        for (a, b) in mx.iter().zip(my.iter()) {
            assert!((b - a * c as f64).abs() <= 1e-9 * a.abs().max(1.0));
        }
        let lx = mel_spectrogram(&x, &cfg).unwrap();
        let ly = mel_spectrogram(&y, &cfg).unwrap();
        let floor = cfg.floor_value();
        for (a, b) in lx.values().iter().zip(ly.values().iter()) {
            if *b > floor + 1.0 {
                assert!((b - a - (c as f64).ln() as f32).abs() < 1e-4);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn frame_count_law(len in 513usize..20000, seed in any::<u64>()) {
            use rand::Rng;
            let mut r = crate::rng::stream(seed, &[]);
            let s: Vec<f32> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
            let clip = AudioClip::new(s, SR, "r").unwrap();
            let m = stft_magnitude(&clip, &SpectrogramConfig::default()).unwrap();
            prop_assert_eq!(m.nrows(), len / 256 + 1);
            prop_assert_eq!(m.ncols(), 513);
        }
    }
}
