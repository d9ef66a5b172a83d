//! Audio ingestion: WAV decoding, peak normalization and resampling.

use std::io::Cursor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AudioError {
    #[error("malformed WAV: {0}")]
    MalformedWav(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("clip too short: {duration:.3} s < {min_duration:.3} s")]
    TooShort { duration: f64, min_duration: f64 },
    #[error("clip is silent; peak normalization undefined")]
    SilentClip,
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid ingest config: {0}")]
    InvalidConfig(String),
}

/// Mono PCM audio at a known sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    source_id: String,
}

impl AudioClip {
    pub fn new(
        samples: Vec<f32>,
        sample_rate: u32,
        source_id: impl Into<String>,
    ) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::InvalidClip("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(AudioError::InvalidClip("sample rate is zero".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidClip(format!("non-finite sample at {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub target_sample_rate: u32,
    /// Full-scale divisor applied to integer PCM samples.
    pub max_wav_value: f32,
    /// Seconds.
    pub min_duration: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            target_sample_rate: 16_000,
            max_wav_value: 32_768.0,
            min_duration: 1.0,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<(), AudioError> {
        if self.target_sample_rate == 0 {
            return Err(AudioError::InvalidConfig("target_sample_rate must be > 0".into()));
        }
        if !(self.max_wav_value > 0.0 && self.max_wav_value.is_finite()) {
            return Err(AudioError::InvalidConfig("max_wav_value must be > 0".into()));
        }
        if !(self.min_duration > 0.0 && self.min_duration.is_finite()) {
            return Err(AudioError::InvalidConfig("min_duration must be > 0".into()));
        }
        Ok(())
    }
}

fn hound_err(e: hound::Error) -> AudioError {
    match e {
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("unsupported WAV format".into()),
        other => AudioError::MalformedWav(other.to_string()),
    }
}

/// Decodes a RIFF/WAVE file (PCM16 or IEEE float32, mono or stereo) into a
/// mono clip. Stereo frames are averaged; integer samples are divided by
/// `cfg.max_wav_value`.
pub fn decode_wav(bytes: &[u8], cfg: &IngestConfig) -> Result<AudioClip, AudioError> {
    cfg.validate()?;
    let mut reader = hound::WavReader::new(Cursor::new(bytes)).map_err(hound_err)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{} channels",
            spec.channels
        )));
    }
    if spec.sample_rate == 0 {
        return Err(AudioError::MalformedWav("sample rate is zero".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            let scale = cfg.max_wav_value;
            reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()
                .map_err(hound_err)?
        }
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(hound_err)?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "{fmt:?} {bits}-bit"
            )))
        }
    };
    let channels = spec.channels as usize;
    if !interleaved.len().is_multiple_of(channels) {
        return Err(AudioError::MalformedWav("partial frame at end of data".into()));
    }
    let mono: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|f| ((f[0] as f64 + f[1] as f64) * 0.5) as f32)
            .collect()
    };
    let duration = mono.len() as f64 / spec.sample_rate as f64;
    if duration < cfg.min_duration {
        return Err(AudioError::TooShort {
            duration,
            min_duration: cfg.min_duration,
        });
    }
    if mono.iter().any(|s| !s.is_finite()) {
        return Err(AudioError::MalformedWav("non-finite float sample".into()));
    }
    AudioClip::new(mono, spec.sample_rate, "")
}

/// Encodes a clip as mono PCM16. Samples are scaled by 32768 and clamped to
/// the i16 range.
pub fn encode_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::with_capacity(44 + clip.len() * 2));
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).expect("in-memory WAV header");
        for &s in &clip.samples {
            let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(v).expect("in-memory WAV write");
        }
        w.finalize().expect("in-memory WAV finalize");
    }
    buf.into_inner()
}

/// Encodes a clip as mono IEEE float32.
pub fn encode_wav_f32(clip: &AudioClip) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut buf = Cursor::new(Vec::with_capacity(44 + clip.len() * 4));
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).expect("in-memory WAV header");
        for &s in &clip.samples {
            w.write_sample(s).expect("in-memory WAV write");
        }
        w.finalize().expect("in-memory WAV finalize");
    }
    buf.into_inner()
}

/// Divides every sample by the clip's largest absolute value.
pub fn normalize_peak(clip: &AudioClip) -> Result<AudioClip, AudioError> {
    let peak = clip.peak();
    if peak == 0.0 {
        return Err(AudioError::SilentClip);
    }
    let p = peak as f64;
    let samples = clip
        .samples
        .iter()
        .map(|&s| (s as f64 / p) as f32)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
    })
}

/// Linear-interpolation resampler. Not band-limited: content above the
/// lower Nyquist frequency aliases.
pub fn resample_linear(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidConfig("target rate must be > 0".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let n = clip.samples.len();
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len = ((n as f64 * target_rate as f64 / clip.sample_rate as f64).round() as usize).max(1);
    let src = &clip.samples;
    let samples = (0..out_len)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i0 = pos.floor() as usize;
            if i0 + 1 >= n {
                return src[n - 1];
            }
            let frac = pos - i0 as f64;
            let a = src[i0] as f64;
            let b = src[i0 + 1] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: target_rate,
        source_id: clip.source_id.clone(),
    })
}

/// Decode, resample to the target rate, then peak-normalize.
pub fn ingest_wav(bytes: &[u8], cfg: &IngestConfig, source_id: &str) -> Result<AudioClip, AudioError> {
    let clip = decode_wav(bytes, cfg)?.with_source_id(source_id);
    let clip = resample_linear(&clip, cfg.target_sample_rate)?;
    normalize_peak(&clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(samples: &[f32], rate: u32) -> AudioClip {
        AudioClip::new(samples.to_vec(), rate, "t").unwrap()
    }

    fn lenient() -> IngestConfig {
        IngestConfig {
            min_duration: 1e-6,
            ..IngestConfig::default()
        }
    }

    fn pcm16_bytes(channels: u16, rate: u32, data: &[i16]) -> Vec<u8> {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut buf = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
        for &s in data {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        buf.into_inner()
    }

    #[test]
    fn decode_pcm16_mono_divides_by_full_scale() {
        let bytes = pcm16_bytes(1, 16000, &[16384, -32768]);
        let c = decode_wav(&bytes, &lenient()).unwrap();
        assert_eq!(c.samples(), &[0.5, -1.0]);
        assert_eq!(c.sample_rate(), 16000);
    }

    #[test]
    fn decode_float_stereo_averages_channels() {
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut buf = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
        w.write_sample(0.2f32).unwrap();
        w.write_sample(0.4f32).unwrap();
        w.finalize().unwrap();
        let c = decode_wav(&buf.into_inner(), &lenient()).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c.samples()[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn decode_rejects_short_clip() {
        let bytes = pcm16_bytes(1, 16000, &vec![100; 1600]);
        let err = decode_wav(&bytes, &IngestConfig::default()).unwrap_err();
        assert!(matches!(err, AudioError::TooShort { .. }), "{err:?}");
    }

    #[test]
    fn decode_rejects_garbage_and_unsupported() {
        assert!(matches!(
            decode_wav(b"RIFFnonsense", &lenient()),
            Err(AudioError::MalformedWav(_))
        ));
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut buf = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
        w.write_sample(1i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            decode_wav(&buf.into_inner(), &lenient()),
            Err(AudioError::UnsupportedEncoding(_))
        ));
    }

    #[test]
    fn decode_truncated_file_is_malformed() {
        let bytes = pcm16_bytes(1, 16000, &[1, 2, 3, 4]);
        assert!(matches!(
            decode_wav(&bytes[..20], &lenient()),
            Err(AudioError::MalformedWav(_))
        ));
    }

    #[test]
    fn pcm16_roundtrip() {
        let c = clip(&[0.5, -1.0, 0.25, 0.0], 16000);
        let back = decode_wav(&encode_wav_pcm16(&c), &lenient()).unwrap();
        assert_eq!(back.samples(), c.samples());
        let back = decode_wav(&encode_wav_f32(&c), &lenient()).unwrap();
        assert_eq!(back.samples(), c.samples());
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_peak(&clip(&[2.0, -4.0, 1.0], 8000)).unwrap();
        assert_eq!(n.samples(), &[0.5, -1.0, 0.25]);
        let n = normalize_peak(&clip(&[0.5, -1.0], 8000)).unwrap();
        assert_eq!(n.samples(), &[0.5, -1.0]);
        assert_eq!(
            normalize_peak(&clip(&[0.0, 0.0], 8000)),
            Err(AudioError::SilentClip)
        );
    }

    #[test]
    fn resample_identity_and_constant() {
        let c = clip(&[0.1, -0.3, 0.7], 8000);
        assert_eq!(resample_linear(&c, 8000).unwrap(), c);
        let k = clip(&[0.25; 100], 8000);
        let up = resample_linear(&k, 16000).unwrap();
        assert_eq!(up.len(), 200);
        assert_eq!(up.sample_rate(), 16000);
        assert!(up.samples().iter().all(|&s| s == 0.25));
    }

    // Linear interpolation between samples spaced by phase step h has a
    // worst-case error of 1 - cos(h/2) on a unit sine (midway between two
    // samples straddling a peak). The closed-form sine is the oracle.
    fn max_sine_deviation(freq: f64) -> f64 {
        let (src_rate, dst_rate) = (8000.0, 16000.0);
        let n = 8000;
        let s: Vec<f32> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / src_rate).sin() as f32)
            .collect();
        let up = resample_linear(&clip(&s, 8000), 16000).unwrap();
        assert_eq!(up.len(), 2 * n);
        // skip the clamped tail sample
        (0..up.len() - 2)
            .map(|j| {
                let t = j as f64 / dst_rate;
                (up.samples()[j] as f64 - (2.0 * std::f64::consts::PI * freq * t).sin()).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn resample_sine_matches_analytic_within_interpolation_bound() {
        use std::f64::consts::PI;
        // 1 kHz at 8 kHz: 8 samples per cycle, bound = 1 - cos(pi/8) ~= 0.0761
        let bound_1k = 1.0 - (PI / 8.0).cos();
        let dev = max_sine_deviation(1000.0);
        assert!(dev <= bound_1k + 1e-6, "dev {dev} bound {bound_1k}");
        assert!(dev > 0.07, "bound should be nearly attained, got {dev}");
        // 100 Hz: 80 samples per cycle, bound ~= 7.7e-4 < 0.01
        let dev = max_sine_deviation(100.0);
        assert!(dev < 0.01, "dev {dev}");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-10.0f32..10.0, 1..64)) {
            prop_assume!(v.iter().any(|&x| x != 0.0));
            let once = normalize_peak(&clip(&v, 8000)).unwrap();
            let twice = normalize_peak(&once).unwrap();
            prop_assert_eq!(once.samples(), twice.samples());
            prop_assert_eq!(once.peak(), 1.0);
        }

        // Inputs have at most 11 significant bits and c at most 4, so every
        // c·x is exactly representable and the only rounding is normalize's.
        #[test]
        fn normalize_is_scale_invariant(
            v in prop::collection::vec(-1024i32..=1024, 1..64),
            mant in 1u32..16,
            exp in -20i32..20,
        ) {
            prop_assume!(v.iter().any(|&x| x != 0));
            let x: Vec<f32> = v.iter().map(|&i| i as f32 / 1024.0).collect();
            let c = mant as f32 * 2f32.powi(exp);
            let base = normalize_peak(&clip(&x, 8000)).unwrap();
            let scaled: Vec<f32> = x.iter().map(|&s| c * s).collect();
            let other = normalize_peak(&clip(&scaled, 8000)).unwrap();
            for (a, b) in base.samples().iter().zip(other.samples()) {
                let ulps = (a.to_bits() as i64 - b.to_bits() as i64).abs();
                prop_assert!(ulps <= 1 || (*a == 0.0 && *b == 0.0), "{a} vs {b} ({ulps} ulps)");
            }
        }
    }
}
