//! Log-mel front end for WAV ingestion.
//!
//! The synthetic benchmark renders spectrograms directly; this module turns
//! real mono recordings into the same [`Spectrogram`] representation.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Added to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono audio samples.
#[derive(Clone, Debug)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Audio("samples must be finite".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// Log-energy time–frequency matrix `[mel_bins, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    values: Tensor,
    frame_hop: f64,
}

impl Spectrogram {
    pub fn new(values: Tensor, frame_hop: f64) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[1] == 0 {
            return Err(Error::InvalidShape {
                op: "spectrogram",
                msg: format!("expected [mel_bins, frames], got {:?}", values.shape()),
            });
        }
        Ok(Spectrogram { values, frame_hop })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mel_bins(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    /// Seconds between consecutive frames.
    pub fn frame_hop(&self) -> f64 {
        self.frame_hop
    }
}

/// Front-end parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrontEnd {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub mel_bins: usize,
}

impl Default for FrontEnd {
    fn default() -> Self {
        FrontEnd {
            sample_rate: 16_000,
            win: 1024,
            hop: 320,
            mel_bins: 64,
        }
    }
}

/// Number of full analysis windows that fit in `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if win == 0 || hop == 0 || len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// Periodic Hann window.
pub fn hann(win: usize) -> Vec<f64> {
    (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect()
}

/// One-sided power spectrum `[win/2 + 1, frames]` of Hann-windowed frames.
///
/// Interior bins are doubled and everything is divided by `win`, so the sum
/// over bins of one frame equals the energy of the windowed frame.
pub fn stft_power(clip: &AudioClip, win: usize, hop: usize) -> Result<Tensor> {
    if hop == 0 || win < 2 {
        return Err(Error::InvalidArgument(format!(
            "stft needs win >= 2 and hop > 0 (got win {win}, hop {hop})"
        )));
    }
    let len = clip.samples.len();
    if len < win {
        return Err(Error::Audio(format!(
            "clip of {len} samples is shorter than one {win}-sample window"
        )));
    }
    let frames = frame_count(len, win, hop);
    let bins = win / 2 + 1;
    let window = hann(win);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut out = vec![0.0; bins * frames];
    for t in 0..frames {
        let frame = &clip.samples[t * hop..t * hop + win];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, z) in buf.iter().take(bins).enumerate() {
            let edge = k == 0 || (win.is_multiple_of(2) && k == win / 2);
            let scale = if edge { 1.0 } else { 2.0 };
            out[k * frames + t] = scale * z.norm_sqr() / win as f64;
        }
    }
    Tensor::new(vec![bins, frames], out)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank `[mel_bins, bins]`, each row scaled to a
/// peak of exactly 1. Also returns the centre frequency of every filter.
pub fn mel_filterbank(sample_rate: u32, bins: usize, mel_bins: usize) -> Result<(Tensor, Vec<f64>)> {
    if mel_bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 mel bins, got {mel_bins}"
        )));
    }
    if mel_bins > bins {
        return Err(Error::InvalidArgument(format!(
            "{mel_bins} mel bins exceed {bins} spectral bins"
        )));
    }
    let nyquist = f64::from(sample_rate) / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let bin_hz = |k: usize| nyquist * k as f64 / (bins - 1) as f64;

    let mut weights = vec![0.0; mel_bins * bins];
    for m in 0..mel_bins {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * bins..(m + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = bin_hz(k);
            *w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            row.iter_mut().for_each(|w| *w /= peak);
        } else {
            // Filter narrower than the bin spacing: keep the nearest bin.
            let nearest = ((mid / nyquist) * (bins - 1) as f64).round() as usize;
            row[nearest.min(bins - 1)] = 1.0;
        }
    }
    let centres = edges[1..=mel_bins].to_vec();
    Ok((Tensor::new(vec![mel_bins, bins], weights)?, centres))
}

/// Applies the mel filterbank to a power spectrogram and takes
/// `ln(x + LOG_FLOOR)`.
pub fn mel_project(power: &Tensor, sample_rate: u32, mel_bins: usize) -> Result<Tensor> {
    if power.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op: "mel_project",
            msg: format!("expected [bins, frames], got {:?}", power.shape()),
        });
    }
    let (bins, frames) = (power.shape()[0], power.shape()[1]);
    let (fb, _) = mel_filterbank(sample_rate, bins, mel_bins)?;
    let mut out = vec![0.0; mel_bins * frames];
    for m in 0..mel_bins {
        let wrow = fb.row(m);
        let orow = &mut out[m * frames..(m + 1) * frames];
        for (k, &w) in wrow.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let prow = &power.data()[k * frames..(k + 1) * frames];
            orow.iter_mut().zip(prow).for_each(|(o, p)| *o += w * p);
        }
        orow.iter_mut().for_each(|o| *o = (*o + LOG_FLOOR).ln());
    }
    Tensor::new(vec![mel_bins, frames], out)
}

/// Full front end: STFT, mel projection, log.
pub fn log_mel(clip: &AudioClip, fe: &FrontEnd) -> Result<Spectrogram> {
    let power = stft_power(clip, fe.win, fe.hop)?;
    let values = mel_project(&power, clip.sample_rate, fe.mel_bins)?;
    Spectrogram::new(values, fe.hop as f64 / f64::from(clip.sample_rate))
}

/// Reads a PCM16 mono WAV file.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!(
            "{}: expected 16-bit PCM, found {:?} with {} bits per sample",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    AudioClip::new(samples, spec.sample_rate)
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        hound::Error::Unsupported => Error::Audio(format!(
            "{}: unsupported WAV encoding (only uncompressed PCM16 mono is accepted)",
            path.display()
        )),
        other => Error::Audio(format!("{}: {other}", path.display())),
    }
}
