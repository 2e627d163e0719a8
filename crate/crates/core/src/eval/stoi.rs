//! Short-time objective intelligibility.
//!
//! Clean and degraded signals are resampled to 10 kHz, frames more than
//! 40 dB below the loudest clean frame are dropped from both, and the
//! remaining signal is analysed with a 256-sample Hann window (hop 128,
//! 512-point FFT) grouped into 15 third-octave bands from 150 Hz. Each
//! 30-frame (384 ms) segment of a band envelope yields one clipped
//! correlation; the score is their mean.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::Waveform;
use crate::error::{Error, Result};

const ANALYSIS_RATE: u32 = 10_000;
const FRAME: usize = 256;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const CLIP_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc low-pass for `up/down` resampling, 60 dB stopband
/// rejection and a transition a tenth of the cutoff wide. Unit DC gain after
/// upsampling by `up`.
fn resample_filter(up: usize, down: usize) -> Vec<f64> {
    let cutoff = 1.0 / (2 * up.max(down)) as f64;
    let rejection_db = 60.0;
    let half = ((rejection_db - 8.0) / (28.714 * cutoff / 10.0)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let m = (2 * half + 1) as f64;
    let i0b = bessel_i0(beta);
    let raw: Vec<f64> = (-half..=half)
        .enumerate()
        .map(|(n, t)| {
            let r = 2.0 * n as f64 / (m - 1.0) - 1.0;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            w * 2.0 * up as f64 * cutoff * sinc(2.0 * cutoff * t as f64)
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|h| h / sum * up as f64).collect()
}

/// Polyphase rational resampling by `up/down` with a centred FIR; output
/// length is `ceil(len * up / down)`.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    let g = gcd(u64::from(from), u64::from(to));
    let (up, down) = ((u64::from(to) / g) as usize, (u64::from(from) / g) as usize);
    if up == down {
        return x.to_vec();
    }
    let h = resample_filter(up, down);
    let half = (h.len() - 1) / 2;
    let n_out = (x.len() * up).div_ceil(down);
    (0..n_out)
        .map(|m| {
            // Tap index is m*down + half - k*up; only k on the grid contributes.
            let centre = m * down + half;
            let k_hi = (centre / up).min(x.len().saturating_sub(1));
            let k_lo = centre.saturating_sub(h.len() - 1).div_ceil(up);
            (k_lo..=k_hi)
                .filter(|&k| k < x.len())
                .map(|k| x[k] * h[centre - k * up])
                .sum()
        })
        .collect()
}

/// Symmetric Hann of length `n` without the zero endpoints.
fn hann_inner(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * (i + 1) as f64 / (n + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(hop)
}

/// Drops frames whose clean energy is more than 40 dB below the loudest and
/// overlap-adds the survivors of both signals.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = FRAME / 2;
    let w = hann_inner(FRAME);
    let starts: Vec<usize> = frame_starts(x.len(), hop).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum();
            20.0 * (e.sqrt() + EPS).log10()
        })
        .collect();
    let max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| max - DYN_RANGE_DB - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let len = (kept.len() - 1) * hop + FRAME;
    let mut xo = vec![0.0; len];
    let mut yo = vec![0.0; len];
    for (j, &s) in kept.iter().enumerate() {
        for i in 0..FRAME {
            xo[j * hop + i] += w[i] * x[s + i];
            yo[j * hop + i] += w[i] * y[s + i];
        }
    }
    (xo, yo)
}

/// Band index ranges `[lo, hi)` over FFT bins, snapped to the nearest bins.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins = NFFT / 2 + 1;
    let freq = |k: usize| k as f64 * f64::from(ANALYSIS_RATE) / NFFT as f64;
    let nearest = |target: f64| {
        (0..bins)
            .min_by(|&a, &b| {
                let da = (freq(a) - target).powi(2);
                let db = (freq(b) - target).powi(2);
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            })
            .unwrap()
    };
    (0..BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Third-octave band envelopes, `[band][frame]`.
fn band_envelopes(x: &[f64], fft: &Arc<dyn Fft<f64>>, bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let w = hann_inner(FRAME);
    let mut out = vec![Vec::new(); BANDS];
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for s in frame_starts(x.len(), FRAME / 2) {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for i in 0..FRAME {
            buf[i].re = w[i] * x[s + i];
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let p: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            out[b].push(p.sqrt());
        }
    }
    out
}

fn mean_centre_unit(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|a| *a -= m);
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt() + EPS;
    v.iter_mut().for_each(|a| *a /= n);
}

/// STOI between a clean reference and a degraded signal of equal rate.
/// Lengths may differ; the longer signal is truncated.
pub fn stoi(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    if clean.sample_rate() != degraded.sample_rate() {
        return Err(Error::data(format!(
            "STOI inputs at {} Hz and {} Hz",
            clean.sample_rate(),
            degraded.sample_rate()
        )));
    }
    let n = clean.len().min(degraded.len());
    let to_f64 = |w: &Waveform| w.samples()[..n].iter().map(|&s| f64::from(s)).collect::<Vec<_>>();
    stoi_samples(&to_f64(clean), &to_f64(degraded), clean.sample_rate())
}

/// STOI on raw sample slices of equal length.
pub fn stoi_samples(clean: &[f64], degraded: &[f64], rate: u32) -> Result<f64> {
    if clean.len() != degraded.len() {
        return Err(Error::data("STOI inputs differ in length"));
    }
    let x = resample(clean, rate, ANALYSIS_RATE);
    let y = resample(degraded, rate, ANALYSIS_RATE);
    let (x, y) = remove_silent_frames(&x, &y);
    let fft = FftPlanner::new().plan_fft_forward(NFFT);
    let bands = third_octave_bands();
    let xb = band_envelopes(&x, &fft, &bands);
    let yb = band_envelopes(&y, &fft, &bands);
    let frames = xb[0].len();
    if frames < SEGMENT {
        return Err(Error::data(format!(
            "signal too short for STOI: {frames} analysis frames after silence removal, need {SEGMENT}"
        )));
    }
    let clip = 1.0 + 10f64.powf(-CLIP_DB / 20.0);
    let mut total = 0.0;
    let segments = frames - SEGMENT + 1;
    for end in SEGMENT..=frames {
        for b in 0..BANDS {
            let xs = &xb[b][end - SEGMENT..end];
            let ys = &yb[b][end - SEGMENT..end];
            let nx = xs.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ny = ys.iter().map(|a| a * a).sum::<f64>().sqrt();
            let scale = nx / (ny + EPS);
            let mut yp: Vec<f64> = ys.iter().zip(xs).map(|(y, x)| (y * scale).min(x * clip)).collect();
            let mut xc = xs.to_vec();
            mean_centre_unit(&mut yp);
            mean_centre_unit(&mut xc);
            total += yp.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total / (segments * BANDS) as f64)
}
