use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Centre frequency of the complex Morlet wavelet, in radians per unit scale.
pub const MORLET_W0: f64 = 6.0;

/// The wavelet is sampled on `|u| ≤ MORLET_SUPPORT`; beyond that the
/// Gaussian envelope is below 4e-6.
pub const MORLET_SUPPORT: f64 = 5.0;

/// ψ(u) = π^{-1/4} e^{iω0u} e^{-u²/2}.
pub fn morlet(u: f64) -> Complex64 {
    let envelope = PI.powf(-0.25) * (-0.5 * u * u).exp();
    Complex64::from_polar(envelope, MORLET_W0 * u)
}

/// Scale (seconds) whose Morlet centre frequency is `freq_hz`.
pub fn scale_for_frequency(freq_hz: f64) -> f64 {
    MORLET_W0 / (2.0 * PI * freq_hz)
}

pub fn frequency_for_scale(scale: f64) -> f64 {
    MORLET_W0 / (2.0 * PI * scale)
}

/// `n` scales whose centre frequencies are log-spaced from `f_high` down to
/// `f_low`, so row 0 is the finest scale.
pub fn log_scales(f_low: f64, f_high: f64, n: usize) -> Result<Vec<f64>> {
    if !(f_low > 0.0 && f_high >= f_low && n >= 1) {
        return Err(Error::Config(format!(
            "scale grid needs 0 < f_low ≤ f_high and n ≥ 1, got {f_low}, {f_high}, {n}"
        )));
    }
    if n == 1 {
        return Ok(vec![scale_for_frequency(f_high)]);
    }
    let ratio = (f_low / f_high).ln() / (n - 1) as f64;
    Ok((0..n)
        .map(|i| scale_for_frequency(f_high * (ratio * i as f64).exp()))
        .collect())
}

/// Precomputed kernel spectra for transforming many signals of one length.
pub struct CwtPlan {
    len: usize,
    fft_len: usize,
    scales: Vec<f64>,
    kernels: Vec<Vec<Complex64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl CwtPlan {
    pub fn new(len: usize, sample_rate: f64, scales: &[f64]) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyInput("cwt of an empty signal".into()));
        }
        if scales.is_empty() {
            return Err(Error::Domain("cwt needs at least one scale".into()));
        }
        if let Some(a) = scales.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::Domain(format!("scale must be positive, got {a}")));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::Domain(format!("sample rate must be > 0, got {sample_rate}")));
        }
        let dt = 1.0 / sample_rate;
        let fft_len = (2 * len - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);

        // out[j] = Σ_n x[n]·g[n−j] with g[k] = ψ*(kΔt/a)·Δt/√a, evaluated as
        // a circular convolution of x with h[m] = g[−m].
        let kernels = scales
            .iter()
            .map(|&a| {
                let reach = ((MORLET_SUPPORT * a / dt).floor() as usize).min(len - 1);
                let weight = dt / a.sqrt();
                let mut h = vec![Complex64::new(0.0, 0.0); fft_len];
                for k in -(reach as isize)..=(reach as isize) {
                    let g = morlet(k as f64 * dt / a).conj() * weight;
                    h[(-k).rem_euclid(fft_len as isize) as usize] = g;
                }
                forward.process(&mut h);
                let norm = 1.0 / fft_len as f64;
                h.iter_mut().for_each(|v| *v *= norm);
                h
            })
            .collect();
        Ok(Self {
            len,
            fft_len,
            scales: scales.to_vec(),
            kernels,
            forward,
            inverse,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Complex coefficients, row-major `[scales, len]`.
    pub fn coefficients(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        if x.len() != self.len {
            return Err(Error::shape("cwt", &[self.len], &[x.len()]));
        }
        let mut spectrum = vec![Complex64::new(0.0, 0.0); self.fft_len];
        for (s, &v) in spectrum.iter_mut().zip(x) {
            s.re = v;
        }
        self.forward.process(&mut spectrum);
        let mut out = Vec::with_capacity(self.scales.len() * self.len);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        for kernel in &self.kernels {
            for ((b, s), k) in buf.iter_mut().zip(&spectrum).zip(kernel) {
                *b = s * k;
            }
            self.inverse.process(&mut buf);
            out.extend_from_slice(&buf[..self.len]);
        }
        Ok(out)
    }
}
