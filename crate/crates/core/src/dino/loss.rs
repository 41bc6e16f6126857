//! Tempered softmax, centering, the cross-view distillation loss and the
//! collapse diagnostics built on its entropy/KL decomposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real};

/// `softmax(q / τ)`, stabilised by subtracting the maximum.
pub fn tempered_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax of zero logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&q| ((q - max) / tau).exp()).collect();
    let sum: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / sum).collect())
}

/// `h(p) = −Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `H(p_t, p_s) = −Σ p_t ln p_s`.
pub fn cross_entropy(p_t: &[f64], p_s: &[f64]) -> f64 {
    -p_t.iter()
        .zip(p_s)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &s)| t * s.ln())
        .sum::<f64>()
}

/// `D_KL(p_t ‖ p_s) = Σ p_t ln(p_t / p_s)`.
pub fn kl_divergence(p_t: &[f64], p_s: &[f64]) -> f64 {
    p_t.iter()
        .zip(p_s)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &s)| t * (t.ln() - s.ln()))
        .sum()
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Contract(format!("probability vector sums to {sum}")));
    }
    Ok(())
}

/// Running mean of teacher logits, subtracted before the teacher softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Center {
    pub values: Vec<f64>,
    pub momentum: f64,
}

impl Center {
    pub fn zeros(dim: usize, momentum: f64) -> Self {
        Self {
            values: vec![0.0; dim],
            momentum,
        }
    }

    /// Returns `q − c` for each row using the current `c`, then updates
    /// `c ← m_c·c + (1 − m_c)·mean(q)`.
    pub fn apply_and_update(&mut self, batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("centering of an empty batch".into()));
        }
        let centered = batch
            .iter()
            .map(|q| q.iter().zip(&self.values).map(|(a, c)| a - c).collect())
            .collect();
        self.update(batch);
        Ok(centered)
    }

    pub fn update(&mut self, batch: &[Vec<f64>]) {
        let n = batch.len() as f64;
        for (k, c) in self.values.iter_mut().enumerate() {
            let mean = batch.iter().map(|q| q[k]).sum::<f64>() / n;
            *c = self.momentum * *c + (1.0 - self.momentum) * mean;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Mean over the `2·(N+1)` teacher/student pairs of one sample, where
/// `student[0..2]` are the global views matching `teacher[0..2]`.
pub fn dino_loss(student: &[Vec<f64>], teacher: &[Vec<f64>]) -> Result<f64> {
    Ok(diagnostics(student, teacher)?.target_entropy)
}

/// Per-sample loss decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub target_entropy: f64,
    pub kl: f64,
    pub entropy: f64,
}

pub fn diagnostics(student: &[Vec<f64>], teacher: &[Vec<f64>]) -> Result<Diagnostics> {
    if teacher.len() != 2 || student.len() < 2 {
        return Err(Error::Contract(format!(
            "need 2 teacher views and ≥ 2 student views, got {} and {}",
            teacher.len(),
            student.len()
        )));
    }
    for p in teacher.iter().chain(student) {
        check_distribution(p)?;
    }
    let (mut ce, mut kl, mut pairs) = (0.0, 0.0, 0usize);
    for (t, p_t) in teacher.iter().enumerate() {
        for (s, p_s) in student.iter().enumerate() {
            if s == t {
                continue;
            }
            ce += cross_entropy(p_t, p_s);
            kl += kl_divergence(p_t, p_s);
            pairs += 1;
        }
    }
    let entropy = teacher.iter().map(|p| entropy(p)).sum::<f64>() / teacher.len() as f64;
    Ok(Diagnostics {
        target_entropy: ce / pairs as f64,
        kl: kl / pairs as f64,
        entropy,
    })
}

/// `θ_t ← m·θ_t + (1 − m)·θ_s`, parameter by parameter.
pub fn ema_update_teacher<T: Real>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Domain(format!("EMA momentum must be in [0, 1], got {m}")));
    }
    teacher.check_same_layout(student)?;
    if m == 1.0 {
        return Ok(());
    }
    if m == 0.0 {
        return teacher.assign(student);
    }
    let (mt, ms) = (T::lit(m), T::lit(1.0 - m));
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = mt * *a + ms * b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collapse {
    None,
    OverUniformity,
    OverAlignment,
}

impl std::fmt::Display for Collapse {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Collapse::None => "none",
            Collapse::OverUniformity => "over_uniformity",
            Collapse::OverAlignment => "over_alignment",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseThresholds {
    pub eps_kl: f64,
    pub window: usize,
    pub upper: f64,
    pub lower: f64,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        Self {
            eps_kl: 0.01,
            window: 5,
            upper: 0.9,
            lower: 0.1,
        }
    }
}

/// Verdict from per-epoch `(kl, entropy)` pairs for a head of width `k`.
///
/// A trailing window with low KL is a collapse; its kind is read from the
/// entropy band. Low-KL windows whose entropy lies between the bands are
/// assigned to the nearer end (above or below `½·ln K`).
pub fn collapse_classify(trace: &[(f64, f64)], k: usize, th: &CollapseThresholds) -> Result<Collapse> {
    let window = th.window.max(1);
    if trace.len() < window.max(5) {
        return Err(Error::Contract(format!(
            "collapse classification needs ≥ {} epochs, got {}",
            window.max(5),
            trace.len()
        )));
    }
    let tail = &trace[trace.len() - window..];
    let kl = tail.iter().map(|p| p.0).sum::<f64>() / window as f64;
    let h = tail.iter().map(|p| p.1).sum::<f64>() / window as f64;
    let ln_k = (k as f64).ln();
    Ok(if kl >= th.eps_kl {
        Collapse::None
    } else if h > th.upper * ln_k {
        Collapse::OverUniformity
    } else if h < th.lower * ln_k {
        Collapse::OverAlignment
    } else if h >= 0.5 * ln_k {
        Collapse::OverUniformity
    } else {
        Collapse::OverAlignment
    })
}
