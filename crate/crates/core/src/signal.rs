//! Vibration signals: synthetic bearing-fault generator, raw file ingestion
//! and fixed-length segmentation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const SIGNAL_MAGIC: &[u8; 8] = b"VIBSIG01";

/// 1-D acceleration time series.
#[derive(Clone, Debug, PartialEq)]
pub struct VibrationSignal {
    samples: Vec<f64>,
    sample_rate: f64,
    label: Option<u16>,
}

impl VibrationSignal {
    pub fn new(samples: Vec<f64>, sample_rate: f64, label: Option<u16>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("signal has no samples".into()));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::Domain(format!("sample rate must be > 0, got {sample_rate}")));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
            label,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn label(&self) -> Option<u16> {
        self.label
    }

    pub fn with_label(mut self, label: Option<u16>) -> Self {
        self.label = label;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Fault conditions of the synthetic generator.
///
/// The first four are the default class set. The remaining six repeat the
/// three fault locations at lower shaft speeds (heavier load), which shifts
/// their characteristic impulse frequencies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultClass {
    Normal,
    InnerRace,
    OuterRace,
    Ball,
    InnerRaceLoad1,
    OuterRaceLoad1,
    BallLoad1,
    InnerRaceLoad2,
    OuterRaceLoad2,
    BallLoad2,
}

struct ClassProfile {
    name: &'static str,
    /// defect frequency as a multiple of the shaft frequency, 0 = no impulses
    order: f64,
    shaft_rpm: f64,
    resonance_hz: f64,
    /// damping ratio ζ of the ringing; decay rate is `2π·ζ·f_r`
    damping: f64,
    /// depth of the impulse amplitude modulation
    modulation: f64,
}

// 6205 drive-end bearing: BPFI 5.4152, BPFO 3.5848, 2×BSF 4.7135 shaft orders.
const PROFILES: [ClassProfile; 10] = [
    ClassProfile { name: "normal", order: 0.0, shaft_rpm: 1797.0, resonance_hz: 0.0, damping: 0.0, modulation: 0.0 },
    ClassProfile { name: "inner_race", order: 5.4152, shaft_rpm: 1797.0, resonance_hz: 2600.0, damping: 0.25, modulation: 0.9 },
    ClassProfile { name: "outer_race", order: 3.5848, shaft_rpm: 1797.0, resonance_hz: 1000.0, damping: 0.01, modulation: 0.0 },
    ClassProfile { name: "ball", order: 4.7135, shaft_rpm: 1797.0, resonance_hz: 380.0, damping: 0.08, modulation: 0.9 },
    ClassProfile { name: "inner_race_load1", order: 5.4152, shaft_rpm: 1772.0, resonance_hz: 2600.0, damping: 0.25, modulation: 0.9 },
    ClassProfile { name: "outer_race_load1", order: 3.5848, shaft_rpm: 1772.0, resonance_hz: 1000.0, damping: 0.01, modulation: 0.0 },
    ClassProfile { name: "ball_load1", order: 4.7135, shaft_rpm: 1772.0, resonance_hz: 380.0, damping: 0.08, modulation: 0.9 },
    ClassProfile { name: "inner_race_load2", order: 5.4152, shaft_rpm: 1750.0, resonance_hz: 2600.0, damping: 0.25, modulation: 0.9 },
    ClassProfile { name: "outer_race_load2", order: 3.5848, shaft_rpm: 1750.0, resonance_hz: 1000.0, damping: 0.01, modulation: 0.0 },
    ClassProfile { name: "ball_load2", order: 4.7135, shaft_rpm: 1750.0, resonance_hz: 380.0, damping: 0.08, modulation: 0.9 },
];

/// Cage (fundamental train) frequency as a shaft order; modulates ball faults.
const CAGE_ORDER: f64 = 0.3983;
const ROTATION_AMPLITUDE: f64 = 0.1;
const IMPULSE_AMPLITUDE: f64 = 2.5;
/// Per-signal resonance spread: the class resonance is scaled by a
/// log-uniform factor in `[1/RESONANCE_SPREAD, RESONANCE_SPREAD]`.
pub const RESONANCE_SPREAD: f64 = 1.15;
/// Decay rate at which an impulse rings with amplitude `IMPULSE_AMPLITUDE`;
/// other rates are scaled to the same ringing energy.
const REFERENCE_DECAY_PER_S: f64 = 500.0;

impl FaultClass {
    pub const ALL: [FaultClass; 10] = [
        FaultClass::Normal,
        FaultClass::InnerRace,
        FaultClass::OuterRace,
        FaultClass::Ball,
        FaultClass::InnerRaceLoad1,
        FaultClass::OuterRaceLoad1,
        FaultClass::BallLoad1,
        FaultClass::InnerRaceLoad2,
        FaultClass::OuterRaceLoad2,
        FaultClass::BallLoad2,
    ];

    /// The first `n` classes, `1 ≤ n ≤ 10`.
    pub fn first(n: usize) -> Result<&'static [FaultClass]> {
        if n == 0 || n > Self::ALL.len() {
            return Err(Error::Config(format!("class count must be in 1..=10, got {n}")));
        }
        Ok(&Self::ALL[..n])
    }

    pub fn id(self) -> u16 {
        self as u16
    }

    pub fn from_id(id: u16) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown fault class id {id}")))
    }

    pub fn name(self) -> &'static str {
        self.profile().name
    }

    fn profile(self) -> &'static ClassProfile {
        &PROFILES[self as usize]
    }

    pub fn shaft_hz(self) -> f64 {
        self.profile().shaft_rpm / 60.0
    }

    /// Impulse repetition frequency in Hz, `None` for the healthy class.
    pub fn impulse_hz(self) -> Option<f64> {
        let p = self.profile();
        (p.order > 0.0).then(|| p.order * p.shaft_rpm / 60.0)
    }

    /// Centre of the structural resonance rung by the impulses, 0 for the
    /// healthy class.
    pub fn resonance_hz(self) -> f64 {
        self.profile().resonance_hz
    }

    /// Damping ratio of the ringing that follows each impulse.
    pub fn damping(self) -> f64 {
        self.profile().damping
    }
}

impl fmt::Display for FaultClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fault class {s:?}")))
    }
}

/// Synthetic vibration of one bearing condition.
///
/// Sum of a shaft-rate sinusoid, a train of impulses at the class's defect
/// frequency each ringing an exponentially decaying resonance, and i.i.d.
/// Gaussian noise of standard deviation `noise_std`. Phases, resonance and per-impulse amplitudes are
/// drawn from `seed`, so the output is a pure function of the arguments.
pub fn synth_fault_signal(
    class: FaultClass,
    duration_samples: usize,
    sample_rate: f64,
    noise_std: f64,
    seed: u64,
) -> Result<VibrationSignal> {
    if duration_samples == 0 {
        return Err(Error::Config("duration_samples must be ≥ 1".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config(format!("noise_std must be ≥ 0, got {noise_std}")));
    }
    if !(sample_rate > 0.0 && sample_rate.is_finite()) {
        return Err(Error::Config(format!("sample rate must be > 0, got {sample_rate}")));
    }
    let mut rng = rng::stream(seed, Stream::Data, class.id() as u64);
    let dt = 1.0 / sample_rate;
    let shaft = class.shaft_hz();
    let rot_phase = rng.random::<f64>() * std::f64::consts::TAU;
    let mut x: Vec<f64> = (0..duration_samples)
        .map(|i| ROTATION_AMPLITUDE * (std::f64::consts::TAU * shaft * i as f64 * dt + rot_phase).sin())
        .collect();

    if let Some(f_imp) = class.impulse_hz() {
        let spread = RESONANCE_SPREAD.powf(2.0 * rng.random::<f64>() - 1.0);
        let resonance = (class.resonance_hz() * spread).min(0.4 * sample_rate);
        let decay = std::f64::consts::TAU * class.profile().damping * resonance;
        let depth = class.profile().modulation;
        let ring_len = ((14.0 / decay) * sample_rate).ceil() as usize + 1;
        let severity = IMPULSE_AMPLITUDE * (decay / REFERENCE_DECAY_PER_S).sqrt() * (0.8 + 0.4 * rng.random::<f64>());
        let period = 1.0 / f_imp;
        let mut t_k = rng.random::<f64>() * period;
        let duration = duration_samples as f64 * dt;
        while t_k < duration {
            let modulation = match class {
                FaultClass::InnerRace | FaultClass::InnerRaceLoad1 | FaultClass::InnerRaceLoad2 => {
                    1.0 + depth * (std::f64::consts::TAU * shaft * t_k).cos()
                }
                FaultClass::Ball | FaultClass::BallLoad1 | FaultClass::BallLoad2 => {
                    1.0 + depth * (std::f64::consts::TAU * CAGE_ORDER * shaft * t_k).cos()
                }
                _ => 1.0,
            };
            let amp = severity * modulation * (0.85 + 0.3 * rng.random::<f64>());
            let start = (t_k * sample_rate).ceil() as usize;
            for (i, xi) in x.iter_mut().enumerate().skip(start).take(ring_len) {
                let tau = i as f64 * dt - t_k;
                *xi += amp
                    * (-decay * tau).exp()
                    * (std::f64::consts::TAU * resonance * tau).sin();
            }
            t_k += period;
        }
    }

    if noise_std > 0.0 {
        for xi in x.iter_mut() {
            *xi += noise_std * rng::standard_normal(&mut rng);
        }
    }
    VibrationSignal::new(x, sample_rate, Some(class.id()))
}

/// Reads a raw signal file, text or `VIBSIG01` binary (detected by magic).
pub fn load_signal(path: &Path, sample_rate: f64) -> Result<VibrationSignal> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let samples = parse_signal_bytes(&bytes, &path.display().to_string())?;
    VibrationSignal::new(samples, sample_rate, None)
}

pub fn parse_signal_bytes(bytes: &[u8], source_name: &str) -> Result<Vec<f64>> {
    if bytes.starts_with(SIGNAL_MAGIC) {
        return parse_binary(bytes, source_name);
    }
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        source_name: source_name.to_string(),
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        offset: e.valid_up_to(),
        message: "invalid UTF-8".into(),
    })?;
    let mut samples = Vec::new();
    let mut offset = 0;
    for (lineno, raw) in text.split_inclusive('\n').enumerate() {
        let line = raw.trim();
        if !line.is_empty() && !line.starts_with('#') {
            let value: f64 = line.parse().map_err(|_| Error::Parse {
                source_name: source_name.to_string(),
                line: lineno + 1,
                offset,
                message: format!("not a number: {line:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    source_name: source_name.to_string(),
                    line: lineno + 1,
                    offset,
                    message: format!("non-finite sample {line:?}"),
                });
            }
            samples.push(value);
        }
        offset += raw.len();
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput(format!("{source_name} contains no samples")));
    }
    Ok(samples)
}

fn parse_binary(bytes: &[u8], source_name: &str) -> Result<Vec<f64>> {
    let parse_err = |offset: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line: 0,
        offset,
        message,
    };
    if bytes.len() < 12 {
        return Err(parse_err(bytes.len(), "truncated header".into()));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if count == 0 {
        return Err(Error::EmptyInput(format!("{source_name} contains no samples")));
    }
    let body = &bytes[12..];
    if body.len() != count * 4 {
        return Err(parse_err(
            12 + body.len().min(count * 4),
            format!("expected {count} f32 samples, found {} bytes", body.len()),
        ));
    }
    body.chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(12 + 4 * i, "non-finite sample".into()))
            }
        })
        .collect()
}

/// Text format: one sample per line in shortest round-trip decimal form.
pub fn write_signal_text(path: &Path, signal: &VibrationSignal) -> Result<()> {
    let mut out = String::with_capacity(signal.len() * 20);
    for x in signal.samples() {
        out.push_str(&format!("{x:?}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary format; samples are narrowed to f32.
pub fn write_signal_binary(path: &Path, signal: &VibrationSignal) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 4 * signal.len());
    out.extend_from_slice(SIGNAL_MAGIC);
    out.extend_from_slice(&(signal.len() as u32).to_le_bytes());
    for &x in signal.samples() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Window length and hop for cutting long recordings into samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpec {
    window_length: usize,
    stride: usize,
}

impl SegmentSpec {
    pub fn new(window_length: usize, stride: usize) -> Result<Self> {
        if window_length < 2 || stride < 1 {
            return Err(Error::Config(format!(
                "segment spec needs window ≥ 2 and stride ≥ 1, got {window_length}/{stride}"
            )));
        }
        Ok(Self {
            window_length,
            stride,
        })
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

impl Default for SegmentSpec {
    fn default() -> Self {
        Self {
            window_length: 1024,
            stride: 1024,
        }
    }
}

/// Cuts `signal` into `⌊(len − window)/stride⌋ + 1` windows; the trailing
/// partial window is dropped.
pub fn segment(signal: &VibrationSignal, spec: SegmentSpec) -> Result<Vec<VibrationSignal>> {
    let len = signal.len();
    if len < spec.window_length {
        return Err(Error::EmptyInput(format!(
            "signal of {len} samples is shorter than the {}-sample window",
            spec.window_length
        )));
    }
    let count = (len - spec.window_length) / spec.stride + 1;
    Ok((0..count)
        .map(|i| {
            let start = i * spec.stride;
            VibrationSignal {
                samples: signal.samples[start..start + spec.window_length].to_vec(),
                sample_rate: signal.sample_rate,
                label: signal.label,
            }
        })
        .collect())
}
