//! Signal → time-frequency map: Morlet CWT scalogram, min-max
//! normalisation, a fixed five-anchor colormap and natural cubic spline
//! resizing to a square network input.

mod colormap;
mod cwt;
pub mod spline;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::VibrationSignal;
use crate::tensor::kernels::gemm;
use crate::tensor::Reader;

pub use colormap::{color, ANCHORS};
pub use cwt::{frequency_for_scale, log_scales, morlet, scale_for_frequency, CwtPlan, MORLET_SUPPORT, MORLET_W0};

pub const TFM_MAGIC: &[u8; 8] = b"TFMAP001";

/// Scalogram magnitudes, rows = scales, columns = time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeFrequencyRepresentation {
    pub magnitudes: Vec<f64>,
    pub scales: Vec<f64>,
    pub times: Vec<f64>,
}

impl TimeFrequencyRepresentation {
    pub fn rows(&self) -> usize {
        self.scales.len()
    }

    pub fn cols(&self) -> usize {
        self.times.len()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.magnitudes[row * self.cols() + col]
    }
}

/// Interleaved `h × w × c` image with f64 samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::shape("Image::new", &[h, w, c], &[data.len()]));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    /// Sub-rectangle `[top, top+height) × [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.h || left + width > self.w || height == 0 || width == 0 {
            return Err(Error::Domain(format!(
                "crop {height}×{width} at ({top}, {left}) outside {}×{}",
                self.h, self.w
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.c);
        for y in top..top + height {
            let start = (y * self.w + left) * self.c;
            data.extend_from_slice(&self.data[start..start + width * self.c]);
        }
        Ok(Image {
            h: height,
            w: width,
            c: self.c,
            data,
        })
    }
}

/// CWT magnitudes `|W(a, τ)|` with one column per input sample.
pub fn cwt(signal: &VibrationSignal, scales: &[f64]) -> Result<TimeFrequencyRepresentation> {
    let plan = CwtPlan::new(signal.len(), signal.sample_rate(), scales)?;
    cwt_with_plan(signal, &plan)
}

pub fn cwt_with_plan(signal: &VibrationSignal, plan: &CwtPlan) -> Result<TimeFrequencyRepresentation> {
    let coeffs = plan.coefficients(signal.samples())?;
    let dt = 1.0 / signal.sample_rate();
    Ok(TimeFrequencyRepresentation {
        magnitudes: coeffs.iter().map(|c| c.norm()).collect(),
        scales: plan.scales().to_vec(),
        times: (0..signal.len()).map(|j| j as f64 * dt).collect(),
    })
}

/// Min-max scaling to `[0, 1]`; a constant input maps to zeros.
pub fn normalize(tfr: &TimeFrequencyRepresentation) -> TimeFrequencyRepresentation {
    let (lo, hi) = tfr
        .magnitudes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let magnitudes = if range > 0.0 {
        tfr.magnitudes.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; tfr.magnitudes.len()]
    };
    TimeFrequencyRepresentation {
        magnitudes,
        scales: tfr.scales.clone(),
        times: tfr.times.clone(),
    }
}

/// Maps each normalised amplitude to RGB, giving a `rows × cols × 3` image.
pub fn colormap(tfr: &TimeFrequencyRepresentation) -> Result<Image> {
    let mut data = Vec::with_capacity(tfr.magnitudes.len() * 3);
    for &v in &tfr.magnitudes {
        data.extend_from_slice(&color(v)?);
    }
    Image::new(tfr.rows(), tfr.cols(), 3, data)
}

/// Separable natural cubic spline resize, clamped to `[0, 1]`.
pub fn resize_cubic(image: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h < 1 || target_w < 1 {
        return Err(Error::Domain(format!("resize target {target_h}×{target_w} must be ≥ 1")));
    }
    if image.h < 2 || image.w < 2 {
        return Err(Error::Domain(format!(
            "resize source {}×{} must be ≥ 2 in each axis",
            image.h, image.w
        )));
    }
    let wh = spline::resample_matrix(image.h, target_h)?;
    let ww = spline::resample_matrix(image.w, target_w)?;
    let (h, w, c) = (image.h, image.w, image.c);
    let mut plane = vec![0.0; h * w];
    let mut tmp = vec![0.0; target_h * w];
    let mut out_plane = vec![0.0; target_h * target_w];
    let mut out = vec![0.0; target_h * target_w * c];
    for ch in 0..c {
        for (p, v) in plane.iter_mut().zip(image.data.iter().skip(ch).step_by(c)) {
            *p = *v;
        }
        gemm(target_h, h, w, &wh, false, &plane, false, &mut tmp, false);
        gemm(target_h, w, target_w, &tmp, false, &ww, true, &mut out_plane, false);
        for (o, v) in out.iter_mut().skip(ch).step_by(c).zip(&out_plane) {
            *o = v.clamp(0.0, 1.0);
        }
    }
    Image::new(target_h, target_w, c, out)
}

/// Preprocessing settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TfmConfig {
    pub target_size: usize,
    pub n_scales: usize,
    /// Lowest centre frequency in Hz; defaults to `sample_rate / len`.
    pub min_freq: Option<f64>,
    /// Highest centre frequency in Hz; defaults to `sample_rate / 4`.
    pub max_freq: Option<f64>,
}

impl Default for TfmConfig {
    fn default() -> Self {
        Self {
            target_size: 32,
            n_scales: 64,
            min_freq: None,
            max_freq: None,
        }
    }
}

impl TfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size < 1 {
            return Err(Error::Config("tfm target_size must be ≥ 1".into()));
        }
        if self.n_scales < 2 {
            return Err(Error::Config("tfm n_scales must be ≥ 2".into()));
        }
        Ok(())
    }

    pub fn scales(&self, len: usize, sample_rate: f64) -> Result<Vec<f64>> {
        let lo = self.min_freq.unwrap_or(sample_rate / len as f64);
        let hi = self.max_freq.unwrap_or(sample_rate / 4.0);
        log_scales(lo, hi.max(lo), self.n_scales)
    }
}

/// Fixed-size RGB network input with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeFrequencyMap {
    h: usize,
    w: usize,
    c: usize,
    pixels: Vec<f32>,
    source_id: String,
}

impl TimeFrequencyMap {
    pub fn new(h: usize, w: usize, c: usize, pixels: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        if pixels.len() != h * w * c || h == 0 || w == 0 || c == 0 {
            return Err(Error::shape("TimeFrequencyMap::new", &[h, w, c], &[pixels.len()]));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel {v} outside [0, 1]")));
        }
        Ok(Self {
            h,
            w,
            c,
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn from_image(image: &Image, source_id: impl Into<String>) -> Result<Self> {
        Self::new(
            image.h,
            image.w,
            image.c,
            image.data.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
            source_id,
        )
    }

    pub fn to_image(&self) -> Image {
        Image {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.pixels.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.pixels.len());
        out.extend_from_slice(TFM_MAGIC);
        for d in [self.h, self.w, self.c] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        r.magic(TFM_MAGIC)?;
        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let pixels = r.f32s(h * w * c)?;
        r.finish()?;
        Self::new(h, w, c, pixels, path.display().to_string()).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Runs the full pipeline, caching the CWT plan across signals of equal
/// length and sample rate.
pub struct Preprocessor {
    config: TfmConfig,
    plan: Option<(usize, u64, CwtPlan)>,
}

impl Preprocessor {
    pub fn new(config: TfmConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, plan: None })
    }

    pub fn config(&self) -> &TfmConfig {
        &self.config
    }

    pub fn run(&mut self, signal: &VibrationSignal, source_id: &str) -> Result<TimeFrequencyMap> {
        if signal.len() < 2 {
            return Err(Error::Domain("preprocess needs at least 2 samples".into()));
        }
        let key = (signal.len(), signal.sample_rate().to_bits());
        let stale = !matches!(&self.plan, Some((n, fs, _)) if (*n, *fs) == key);
        if stale {
            let scales = self.config.scales(signal.len(), signal.sample_rate())?;
            self.plan = Some((key.0, key.1, CwtPlan::new(signal.len(), signal.sample_rate(), &scales)?));
        }
        let (_, _, plan) = self.plan.as_ref().expect("plan set above");
        let tfr = normalize(&cwt_with_plan(signal, plan)?);
        let image = colormap(&tfr)?;
        let size = self.config.target_size;
        TimeFrequencyMap::from_image(&resize_cubic(&image, size, size)?, source_id)
    }
}

/// `cwt → normalize → colormap → resize_cubic` for one signal.
pub fn preprocess(signal: &VibrationSignal, config: &TfmConfig) -> Result<TimeFrequencyMap> {
    Preprocessor::new(config.clone())?.run(signal, "")
}
