//! Multi-crop augmentation: random resized crops, colour jitter, Gaussian
//! blur and solarisation in `[0, 1]` pixel space.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tfm::{resize_cubic, Image, TimeFrequencyMap};

pub const MIN_LOCAL_SCALE: f64 = 0.05;
const MAX_CROP_TRIES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Scale split `s`: locals cover `[0.05, s]`, globals `[s, 1]`.
    pub scale_split: f64,
    pub n_local: usize,
    pub blur_sigma: (f64, f64),
    pub jitter_prob: f64,
    pub jitter_range: (f64, f64),
    pub solarize_threshold: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_split: 0.4,
            n_local: 8,
            blur_sigma: (0.1, 2.0),
            jitter_prob: 0.8,
            jitter_range: (0.6, 1.4),
            solarize_threshold: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_split > MIN_LOCAL_SCALE && self.scale_split < 1.0) {
            return Err(Error::Config(format!(
                "scale split must be in (0.05, 1), got {}",
                self.scale_split
            )));
        }
        Ok(())
    }
}

/// Pixel rectangle taken from the source map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn area_fraction(&self, h: usize, w: usize) -> f64 {
        (self.height * self.width) as f64 / (h * w) as f64
    }
}

/// Two global views and `N` local views, all at the source resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSet {
    pub globals: [TimeFrequencyMap; 2],
    pub locals: Vec<TimeFrequencyMap>,
    pub global_boxes: [CropBox; 2],
    pub local_boxes: Vec<CropBox>,
}

impl CropSet {
    /// Globals first, then locals.
    pub fn views(&self) -> impl Iterator<Item = &TimeFrequencyMap> {
        self.globals.iter().chain(&self.locals)
    }
}

/// Crop with area fraction in `[lo, hi]` and aspect ratio in `[3/4, 4/3]`.
///
/// After the retries run out, falls back to the smallest square whose
/// area lies in range, and to a 2×2 square if none does.
pub fn sample_crop<R: Rng>(h: usize, w: usize, lo: f64, hi: f64, rng: &mut R) -> CropBox {
    let total = (h * w) as f64;
    let in_range = |ch: usize, cw: usize| {
        let f = (ch * cw) as f64 / total;
        ch >= 2 && cw >= 2 && ch <= h && cw <= w && f >= lo && f <= hi
    };
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..MAX_CROP_TRIES {
        let area = lo + (hi - lo) * rng.random::<f64>();
        let ratio = (log_lo + (log_hi - log_lo) * rng.random::<f64>()).exp();
        let cw = ((area * ratio).sqrt() * w as f64).round() as usize;
        let ch = ((area / ratio).sqrt() * h as f64).round() as usize;
        if in_range(ch, cw) {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let side = ((lo * total).sqrt().ceil() as usize).clamp(2, h.min(w));
    let side = if in_range(side, side) { side } else { 2 };
    CropBox {
        top: (h - side) / 2,
        left: (w - side) / 2,
        height: side,
        width: side,
    }
}

/// Separable Gaussian blur with edge clamping; kernel width is
/// `size/4` rounded up to odd.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = ((image.h.max(image.w) / 4) | 1) / 2;
    let kernel: Vec<f64> = {
        let raw: Vec<f64> = (-(radius as isize)..=radius as isize)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    };
    let (h, w, c) = (image.h, image.w, image.c);
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let off = k as isize - radius as isize;
                        let (yy, xx) = if along_rows {
                            (y, (x as isize + off).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + off).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += kv * src[(yy * w + xx) * c + ch];
                    }
                    out[(y * w + x) * c + ch] = acc;
                }
            }
        }
        out
    };
    let horizontal = pass(&image.data, true);
    Image {
        h,
        w,
        c,
        data: pass(&horizontal, false),
    }
}

/// Brightness, contrast and saturation scaling, each clamped to `[0, 1]`.
pub fn color_jitter(image: &mut Image, brightness: f64, contrast: f64, saturation: f64) {
    for v in image.data.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let mean = image.data.iter().sum::<f64>() / image.data.len() as f64;
    for v in image.data.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    let c = image.c;
    for px in image.data.chunks_mut(c) {
        let gray = px.iter().sum::<f64>() / c as f64;
        for v in px.iter_mut() {
            *v = ((*v - gray) * saturation + gray).clamp(0.0, 1.0);
        }
    }
}

pub fn solarize(image: &mut Image, threshold: f64) {
    for v in image.data.iter_mut() {
        if *v > threshold {
            *v = 1.0 - *v;
        }
    }
}

#[derive(Clone, Copy)]
struct ViewPolicy {
    blur_prob: f64,
    solarize_prob: f64,
}

fn make_view<R: Rng>(
    src: &Image,
    bbox: CropBox,
    policy: ViewPolicy,
    cfg: &AugmentConfig,
    rng: &mut R,
    source_id: &str,
) -> Result<TimeFrequencyMap> {
    let crop = src.crop(bbox.top, bbox.left, bbox.height, bbox.width)?;
    let mut img = resize_cubic(&crop, src.h, src.w)?;
    if rng.random::<f64>() < cfg.jitter_prob {
        let (lo, hi) = cfg.jitter_range;
        let mut factor = || lo + (hi - lo) * rng.random::<f64>();
        let (b, c, s) = (factor(), factor(), factor());
        color_jitter(&mut img, b, c, s);
    }
    if rng.random::<f64>() < policy.blur_prob {
        let (lo, hi) = cfg.blur_sigma;
        img = gaussian_blur(&img, lo + (hi - lo) * rng.random::<f64>());
    }
    if rng.random::<f64>() < policy.solarize_prob {
        solarize(&mut img, cfg.solarize_threshold);
    }
    TimeFrequencyMap::from_image(&img, source_id)
}

/// Draws a [`CropSet`] from `x`; deterministic for a given `rng` state.
pub fn augment<R: Rng>(x: &TimeFrequencyMap, cfg: &AugmentConfig, rng: &mut R) -> Result<CropSet> {
    cfg.validate()?;
    let src = x.to_image();
    let (h, w) = (src.h, src.w);
    let s = cfg.scale_split;
    let policies = [
        ViewPolicy {
            blur_prob: 1.0,
            solarize_prob: 0.0,
        },
        ViewPolicy {
            blur_prob: 0.1,
            solarize_prob: 0.2,
        },
    ];
    let mut global_boxes = [CropBox {
        top: 0,
        left: 0,
        height: h,
        width: w,
    }; 2];
    let mut globals = Vec::with_capacity(2);
    for (i, policy) in policies.into_iter().enumerate() {
        global_boxes[i] = sample_crop(h, w, s, 1.0, rng);
        globals.push(make_view(&src, global_boxes[i], policy, cfg, rng, x.source_id())?);
    }
    let local_policy = ViewPolicy {
        blur_prob: 0.5,
        solarize_prob: 0.0,
    };
    let mut locals = Vec::with_capacity(cfg.n_local);
    let mut local_boxes = Vec::with_capacity(cfg.n_local);
    for _ in 0..cfg.n_local {
        let b = sample_crop(h, w, MIN_LOCAL_SCALE, s, rng);
        locals.push(make_view(&src, b, local_policy, cfg, rng, x.source_id())?);
        local_boxes.push(b);
    }
    let [g0, g1]: [TimeFrequencyMap; 2] = globals.try_into().expect("two globals");
    Ok(CropSet {
        globals: [g0, g1],
        locals,
        global_boxes,
        local_boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn ramp() -> TimeFrequencyMap {
        let px = (0..32 * 32 * 3).map(|i| (i % 97) as f32 / 96.0).collect();
        TimeFrequencyMap::new(32, 32, 3, px, "ramp").unwrap()
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::new(8, 8, 3, vec![0.7; 192]).unwrap();
        let out = gaussian_blur(&img, 1.3);
        assert!(out.data.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn solarize_inverts_bright_pixels() {
        let mut img = Image::new(1, 2, 1, vec![0.2, 0.9]).unwrap();
        solarize(&mut img, 0.5);
        assert_eq!(img.data[0], 0.2);
        assert!((img.data[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn crop_set_has_the_configured_shape() {
        let cfg = AugmentConfig::default();
        let set = augment(&ramp(), &cfg, &mut rng::stream(1, Stream::Augment, 0)).unwrap();
        assert_eq!(set.locals.len(), 8);
        for v in set.views() {
            assert_eq!((v.height(), v.width(), v.channels()), (32, 32, 3));
            assert!(v.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = AugmentConfig::default();
        let a = augment(&ramp(), &cfg, &mut rng::stream(9, Stream::Augment, 3)).unwrap();
        let b = augment(&ramp(), &cfg, &mut rng::stream(9, Stream::Augment, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_split_is_rejected() {
        let cfg = AugmentConfig {
            scale_split: 0.05,
            ..AugmentConfig::default()
        };
        assert!(augment(&ramp(), &cfg, &mut rng::stream(1, Stream::Augment, 0)).is_err());
    }
}
