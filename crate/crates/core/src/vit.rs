//! Vision Transformer encoder over time-frequency maps.
//!
//! Patches are flattened in `(row, col, channel)` order and laid out
//! row-major over the patch grid. The encoder prepends a learnable class
//! token, adds position embeddings, runs pre-norm Transformer blocks and
//! returns the layer-normalised class-token state as the feature `y`.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Reader, Real, Tensor, Var};
use crate::tfm::TimeFrequencyMap;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;
pub const ATTENTION_MAGIC: &[u8; 8] = b"ATTNMAP1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub depth: usize,
}

impl ViTConfig {
    /// ViT-Tiny layout on 224×224 inputs.
    pub fn full() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            embed_dim: 192,
            n_heads: 3,
            head_dim: 64,
            mlp_dim: 4 * 192,
            depth: 12,
        }
    }

    /// Small layout for 32×32 inputs on a CPU.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 48,
            n_heads: 3,
            head_dim: 16,
            mlp_dim: 192,
            depth: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.head_dim == 0 || self.n_heads * self.head_dim != self.embed_dim {
            return fail(format!(
                "n_heads·head_dim = {}·{} must equal embed_dim {}",
                self.n_heads, self.head_dim, self.embed_dim
            ));
        }
        if self.channels == 0 || self.mlp_dim == 0 {
            return fail("channels and mlp_dim must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patches `N = HW/P²`.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Parameter handles of one Transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Encoder layout: parameter handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: ViTConfig,
    pub w_emd: ParamId,
    pub x_class: ParamId,
    pub e_pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

pub(crate) fn init_normal<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(truncated_normal(rng, INIT_STD)))
}

impl Encoder {
    /// Registers freshly initialised encoder parameters in `store`.
    pub fn register<T: Real, R: Rng>(config: &ViTConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hd = config.n_heads * config.head_dim;
        let w_emd = store.add("encoder.w_emd", init_normal(&[config.patch_dim(), d], rng));
        let x_class = store.add("encoder.x_class", init_normal(&[d], rng));
        let e_pos = store.add("encoder.e_pos", init_normal(&[config.seq_len(), d], rng));
        let blocks = (0..config.depth)
            .map(|i| {
                let name = |s: &str| format!("encoder.block{i}.{s}");
                BlockParams {
                    ln1_gain: store.add(name("ln1.gain"), Tensor::full(&[d], T::one())),
                    ln1_bias: store.add(name("ln1.bias"), Tensor::zeros(&[d])),
                    w_q: store.add(name("w_q"), init_normal(&[d, hd], rng)),
                    w_k: store.add(name("w_k"), init_normal(&[d, hd], rng)),
                    w_v: store.add(name("w_v"), init_normal(&[d, hd], rng)),
                    w_o: store.add(name("w_o"), init_normal(&[hd, d], rng)),
                    ln2_gain: store.add(name("ln2.gain"), Tensor::full(&[d], T::one())),
                    ln2_bias: store.add(name("ln2.bias"), Tensor::zeros(&[d])),
                    w1: store.add(name("mlp.w1"), init_normal(&[d, config.mlp_dim], rng)),
                    b1: store.add(name("mlp.b1"), Tensor::zeros(&[config.mlp_dim])),
                    w2: store.add(name("mlp.w2"), init_normal(&[config.mlp_dim, d], rng)),
                    b2: store.add(name("mlp.b2"), Tensor::zeros(&[d])),
                }
            })
            .collect();
        let ln_gain = store.add("encoder.ln.gain", Tensor::full(&[d], T::one()));
        let ln_bias = store.add("encoder.ln.bias", Tensor::zeros(&[d]));
        Ok(Self {
            config: config.clone(),
            w_emd,
            x_class,
            e_pos,
            blocks,
            ln_gain,
            ln_bias,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// `z₀ = [x_class; patches·W_emd] + E_pos`, shape `[n, N+1, d]`.
    pub fn patch_embed<'g, T: Real>(&self, p: &BoundParams<'g, T>, patches: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = patches.shape();
        let expected = [self.config.n_patches(), self.config.patch_dim()];
        if shape.len() != 3 || shape[1..] != expected {
            return Err(Error::shape("patch_embed", &shape, &expected));
        }
        let n = shape[0];
        let d = self.config.embed_dim;
        let tokens = patches.matmul(p.var(self.w_emd))?;
        let cls = p.var(self.x_class).reshape(&[1, d])?.expand(&[n])?;
        Var::concat(&[cls, tokens], 1)?.add(p.var(self.e_pos))
    }

    /// `MHA(LN(z)) + z`; also returns the attention weights `[n, h, S, S]`.
    pub fn msa<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        block: &BlockParams,
        z: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let shape = z.shape();
        let (n, s) = (shape[0], shape[1]);
        let (h, dk) = (self.config.n_heads, self.config.head_dim);
        let eps = T::lit(LN_EPS);
        let u = z.layer_norm(p.var(block.ln1_gain), p.var(block.ln1_bias), eps)?;
        let heads = |w: ParamId| -> Result<Var<'g, T>> {
            u.matmul(p.var(w))?.reshape(&[n, s, h, dk])?.permute(&[0, 2, 1, 3])
        };
        let (q, k, v) = (heads(block.w_q)?, heads(block.w_k)?, heads(block.w_v)?);
        let logits = q.matmul(k.transpose()?)?.scale(T::lit(1.0 / (dk as f64).sqrt()))?;
        let attn = logits.softmax(3)?;
        let merged = attn
            .matmul(v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, s, h * dk])?
            .matmul(p.var(block.w_o))?;
        Ok((merged.add(z)?, attn))
    }

    /// `GeLU(LN(z)·W₁ + b₁)·W₂ + b₂ + z`.
    pub fn mlp_block<'g, T: Real>(&self, p: &BoundParams<'g, T>, block: &BlockParams, z: Var<'g, T>) -> Result<Var<'g, T>> {
        let u = z.layer_norm(p.var(block.ln2_gain), p.var(block.ln2_bias), T::lit(LN_EPS))?;
        let hidden = u.matmul(p.var(block.w1))?.add(p.var(block.b1))?.gelu()?;
        hidden.matmul(p.var(block.w2))?.add(p.var(block.b2))?.add(z)
    }

    /// Features `[n, d]` and the last block's attention (if any).
    pub fn forward<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        patches: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Option<Var<'g, T>>)> {
        let mut z = self.patch_embed(p, patches)?;
        let mut last_attn = None;
        for block in &self.blocks {
            let (zm, attn) = self.msa(p, block, z)?;
            z = self.mlp_block(p, block, zm)?;
            last_attn = Some(attn);
        }
        let n = z.shape()[0];
        let cls = z.slice(1, 0, 1)?.reshape(&[n, self.config.embed_dim])?;
        let y = cls.layer_norm(p.var(self.ln_gain), p.var(self.ln_bias), T::lit(LN_EPS))?;
        Ok((y, last_attn))
    }

    /// `y = f_θ(x)` for each map, without recording gradients.
    pub fn encode<T: Real>(&self, params: &ParamStore<T>, maps: &[&TimeFrequencyMap]) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = params.bind(&g, false);
        let patches = g.constant(patchify(maps, &self.config)?);
        let (y, _) = self.forward(&p, patches)?;
        Ok(y.value().as_ref().clone())
    }

    /// Attention maps of the last block for one map.
    pub fn extract_attention<T: Real>(
        &self,
        params: &ParamStore<T>,
        map: &TimeFrequencyMap,
        keep_mass: f64,
    ) -> Result<AttentionMaps> {
        if !(keep_mass > 0.0 && keep_mass <= 1.0) {
            return Err(Error::Domain(format!("keep_mass must be in (0, 1], got {keep_mass}")));
        }
        if self.config.depth == 0 {
            return Err(Error::Config("attention maps need depth ≥ 1".into()));
        }
        let g = Graph::new();
        let p = params.bind(&g, false);
        let patches = g.constant(patchify(&[map], &self.config)?);
        let (_, attn) = self.forward(&p, patches)?;
        let attn = attn.expect("depth ≥ 1").value();
        let eam: Vec<f32> = attn.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        AttentionMaps::from_eam(self.config.n_heads, self.config.n_patches(), eam, keep_mass)
    }
}

/// Flattens maps into `[n, N, P²C]` patch rows.
pub fn patchify<T: Real>(maps: &[&TimeFrequencyMap], config: &ViTConfig) -> Result<Tensor<T>> {
    let size = config.image_size;
    let (pp, c) = (config.patch_size, config.channels);
    let grid = config.grid();
    let mut data = Vec::with_capacity(maps.len() * size * size * c);
    for map in maps {
        if map.height() != size || map.width() != size || map.channels() != c {
            return Err(Error::shape(
                "patchify",
                &[map.height(), map.width(), map.channels()],
                &[size, size, c],
            ));
        }
        let px = map.pixels();
        for gy in 0..grid {
            for gx in 0..grid {
                for y in gy * pp..(gy + 1) * pp {
                    let start = (y * size + gx * pp) * c;
                    data.extend(px[start..start + pp * c].iter().map(|&v| T::lit(v as f64)));
                }
            }
        }
    }
    Tensor::new(&[maps.len(), config.n_patches(), config.patch_dim()], data)
}

/// Class-token and sequence attention of the last block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub n_heads: usize,
    pub n_patches: usize,
    /// `h × N` class-token attention over patches, each row summing to 1.
    pub cam: Vec<f32>,
    /// Minimal greedy patch set holding at least `keep_mass` of the
    /// head-averaged cam.
    pub tam: Vec<bool>,
    /// `h × (N+1) × (N+1)` full attention matrices.
    pub eam: Vec<f32>,
}

impl AttentionMaps {
    pub fn from_eam(n_heads: usize, n_patches: usize, eam: Vec<f32>, keep_mass: f64) -> Result<Self> {
        let s = n_patches + 1;
        if eam.len() != n_heads * s * s {
            return Err(Error::shape("AttentionMaps", &[n_heads, s, s], &[eam.len()]));
        }
        let mut cam = Vec::with_capacity(n_heads * n_patches);
        for head in 0..n_heads {
            let row = &eam[head * s * s + 1..head * s * s + s];
            let mass: f64 = row.iter().map(|&v| v as f64).sum();
            if mass > 0.0 {
                cam.extend(row.iter().map(|&v| (v as f64 / mass) as f32));
            } else {
                cam.extend(std::iter::repeat_n(1.0 / n_patches as f32, n_patches));
            }
        }
        let mean = mean_cam(&cam, n_heads, n_patches);
        let tam = threshold_mask(&mean, keep_mass);
        Ok(Self {
            n_heads,
            n_patches,
            cam,
            tam,
            eam,
        })
    }

    /// Head-averaged class-token attention.
    pub fn mean_cam(&self) -> Vec<f64> {
        mean_cam(&self.cam, self.n_heads, self.n_patches)
    }

    /// `max / min` of the head-averaged cam.
    pub fn concentration(&self) -> f64 {
        let m = self.mean_cam();
        let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = m.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ATTENTION_MAGIC);
        out.extend_from_slice(&(self.n_heads as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_patches as u32).to_le_bytes());
        for v in &self.cam {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.tam.iter().map(|&b| b as u8));
        for v in &self.eam {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        r.magic(ATTENTION_MAGIC)?;
        let (h, n) = (r.u32()? as usize, r.u32()? as usize);
        let cam = r.f32s(h * n)?;
        let tam = r.take(n)?.iter().map(|&b| b != 0).collect();
        let eam = r.f32s(h * (n + 1) * (n + 1))?;
        r.finish()?;
        Ok(Self {
            n_heads: h,
            n_patches: n,
            cam,
            tam,
            eam,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn mean_cam(cam: &[f32], n_heads: usize, n_patches: usize) -> Vec<f64> {
    (0..n_patches)
        .map(|i| (0..n_heads).map(|h| cam[h * n_patches + i] as f64).sum::<f64>() / n_heads as f64)
        .collect()
}

/// Greedy descending selection until the kept mass reaches `keep_mass`.
/// Zero-weight patches are never selected.
pub fn threshold_mask(weights: &[f64], keep_mass: f64) -> Vec<bool> {
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut mask = vec![false; weights.len()];
    let mut kept = 0.0;
    for i in order {
        if kept >= keep_mass * total - 1e-9 || weights[i] <= 0.0 {
            break;
        }
        mask[i] = true;
        kept += weights[i];
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 6,
            n_heads: 2,
            head_dim: 3,
            mlp_dim: 8,
            depth: 2,
        }
    }

    fn random_map(size: usize, seed: u64) -> TimeFrequencyMap {
        let mut r = rng::stream(seed, Stream::Data, 0);
        let px = (0..size * size * 3).map(|_| r.random::<f32>()).collect();
        TimeFrequencyMap::new(size, size, 3, px, "r").unwrap()
    }

    #[test]
    fn desk_preset_has_seventeen_tokens() {
        let c = ViTConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.n_patches(), 16);
        assert_eq!(c.seq_len(), 17);
        ViTConfig::full().validate().unwrap();
    }

    #[test]
    fn head_product_must_match_width() {
        let c = ViTConfig { head_dim: 5, ..tiny() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ViTConfig { image_size: 10, ..tiny() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_image_embeds_to_class_token_and_zeros() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::register(&cfg, &mut store, &mut rng::stream(1, Stream::Init, 0)).unwrap();
        *store.get_mut(enc.e_pos) = Tensor::zeros(&[cfg.seq_len(), cfg.embed_dim]);
        let map = TimeFrequencyMap::new(8, 8, 3, vec![0.0; 192], "z").unwrap();
        let g = Graph::new();
        let p = store.bind(&g, false);
        let z = enc.patch_embed(&p, g.constant(patchify(&[&map], &cfg).unwrap())).unwrap().value();
        assert_eq!(z.shape(), [1, 5, 6]);
        assert_eq!(&z.data()[..6], store.get(enc.x_class).data());
        assert!(z.data()[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_mlp_is_pure_residual() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::register(&cfg, &mut store, &mut rng::stream(1, Stream::Init, 0)).unwrap();
        let b = enc.blocks[0].clone();
        for id in [b.w1, b.b1, b.w2, b.b2] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::from_fn(&[1, 3, 6], |i| i as f64 * 0.1 - 0.5));
        let y = enc.mlp_block(&p, &b, x).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn depth_zero_returns_normalised_class_token() {
        let cfg = ViTConfig { depth: 0, ..tiny() };
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::register(&cfg, &mut store, &mut rng::stream(2, Stream::Init, 0)).unwrap();
        let y = enc.encode(&store, &[&random_map(8, 3)]).unwrap();
        let row: Vec<f64> = store
            .get(enc.x_class)
            .data()
            .iter()
            .zip(store.get(enc.e_pos).row(0))
            .map(|(a, b)| a + b)
            .collect();
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for (got, v) in y.data().iter().zip(&row) {
            assert!((got - (v - mean) / (var + LN_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = tiny();
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::register(&cfg, &mut store, &mut rng::stream(5, Stream::Init, 0)).unwrap();
        let maps = enc.extract_attention(&store, &random_map(8, 1), 0.9).unwrap();
        for row in maps.eam.chunks(cfg.seq_len()) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for head in maps.cam.chunks(cfg.n_patches()) {
            assert!((head.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let all = enc.extract_attention(&store, &random_map(8, 1), 1.0).unwrap();
        assert!(all.tam.iter().all(|&b| b));
        let back = AttentionMaps::decode(&maps.encode(), Path::new("m")).unwrap();
        assert_eq!(back, maps);
    }

    #[test]
    fn threshold_mask_is_greedy() {
        let w = [0.1, 0.5, 0.0, 0.4];
        assert_eq!(threshold_mask(&w, 0.5), vec![false, true, false, false]);
        assert_eq!(threshold_mask(&w, 0.9), vec![false, true, false, true]);
        assert_eq!(threshold_mask(&w, 1.0), vec![true, true, false, true]);
    }
}
