//! Projector head: GeLU MLP into a bottleneck, L2 normalisation, then a
//! bias-free linear layer whose weight rows are renormalised to unit length
//! on every forward pass. Logits are therefore cosine similarities in
//! `[-1, 1]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, ParamId, ParamStore, Real, Tensor, Var};
use crate::vit::init_normal;

pub const L2_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectorConfig {
    /// Output widths of the MLP layers; the last one is the bottleneck.
    pub dims: Vec<usize>,
    pub out_dim: usize,
}

impl ProjectorConfig {
    pub fn full() -> Self {
        Self {
            dims: vec![2048, 2048, 256],
            out_dim: 1024,
        }
    }

    pub fn desk() -> Self {
        Self {
            dims: vec![256, 256, 64],
            out_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::Config("projector needs ≥ 1 layer of nonzero width".into()));
        }
        if self.out_dim < 2 {
            return Err(Error::Config(format!("projector out_dim must be ≥ 2, got {}", self.out_dim)));
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        *self.dims.last().expect("validated")
    }
}

#[derive(Clone, Debug)]
pub struct Projector {
    config: ProjectorConfig,
    pub layers: Vec<(ParamId, ParamId)>,
    pub last: ParamId,
}

impl Projector {
    pub fn register<T: Real, R: Rng>(
        config: &ProjectorConfig,
        in_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut width = in_dim;
        let layers = config
            .dims
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let w = store.add(format!("projector.layer{i}.w"), init_normal(&[width, out], rng));
                let b = store.add(format!("projector.layer{i}.b"), Tensor::zeros(&[out]));
                width = out;
                (w, b)
            })
            .collect();
        let last = store.add("projector.last.v", init_normal(&[config.out_dim, width], rng));
        Ok(Self {
            config: config.clone(),
            layers,
            last,
        })
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.config
    }

    /// Unit-length bottleneck vectors `[n, bottleneck]`.
    pub fn bottleneck<'g, T: Real>(&self, p: &BoundParams<'g, T>, y: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut u = y;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            u = u.matmul(p.var(w))?.add(p.var(b))?;
            if i + 1 < self.layers.len() {
                u = u.gelu()?;
            }
        }
        u.l2_normalize(T::lit(L2_EPS))
    }

    /// Logits `q = g(y)`, shape `[n, K]`.
    pub fn forward<'g, T: Real>(&self, p: &BoundParams<'g, T>, y: Var<'g, T>) -> Result<Var<'g, T>> {
        let u = self.bottleneck(p, y)?;
        self.head(p, u)
    }

    /// Cosine similarity of unit bottleneck vectors with each unit weight row.
    pub fn head<'g, T: Real>(&self, p: &BoundParams<'g, T>, u: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = p.var(self.last).l2_normalize(T::lit(L2_EPS))?;
        u.matmul(v.transpose()?)
    }

    /// Final-layer weights with rows scaled to unit norm.
    pub fn normalized_weights<T: Real>(&self, params: &ParamStore<T>) -> Tensor<T> {
        let v = params.get(self.last);
        let width = v.shape()[1];
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(width) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(L2_EPS));
            row.iter_mut().for_each(|x| *x = *x / norm);
        }
        Tensor::new(v.shape(), data).expect("same shape")
    }
}
