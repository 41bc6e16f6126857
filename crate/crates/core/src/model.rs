//! Encoder composed with the projector head, sharing one parameter store.

use crate::error::Result;
use crate::projector::{Projector, ProjectorConfig};
use crate::rng::{self, Stream};
use crate::tensor::{BoundParams, ParamStore, Real, Var};
use crate::vit::{Encoder, ViTConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub projector: ProjectorConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            vit: ViTConfig::desk(),
            projector: ProjectorConfig::desk(),
        }
    }

    pub fn full() -> Self {
        Self {
            vit: ViTConfig::full(),
            projector: ProjectorConfig::full(),
        }
    }
}

/// `q_θ = g_θ ∘ f_θ`. Holds parameter handles only; values live in a
/// [`ParamStore`] so teacher and student share one layout.
#[derive(Clone, Debug)]
pub struct ModelNetwork {
    config: ModelConfig,
    pub encoder: Encoder,
    pub projector: Projector,
}

impl ModelNetwork {
    /// Builds the layout and a parameter set drawn from `seed`.
    pub fn init<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        Self::init_indexed(config, seed, 0)
    }

    /// Another parameter draw with the same layout, from sub-stream `index`.
    pub fn fresh_params<T: Real>(&self, seed: u64, index: u64) -> Result<ParamStore<T>> {
        Ok(Self::init_indexed(&self.config, seed, index)?.1)
    }

    fn init_indexed<T: Real>(config: &ModelConfig, seed: u64, index: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, Stream::Init, index);
        let encoder = Encoder::register(&config.vit, &mut store, &mut rng)?;
        let projector = Projector::register(&config.projector, config.vit.embed_dim, &mut store, &mut rng)?;
        Ok((
            Self {
                config: config.clone(),
                encoder,
                projector,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn out_dim(&self) -> usize {
        self.config.projector.out_dim
    }

    /// Features `[n, d]` and logits `[n, K]` for patch rows `[n, N, P²C]`.
    pub fn forward<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        patches: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let (y, _) = self.encoder.forward(p, patches)?;
        let q = self.projector.forward(p, y)?;
        Ok((y, q))
    }
}
