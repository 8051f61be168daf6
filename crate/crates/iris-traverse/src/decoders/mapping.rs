//! Mapping network: latent `z` → style vector `w`.

use super::W_DIM;
use crate::autodiff::{Array, Context, Tensor};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// One hidden layer with tanh, linear output:
/// `w = W₂·tanh(W₁·z + b₁) + b₂`.
///
/// The linear output layer matters: it keeps `w` unsaturated so traversal in
/// w-space has room to move, while the hidden tanh makes the z → w map
/// genuinely nonlinear.
pub struct MappingNet {
    latent_dim: usize,
    hidden_dim: usize,
    /// `hidden×latent`
    w1: Array,
    /// `hidden×1`
    b1: Array,
    /// `W_DIM×hidden`
    w2: Array,
    /// `W_DIM×1`
    b2: Array,
}

impl MappingNet {
    pub const HIDDEN_DIM: usize = 64;

    /// Fresh network with weights ~N(0, 1/√fan_in) and biases ~N(0, 0.1),
    /// drawn from a ChaCha stream seeded with `seed`.
    pub fn new(latent_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Config("latent dimension must be ≥ 1".to_string()));
        }
        let hidden = Self::HIDDEN_DIM;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut draw = |n: usize, std: f64| -> Array {
            let dist = Normal::new(0.0, std).expect("finite std");
            let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Array::new(vec![n], data).expect("length matches")
        };
        let w1 = reshaped(draw(hidden * latent_dim, 1.0 / (latent_dim as f64).sqrt()), vec![hidden, latent_dim]);
        let b1 = reshaped(draw(hidden, 0.1), vec![hidden, 1]);
        let w2 = reshaped(draw(W_DIM * hidden, 1.0 / (hidden as f64).sqrt()), vec![W_DIM, hidden]);
        let b2 = reshaped(draw(W_DIM, 0.1), vec![W_DIM, 1]);
        Ok(MappingNet {
            latent_dim,
            hidden_dim: hidden,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Differentiable forward pass; `z` must have shape `[latent_dim]`.
    pub fn forward(&self, ctx: &Context, z: &Tensor) -> Result<Tensor> {
        if z.shape() != vec![self.latent_dim] {
            return Err(Error::LatentMismatch(format!(
                "mapping network expects z of shape [{}], got {:?}",
                self.latent_dim,
                z.shape()
            )));
        }
        let zc = z.reshape(&[self.latent_dim, 1])?;
        let w1 = ctx.constant(&self.w1);
        let b1 = ctx.constant(&self.b1);
        let w2 = ctx.constant(&self.w2);
        let b2 = ctx.constant(&self.b2);
        let h = w1.matmul(&zc)?.add(&b1)?.tanh()?;
        w2.matmul(&h)?.add(&b2)?.reshape(&[W_DIM])
    }

    /// Plain-array forward pass, for callers that need `w` without a tape
    /// (e.g. seeding w-space traversal from a z sample).
    pub fn forward_detached(&self, z: &Array) -> Result<Array> {
        let ctx = Context::new();
        let zt = ctx.constant(z);
        Ok(self.forward(&ctx, &zt)?.detach())
    }

    /// Weight tensors in serialization order: `[w1, b1, w2, b2]`.
    pub fn to_arrays(&self) -> Vec<Array> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    /// Rebuild from [`MappingNet::to_arrays`] output.
    pub fn from_arrays(arrays: &[Array]) -> Result<Self> {
        if arrays.len() != 4 {
            return Err(Error::format(
                "weights",
                format!("mapping network needs 4 tensors, got {}", arrays.len()),
            ));
        }
        let [w1, b1, w2, b2] = [&arrays[0], &arrays[1], &arrays[2], &arrays[3]];
        let hw1 = w1.shape().to_vec();
        if hw1.len() != 2 {
            return Err(Error::format("weights", format!("first layer must be rank 2, got {hw1:?}")));
        }
        let (hidden, latent) = (hw1[0], hw1[1]);
        if b1.shape() != [hidden, 1] {
            return Err(Error::format("weights", format!("hidden bias shape {:?} does not match {hidden}×1", b1.shape())));
        }
        if w2.shape() != [W_DIM, hidden] {
            return Err(Error::format("weights", format!("output layer shape {:?} does not match {W_DIM}×{hidden}", w2.shape())));
        }
        if b2.shape() != [W_DIM, 1] {
            return Err(Error::format("weights", format!("output bias shape {:?} does not match {W_DIM}×1", b2.shape())));
        }
        Ok(MappingNet {
            latent_dim: latent,
            hidden_dim: hidden,
            w1: w1.clone(),
            b1: b1.clone(),
            w2: w2.clone(),
            b2: b2.clone(),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }
}

fn reshaped(a: Array, shape: Vec<usize>) -> Array {
    Array::new(shape, a.into_data()).expect("same length")
}
