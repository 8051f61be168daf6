//! Small convolutional decoder: an opaque synthesis stage with no analytic
//! geometry, used to exercise traversal/inversion on a network-shaped
//! generator rather than a renderer.

use super::{MappingNet, W_DIM};
use crate::autodiff::{Array, Context, PadMode, Tensor};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// Channel widths after the dense stem and the three upsampling stages.
const STEM_CHANNELS: usize = 12;
const STAGE_CHANNELS: [usize; 3] = [8, 6, 1];

/// `w → dense → tanh → (upsample ×2 → 3×3 conv → activation) × 3`, ending in
/// a sigmoid so pixels land in (0, 1). Output is `height×width`, both of
/// which must be divisible by 8 (three doublings from the stem grid).
pub struct ConvDecoder {
    mapping: MappingNet,
    height: usize,
    width: usize,
    /// `(STEM_CHANNELS·h/8·w/8) × W_DIM`
    dense_w: Array,
    /// column vector matching `dense_w`'s row count
    dense_b: Array,
    /// three `F×C×3×3` kernels
    kernels: [Array; 3],
}

impl ConvDecoder {
    pub fn new(latent_dim: usize, seed: u64, height: usize, width: usize) -> Result<Self> {
        if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "conv decoder size {width}×{height} must be divisible by 8"
            )));
        }
        if height > super::MAX_RENDER_SIDE || width > super::MAX_RENDER_SIDE {
            return Err(Error::Config(format!(
                "conv decoder size {width}×{height} exceeds the {} px side limit",
                super::MAX_RENDER_SIDE
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x636f6e76); // offset the stream from the mapping net's
        let mut draw = |shape: Vec<usize>, std: f64| -> Array {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("finite std");
            let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Array::new(shape, data).expect("length matches")
        };
        let stem = STEM_CHANNELS * (height / 8) * (width / 8);
        let dense_w = draw(vec![stem, W_DIM], 1.0 / (W_DIM as f64).sqrt());
        let dense_b = draw(vec![stem, 1], 0.1);
        let mut chans = vec![STEM_CHANNELS];
        chans.extend_from_slice(&STAGE_CHANNELS);
        let kernels: Vec<Array> = (0..3)
            .map(|i| {
                let fan_in = (chans[i] * 9) as f64;
                draw(vec![chans[i + 1], chans[i], 3, 3], 1.0 / fan_in.sqrt())
            })
            .collect();
        Ok(ConvDecoder {
            mapping: MappingNet::new(latent_dim, seed)?,
            height,
            width,
            dense_w,
            dense_b,
            kernels: kernels.try_into().expect("three stages"),
        })
    }

    /// Weight tensors in serialization order:
    /// `[dense_w, dense_b, kernel1, kernel2, kernel3]` followed by the
    /// mapping network's four.
    pub fn to_arrays(&self) -> Vec<Array> {
        let mut v = vec![self.dense_w.clone(), self.dense_b.clone()];
        v.extend(self.kernels.iter().cloned());
        v.extend(self.mapping.to_arrays());
        v
    }
}

impl super::Decoder for ConvDecoder {
    fn latent_dim(&self) -> usize {
        self.mapping.latent_dim()
    }

    fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn mapping(&self) -> &MappingNet {
        &self.mapping
    }

    fn synthesize(&self, ctx: &Context, w: &Tensor) -> Result<Tensor> {
        if w.shape() != vec![W_DIM] {
            return Err(Error::LatentMismatch(format!(
                "style vector must have shape [{}], got {:?}",
                W_DIM,
                w.shape()
            )));
        }
        let (h8, w8) = (self.height / 8, self.width / 8);
        let dw = ctx.constant(&self.dense_w);
        let db = ctx.constant(&self.dense_b);
        let stem = dw
            .matmul(&w.reshape(&[W_DIM, 1])?)?
            .add(&db)?
            .tanh()?
            .reshape(&[STEM_CHANNELS, h8, w8])?;
        let mut x = stem;
        for (i, kernel) in self.kernels.iter().enumerate() {
            let k = ctx.constant(kernel);
            let pre = x.upsample2x()?.conv2d(&k, 1, 1, PadMode::Zero)?;
            x = if i + 1 == self.kernels.len() {
                pre.sigmoid()?
            } else {
                pre.tanh()?
            };
        }
        x.reshape(&[self.height, self.width])
    }
}
