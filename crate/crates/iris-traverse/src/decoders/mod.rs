//! Differentiable latent → image decoders.
//!
//! Both decoders share the same two-stage layout: a small mapping network
//! takes the input latent `z` to an intermediate style vector `w`
//! ([`W_DIM`] wide), and a synthesis stage renders `w` into a grayscale
//! image in `[0, 1]`. Traversal can optimize either vector; optimizing `w`
//! directly simply bypasses the mapping network.
//!
//! [`ProceduralDecoder`] renders an eye analytically, so its pupil/iris
//! circles and eyelid opening are known in closed form — that is what makes
//! the geometry estimators testable against ground truth.
//! [`ConvDecoder`] is a small transposed-convolution-style network with no
//! analytic structure, exercising the same interfaces on an opaque decoder.

mod convnet;
mod mapping;
mod procedural;
pub mod weights_io;

pub use convnet::ConvDecoder;
pub use mapping::MappingNet;
pub use procedural::{CircleParams, ProceduralDecoder, RenderConfig};

use crate::autodiff::{Context, Tensor};
use crate::Result;

/// Width of the intermediate style vector produced by the mapping network
/// and consumed by every synthesis stage.
pub const W_DIM: usize = 32;

/// Upper bound on either render dimension. Configs come from editable text
/// files, so constructors refuse absurd sizes instead of attempting the
/// allocation.
pub const MAX_RENDER_SIDE: usize = 1 << 14;

/// Which vector the optimizer walks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSpace {
    /// Input latent; gradients flow through the mapping network.
    Z,
    /// Intermediate style vector; the mapping network is bypassed.
    W,
}

impl LatentSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            LatentSpace::Z => "z",
            LatentSpace::W => "w",
        }
    }
}

impl std::fmt::Display for LatentSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A differentiable image generator.
pub trait Decoder {
    /// Input latent dimension (the `z` the mapping network consumes).
    fn latent_dim(&self) -> usize;

    /// Output image size as `(height, width)`.
    fn image_size(&self) -> (usize, usize);

    fn mapping(&self) -> &MappingNet;

    /// Render the style vector `w` (shape `[W_DIM]`) to an `H×W` image.
    fn synthesize(&self, ctx: &Context, w: &Tensor) -> Result<Tensor>;

    /// Full pipeline: `z → mapping → synthesis`.
    fn generate(&self, ctx: &Context, z: &Tensor) -> Result<Tensor> {
        let w = self.mapping().forward(ctx, z)?;
        self.synthesize(ctx, &w)
    }

    /// Dimension of the vector living in `space`.
    fn dim_of(&self, space: LatentSpace) -> usize {
        match space {
            LatentSpace::Z => self.latent_dim(),
            LatentSpace::W => W_DIM,
        }
    }

    /// Render from a vector in the given space.
    fn decode_from(&self, ctx: &Context, v: &Tensor, space: LatentSpace) -> Result<Tensor> {
        match space {
            LatentSpace::Z => self.generate(ctx, v),
            LatentSpace::W => self.synthesize(ctx, v),
        }
    }
}
