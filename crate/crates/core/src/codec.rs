//! Pixel/latent codec and patch tokenisation.
//!
//! The codec is a fixed linear map: every `r×r` pixel patch (all channels)
//! is multiplied by a seeded orthogonal matrix to give `C·r·r` latent
//! channels at one latent position. Decoding applies the transpose, so the
//! pair is an exact inverse up to rounding and codec error is ~0.

use crate::tensor::{Graph, Real, Tensor, Var};
use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Pixel-space video, `B×F×C×H×W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor(Tensor);

/// Latent-space video, `B×F×c×h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor(Tensor);

macro_rules! video_like {
    ($ty:ident, $what:literal) => {
        impl $ty {
            pub fn new(t: Tensor) -> Result<Self> {
                if t.rank() != 5 {
                    return Err(Error::dim(format!(
                        concat!($what, " must be rank 5 (B×F×C×H×W), got {:?}"),
                        t.shape()
                    )));
                }
                if !t.all_finite() {
                    return Err(Error::NonFinite(concat!($what, " construction").into()));
                }
                Ok($ty(t))
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn shape(&self) -> &[usize] {
                self.0.shape()
            }

            pub fn batch(&self) -> usize {
                self.0.shape()[0]
            }

            pub fn frames(&self) -> usize {
                self.0.shape()[1]
            }

            pub fn channels(&self) -> usize {
                self.0.shape()[2]
            }

            pub fn height(&self) -> usize {
                self.0.shape()[3]
            }

            pub fn width(&self) -> usize {
                self.0.shape()[4]
            }
        }
    };
}

video_like!(VideoTensor, "video");
video_like!(LatentTensor, "latent");

impl VideoTensor {
    /// Channel-mean grayscale of one frame, `H·W` values.
    pub fn gray_frame(&self, b: usize, f: usize) -> Vec<Real> {
        let [_, nf, c, h, w] = self.dims();
        let plane = h * w;
        let base = (b * nf + f) * c * plane;
        let d = self.0.data();
        (0..plane)
            .map(|p| (0..c).map(|ch| d[base + ch * plane + p]).sum::<Real>() / c as Real)
            .collect()
    }

    pub fn dims(&self) -> [usize; 5] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3], s[4]]
    }
}

/// Fixed orthogonal patch codec.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    channels: usize,
    factor: usize,
    /// Row-major `n×n` orthogonal matrix, `n = channels·factor²`.
    basis: Vec<Real>,
}

impl Codec {
    /// Codec for `channels`-channel video with spatial reduction `factor`,
    /// using an orthogonal basis drawn from `seed`.
    pub fn new(channels: usize, factor: usize, seed: u64) -> Result<Self> {
        if channels == 0 || factor == 0 {
            return Err(Error::Config("codec needs channels >= 1 and factor >= 1".into()));
        }
        let n = channels * factor * factor;
        let mut rng = crate::rng_from_seed(seed);
        let gauss = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
        let q = gauss.qr().q();
        let basis = (0..n * n).map(|i| q[(i / n, i % n)] as Real).collect();
        Ok(Codec {
            channels,
            factor,
            basis,
        })
    }

    /// `factor = 1` codec with the identity basis: `encode(x) == x`.
    pub fn identity(channels: usize) -> Self {
        let n = channels;
        Codec {
            channels,
            factor: 1,
            basis: (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn pixel_channels(&self) -> usize {
        self.channels
    }

    pub fn latent_channels(&self) -> usize {
        self.channels * self.factor * self.factor
    }

    /// Latent shape for a pixel video shape.
    pub fn latent_shape(&self, video: &[usize]) -> Result<[usize; 5]> {
        let [b, f, c, h, w] = five(video)?;
        if c != self.channels {
            return Err(Error::dim(format!("codec expects {} channels, video has {c}", self.channels)));
        }
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::dim(format!(
                "frame {h}×{w} is not divisible by reduction factor {}",
                self.factor
            )));
        }
        Ok([b, f, self.latent_channels(), h / self.factor, w / self.factor])
    }

    pub fn encode(&self, x: &VideoTensor) -> Result<LatentTensor> {
        let [b, f, c, h, w] = x.dims();
        let [_, _, lc, lh, lw] = self.latent_shape(x.shape())?;
        let r = self.factor;
        let n = lc;
        let src = x.tensor().data();
        let mut out = vec![0.0; b * f * lc * lh * lw];
        let mut patch = vec![0.0; n];
        for bf in 0..b * f {
            let xin = &src[bf * c * h * w..(bf + 1) * c * h * w];
            let zout = &mut out[bf * lc * lh * lw..(bf + 1) * lc * lh * lw];
            for i in 0..lh {
                for j in 0..lw {
                    for ch in 0..c {
                        for dy in 0..r {
                            for dx in 0..r {
                                patch[(ch * r + dy) * r + dx] = xin[(ch * h + i * r + dy) * w + j * r + dx];
                            }
                        }
                    }
                    for k in 0..n {
                        let row = &self.basis[k * n..(k + 1) * n];
                        zout[(k * lh + i) * lw + j] = row.iter().zip(&patch).map(|(q, v)| q * v).sum();
                    }
                }
            }
        }
        LatentTensor::new(Tensor::new(&[b, f, lc, lh, lw], out)?)
    }

    /// Exact inverse of [`Codec::encode`] without clamping.
    pub fn decode_unclamped(&self, z: &LatentTensor) -> Result<Tensor> {
        let [b, f, lc, lh, lw] = five(z.shape())?;
        if lc != self.latent_channels() {
            return Err(Error::dim(format!(
                "latent has {lc} channels, codec produces {}",
                self.latent_channels()
            )));
        }
        let (r, c, n) = (self.factor, self.channels, lc);
        let (h, w) = (lh * r, lw * r);
        let src = z.tensor().data();
        let mut out = vec![0.0; b * f * c * h * w];
        let mut patch = vec![0.0; n];
        for bf in 0..b * f {
            let zin = &src[bf * lc * lh * lw..(bf + 1) * lc * lh * lw];
            let xout = &mut out[bf * c * h * w..(bf + 1) * c * h * w];
            for i in 0..lh {
                for j in 0..lw {
                    patch.iter_mut().for_each(|p| *p = 0.0);
                    for k in 0..n {
                        let zk = zin[(k * lh + i) * lw + j];
                        for (m, p) in patch.iter_mut().enumerate() {
                            *p += self.basis[k * n + m] * zk;
                        }
                    }
                    for ch in 0..c {
                        for dy in 0..r {
                            for dx in 0..r {
                                xout[(ch * h + i * r + dy) * w + j * r + dx] = patch[(ch * r + dy) * r + dx];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[b, f, c, h, w], out)
    }

    /// Decodes and clamps to `[0, 1]`.
    pub fn decode(&self, z: &LatentTensor) -> Result<VideoTensor> {
        VideoTensor::new(self.decode_unclamped(z)?.clamp(0.0, 1.0))
    }
}

fn five(shape: &[usize]) -> Result<[usize; 5]> {
    shape
        .try_into()
        .map_err(|_| Error::dim(format!("expected a rank-5 shape, got {:?}", shape)))
}

/// Patch tokenisation of a `c×h×w` latent frame into `P×P` patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl PatchGrid {
    /// Grid covering a `channels×h×w` latent with `patch`-sized tiles.
    pub fn for_latent(channels: usize, h: usize, w: usize, patch: usize) -> Result<Self> {
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::dim(format!("latent {h}×{w} is not tiled by {patch}×{patch} patches")));
        }
        Ok(PatchGrid {
            patch,
            grid_h: h / patch,
            grid_w: w / patch,
            channels,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token_width(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    fn check_latent(&self, shape: &[usize]) -> Result<[usize; 5]> {
        let s = five(shape)?;
        if s[2] != self.channels || s[3] != self.grid_h * self.patch || s[4] != self.grid_w * self.patch {
            return Err(Error::dim(format!("latent {:?} does not match patch grid {:?}", shape, self)));
        }
        Ok(s)
    }

    fn split_shape(&self, bf: usize) -> [usize; 6] {
        [bf, self.channels, self.grid_h, self.patch, self.grid_w, self.patch]
    }
}

const TO_TOKENS: [usize; 6] = [0, 2, 4, 1, 3, 5];
const FROM_TOKENS: [usize; 6] = [0, 3, 1, 4, 2, 5];

/// `B×F×c×h×w` latent to `(B·F) × tokens × (c·P·P)` in raster patch order.
pub fn patchify(z: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let [b, f, ..] = grid.check_latent(z.shape())?;
    z.reshape(&grid.split_shape(b * f))?
        .permute(&TO_TOKENS)?
        .reshape(&[b * f, grid.tokens(), grid.token_width()])
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, grid: &PatchGrid, batch: usize, frames: usize) -> Result<Tensor> {
    if tokens.shape() != [batch * frames, grid.tokens(), grid.token_width()] {
        return Err(Error::dim(format!("token block {:?} does not match grid {:?}", tokens.shape(), grid)));
    }
    let [_, c, gh, p, gw, _] = grid.split_shape(batch * frames);
    tokens
        .reshape(&[batch * frames, gh, gw, c, p, p])?
        .permute(&FROM_TOKENS)?
        .reshape(&[batch, frames, c, gh * p, gw * p])
}

/// Differentiable [`patchify`].
pub fn patchify_var(g: &mut Graph, z: Var, grid: &PatchGrid) -> Result<Var> {
    let [b, f, ..] = grid.check_latent(g.shape(z))?;
    let split = g.reshape(z, &grid.split_shape(b * f))?;
    let perm = g.permute(split, &TO_TOKENS)?;
    g.reshape(perm, &[b * f, grid.tokens(), grid.token_width()])
}

/// Differentiable [`unpatchify`].
pub fn unpatchify_var(g: &mut Graph, tokens: Var, grid: &PatchGrid, batch: usize, frames: usize) -> Result<Var> {
    if g.shape(tokens) != [batch * frames, grid.tokens(), grid.token_width()] {
        return Err(Error::dim(format!("token block {:?} does not match grid {:?}", g.shape(tokens), grid)));
    }
    let [_, c, gh, p, gw, _] = grid.split_shape(batch * frames);
    let split = g.reshape(tokens, &[batch * frames, gh, gw, c, p, p])?;
    let perm = g.permute(split, &FROM_TOKENS)?;
    g.reshape(perm, &[batch, frames, c, gh * p, gw * p])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_video(shape: &[usize], seed: u64) -> VideoTensor {
        let mut rng = crate::rng_from_seed(seed);
        VideoTensor::new(Tensor::uniform(shape, 0.0, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn identity_codec_is_identity() {
        let x = random_video(&[1, 3, 2, 4, 4], 1);
        let codec = Codec::identity(2);
        assert_eq!(codec.encode(&x).unwrap().tensor(), x.tensor());
    }

    #[test]
    fn latent_shape_arithmetic() {
        let codec = Codec::new(1, 2, 7).unwrap();
        let x = random_video(&[1, 4, 1, 16, 16], 2);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape(), &[1, 4, 4, 8, 8]);
        assert!(codec.latent_shape(&[1, 4, 1, 15, 16]).is_err());
        assert!(codec.latent_shape(&[1, 4, 3, 16, 16]).is_err());
    }

    #[test]
    fn decode_inverts_encode() {
        let codec = Codec::new(1, 2, 11).unwrap();
        let x = random_video(&[2, 3, 1, 8, 8], 3);
        let back = codec.decode_unclamped(&codec.encode(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(x.tensor()).unwrap() < 1e-5);
    }

    #[test]
    fn identity_decode_of_zero_latent_is_zero_and_decode_clamps() {
        let codec = Codec::identity(1);
        let z = LatentTensor::new(Tensor::zeros(&[1, 2, 1, 2, 2])).unwrap();
        assert!(codec.decode(&z).unwrap().tensor().data().iter().all(|&v| v == 0.0));
        let z = LatentTensor::new(Tensor::full(&[1, 1, 1, 1, 1], 1.2)).unwrap();
        assert_eq!(codec.decode(&z).unwrap().tensor().data(), &[1.0]);
    }

    #[test]
    fn patch_counts() {
        let z = Tensor::zeros(&[1, 2, 4, 8, 8]);
        let whole = PatchGrid::for_latent(4, 8, 8, 8).unwrap();
        assert_eq!(patchify(&z, &whole).unwrap().shape(), &[2, 1, 256]);
        let quarters = PatchGrid::for_latent(4, 8, 8, 4).unwrap();
        assert_eq!(patchify(&z, &quarters).unwrap().shape(), &[2, 4, 64]);
        assert!(PatchGrid::for_latent(4, 8, 8, 3).is_err());
        let wrong = PatchGrid::for_latent(2, 8, 8, 4).unwrap();
        assert!(patchify(&z, &wrong).is_err());
    }

    #[test]
    fn first_token_is_top_left_patch() {
        let z = Tensor::from_fn(&[1, 1, 1, 4, 4], |i| i as Real);
        let grid = PatchGrid::for_latent(1, 4, 4, 2).unwrap();
        let t = patchify(&z, &grid).unwrap();
        assert_eq!(&t.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&t.data()[4..8], &[2., 3., 6., 7.]);
    }

    proptest! {
        #[test]
        fn patchify_round_trip_is_exact(seed in 0u64..1000, p in prop::sample::select(vec![1usize, 2, 4])) {
            let mut rng = crate::rng_from_seed(seed);
            let z = Tensor::randn(&[2, 3, 2, 4, 8], 1.0, &mut rng);
            let grid = PatchGrid::for_latent(2, 4, 8, p).unwrap();
            let tokens = patchify(&z, &grid).unwrap();
            prop_assert_eq!(unpatchify(&tokens, &grid, 2, 3).unwrap(), z);
        }

        #[test]
        fn encode_is_linear(seed in 0u64..1000, a in -3.0f64..3.0) {
            let a = a as Real;
            let codec = Codec::new(1, 2, seed).unwrap();
            let x = random_video(&[1, 2, 1, 4, 4], seed + 1);
            let scaled = VideoTensor::new(x.tensor().scale(a)).unwrap();
            let lhs = codec.encode(&scaled).unwrap();
            let rhs = codec.encode(&x).unwrap().tensor().scale(a);
            prop_assert!(lhs.tensor().max_abs_diff(&rhs).unwrap() < crate::tensor::TIGHT);
            prop_assert_eq!(&lhs.shape()[..2], &x.shape()[..2]);
        }
    }
}
