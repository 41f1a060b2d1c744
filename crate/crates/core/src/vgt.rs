//! Video Generation Transformer: a spatial masked-decoder stack per frame,
//! a temporal masked-decoder stack over the per-frame cls tokens, Hadamard
//! (pure) or transposed-3D-conv (hyper) fusion and a zero-initialised MLP head.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::codec::{patchify_var, unpatchify_var, PatchGrid};
use crate::nn::{self, Bound, ParamStore};
use crate::tensor::{additive_mask, causal_pattern, sinusoidal_embedding, Graph, Real, Tensor, Var};
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VgtVariant {
    Pure,
    Hyper,
}

impl std::str::FromStr for VgtVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure" => Ok(VgtVariant::Pure),
            "hyper" => Ok(VgtVariant::Hyper),
            other => Err(Error::Config(format!("unknown VGT variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for VgtVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VgtVariant::Pure => "pure",
            VgtVariant::Hyper => "hyper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VgtConfig {
    pub variant: VgtVariant,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub heads: usize,
    pub width: usize,
    pub patch: usize,
    /// Causal masks on; `false` gives the unmasked "-EN" variants.
    pub masked: bool,
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    /// Length of the temporal positional table, minus the cls slot.
    pub max_frames: usize,
}

impl Default for VgtConfig {
    fn default() -> Self {
        VgtConfig {
            variant: VgtVariant::Pure,
            spatial_layers: 2,
            temporal_layers: 2,
            heads: 4,
            width: 32,
            patch: 4,
            masked: true,
            latent_channels: 4,
            latent_height: 16,
            latent_width: 16,
            max_frames: 16,
        }
    }
}

impl VgtConfig {
    pub fn validate(&self) -> Result<PatchGrid> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.spatial_layers == 0 || self.temporal_layers == 0 {
            return Err(Error::Config("VGT needs at least one spatial and one temporal layer".into()));
        }
        if self.max_frames == 0 || self.latent_channels == 0 {
            return Err(Error::Config("VGT max_frames and latent_channels must be positive".into()));
        }
        PatchGrid::for_latent(self.latent_channels, self.latent_height, self.latent_width, self.patch)
            .map_err(|e| Error::Config(e.to_string()))
    }

    fn head_hidden(&self) -> usize {
        2 * self.width
    }
}

/// Temporal stack output: the whole `[B, F+1, d]` sequence plus its split.
#[derive(Clone, Copy, Debug)]
pub struct TemporalOutput {
    pub sequence: Var,
    /// `[B, d]`
    pub cls: Var,
    /// `[B·F, d]`
    pub frames: Var,
}

const P: &str = "vgt";

#[derive(Debug)]
pub struct Vgt {
    cfg: VgtConfig,
    grid: PatchGrid,
    calls: AtomicUsize,
}

impl Vgt {
    pub fn new(cfg: VgtConfig) -> Result<Self> {
        let grid = cfg.validate()?;
        Ok(Vgt {
            cfg,
            grid,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &VgtConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    /// Number of completed or attempted [`Vgt::forward`] calls.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let c = &self.cfg;
        let d = c.width;
        let n = self.grid.tokens();
        nn::add_linear(store, &format!("{P}.embed"), self.grid.token_width(), d, false, rng)?;
        store.insert(format!("{P}.spatial.cls"), Tensor::randn(&[d], 0.02, rng))?;
        store.insert(format!("{P}.spatial.pos"), Tensor::randn(&[n + 1, d], 0.02, rng))?;
        for l in 0..c.spatial_layers {
            add_block(store, &format!("{P}.spatial.{l}"), d, rng)?;
        }
        nn::add_linear(store, &format!("{P}.temporal.proj"), d, d, false, rng)?;
        nn::add_layer_norm(store, &format!("{P}.temporal.proj_ln"), d)?;
        store.insert(format!("{P}.temporal.cls"), Tensor::randn(&[d], 0.02, rng))?;
        store.insert(format!("{P}.temporal.pos"), Tensor::randn(&[c.max_frames + 1, d], 0.02, rng))?;
        for l in 0..c.temporal_layers {
            add_block(store, &format!("{P}.temporal.{l}"), d, rng)?;
        }
        if c.variant == VgtVariant::Hyper {
            let (gh, gw) = (self.grid.grid_h, self.grid.grid_w);
            store.insert(format!("{P}.hyper.up.w"), nn::init_weight(&[d, d, 3, gh, gw], d * 3, rng))?;
            store.insert(format!("{P}.hyper.up.b"), Tensor::zeros(&[d]))?;
            store.insert(format!("{P}.hyper.mix.w"), nn::init_weight(&[d, d, 3, 3, 3], d * 27, rng))?;
            store.insert(format!("{P}.hyper.mix.b"), Tensor::zeros(&[d]))?;
        }
        nn::add_linear(store, &format!("{P}.head.fc1"), d, c.head_hidden(), false, rng)?;
        nn::add_linear(store, &format!("{P}.head.fc2"), c.head_hidden(), self.grid.token_width(), true, rng)?;
        Ok(())
    }

    /// Exact trainable scalar count for `cfg`.
    pub fn count_trainable(cfg: &VgtConfig) -> Result<usize> {
        let vgt = Vgt::new(cfg.clone())?;
        let mut store = ParamStore::new();
        vgt.init(&mut store, &mut crate::rng_from_seed(0))?;
        Ok(store.num_scalars())
    }

    fn mask(&self, len: usize) -> Option<Vec<Vec<bool>>> {
        self.cfg.masked.then(|| causal_pattern(len))
    }

    /// Per-frame spatial stack on `z[B, F, c, h, w]`; returns cls outputs
    /// `[B·F, d]` and patch outputs `[B·F, N, d]`.
    pub fn spatial_decode(&self, g: &mut Graph, p: &Bound, z: Var, t: usize) -> Result<(Var, Var)> {
        let d = self.cfg.width;
        let n = self.grid.tokens();
        let tokens = patchify_var(g, z, &self.grid)?;
        let bf = g.shape(tokens)[0];
        let flat = g.reshape(tokens, &[bf * n, self.grid.token_width()])?;
        let emb = nn::linear(g, p, &format!("{P}.embed"), flat)?;
        let emb = g.reshape(emb, &[bf, n, d])?;
        let cls = g.expand_leading(p.get(&format!("{P}.spatial.cls"))?, &[bf, 1])?;
        let seq = g.concat(&[cls, emb], 1)?;
        let seq = add_positions(g, seq, p.get(&format!("{P}.spatial.pos"))?, bf, n + 1)?;
        let temb = g.constant(Tensor::new(&[d], sinusoidal_embedding(t, d))?)?;
        let temb = g.expand_leading(temb, &[bf, n + 1])?;
        let mut seq = g.add(seq, temb)?;
        let mask = self.mask(n + 1);
        for l in 0..self.cfg.spatial_layers {
            seq = mmsa(g, p, &format!("{P}.spatial.{l}"), seq, mask.as_deref(), self.cfg.heads)?;
        }
        let cls_out = g.narrow(seq, 1, 0, 1)?;
        let cls_out = g.reshape(cls_out, &[bf, d])?;
        let patches = g.narrow(seq, 1, 1, n)?;
        Ok((cls_out, patches))
    }

    /// Temporal stack over per-frame cls tokens `[B·F, d]`.
    pub fn temporal_decode(&self, g: &mut Graph, p: &Bound, cls: Var, batch: usize, frames: usize) -> Result<TemporalOutput> {
        let d = self.cfg.width;
        if frames == 0 || frames > self.cfg.max_frames {
            return Err(Error::dim(format!("{frames} frames outside [1, {}]", self.cfg.max_frames)));
        }
        if g.shape(cls) != [batch * frames, d] {
            return Err(Error::dim(format!("temporal input {:?}, expected [{}, {d}]", g.shape(cls), batch * frames)));
        }
        let proj = nn::linear(g, p, &format!("{P}.temporal.proj"), cls)?;
        let proj = nn::layer_norm(g, p, &format!("{P}.temporal.proj_ln"), proj)?;
        let proj = g.reshape(proj, &[batch, frames, d])?;
        let tcls = g.expand_leading(p.get(&format!("{P}.temporal.cls"))?, &[batch, 1])?;
        let seq = g.concat(&[tcls, proj], 1)?;
        let mut seq = add_positions(g, seq, p.get(&format!("{P}.temporal.pos"))?, batch, frames + 1)?;
        let mask = self.mask(frames + 1);
        for l in 0..self.cfg.temporal_layers {
            seq = mmsa(g, p, &format!("{P}.temporal.{l}"), seq, mask.as_deref(), self.cfg.heads)?;
        }
        let cls_t = g.narrow(seq, 1, 0, 1)?;
        let cls_t = g.reshape(cls_t, &[batch, d])?;
        let fr = g.narrow(seq, 1, 1, frames)?;
        let fr = g.reshape(fr, &[batch * frames, d])?;
        Ok(TemporalOutput {
            sequence: seq,
            cls: cls_t,
            frames: fr,
        })
    }

    /// Drops the temporal cls, lifts frame tokens to `[B, d, F, 1, 1]`,
    /// upsamples to the patch grid with a transposed 3-D conv, mixes with a
    /// 3×3×3 conv and returns tokens `[B·F, N, d]`.
    pub fn fuse_hyper(&self, g: &mut Graph, p: &Bound, sequence: Var) -> Result<Var> {
        if self.cfg.variant != VgtVariant::Hyper {
            return Err(Error::dim("fuse_hyper on a pure-variant VGT"));
        }
        let s = g.shape(sequence).to_vec();
        let d = self.cfg.width;
        if s.len() != 3 || s[2] != d || s[1] < 2 {
            return Err(Error::dim(format!("fuse_hyper input {:?}", s)));
        }
        let (b, f) = (s[0], s[1] - 1);
        let (gh, gw) = (self.grid.grid_h, self.grid.grid_w);
        let fr = g.narrow(sequence, 1, 1, f)?;
        let fr = g.permute(fr, &[0, 2, 1])?;
        let fr = g.reshape(fr, &[b, d, f, 1, 1])?;
        let up_w = p.get(&format!("{P}.hyper.up.w"))?;
        let up_b = p.get(&format!("{P}.hyper.up.b"))?;
        let up = g.conv_transpose3d(fr, up_w, Some(up_b), [1, gh, gw], [1, 0, 0])?;
        let up = g.silu(up)?;
        let mix_w = p.get(&format!("{P}.hyper.mix.w"))?;
        let mix_b = p.get(&format!("{P}.hyper.mix.b"))?;
        let y = g.conv3d(up, mix_w, Some(mix_b), [1, 1, 1], [1, 1, 1])?;
        let y = g.permute(y, &[0, 2, 3, 4, 1])?;
        g.reshape(y, &[b * f, gh * gw, d])
    }

    /// Perturbation `φ(z_t, t)` with the latent's shape.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, t: usize) -> Result<Var> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let s = g.shape(z).to_vec();
        if s.len() != 5 {
            return Err(Error::dim(format!("VGT input must be rank 5, got {:?}", s)));
        }
        let (b, f) = (s[0], s[1]);
        let (cls, patches) = self.spatial_decode(g, p, z, t)?;
        let temporal = self.temporal_decode(g, p, cls, b, f)?;
        let y = match self.cfg.variant {
            VgtVariant::Pure => fuse_pure(g, patches, temporal.frames)?,
            VgtVariant::Hyper => self.fuse_hyper(g, p, temporal.sequence)?,
        };
        let n = self.grid.tokens();
        let d = self.cfg.width;
        let flat = g.reshape(y, &[b * f * n, d])?;
        let h = nn::linear(g, p, &format!("{P}.head.fc1"), flat)?;
        let h = g.silu(h)?;
        let out = nn::linear(g, p, &format!("{P}.head.fc2"), h)?;
        let out = g.reshape(out, &[b * f, n, self.grid.token_width()])?;
        unpatchify_var(g, out, &self.grid, b, f)
    }

    /// Inference-only forward on plain tensors.
    pub fn predict(&self, params: &ParamStore, z: &Tensor, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false)?;
        let zv = g.constant(z.clone())?;
        let out = self.forward(&mut g, &p, zv, t)?;
        Ok(g.value(out).clone())
    }
}

/// Hadamard fusion: each frame token scales that frame's patch tokens.
pub fn fuse_pure(g: &mut Graph, patches: Var, frames: Var) -> Result<Var> {
    g.mul_frame(patches, frames)
}

fn add_positions(g: &mut Graph, seq: Var, table: Var, batch: usize, len: usize) -> Result<Var> {
    if g.shape(table)[0] < len {
        return Err(Error::dim(format!("positional table {:?} shorter than {len}", g.shape(table))));
    }
    let pos = g.narrow(table, 0, 0, len)?;
    let pos = g.expand_leading(pos, &[batch])?;
    g.add(seq, pos)
}

/// Registers one decoder block: a layer norm and the q/k/v/o projections.
fn add_block(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Result<()> {
    nn::add_layer_norm(store, &format!("{name}.ln"), d)?;
    for proj in ["q", "k", "v", "o"] {
        nn::add_linear(store, &format!("{name}.attn.{proj}"), d, d, false, rng)?;
    }
    Ok(())
}

/// Decoder block `x + MHA(LN(x))` over `x[B, S, d]`, with an optional
/// `S×S` allowed-pattern (`allowed[i][j]`: query `i` may attend key `j`).
pub fn mmsa(g: &mut Graph, p: &Bound, name: &str, x: Var, mask: Option<&[Vec<bool>]>, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
        return Err(Error::dim(format!("mmsa input {:?} with {heads} heads", s)));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let bias = match mask {
        Some(m) => {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(Error::dim(format!("mask is not {n}×{n}")));
            }
            let t = g.constant(additive_mask(m)?)?;
            Some(g.expand_leading(t, &[b * heads])?)
        }
        None => None,
    };

    let flat = g.reshape(x, &[b * n, d])?;
    let h = nn::layer_norm(g, p, &format!("{name}.ln"), flat)?;
    let split = |g: &mut Graph, proj: &str| -> Result<Var> {
        let y = nn::linear(g, p, &format!("{name}.attn.{proj}"), h)?;
        let y = g.reshape(y, &[b, n, heads, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[b * heads, n, dh])
    };
    let q = split(g, "q")?;
    let k = split(g, "k")?;
    let v = split(g, "v")?;
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.bmm(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dh as Real).sqrt())?;
    if let Some(bias) = bias {
        scores = g.add(scores, bias)?;
    }
    let attn = g.softmax_last(scores)?;
    let ctx = g.bmm(attn, v)?;
    let ctx = g.reshape(ctx, &[b, heads, n, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b * n, d])?;
    let out = nn::linear(g, p, &format!("{name}.attn.o"), ctx)?;
    let out = g.reshape(out, &[b, n, d])?;
    g.add(out, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: VgtVariant, masked: bool) -> VgtConfig {
        VgtConfig {
            variant,
            spatial_layers: 1,
            temporal_layers: 1,
            heads: 2,
            width: 4,
            patch: 2,
            masked,
            latent_channels: 2,
            latent_height: 4,
            latent_width: 4,
            max_frames: 4,
        }
    }

    fn setup(cfg: VgtConfig) -> (Vgt, ParamStore) {
        let vgt = Vgt::new(cfg).unwrap();
        let mut store = ParamStore::new();
        vgt.init(&mut store, &mut crate::rng_from_seed(7)).unwrap();
        let mut rng = crate::rng_from_seed(8);
        for (name, t) in store.iter_mut() {
            if name.contains("head.fc2") {
                *t = Tensor::randn(t.shape(), 0.5, &mut rng);
            }
        }
        (vgt, store)
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(VgtVariant::Pure, true);
        c.heads = 3;
        assert!(matches!(Vgt::new(c.clone()), Err(Error::Config(_))));
        c.heads = 2;
        c.temporal_layers = 0;
        assert!(Vgt::new(c.clone()).is_err());
        c.temporal_layers = 1;
        c.patch = 3;
        assert!(Vgt::new(c).is_err());
        assert_eq!("hyper".parse::<VgtVariant>().unwrap(), VgtVariant::Hyper);
        assert!("mixed".parse::<VgtVariant>().is_err());
    }

    #[test]
    fn zero_head_gives_zero_perturbation() {
        let vgt = Vgt::new(tiny(VgtVariant::Hyper, true)).unwrap();
        let mut store = ParamStore::new();
        vgt.init(&mut store, &mut crate::rng_from_seed(0)).unwrap();
        let z = Tensor::randn(&[1, 3, 2, 4, 4], 1.0, &mut crate::rng_from_seed(1));
        let out = vgt.predict(&store, &z, 5).unwrap();
        assert_eq!(out.shape(), z.shape());
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert_eq!(vgt.calls(), 1);
    }

    #[test]
    fn output_shape_matches_latent() {
        for variant in [VgtVariant::Pure, VgtVariant::Hyper] {
            let (vgt, store) = setup(tiny(variant, true));
            for shape in [[1, 1, 2, 4, 4], [2, 3, 2, 4, 4]] {
                let z = Tensor::randn(&shape, 1.0, &mut crate::rng_from_seed(2));
                let out = vgt.predict(&store, &z, 1).unwrap();
                assert_eq!(out.shape(), &shape);
                assert!(out.max_abs() > 0.0);
            }
            let too_many = Tensor::zeros(&[1, 5, 2, 4, 4]);
            assert!(vgt.predict(&store, &too_many, 1).is_err());
            let bad_grid = Tensor::zeros(&[1, 2, 2, 6, 4]);
            assert!(vgt.predict(&store, &bad_grid, 1).is_err());
        }
    }

    #[test]
    fn mmsa_single_token_is_value_projection_plus_residual() {
        let (_, store) = setup(tiny(VgtVariant::Pure, true));
        let x = Tensor::new(&[1, 1, 4], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let out = mmsa(&mut g, &p, "vgt.spatial.0", xv, Some(&causal_pattern(1)), 2).unwrap();

        let flat = g.reshape(xv, &[1, 4]).unwrap();
        let h = nn::layer_norm(&mut g, &p, "vgt.spatial.0.ln", flat).unwrap();
        let v = nn::linear(&mut g, &p, "vgt.spatial.0.attn.v", h).unwrap();
        let o = nn::linear(&mut g, &p, "vgt.spatial.0.attn.o", v).unwrap();
        let expected = g.value(o).add(&x.reshape(&[1, 4]).unwrap()).unwrap();
        let got = g.value(out).reshape(&[1, 4]).unwrap();
        assert!(got.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn mmsa_unmasked_equals_all_true_mask() {
        let (_, store) = setup(tiny(VgtVariant::Pure, true));
        let x = Tensor::randn(&[2, 5, 4], 1.0, &mut crate::rng_from_seed(3));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let xv = g.constant(x).unwrap();
        let open = mmsa(&mut g, &p, "vgt.spatial.0", xv, None, 2).unwrap();
        let all = vec![vec![true; 5]; 5];
        let full = mmsa(&mut g, &p, "vgt.spatial.0", xv, Some(&all), 2).unwrap();
        assert_eq!(g.value(open), g.value(full));
        assert!(matches!(
            mmsa(&mut g, &p, "vgt.spatial.0", xv, Some(&causal_pattern(4)), 2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fuse_pure_matches_elementwise_product() {
        let mut rng = crate::rng_from_seed(4);
        let patches = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let frames = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let pv = g.constant(patches.clone()).unwrap();
        let fv = g.constant(frames.clone()).unwrap();
        let y = fuse_pure(&mut g, pv, fv).unwrap();
        let y = g.value(y).clone();
        for f in 0..3 {
            for n in 0..4 {
                for k in 0..5 {
                    let idx = (f * 4 + n) * 5 + k;
                    assert_eq!(y.data()[idx], patches.data()[idx] * frames.data()[f * 5 + k]);
                }
            }
        }
        let ones = g.constant(Tensor::ones(&[3, 5])).unwrap();
        let same = fuse_pure(&mut g, pv, ones).unwrap();
        assert_eq!(g.value(same), &patches);
        let short = g.constant(Tensor::ones(&[2, 5])).unwrap();
        assert!(fuse_pure(&mut g, pv, short).is_err());
    }

    #[test]
    fn fuse_hyper_identity_weights_pass_frame_tokens_through() {
        let mut cfg = tiny(VgtVariant::Hyper, true);
        cfg.patch = 4;
        let vgt = Vgt::new(cfg).unwrap();
        let mut store = ParamStore::new();
        vgt.init(&mut store, &mut crate::rng_from_seed(0)).unwrap();
        let d = 4;
        let eye = |taps: usize, centre: usize| {
            Tensor::from_fn(&[d, d, taps, 1, 1], |i| {
                let (o, rest) = (i / (d * taps), i % (d * taps));
                let (c, k) = (rest / taps, rest % taps);
                if o == c && k == centre { 1.0 } else { 0.0 }
            })
        };
        *store.get_mut("vgt.hyper.up.w").unwrap() = eye(3, 1);
        let mix = Tensor::from_fn(&[d, d, 3, 3, 3], |i| {
            let (o, c, k) = (i / (d * 27), (i / 27) % d, i % 27);
            if o == c && k == 13 { 1.0 } else { 0.0 }
        });
        *store.get_mut("vgt.hyper.mix.w").unwrap() = mix;

        let seq = Tensor::randn(&[1, 4, d], 1.0, &mut crate::rng_from_seed(5));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let sv = g.constant(seq.clone()).unwrap();
        let y = vgt.fuse_hyper(&mut g, &p, sv).unwrap();
        assert_eq!(g.shape(y), &[3, 1, d]);
        let silu = |x: Real| x / (1.0 + (-x).exp());
        for f in 0..3 {
            for k in 0..d {
                let want = silu(seq.data()[(f + 1) * d + k]);
                assert!((g.value(y).data()[f * d + k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hyper_tokens_cover_the_default_grid() {
        let cfg = VgtConfig {
            variant: VgtVariant::Hyper,
            ..VgtConfig::default()
        };
        let vgt = Vgt::new(cfg).unwrap();
        let mut store = ParamStore::new();
        vgt.init(&mut store, &mut crate::rng_from_seed(0)).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let seq = g.constant(Tensor::zeros(&[1, 9, 32])).unwrap();
        let y = vgt.fuse_hyper(&mut g, &p, seq).unwrap();
        assert_eq!(g.shape(y), &[8, 16, 32]);
    }

    fn temporal_frames(vgt: &Vgt, store: &ParamStore, cls: &Tensor, frames: usize) -> Tensor {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let cv = g.constant(cls.clone()).unwrap();
        let out = vgt.temporal_decode(&mut g, &p, cv, 1, frames).unwrap();
        g.value(out.frames).clone()
    }

    #[test]
    fn temporal_stack_is_causal() {
        let (vgt, store) = setup(tiny(VgtVariant::Pure, true));
        let d = 4;
        let base = Tensor::randn(&[4, d], 1.0, &mut crate::rng_from_seed(6));
        let out = temporal_frames(&vgt, &store, &base, 4);
        for k in 0..4 {
            let mut moved = base.clone();
            moved.data_mut()[k * d..(k + 1) * d].iter_mut().for_each(|x| *x += 0.9);
            let o2 = temporal_frames(&vgt, &store, &moved, 4);
            for f in 0..4 {
                let diff: Real = (0..d).map(|j| (out.data()[f * d + j] - o2.data()[f * d + j]).abs()).sum();
                if f < k {
                    assert_eq!(diff, 0.0, "frame {f} moved when {k} changed");
                } else {
                    assert!(diff > 0.0);
                }
            }
        }
    }

    #[test]
    fn unmasked_temporal_stack_leaks_future() {
        let (vgt, store) = setup(tiny(VgtVariant::Pure, false));
        let base = Tensor::randn(&[3, 4], 1.0, &mut crate::rng_from_seed(6));
        let out = temporal_frames(&vgt, &store, &base, 3);
        let mut moved = base.clone();
        moved.data_mut()[8] += 1.0;
        let o2 = temporal_frames(&vgt, &store, &moved, 3);
        assert!(out.data()[..4].iter().zip(&o2.data()[..4]).any(|(a, b)| a != b));
    }

    #[test]
    fn masked_counts_equal_unmasked_and_hyper_exceeds_pure() {
        let pure = Vgt::count_trainable(&tiny(VgtVariant::Pure, true)).unwrap();
        let pure_en = Vgt::count_trainable(&tiny(VgtVariant::Pure, false)).unwrap();
        let hyper = Vgt::count_trainable(&tiny(VgtVariant::Hyper, true)).unwrap();
        let hyper_en = Vgt::count_trainable(&tiny(VgtVariant::Hyper, false)).unwrap();
        assert_eq!(pure, pure_en);
        assert_eq!(hyper, hyper_en);
        assert!(hyper > pure);
    }

    #[test]
    fn count_matches_hand_sum() {
        let (d, c, p, n, f) = (4usize, 2usize, 2usize, 4usize, 4usize);
        let tok = c * p * p;
        let embed = tok * d + d;
        let spatial = d + (n + 1) * d;
        let block = 2 * d + 4 * (d * d + d);
        let temporal = (d * d + d) + 2 * d + d + (f + 1) * d;
        let head = (d * 2 * d + 2 * d) + (2 * d * tok + tok);
        let pure = embed + spatial + block + temporal + block + head;
        assert_eq!(Vgt::count_trainable(&tiny(VgtVariant::Pure, true)).unwrap(), pure);
        let hyper = pure + (d * d * 3 * 2 * 2 + d) + (d * d * 27 + d);
        assert_eq!(Vgt::count_trainable(&tiny(VgtVariant::Hyper, true)).unwrap(), hyper);
    }
}
