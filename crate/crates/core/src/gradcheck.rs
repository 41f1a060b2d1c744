//! Central finite-difference checks of the autodiff tape.
//!
//! A function under test maps input tensors to an output of any shape; it
//! is reduced to a scalar by a fixed random weighting, and every input
//! element's analytic gradient is compared with
//! `(L(x + h) − L(x − h)) / 2h`. The error measure is
//! `|a − n| / max(|a|, |n|, REL_FLOOR)`.

use crate::codec::{patchify_var, PatchGrid};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::nn::{Bound, ParamStore};
use crate::objectives::{self, Discriminator, LossWeights, PerceptualNet};
use crate::tensor::{causal_pattern, Graph, Real, Tensor, Var};
use crate::vgt::{mmsa, Vgt, VgtConfig, VgtVariant};
use crate::{Result, Rng};

pub const STEP: Real = 1e-5;
pub const REL_FLOOR: Real = 1e-5;
pub const TOLERANCE: Real = 1e-4;
/// Tighter bound used for the linear discriminator kernel.
pub const DISCRIMINATOR_TOLERANCE: Real = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: Real,
    pub tolerance: Real,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;
type StoreBuild<'a> = dyn Fn(&mut Graph, &Bound, &[Var]) -> Result<Var> + 'a;

fn weighted_loss(f: &Build<'_>, inputs: &[Tensor], weights: &mut Option<Tensor>, trainable: bool) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let w = weights
        .get_or_insert_with(|| Tensor::randn(g.shape(out), 1.0, &mut crate::rng_from_seed(0x9c)))
        .clone();
    let wv = g.constant(w)?;
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss))
}

/// Checks every element of every input.
pub fn check(name: &str, inputs: &[Tensor], tolerance: Real, f: &Build<'_>) -> Result<GradCheck> {
    let mut weights = None;
    let (mut g, vars, loss) = weighted_loss(f, inputs, &mut weights, true)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |xs: &[Tensor], w: &mut Option<Tensor>| -> Result<Real> {
        let (g, _, loss) = weighted_loss(f, xs, w, false)?;
        g.value(loss).item()
    };

    let mut worst: Real = 0.0;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs, &mut weights)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs, &mut weights)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let an = a.data()[j];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        checked,
        max_rel_err: worst,
        tolerance,
    })
}

/// Checks a parameterised stack: every parameter of `store` plus `extra`
/// inputs are perturbed. `f` receives the binding and the extra vars.
pub fn check_store(
    name: &str,
    store: &ParamStore,
    extra: &[Tensor],
    tolerance: Real,
    f: &StoreBuild<'_>,
) -> Result<GradCheck> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend_from_slice(extra);
    let k = names.len();
    check(name, &inputs, tolerance, &|g, vars| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(vars[..k].iter().copied()));
        f(g, &bound, &vars[k..])
    })
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    randn(shape, rng).map(|x| if x >= 0.0 { x + 0.2 } else { x - 0.2 })
}

/// Replaces zero-initialised tensors so every gradient path is live.
fn liven(store: &mut ParamStore, rng: &mut Rng) {
    for (_, t) in store.iter_mut() {
        if t.data().iter().all(|&x| x == 0.0) {
            *t = Tensor::randn(t.shape(), 0.3, rng);
        }
    }
}

fn tiny_vgt(variant: VgtVariant) -> VgtConfig {
    VgtConfig {
        variant,
        spatial_layers: 1,
        temporal_layers: 1,
        heads: 2,
        width: 4,
        patch: 2,
        masked: true,
        latent_channels: 2,
        latent_height: 4,
        latent_width: 4,
        max_frames: 2,
    }
}

fn vgt_setup(variant: VgtVariant, rng: &mut Rng) -> Result<(Vgt, ParamStore)> {
    let vgt = Vgt::new(tiny_vgt(variant))?;
    let mut store = ParamStore::new();
    vgt.init(&mut store, rng)?;
    liven(&mut store, rng);
    Ok((vgt, store))
}

/// Primitive op checks.
pub fn op_suite() -> Result<Vec<GradCheck>> {
    let mut rng = crate::rng_from_seed(41);
    let r = &mut rng;
    let tol = TOLERANCE;
    let mut out = Vec::new();
    let a23 = randn(&[2, 3], r);
    let b23 = randn(&[2, 3], r);
    out.push(check("add", &[a23.clone(), b23.clone()], tol, &|g, v| g.add(v[0], v[1]))?);
    out.push(check("sub", &[a23.clone(), b23.clone()], tol, &|g, v| g.sub(v[0], v[1]))?);
    out.push(check("mul", &[a23.clone(), b23.clone()], tol, &|g, v| g.mul(v[0], v[1]))?);
    out.push(check("scale", &[a23.clone()], tol, &|g, v| g.scale(v[0], -1.7))?);
    out.push(check("add_scalar", &[a23.clone()], tol, &|g, v| g.add_scalar(v[0], 0.3))?);
    out.push(check("square", &[a23.clone()], tol, &|g, v| g.square(v[0]))?);
    out.push(check("abs", &[away_from_zero(&[2, 3], r)], tol, &|g, v| g.abs(v[0]))?);
    out.push(check("silu", &[a23.clone()], tol, &|g, v| g.silu(v[0]))?);
    out.push(check("softplus", &[a23.clone()], tol, &|g, v| g.softplus(v[0]))?);
    out.push(check("sum", &[a23.clone()], tol, &|g, v| g.sum(v[0]))?);
    out.push(check("mean", &[a23.clone()], tol, &|g, v| g.mean(v[0]))?);
    out.push(check("mean_last", &[a23.clone()], tol, &|g, v| g.mean_last(v[0]))?);
    out.push(check("matmul", &[a23.clone(), randn(&[3, 4], r)], tol, &|g, v| g.matmul(v[0], v[1]))?);
    out.push(check("bmm", &[randn(&[2, 2, 3], r), randn(&[2, 3, 2], r)], tol, &|g, v| g.bmm(v[0], v[1]))?);
    out.push(check("reshape", &[a23.clone()], tol, &|g, v| g.reshape(v[0], &[3, 2]))?);
    out.push(check("permute", &[randn(&[2, 3, 2], r)], tol, &|g, v| g.permute(v[0], &[2, 0, 1]))?);
    out.push(check("concat", &[a23.clone(), randn(&[2, 2], r)], tol, &|g, v| g.concat(&[v[0], v[1]], 1))?);
    out.push(check("narrow", &[randn(&[3, 4], r)], tol, &|g, v| g.narrow(v[0], 1, 1, 2))?);
    out.push(check("expand_leading", &[randn(&[3], r)], tol, &|g, v| g.expand_leading(v[0], &[2, 2]))?);
    out.push(check("softmax", &[randn(&[2, 4], r)], tol, &|g, v| g.softmax_last(v[0]))?);
    out.push(check("layer_norm", &[randn(&[3, 4], r), randn(&[4], r), randn(&[4], r)], tol, &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    })?);
    out.push(check("add_channel", &[randn(&[2, 3, 2, 2], r), randn(&[3], r)], tol, &|g, v| g.add_channel(v[0], v[1]))?);
    out.push(check("mul_frame", &[randn(&[2, 3, 4], r), randn(&[2, 4], r)], tol, &|g, v| g.mul_frame(v[0], v[1]))?);
    out.push(check("select_row", &[randn(&[4, 3], r)], tol, &|g, v| g.select_row(v[0], 2))?);
    out.push(check(
        "conv3d",
        &[randn(&[1, 2, 3, 4, 4], r), randn(&[2, 2, 3, 3, 3], r), randn(&[2], r)],
        tol,
        &|g, v| g.conv3d(v[0], v[1], Some(v[2]), [1, 2, 1], [1, 1, 0]),
    )?);
    out.push(check(
        "conv2d_stride2",
        &[randn(&[2, 2, 6, 6], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)],
        tol,
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
    )?);
    out.push(check("conv1x1", &[randn(&[2, 3, 2, 2], r), randn(&[2, 3], r)], tol, &|g, v| g.conv1x1(v[0], v[1]))?);
    out.push(check(
        "conv_transpose3d",
        &[randn(&[1, 2, 3, 1, 1], r), randn(&[2, 3, 3, 2, 2], r), randn(&[3], r)],
        tol,
        &|g, v| g.conv_transpose3d(v[0], v[1], Some(v[2]), [1, 2, 2], [1, 0, 0]),
    )?);
    out.push(check("upsample2d", &[randn(&[1, 2, 2, 3], r)], tol, &|g, v| g.upsample2d(v[0], 2))?);
    out.push(check("linear", &[randn(&[3, 4], r), randn(&[4, 2], r), randn(&[2], r)], tol, &|g, v| {
        g.linear(v[0], v[1], v[2])
    })?);
    Ok(out)
}

/// Composite stack and loss checks.
pub fn composite_suite() -> Result<Vec<GradCheck>> {
    let mut rng = crate::rng_from_seed(43);
    let r = &mut rng;
    let tol = TOLERANCE;
    let mut out = Vec::new();
    let z = randn(&[1, 2, 2, 4, 4], r);

    let (pure, pure_p) = vgt_setup(VgtVariant::Pure, r)?;
    out.push(check_store("mmsa_masked", &pure_p, &[randn(&[2, 3, 4], r)], tol, &|g, p, x| {
        mmsa(g, p, "vgt.spatial.0", x[0], Some(&causal_pattern(3)), 2)
    })?);
    out.push(check_store("spatial_decoder", &pure_p, &[z.clone()], tol, &|g, p, x| {
        let (cls, patches) = pure.spatial_decode(g, p, x[0], 3)?;
        let flat = g.reshape(patches, &[2 * 4, 4])?;
        g.concat(&[cls, flat], 0)
    })?);
    out.push(check_store("temporal_decoder", &pure_p, &[randn(&[2, 4], r)], tol, &|g, p, x| {
        Ok(pure.temporal_decode(g, p, x[0], 1, 2)?.sequence)
    })?);
    out.push(check("fuse_pure", &[randn(&[2, 4, 4], r), randn(&[2, 4], r)], tol, &|g, v| {
        crate::vgt::fuse_pure(g, v[0], v[1])
    })?);
    out.push(check_store("vgt_pure", &pure_p, &[z.clone()], tol, &|g, p, x| pure.forward(g, p, x[0], 3))?);

    let (hyper, hyper_p) = vgt_setup(VgtVariant::Hyper, r)?;
    out.push(check_store("fuse_hyper", &hyper_p, &[randn(&[1, 3, 4], r)], tol, &|g, p, x| {
        hyper.fuse_hyper(g, p, x[0])
    })?);
    out.push(check_store("vgt_hyper", &hyper_p, &[z.clone()], tol, &|g, p, x| hyper.forward(g, p, x[0], 5))?);

    let grid = PatchGrid::for_latent(2, 4, 4, 2)?;
    out.push(check("patchify", &[z.clone()], tol, &|g, v| patchify_var(g, v[0], &grid))?);

    let den = Denoiser::new(DenoiserConfig {
        latent_channels: 2,
        base_channels: 3,
        mid_channels: 4,
        steps: 10,
        prompts: 3,
    })?;
    let mut den_p = ParamStore::new();
    den.init(&mut den_p, r)?;
    liven(&mut den_p, r);
    out.push(check_store("denoiser", &den_p, &[z.clone()], tol, &|g, p, x| den.forward(g, p, x[0], 4, 1))?);

    let disc = Discriminator::new(2)?;
    let mut disc_p = ParamStore::new();
    disc.init(&mut disc_p, r)?;
    liven(&mut disc_p, r);
    out.push(check_store("discriminator", &disc_p, &[z.clone()], DISCRIMINATOR_TOLERANCE, &|g, p, x| {
        disc.logits(g, p, x[0])
    })?);
    let fake = randn(&[1, 2, 2, 4, 4], r);
    out.push(check_store("d_loss", &disc_p, &[z.clone(), fake.clone()], tol, &|g, p, x| disc.d_loss(g, p, x[0], x[1]))?);
    out.push(check_store("g_loss", &disc_p, &[fake.clone()], tol, &|g, p, x| disc.g_loss(g, p, x[0]))?);

    let eps = randn(&[1, 2, 2, 4, 4], r);
    let shifted = eps.zip_map(&away_from_zero(eps.shape(), r), |a, d| a + d)?;
    let net = PerceptualNet::new(2, objectives::PERCEPTUAL_SEED);
    out.push(check("mse_loss", &[eps.clone(), shifted.clone()], tol, &|g, v| objectives::mse_loss(g, v[0], v[1]))?);
    out.push(check("l1_loss", &[eps.clone(), shifted.clone()], tol, &|g, v| objectives::l1_loss(g, v[0], v[1]))?);
    out.push(check("perceptual_loss", &[eps.clone(), shifted.clone()], tol, &|g, v| {
        objectives::perceptual_loss(g, &net, v[0], v[1])
    })?);
    let w = LossWeights::default();
    out.push(check("hyper_loss", &[eps.clone(), shifted.clone()], tol, &|g, v| {
        Ok(objectives::hyper_loss(g, &net, v[0], v[1], &w)?.total)
    })?);
    out.push(check_store("total_objective", &disc_p, &[eps, shifted], tol, &|g, p, v| {
        let h = objectives::hyper_loss(g, &net, v[0], v[1], &w)?;
        let lg = disc.g_loss(g, p, v[1])?;
        objectives::total_objective(g, h.total, lg, &w)
    })?);
    Ok(out)
}

/// Every op and composite check.
pub fn run_suite() -> Result<Vec<GradCheck>> {
    let mut all = op_suite()?;
    all.extend(composite_suite()?);
    Ok(all)
}

#[cfg(all(test, not(feature = "single-precision")))]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // A detached path has zero analytic gradient but a real slope.
        let x = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        let res = check("detached", &[x], TOLERANCE, &|g, v| {
            let d = g.detach(v[0])?;
            g.square(d)
        })
        .unwrap();
        assert!(!res.passed());
    }

    #[test]
    fn linear_function_passes() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let res = check("scale", &[x], TOLERANCE, &|g, v| g.scale(v[0], 3.0)).unwrap();
        assert!(res.passed(), "{res:?}");
        assert_eq!(res.checked, 3);
    }
}
