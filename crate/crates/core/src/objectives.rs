//! Hyper-loss terms and the 1×1-conv noise discriminator.

use crate::nn::{Bound, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// Weights of the MSE, L1 and perceptual terms and of the adversarial term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: Real,
    pub beta: Real,
    pub gamma: Real,
    pub lambda: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.2,
            gamma: 0.1,
            lambda: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn check_pair(g: &Graph, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(format!("{op}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Mean squared difference.
pub fn mse_loss(g: &mut Graph, eps: Var, eps_hat: Var) -> Result<Var> {
    check_pair(g, eps, eps_hat, "mse_loss")?;
    let d = g.sub(eps_hat, eps)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Mean absolute difference; the subgradient at zero is zero.
pub fn l1_loss(g: &mut Graph, eps: Var, eps_hat: Var) -> Result<Var> {
    check_pair(g, eps, eps_hat, "l1_loss")?;
    let d = g.sub(eps_hat, eps)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Fixed, seeded, untrained 3-layer conv feature extractor
/// (`c → 8 → 8 → 8`, 3×3, SiLU) applied per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualNet {
    layers: Vec<(Tensor, Tensor)>,
}

pub const PERCEPTUAL_WIDTH: usize = 8;
pub const PERCEPTUAL_SEED: u64 = 0x5eed_f00d;

impl PerceptualNet {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = crate::rng_from_seed(seed);
        let mut cin = channels;
        let layers = (0..3)
            .map(|_| {
                let w = crate::nn::init_weight(&[PERCEPTUAL_WIDTH, cin, 3, 3], cin * 9, &mut rng);
                let b = Tensor::zeros(&[PERCEPTUAL_WIDTH]);
                cin = PERCEPTUAL_WIDTH;
                (w, b)
            })
            .collect();
        PerceptualNet { layers }
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    /// Feature maps of each layer for `x[B, F, c, h, w]`.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x).to_vec();
        let cin = self.layers[0].0.shape()[1];
        if s.len() != 5 || s[2] != cin {
            return Err(Error::dim(format!("perceptual input {:?}, expected [B, F, {cin}, h, w]", s)));
        }
        let mut h = g.reshape(x, &[s[0] * s[1], s[2], s[3], s[4]])?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b) in &self.layers {
            let wv = g.constant(w.clone())?;
            let bv = g.constant(b.clone())?;
            let y = g.conv2d(h, wv, Some(bv), 1, 1)?;
            h = g.silu(y)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Feature-space squared distance, averaged over the layers.
pub fn perceptual_loss(g: &mut Graph, net: &PerceptualNet, eps: Var, eps_hat: Var) -> Result<Var> {
    check_pair(g, eps, eps_hat, "perceptual_loss")?;
    let fa = net.features(g, eps)?;
    let fb = net.features(g, eps_hat)?;
    let mut total: Option<Var> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let m = mse_loss(g, a, b)?;
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("perceptual net has no layers".into()))?;
    g.scale(total, 1.0 / net.layers.len() as Real)
}

/// The three hyper-loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct HyperLoss {
    pub mse: Var,
    pub l1: Var,
    pub per: Var,
    pub total: Var,
}

/// `α·mse + β·l1 + γ·per`.
pub fn hyper_loss(g: &mut Graph, net: &PerceptualNet, eps: Var, eps_hat: Var, w: &LossWeights) -> Result<HyperLoss> {
    w.validate()?;
    let mse = mse_loss(g, eps, eps_hat)?;
    let l1 = l1_loss(g, eps, eps_hat)?;
    let per = perceptual_loss(g, net, eps, eps_hat)?;
    let a = g.scale(mse, w.alpha)?;
    let b = g.scale(l1, w.beta)?;
    let c = g.scale(per, w.gamma)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(HyperLoss { mse, l1, per, total })
}

/// `hyper + λ·L_g`.
pub fn total_objective(g: &mut Graph, hyper: Var, lg: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let adv = g.scale(lg, w.lambda)?;
    g.add(hyper, adv)
}

/// A single 1×1 convolution from the latent channels to one score map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Discriminator {
    channels: usize,
}

const D: &str = "disc";

impl Discriminator {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("discriminator needs >= 1 channel".into()));
        }
        Ok(Discriminator { channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut crate::Rng) -> Result<()> {
        store.insert(format!("{D}.w"), crate::nn::init_weight(&[1, self.channels], self.channels, rng))?;
        store.insert(format!("{D}.b"), Tensor::zeros(&[1]))
    }

    /// One logit per batch element of `noise[B, F, c, h, w]`: channel
    /// scores averaged over frames and positions.
    pub fn logits(&self, g: &mut Graph, p: &Bound, noise: Var) -> Result<Var> {
        let s = g.shape(noise).to_vec();
        if s.len() != 5 || s[2] != self.channels {
            return Err(Error::dim(format!(
                "discriminator input {:?}, expected [B, F, {}, h, w]",
                s, self.channels
            )));
        }
        let x = g.reshape(noise, &[s[0] * s[1], s[2], s[3], s[4]])?;
        let y = g.conv1x1(x, p.get(&format!("{D}.w"))?)?;
        let y = g.add_channel(y, p.get(&format!("{D}.b"))?)?;
        let y = g.reshape(y, &[s[0], s[1] * s[3] * s[4]])?;
        g.mean_last(y)
    }

    /// `mean softplus(−D(real)) + mean softplus(D(fake))`; callers pass a
    /// detached `fake`.
    pub fn d_loss(&self, g: &mut Graph, p: &Bound, real: Var, fake: Var) -> Result<Var> {
        let lr = self.logits(g, p, real)?;
        let nr = g.scale(lr, -1.0)?;
        let sr = g.softplus(nr)?;
        let sr = g.mean(sr)?;
        let lf = self.logits(g, p, fake)?;
        let sf = g.softplus(lf)?;
        let sf = g.mean(sf)?;
        g.add(sr, sf)
    }

    /// Non-saturating generator term `mean softplus(−D(fake))`.
    pub fn g_loss(&self, g: &mut Graph, p: &Bound, fake: Var) -> Result<Var> {
        let lf = self.logits(g, p, fake)?;
        let n = g.scale(lf, -1.0)?;
        let s = g.softplus(n)?;
        g.mean(s)
    }
}

/// Both adversarial terms on one tape: `d_loss` sees a detached copy of
/// `fake`, `L_g` the attached one.
#[derive(Clone, Copy, Debug)]
pub struct GanLosses {
    pub d_loss: Var,
    pub lg: Var,
}

pub fn gan_losses(g: &mut Graph, disc: &Discriminator, p: &Bound, real: Var, fake: Var) -> Result<GanLosses> {
    check_pair(g, real, fake, "gan_losses")?;
    let detached = g.detach(fake)?;
    let d_loss = disc.d_loss(g, p, real, detached)?;
    let lg = disc.g_loss(g, p, fake)?;
    Ok(GanLosses { d_loss, lg })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(shape: &[usize], seed: u64) -> (Tensor, Tensor) {
        let mut rng = crate::rng_from_seed(seed);
        (Tensor::randn(shape, 1.0, &mut rng), Tensor::randn(shape, 1.0, &mut rng))
    }

    fn eval(f: impl Fn(&mut Graph, Var, Var) -> Result<Var>, a: &Tensor, b: &Tensor) -> Result<Real> {
        let mut g = Graph::new();
        let av = g.constant(a.clone())?;
        let bv = g.constant(b.clone())?;
        let out = f(&mut g, av, bv)?;
        g.value(out).item()
    }

    #[test]
    fn mse_and_l1_arithmetic() {
        let z = Tensor::zeros(&[1, 1, 1, 2, 2]);
        let twos = Tensor::full(&[1, 1, 1, 2, 2], 2.0);
        assert_eq!(eval(mse_loss, &z, &twos).unwrap(), 4.0);
        assert_eq!(eval(mse_loss, &twos, &twos).unwrap(), 0.0);
        let mix = Tensor::new(&[1, 1, 1, 2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        assert_eq!(eval(l1_loss, &z, &mix).unwrap(), 1.0);
        assert_eq!(eval(l1_loss, &mix, &mix).unwrap(), 0.0);
        assert!(matches!(eval(mse_loss, &z, &Tensor::zeros(&[4])), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_matches_two_pass_recomputation() {
        let (a, b) = pair(&[1, 2, 3, 4, 4], 1);
        let diffs: Vec<Real> = a.data().iter().zip(b.data()).map(|(x, y)| y - x).collect();
        let sq: Real = diffs.iter().map(|d| d * d).sum();
        assert_eq!(eval(mse_loss, &a, &b).unwrap(), sq / diffs.len() as Real);
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let a = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let av = g.constant(a.clone()).unwrap();
        let bv = g.param(a).unwrap();
        let l = l1_loss(&mut g, av, bv).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(bv).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn perceptual_properties() {
        let net = PerceptualNet::new(2, PERCEPTUAL_SEED);
        let per = |g: &mut Graph, a: Var, b: Var| perceptual_loss(g, &net, a, b);
        let (a, b) = pair(&[1, 2, 2, 4, 4], 2);
        assert_eq!(eval(per, &a, &a).unwrap(), 0.0);
        let ab = eval(per, &a, &b).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, eval(per, &b, &a).unwrap());
    }

    /// Direct nested-loop convolution, independent of the graph kernels.
    fn features_by_hand(net: &PerceptualNet, x: &Tensor) -> Vec<Vec<Real>> {
        let s = x.shape();
        let (n, mut c, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
        let mut cur = x.data().to_vec();
        let mut out = Vec::new();
        for (wt, bt) in net.layers() {
            let o = wt.shape()[0];
            let mut next = vec![0.0; n * o * h * w];
            for img in 0..n {
                for oc in 0..o {
                    for y in 0..h {
                        for xx in 0..w {
                            let mut acc = bt.data()[oc];
                            for ic in 0..c {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let v = cur[((img * c + ic) * h + iy as usize) * w + ix as usize];
                                        acc += v * wt.data()[((oc * c + ic) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                            next[((img * o + oc) * h + y) * w + xx] = acc / (1.0 + (-acc).exp());
                        }
                    }
                }
            }
            out.push(next.clone());
            cur = next;
            c = o;
        }
        out
    }

    #[test]
    fn perceptual_matches_layerwise_recomputation() {
        let net = PerceptualNet::new(2, 11);
        let (a, b) = pair(&[1, 2, 2, 4, 4], 3);
        let (fa, fb) = (features_by_hand(&net, &a), features_by_hand(&net, &b));
        let expected: Real = fa
            .iter()
            .zip(&fb)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<Real>() / x.len() as Real)
            .sum::<Real>()
            / 3.0;
        let got = eval(|g, x, y| perceptual_loss(g, &net, x, y), &a, &b).unwrap();
        assert!((got - expected).abs() < crate::tensor::TIGHT * expected.max(1.0));
    }

    #[test]
    fn hyper_loss_weighting() {
        let net = PerceptualNet::new(2, PERCEPTUAL_SEED);
        let (a, b) = pair(&[1, 2, 2, 4, 4], 4);
        let run = |w: LossWeights| {
            let mut g = Graph::new();
            let av = g.constant(a.clone()).unwrap();
            let bv = g.constant(b.clone()).unwrap();
            let h = hyper_loss(&mut g, &net, av, bv, &w).unwrap();
            let v = |x| g.value(x).item().unwrap();
            (v(h.mse), v(h.l1), v(h.per), v(h.total))
        };
        let (mse, l1, per, total) = run(LossWeights::default());
        assert!(mse > 0.0 && l1 > 0.0 && per > 0.0);
        assert_eq!(total, 0.5 * mse + 0.2 * l1 + 0.1 * per);

        let only_mse = LossWeights { beta: 0.0, gamma: 0.0, ..LossWeights::default() };
        assert_eq!(run(only_mse).3, 0.5 * mse);
        let ones = LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0, lambda: 0.0 };
        assert!((run(ones).3 - (mse + l1 + per)).abs() < 1e-14);

        let w0 = LossWeights { alpha: 0.2, beta: 0.7, gamma: 0.3, lambda: 0.0 };
        let w1 = LossWeights { alpha: 0.9, beta: 0.1, gamma: 0.6, lambda: 0.0 };
        let mid = LossWeights { alpha: 0.55, beta: 0.4, gamma: 0.45, lambda: 0.0 };
        assert!((run(mid).3 - 0.5 * (run(w0).3 + run(w1).3)).abs() < 1e-12);

        let bad = LossWeights { gamma: -0.1, ..LossWeights::default() };
        let mut g = Graph::new();
        let av = g.constant(a.clone()).unwrap();
        assert!(matches!(hyper_loss(&mut g, &net, av, av, &bad), Err(Error::Config(_))));
    }

    fn disc_store(w: &[Real], b: Real) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("disc.w", Tensor::new(&[1, w.len()], w.to_vec()).unwrap()).unwrap();
        s.insert("disc.b", Tensor::new(&[1], vec![b]).unwrap()).unwrap();
        s
    }

    #[test]
    fn discriminator_arithmetic() {
        let d = Discriminator::new(4).unwrap();
        let mut store = ParamStore::new();
        d.init(&mut store, &mut crate::rng_from_seed(0)).unwrap();
        assert_eq!(store.num_scalars(), 5);

        let ones = Tensor::ones(&[2, 3, 4, 2, 2]);
        let mut g = Graph::new();
        let p = disc_store(&[1.0; 4], 0.25).bind(&mut g, false).unwrap();
        let x = g.constant(ones).unwrap();
        let l = d.logits(&mut g, &p, x).unwrap();
        assert_eq!(g.value(l).data(), &[4.25, 4.25]);
        let bad = g.constant(Tensor::ones(&[1, 1, 3, 2, 2])).unwrap();
        assert!(matches!(d.logits(&mut g, &p, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_discriminator_losses() {
        let d = Discriminator::new(2).unwrap();
        let (a, b) = pair(&[1, 2, 2, 4, 4], 5);
        let mut g = Graph::new();
        let p = disc_store(&[0.0, 0.0], 0.0).bind(&mut g, false).unwrap();
        let (av, bv) = (g.constant(a).unwrap(), g.constant(b).unwrap());
        let logit = d.logits(&mut g, &p, av).unwrap();
        assert_eq!(g.value(logit).data(), &[0.0]);
        let l = gan_losses(&mut g, &d, &p, av, bv).unwrap();
        let ln2 = (2.0 as Real).ln();
        assert!((g.value(l.d_loss).item().unwrap() - 2.0 * ln2).abs() < 1e-15);
        assert!((g.value(l.lg).item().unwrap() - ln2).abs() < 1e-15);
    }

    #[test]
    fn d_loss_falls_as_real_logit_rises() {
        let d = Discriminator::new(1).unwrap();
        let real = Tensor::ones(&[1, 1, 1, 1, 1]);
        let fake = Tensor::zeros(&[1, 1, 1, 1, 1]);
        let mut last = Real::INFINITY;
        for k in [-2.0, -1.0, 0.0, 0.5, 1.0, 3.0] {
            let mut g = Graph::new();
            let p = disc_store(&[k], 0.0).bind(&mut g, false).unwrap();
            let (r, f) = (g.constant(real.clone()).unwrap(), g.constant(fake.clone()).unwrap());
            let v = d.d_loss(&mut g, &p, r, f).unwrap();
            let v = g.value(v).item().unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn detach_discipline() {
        let d = Discriminator::new(2).unwrap();
        let (a, b) = pair(&[1, 2, 2, 4, 4], 6);
        let dstore = disc_store(&[0.3, -0.4], 0.1);

        let mut g = Graph::new();
        let gen = g.param(b.clone()).unwrap();
        let p = dstore.bind(&mut g, true).unwrap();
        let real = g.constant(a.clone()).unwrap();
        let l = gan_losses(&mut g, &d, &p, real, gen).unwrap();
        g.backward(l.d_loss).unwrap();
        assert!(g.grad(gen).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        assert!(g.grad(p.get("disc.w").unwrap()).unwrap().max_abs() > 0.0);

        let mut g = Graph::new();
        let gen = g.param(b).unwrap();
        let p = dstore.bind(&mut g, false).unwrap();
        let lg = d.g_loss(&mut g, &p, gen).unwrap();
        g.backward(lg).unwrap();
        assert!(g.grad(p.get("disc.w").unwrap()).is_none());
        assert!(g.grad(gen).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn total_objective_sums() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::scalar(1.25)).unwrap();
        let lg = g.constant(Tensor::scalar(0.75)).unwrap();
        let w = LossWeights::default();
        let t = total_objective(&mut g, h, lg, &w).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 1.25 + 0.5 * 0.75);
        let w0 = LossWeights { lambda: 0.0, ..w };
        let t0 = total_objective(&mut g, h, lg, &w0).unwrap();
        assert_eq!(g.value(t0).item().unwrap(), 1.25);
    }

    #[test]
    fn discriminator_separates_toy_data() {
        use crate::optim::Adam;
        let d = Discriminator::new(4).unwrap();
        let mut store = ParamStore::new();
        d.init(&mut store, &mut crate::rng_from_seed(1)).unwrap();
        let mut opt = Adam::new(&store, 1e-2);
        let mut rng = crate::rng_from_seed(2);
        let shape = [8, 2, 4, 4, 4];
        for _ in 0..200 {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true).unwrap();
            let real = g.constant(Tensor::randn(&shape, 1.0, &mut rng)).unwrap();
            let fake = g.constant(Tensor::full(&shape, 5.0)).unwrap();
            let l = d.d_loss(&mut g, &p, real, fake).unwrap();
            g.backward(l).unwrap();
            let grads = store.collect_grads(&g, &p).unwrap();
            opt.update(&mut store, &grads).unwrap();
        }
        let mut correct = 0;
        let trials = 200;
        for _ in 0..trials {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false).unwrap();
            let real = g.constant(Tensor::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng)).unwrap();
            let fake = g.constant(Tensor::full(&[1, 2, 4, 4, 4], 5.0)).unwrap();
            let lr = d.logits(&mut g, &p, real).unwrap();
            let lf = d.logits(&mut g, &p, fake).unwrap();
            correct += (g.value(lr).data()[0] > 0.0) as usize + (g.value(lf).data()[0] < 0.0) as usize;
        }
        let acc = correct as Real / (2 * trials) as Real;
        assert!(acc > 0.95, "accuracy {acc}");
    }
}
