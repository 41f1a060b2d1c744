//! Horn–Schunck optical flow, the flow consistency index, PSNR and the
//! perturbation-ratio trajectory.

use crate::codec::VideoTensor;
use crate::tensor::Real;
use crate::{Error, Result};

pub const HS_ITERATIONS: usize = 100;
/// Smoothness weight; enters the update denominator squared.
pub const HS_ALPHA: Real = 0.5;
pub const PSNR_CAP: Real = 100.0;

/// Flow between one pair of grayscale frames, row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<Real>,
    pub v: Vec<Real>,
}

impl FlowField {
    pub fn mean_u(&self) -> Real {
        self.u.iter().sum::<Real>() / self.u.len() as Real
    }

    pub fn mean_v(&self) -> Real {
        self.v.iter().sum::<Real>() / self.v.len() as Real
    }
}

struct Frame<'a> {
    data: &'a [Real],
    h: usize,
    w: usize,
}

impl Frame<'_> {
    /// Replicated-border read.
    fn at(&self, y: isize, x: isize) -> Real {
        let yy = y.clamp(0, self.h as isize - 1) as usize;
        let xx = x.clamp(0, self.w as isize - 1) as usize;
        self.data[yy * self.w + xx]
    }
}

fn neighbour_mean(f: &[Real], h: usize, w: usize, y: usize, x: usize) -> Real {
    let at = |dy: isize, dx: isize| {
        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
        f[yy * w + xx]
    };
    (at(-1, 0) + at(1, 0) + at(0, -1) + at(0, 1)) / 6.0 + (at(-1, -1) + at(-1, 1) + at(1, -1) + at(1, 1)) / 12.0
}

/// Horn–Schunck flow from `a` to `b` (`h × w` grayscale, row-major) with
/// [`HS_ITERATIONS`] Jacobi sweeps and smoothness weight [`HS_ALPHA`].
pub fn optical_flow(a: &[Real], b: &[Real], h: usize, w: usize) -> Result<FlowField> {
    if a.len() != h * w || b.len() != h * w || h == 0 || w == 0 {
        return Err(Error::dim(format!("flow frames of {} and {} values for {h}×{w}", a.len(), b.len())));
    }
    let (fa, fb) = (Frame { data: a, h, w }, Frame { data: b, h, w });
    let n = h * w;
    let (mut ex, mut ey, mut et) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (a00, a01, a10, a11) = (fa.at(y, x), fa.at(y, x + 1), fa.at(y + 1, x), fa.at(y + 1, x + 1));
            let (b00, b01, b10, b11) = (fb.at(y, x), fb.at(y, x + 1), fb.at(y + 1, x), fb.at(y + 1, x + 1));
            ex[i] = 0.25 * ((a01 - a00) + (a11 - a10) + (b01 - b00) + (b11 - b10));
            ey[i] = 0.25 * ((a10 - a00) + (a11 - a01) + (b10 - b00) + (b11 - b01));
            et[i] = 0.25 * ((b00 - a00) + (b01 - a01) + (b10 - a10) + (b11 - a11));
        }
    }
    let alpha2 = HS_ALPHA * HS_ALPHA;
    let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (mut nu, mut nv) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..HS_ITERATIONS {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let ub = neighbour_mean(&u, h, w, y, x);
                let vb = neighbour_mean(&v, h, w, y, x);
                let k = (ex[i] * ub + ey[i] * vb + et[i]) / (alpha2 + ex[i] * ex[i] + ey[i] * ey[i]);
                nu[i] = ub - ex[i] * k;
                nv[i] = vb - ey[i] * k;
            }
        }
        std::mem::swap(&mut u, &mut nu);
        std::mem::swap(&mut v, &mut nv);
    }
    Ok(FlowField { height: h, width: w, u, v })
}

/// Flow for every adjacent pair of frames of batch element 0.
pub fn video_flows(video: &VideoTensor) -> Result<Vec<FlowField>> {
    let [_, f, _, h, w] = video.dims();
    let frames: Vec<Vec<Real>> = (0..f).map(|k| video.gray_frame(0, k)).collect();
    frames.windows(2).map(|p| optical_flow(&p[0], &p[1], h, w)).collect()
}

/// Mean over pixels of `‖flow − mean₃ₓ₃(flow)‖₂`.
pub fn flow_inconsistency(flow: &FlowField) -> Real {
    let (h, w) = (flow.height, flow.width);
    let box_mean = |f: &[Real], y: usize, x: usize| {
        let mut s = 0.0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                s += f[yy * w + xx];
            }
        }
        s / 9.0
    };
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let du = flow.u[i] - box_mean(&flow.u, y, x);
            let dv = flow.v[i] - box_mean(&flow.v, y, x);
            total += (du * du + dv * dv).sqrt();
        }
    }
    total / (h * w) as Real
}

/// Flow consistency index: mean local flow deviation over all adjacent
/// frame pairs. Lower is smoother motion.
pub fn fci(video: &VideoTensor) -> Result<Real> {
    if video.frames() < 2 {
        return Err(Error::Contract(format!("FCI needs >= 2 frames, got {}", video.frames())));
    }
    let flows = video_flows(video)?;
    Ok(flows.iter().map(flow_inconsistency).sum::<Real>() / flows.len() as Real)
}

/// Mean squared error between equally shaped videos.
pub fn mse(a: &VideoTensor, b: &VideoTensor) -> Result<Real> {
    let d = a.tensor().sub(b.tensor())?;
    Ok(d.data().iter().map(|x| x * x).sum::<Real>() / d.numel() as Real)
}

/// `10·log10(1/MSE)` for videos in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<Real> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

/// `(step, norm_ratio)` pairs from a training-log CSV.
pub fn ratio_trajectory(log: &str) -> Result<Vec<(u64, Real)>> {
    let mut lines = log.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("empty training log".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Format(format!("training log has no `{name}` column")))
    };
    let (si, ri) = (col("step")?, col("norm_ratio")?);
    lines
        .enumerate()
        .map(|(n, line)| {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("malformed log row {}: `{line}`", n + 2));
            let step = cells.get(si).ok_or_else(bad)?.parse::<u64>().map_err(|_| bad())?;
            let ratio = cells.get(ri).ok_or_else(bad)?.parse::<Real>().map_err(|_| bad())?;
            Ok((step, ratio))
        })
        .collect()
}

/// `step,norm_ratio` CSV for a trajectory.
pub fn ratio_csv(series: &[(u64, Real)]) -> String {
    let mut out = String::from("step,norm_ratio\n");
    for (s, r) in series {
        out.push_str(&format!("{s},{r}\n"));
    }
    out
}
