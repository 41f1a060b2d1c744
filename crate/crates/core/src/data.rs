//! Synthetic scenes, the `.vten` tensor format and binary PPM frames.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::codec::VideoTensor;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

pub const BACKGROUND: Real = 0.1;
pub const FOREGROUND: Real = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    /// A square translating at a fixed velocity; must stay in frame.
    MovingSquare,
    /// A disk moving at a fixed velocity, reflecting at the borders.
    BouncingBall,
    /// A seeded smooth pattern repeated in every frame.
    Static,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving_square" => Ok(SceneKind::MovingSquare),
            "bouncing_ball" => Ok(SceneKind::BouncingBall),
            "static" => Ok(SceneKind::Static),
            other => Err(Error::Config(format!("unknown scene kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Pixels per frame, `(dx, dy)`.
    pub velocity: (i64, i64),
    /// Square side or ball diameter in pixels.
    pub size: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            kind: SceneKind::MovingSquare,
            frames: 8,
            height: 32,
            width: 32,
            channels: 1,
            velocity: (1, 0),
            size: 8,
            seed: 0,
        }
    }
}

/// Deterministic synthetic video for `spec`, shape `1×F×C×H×W`.
pub fn gen_video(spec: &SceneSpec) -> Result<VideoTensor> {
    let (f, h, w, c) = (spec.frames, spec.height, spec.width, spec.channels);
    if f == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::Config("scene extents must be positive".into()));
    }
    if spec.kind != SceneKind::Static && (spec.size == 0 || spec.size > h || spec.size > w) {
        return Err(Error::Config(format!("object of size {} does not fit a {h}×{w} frame", spec.size)));
    }
    let mut rng = crate::rng_from_seed(spec.seed);
    let mut planes: Vec<Vec<Real>> = Vec::with_capacity(f);
    match spec.kind {
        SceneKind::MovingSquare => {
            let s = spec.size as i64;
            let (dx, dy) = spec.velocity;
            let span = |v: i64, extent: usize| -> Result<(i64, i64)> {
                let travel = v * (f as i64 - 1);
                let lo = (-travel).max(0);
                let hi = extent as i64 - s - travel.max(0);
                if hi < lo {
                    return Err(Error::Config(format!(
                        "a {s}-pixel square moving {v} px/frame leaves a {extent}-pixel frame within {f} frames"
                    )));
                }
                Ok((lo, hi))
            };
            let (x_lo, x_hi) = span(dx, w)?;
            let (y_lo, y_hi) = span(dy, h)?;
            let x0 = rng.random_range(x_lo..=x_hi);
            let y0 = rng.random_range(y_lo..=y_hi);
            for k in 0..f as i64 {
                let (x, y) = (x0 + dx * k, y0 + dy * k);
                planes.push(
                    (0..h * w)
                        .map(|i| {
                            let (py, px) = ((i / w) as i64, (i % w) as i64);
                            if px >= x && px < x + s && py >= y && py < y + s {
                                FOREGROUND
                            } else {
                                BACKGROUND
                            }
                        })
                        .collect(),
                );
            }
        }
        SceneKind::BouncingBall => {
            let r = spec.size as Real / 2.0;
            let (mut x, mut y) = (
                rng.random_range(r..=(w as Real - r)),
                rng.random_range(r..=(h as Real - r)),
            );
            let (mut vx, mut vy) = (spec.velocity.0 as Real, spec.velocity.1 as Real);
            for _ in 0..f {
                planes.push(
                    (0..h * w)
                        .map(|i| {
                            let (py, px) = ((i / w) as Real + 0.5, (i % w) as Real + 0.5);
                            if (px - x).powi(2) + (py - y).powi(2) <= r * r {
                                FOREGROUND
                            } else {
                                BACKGROUND
                            }
                        })
                        .collect(),
                );
                (x, vx) = reflect(x + vx, vx, r, w as Real - r);
                (y, vy) = reflect(y + vy, vy, r, h as Real - r);
            }
        }
        SceneKind::Static => {
            let blobs: Vec<(Real, Real, Real, Real)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.0..w as Real),
                        rng.random_range(0.0..h as Real),
                        rng.random_range(2.0..(w.min(h) as Real / 3.0).max(2.5)),
                        rng.random_range(0.3..0.8),
                    )
                })
                .collect();
            let plane: Vec<Real> = (0..h * w)
                .map(|i| {
                    let (py, px) = ((i / w) as Real, (i % w) as Real);
                    let v: Real = blobs
                        .iter()
                        .map(|(cx, cy, s, a)| a * (-((px - cx).powi(2) + (py - cy).powi(2)) / (2.0 * s * s)).exp())
                        .sum();
                    (BACKGROUND + v).clamp(0.0, 1.0)
                })
                .collect();
            planes.resize(f, plane);
        }
    }
    let mut data = Vec::with_capacity(f * c * h * w);
    for p in &planes {
        for _ in 0..c {
            data.extend_from_slice(p);
        }
    }
    VideoTensor::new(Tensor::new(&[1, f, c, h, w], data)?)
}

/// Reflects a coordinate into `[lo, hi]`, flipping the velocity on contact.
fn reflect(mut p: Real, mut v: Real, lo: Real, hi: Real) -> (Real, Real) {
    if hi <= lo {
        return (lo, 0.0);
    }
    while p < lo || p > hi {
        if p < lo {
            p = 2.0 * lo - p;
        } else {
            p = 2.0 * hi - p;
        }
        v = -v;
    }
    (p, v)
}

const VTEN_MAGIC: &[u8; 4] = b"VTEN";
const VTEN_VERSION: u16 = 1;

/// Serialises a tensor as `.vten`: magic, version, rank, `u32` extents and
/// little-endian `f32` payload.
pub fn encode_vten(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u16::try_from(t.rank()).map_err(|_| Error::Format("rank too large for .vten".into()))?;
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(VTEN_MAGIC);
    out.extend_from_slice(&VTEN_VERSION.to_le_bytes());
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large for .vten")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_vten(bytes: &[u8]) -> Result<Tensor> {
    let short = || Error::Format("truncated .vten data".into());
    if bytes.len() < 8 || &bytes[..4] != VTEN_MAGIC {
        return Err(Error::Format("missing VTEN magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VTEN_VERSION {
        return Err(Error::Format(format!("unsupported .vten version {version}")));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let mut pos = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes.get(pos..pos + 4).ok_or_else(short)?;
        shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let payload = bytes.get(pos..).ok_or_else(short)?;
    if payload.len() != 4 * n {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", payload.len(), 4 * n)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_vten(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_vten(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_vten(path: &Path) -> Result<Tensor> {
    decode_vten(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_video(path: &Path) -> Result<VideoTensor> {
    VideoTensor::new(read_vten(path)?)
}

fn quantise(x: Real) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes batch element 0 as `frame_0000.ppm`, … (binary P6). One-channel
/// videos are written as gray RGB; other channel counts use the first
/// three channels (the last repeated if fewer).
pub fn export_frames(video: &VideoTensor, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [_, f, c, h, w] = video.dims();
    let d = video.tensor().data();
    let plane = h * w;
    let mut paths = Vec::with_capacity(f);
    for k in 0..f {
        let path = dir.join(format!("frame_{k:04}.ppm"));
        let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
        for p in 0..plane {
            for ch in 0..3 {
                buf.push(quantise(d[(k * c + ch.min(c - 1)) * plane + p]));
            }
        }
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Parses one binary PPM into `(width, height, rgb bytes)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("PPM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary P6 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit maxval 255 is supported"));
    }
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != 3 * w * h {
        return Err(bad("raster size mismatch"));
    }
    Ok((w, h, data.to_vec()))
}

/// Reads `frame_0000.ppm`, … from `dir` into a `1×F×channels×H×W` video
/// (`channels` is 1 for channel-mean gray or 3 for RGB).
pub fn import_frames(dir: &Path, channels: usize) -> Result<VideoTensor> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("PPM import supports 1 or 3 channels, not {channels}")));
    }
    let mut frames = Vec::new();
    let mut dims = None;
    for k in 0.. {
        let path = dir.join(format!("frame_{k:04}.ppm"));
        if !path.exists() {
            break;
        }
        let (w, h, rgb) = parse_ppm(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        if *dims.get_or_insert((w, h)) != (w, h) {
            return Err(Error::Format(format!("{} has a different size", path.display())));
        }
        let plane = w * h;
        let mut frame = vec![0.0; channels * plane];
        for p in 0..plane {
            let px = &rgb[3 * p..3 * p + 3];
            if channels == 1 {
                frame[p] = px.iter().map(|&b| b as Real).sum::<Real>() / (3.0 * 255.0);
            } else {
                for ch in 0..3 {
                    frame[ch * plane + p] = px[ch] as Real / 255.0;
                }
            }
        }
        frames.push(frame);
    }
    let (w, h) = dims.ok_or_else(|| Error::Format(format!("no frame_0000.ppm in {}", dir.display())))?;
    VideoTensor::new(Tensor::new(&[1, frames.len(), channels, h, w], frames.concat())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_square_shifts_by_velocity() {
        let v = gen_video(&SceneSpec::default()).unwrap();
        let f0 = v.gray_frame(0, 0);
        for k in 1..8 {
            let fk = v.gray_frame(0, k);
            for y in 0..32 {
                for x in k..32 {
                    assert_eq!(fk[y * 32 + x], f0[y * 32 + x - k]);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_seeded() {
        let spec = SceneSpec { kind: SceneKind::BouncingBall, velocity: (3, 2), ..SceneSpec::default() };
        assert_eq!(gen_video(&spec).unwrap(), gen_video(&spec).unwrap());
        let other = SceneSpec { seed: 9, ..spec.clone() };
        assert_ne!(gen_video(&spec).unwrap(), gen_video(&other).unwrap());
    }

    #[test]
    fn static_frames_are_identical() {
        let v = gen_video(&SceneSpec { kind: SceneKind::Static, channels: 3, ..SceneSpec::default() }).unwrap();
        let f0 = v.gray_frame(0, 0);
        assert!((1..8).all(|k| v.gray_frame(0, k) == f0));
    }

    #[test]
    fn invalid_scenes_are_config_errors() {
        let big = SceneSpec { size: 40, ..SceneSpec::default() };
        assert!(matches!(gen_video(&big), Err(Error::Config(_))));
        let fast = SceneSpec { velocity: (5, 0), ..SceneSpec::default() };
        assert!(matches!(gen_video(&fast), Err(Error::Config(_))));
        assert!("spiral".parse::<SceneKind>().is_err());
    }

    #[test]
    fn ball_stays_inside_frame() {
        let spec = SceneSpec {
            kind: SceneKind::BouncingBall,
            frames: 40,
            velocity: (5, -7),
            size: 6,
            ..SceneSpec::default()
        };
        let v = gen_video(&spec).unwrap();
        for k in 0..40 {
            let lit = v.gray_frame(0, k).iter().filter(|&&x| x == FOREGROUND).count();
            assert!(lit >= 20, "frame {k} shows only {lit} ball pixels");
        }
    }

    #[test]
    fn vten_rejects_corruption() {
        let t = Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let bytes = encode_vten(&t).unwrap();
        assert_eq!(decode_vten(&bytes).unwrap(), t);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_vten(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_vten(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }
}
