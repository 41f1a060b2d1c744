//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "APLA" | u16 version | u8 scalar bytes | u64 config hash
//! u64 step | u64 d_updates | u64 g_updates
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! u32 len | config text
//! u64 generator adam step | u64 discriminator adam step
//! u32 blob count | blobs
//! ```
//!
//! Each blob is `u16 name len | name | u8 rank | u32 extents | scalars`.
//! Blob names are `gen/…`, `gen.adam.m/…`, `gen.adam.v/…`, `disc/…`,
//! `disc.adam.m/…`, `disc.adam.v/…`, in parameter order.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result, Rng};

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"APLA";
const SCALAR_BYTES: u8 = std::mem::size_of::<Real>() as u8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        use rand::SeedableRng;
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Everything needed to resume training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub d_updates: u64,
    pub g_updates: u64,
    pub rng: RngState,
    pub gen: ParamStore,
    pub gen_adam: AdamState,
    pub disc: ParamStore,
    pub disc_adam: AdamState,
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice has N bytes"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn blob(&mut self) -> Result<(String, Tensor)> {
        let n = self.u16()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("blob name is not UTF-8".into()))?;
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = self.take(count * SCALAR_BYTES as usize)?;
        let data = raw
            .chunks_exact(SCALAR_BYTES as usize)
            .map(|c| Real::from_le_bytes(c.try_into().expect("chunk has scalar width")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(SCALAR_BYTES);
        out.extend_from_slice(&self.config.hash().to_le_bytes());
        for x in [self.step, self.d_updates, self.g_updates] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.gen_adam.step.to_le_bytes());
        out.extend_from_slice(&self.disc_adam.step.to_le_bytes());

        let mut blobs = Vec::new();
        let mut count = 0u32;
        for (prefix, store, adam) in [("gen", &self.gen, &self.gen_adam), ("disc", &self.disc, &self.disc_adam)] {
            for (name, t) in store.iter() {
                put_blob(&mut blobs, &format!("{prefix}/{name}"), t);
                count += 1;
            }
            for (kind, moments) in [("m", &adam.m), ("v", &adam.v)] {
                for ((name, _), t) in store.iter().zip(moments) {
                    put_blob(&mut blobs, &format!("{prefix}.adam.{kind}/{name}"), t);
                    count += 1;
                }
            }
        }
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&blobs);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (missing APLA magic)".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let width = r.u8()?;
        if width != SCALAR_BYTES {
            return Err(Error::Format(format!(
                "checkpoint stores {width}-byte scalars, this build uses {SCALAR_BYTES}"
            )));
        }
        let hash = r.u64()?;
        let (step, d_updates, g_updates) = (r.u64()?, r.u64()?, r.u64()?);
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("config text is not UTF-8".into()))?;
        let config = TrainConfig::parse(text)?;
        if config.hash() != hash {
            return Err(Error::Format("config hash does not match the stored config".into()));
        }
        let (gen_step, disc_step) = (r.u64()?, r.u64()?);

        let count = r.u32()?;
        let mut sections: [(ParamStore, Vec<Tensor>, Vec<Tensor>); 2] = Default::default();
        for _ in 0..count {
            let (full, t) = r.blob()?;
            let (section, name) = full
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("blob `{full}` has no section prefix")))?;
            match section {
                "gen" => sections[0].0.insert(name, t)?,
                "gen.adam.m" => sections[0].1.push(t),
                "gen.adam.v" => sections[0].2.push(t),
                "disc" => sections[1].0.insert(name, t)?,
                "disc.adam.m" => sections[1].1.push(t),
                "disc.adam.v" => sections[1].2.push(t),
                other => return Err(Error::Format(format!("unknown blob section `{other}`"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        let [(gen, gm, gv), (disc, dm, dv)] = sections;
        Ok(Checkpoint {
            config,
            step,
            d_updates,
            g_updates,
            rng,
            gen,
            gen_adam: AdamState { step: gen_step, m: gm, v: gv },
            disc,
            disc_adam: AdamState { step: disc_step, m: dm, v: dv },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Hex SHA-256 of the serialised checkpoint.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::tiny_config;
    use crate::trainer::Trainer;

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = Trainer::new(tiny_config()).unwrap().checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let bytes = Trainer::new(tiny_config()).unwrap().checkpoint().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
        let mut hash = bytes;
        hash[7] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&hash), Err(Error::Format(_))));
    }

    #[test]
    fn rng_state_restores_the_stream() {
        use rand::Rng as _;
        let mut rng = crate::rng_from_seed(5);
        rng.set_stream(3);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let mut back = state.restore();
        let a: Vec<u32> = (0..5).map(|_| rng.random()).collect();
        let b: Vec<u32> = (0..5).map(|_| back.random()).collect();
        assert_eq!(a, b);
    }
}
