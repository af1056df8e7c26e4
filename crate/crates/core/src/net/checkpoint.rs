//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic            8 bytes  "MFCVCKPT"
//! version          u32
//! d                u32
//! n_layers         u32      number of entries in layer_sizes
//! layer_sizes      u32 × n_layers
//! activation       u8       0 = silu, 1 = identity
//! init_gain        f64
//! step             u64
//! seed             u64
//! ema_decay        f64      0 when no EMA is stored
//! n_params         u64
//! params           f64 × n_params
//! has_ema          u8
//! ema_shadow       f64 × n_params        (only if has_ema = 1)
//! optimizer        u8       0 = none, 1 = adam, 2 = sgd
//! adam_step        u64                   (adam only)
//! adam_m           f64 × n_params        (adam only)
//! adam_v           f64 × n_params        (adam only)
//! ```
//!
//! Floats are stored by bit pattern, so a save/load round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, Architecture, EmaState, MlpModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFCVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer moments carried across a resume.
#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerSnapshot {
    None,
    Adam { step: u64, m: Vec<f64>, v: Vec<f64> },
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub ema: Option<EmaState>,
    pub optimizer: OptimizerSnapshot,
    pub step: u64,
    pub seed: u64,
    pub init_gain: f64,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let arch = self.model.arch();
        let n = arch.n_params();
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        put_u32(w, arch.d() as u32)?;
        put_u32(w, arch.layer_sizes().len() as u32)?;
        for &s in arch.layer_sizes() {
            put_u32(w, s as u32)?;
        }
        w.write_all(&[arch.activation().tag()])?;
        put_f64(w, self.init_gain)?;
        put_u64(w, self.step)?;
        put_u64(w, self.seed)?;
        put_f64(w, self.ema.as_ref().map_or(0.0, |e| e.decay()))?;
        put_u64(w, n as u64)?;
        put_f64s(w, self.model.params())?;
        match &self.ema {
            Some(e) => {
                w.write_all(&[1])?;
                put_f64s(w, e.shadow())?;
            }
            None => w.write_all(&[0])?,
        }
        match &self.optimizer {
            OptimizerSnapshot::None => w.write_all(&[0])?,
            OptimizerSnapshot::Adam { step, m, v } => {
                if m.len() != n || v.len() != n {
                    return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
                }
                w.write_all(&[1])?;
                put_u64(w, *step)?;
                put_f64s(w, m)?;
                put_f64s(w, v)?;
            }
            OptimizerSnapshot::Sgd => w.write_all(&[2])?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let d = get_u32(r)? as usize;
        let n_layers = get_u32(r)? as usize;
        if n_layers > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let sizes = (0..n_layers)
            .map(|_| get_u32(r).map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_tag(get_u8(r)?)
            .ok_or_else(|| Error::Checkpoint("unknown activation tag".into()))?;
        let arch = Architecture::from_layer_sizes(sizes, activation)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if arch.d() != d {
            return Err(Error::Checkpoint("header d disagrees with layer sizes".into()));
        }
        let init_gain = get_f64(r)?;
        let step = get_u64(r)?;
        let seed = get_u64(r)?;
        let decay = get_f64(r)?;
        let n = get_u64(r)? as usize;
        if n != arch.n_params() {
            return Err(Error::Checkpoint(format!(
                "parameter count {n} does not match architecture ({})",
                arch.n_params()
            )));
        }
        let params = get_f64s(r, n)?;
        let model = MlpModel::from_params(arch, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ema = match get_u8(r)? {
            0 => None,
            1 => Some(EmaState::from_parts(get_f64s(r, n)?, decay)),
            t => return Err(Error::Checkpoint(format!("bad EMA flag {t}"))),
        };
        let optimizer = match get_u8(r)? {
            0 => OptimizerSnapshot::None,
            1 => {
                let step = get_u64(r)?;
                let m = get_f64s(r, n)?;
                let v = get_f64s(r, n)?;
                OptimizerSnapshot::Adam { step, m, v }
            }
            2 => OptimizerSnapshot::Sgd,
            t => return Err(Error::Checkpoint(format!("unknown optimizer tag {t}"))),
        };
        Ok(Self {
            model,
            ema,
            optimizer,
            step,
            seed,
            init_gain,
        })
    }

    /// Writes atomically: a sibling temp file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let arch = Architecture::new(2, &[6, 5], Activation::Silu).unwrap();
        let model = MlpModel::init(arch, 1.3, &mut ChaCha8Rng::seed_from_u64(1));
        let n = model.n_params();
        let mut ema = EmaState::new(model.params(), 0.999).unwrap();
        ema.update(&vec![0.1; n]).unwrap();
        Checkpoint {
            ema: Some(ema),
            optimizer: OptimizerSnapshot::Adam {
                step: 17,
                m: (0..n).map(|i| i as f64 * 1e-3).collect(),
                v: (0..n).map(|i| (i as f64).sqrt()).collect(),
            },
            model,
            step: 17,
            seed: 42,
            init_gain: 1.3,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(&mut buf.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_truncation() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
