//! Self-describing binary parameter dumps.
//!
//! Layout (little endian): magic `WMARLCK1`, format version `u32`, learner
//! tag, resolved config text, SHA-256 of that text, then every store as tag,
//! entry count and `(name, rank, dims, f64 data)` entries. Strings are
//! `u32` length plus UTF-8 bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"WMARLCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub learner: String,
    pub config_text: String,
    pub stores: Vec<ParamStore>,
}

pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn hash(&self) -> [u8; 32] {
        config_hash(&self.config_text)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.learner);
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&self.hash());
        out.extend_from_slice(&(self.stores.len() as u32).to_le_bytes());
        for store in &self.stores {
            put_str(&mut out, store.tag());
            out.extend_from_slice(&(store.len() as u32).to_le_bytes());
            for (name, p) in store.iter() {
                put_str(&mut out, name);
                let shape = p.value.shape();
                out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                for &d in shape {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in p.value.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let learner = r.string()?;
        let config_text = r.string()?;
        let hash = r.take(32)?;
        if hash != config_hash(&config_text) {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let n_stores = r.u32()?;
        let mut stores = Vec::new();
        for _ in 0..n_stores {
            let mut store = ParamStore::new(r.string()?);
            for _ in 0..r.u32()? {
                let name = r.string()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                store.insert(name, Tensor::new(shape, data)?);
            }
            stores.push(store);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            learner,
            config_text,
            stores,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn store(&self, tag: &str) -> Result<&ParamStore> {
        self.stores
            .iter()
            .find(|s| s.tag() == tag)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint has no {tag:?} parameters")))
    }
}

/// Copies checkpoint values into `dst`, which must have exactly the same
/// names and shapes.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    let names_match = dst.len() == src.len() && dst.iter().zip(src.iter()).all(|((a, _), (b, _))| a == b);
    if !names_match {
        return Err(Error::Incompatible(format!("parameter names of {:?} differ", dst.tag())));
    }
    for ((name, d), (_, s)) in dst.iter().zip(src.iter()) {
        if d.value.shape() != s.value.shape() {
            return Err(Error::Incompatible(format!(
                "{name}: checkpoint shape {:?}, model expects {:?}",
                s.value.shape(),
                d.value.shape()
            )));
        }
    }
    dst.copy_values_from(src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::new("agent");
        a.init_affine("fc", 3, 2, &mut rng);
        a.value_mut("fc.b").data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let mut m = ParamStore::new("mixer");
        m.insert("s", Tensor::scalar(-0.0));
        Checkpoint {
            learner: "qmix".into(),
            config_text: "learner = qmix\nseed = 1\n".into(),
            stores: vec![a, m],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.learner, ck.learner);
        assert_eq!(back.config_text, ck.config_text);
        for (x, y) in back.stores.iter().zip(&ck.stores) {
            assert_eq!(x.tag(), y.tag());
            for ((n1, p1), (n2, p2)) in x.iter().zip(y.iter()) {
                assert_eq!(n1, n2);
                assert_eq!(p1.value.shape(), p2.value.shape());
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&p1.value), bits(&p2.value));
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        // First byte of the config text.
        bad[8 + 4 + 4 + 4 + 4] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn restore_checks_shapes() {
        let ck = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut same = ParamStore::new("agent");
        same.init_affine("fc", 3, 2, &mut rng);
        restore_into(&mut same, ck.store("agent").unwrap()).unwrap();
        assert_eq!(same.value("fc.w"), ck.stores[0].value("fc.w"));
        let mut wider = ParamStore::new("agent");
        wider.init_affine("fc", 4, 2, &mut rng);
        assert!(matches!(
            restore_into(&mut wider, ck.store("agent").unwrap()),
            Err(Error::Incompatible(_))
        ));
        assert!(ck.store("critic").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
