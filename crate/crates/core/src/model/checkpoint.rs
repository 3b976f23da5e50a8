//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `CNPK`, `u32` version, `u32` record count,
//! then per record a `u16` name length, the UTF-8 name, a `u8` rank, `u32`
//! extents and `f32` values. Integer metadata is stored as `u32` bit
//! patterns inside `f32` slots.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CNPK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    records: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self { version: VERSION, records: Vec::new() }
    }

    pub fn records(&self) -> &[(String, Tensor<f32>)] {
        &self.records
    }

    /// Adds or replaces a record.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        let name = name.into();
        match self.records.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.records.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no record {name:?}")))
    }

    /// Stores a `u64` as two `u32` words (low, high).
    pub fn insert_u64(&mut self, name: impl Into<String>, value: u64) {
        let words = [value as u32, (value >> 32) as u32].map(f32::from_bits);
        self.insert(name, Tensor::new([2], words.to_vec()).expect("two words"));
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let t = self.require(name)?;
        match t.data() {
            [lo, hi] => Ok(lo.to_bits() as u64 | ((hi.to_bits() as u64) << 32)),
            _ => Err(Error::Format(format!("record {name:?} is not a u64"))),
        }
    }

    /// Copies every parameter of `store` under its own name.
    pub fn insert_store<S: Scalar>(&mut self, prefix: &str, store: &ParamStore<S>) {
        for (_, name, t) in store.iter() {
            self.insert(format!("{prefix}{name}"), t.cast());
        }
    }

    /// Overwrites every parameter of `store` from `<prefix><name>`; shapes must match.
    pub fn load_into<S: Scalar>(&self, prefix: &str, store: &mut ParamStore<S>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.require(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Format(format!(
                    "record {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.cast())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.records.len()).map_err(|_| too_big("record count"))?.to_le_bytes());
        for (name, t) in &self.records {
            let len = u16::try_from(name.len()).map_err(|_| too_big("record name"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.rank()).map_err(|_| too_big("rank"))?);
            for &e in t.shape() {
                out.extend_from_slice(&u32::try_from(e).map_err(|_| too_big("extent"))?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a CNPK file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Self { version, records: Vec::new() };
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("record {name:?} extents {shape:?} exceed file size")))?;
            let data = r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if ck.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate record {name:?}")));
            }
            ck.records.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn too_big(what: &str) -> Error {
    Error::Format(format!("{what} does not fit the checkpoint format"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", Tensor::randn([3, 4], 1.0, &mut rng));
        store.add("b", Tensor::new([2], vec![-0.0, f32::MIN_POSITIVE / 2.0]).unwrap());
        store.add("s", Tensor::scalar(1.5));
        let mut ck = Checkpoint::new();
        ck.insert_store("", &store);
        ck.insert_u64("meta.step", u64::MAX - 7);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.get_u64("meta.step").unwrap(), u64::MAX - 7);
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            let shape = other.get(id).shape().to_vec();
            other.set(id, Tensor::zeros(shape)).unwrap();
        }
        back.load_into("", &mut other).unwrap();
        assert!(other.bit_eq(&store));
    }

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.insert("x", Tensor::new([1], vec![1.0f32]).unwrap());
        let b = ck.to_bytes().unwrap();
        assert_eq!(&b[..4], b"CNPK");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(&b[12..14], &[1, 0]);
        assert_eq!(b[14], b'x');
        assert_eq!(b[15], 1);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.insert("x", Tensor::new([2], vec![1.0f32, 2.0]).unwrap());
        let b = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::zeros([3]));
        assert!(ck.load_into("", &mut store).is_err());
    }
}
