//! Binary checkpoint format.
//!
//! Layout, all integers little-endian: magic `ARNA`, u32 format version,
//! u32-length-prefixed policy name, u32-length-prefixed algorithm tag, u64
//! step count, u32 network count, then per network a u32 layer count and u32
//! layer sizes, then a u64 parameter count followed by the f64 payload.

use std::path::Path;

use thiserror::Error;

use super::mlp::{self, Mlp};

pub const MAGIC: &[u8; 4] = b"ARNA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint algorithm mismatch: expected {expected}, got {got}")]
    AlgorithmTag { expected: String, got: String },
    #[error("checkpoint shape mismatch: {0}")]
    Shape(String),
    #[error("no checkpoint available")]
    Missing,
    #[error("checkpoint io: {0}")]
    Io(String),
}

impl CheckpointError {
    /// Algorithm mismatches are a form of corruption from the caller's view.
    pub fn is_corrupt(&self) -> bool {
        matches!(self, CheckpointError::Corrupt(_) | CheckpointError::AlgorithmTag { .. } | CheckpointError::Shape(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: String,
    pub algorithm: String,
    pub step: u64,
    /// Layer sizes of each stored network; a single-entry list is a raw vector.
    pub nets: Vec<Vec<usize>>,
    pub params: Vec<f64>,
}

fn net_len(sizes: &[usize]) -> usize {
    if sizes.len() == 1 {
        sizes[0]
    } else {
        mlp::param_count(sizes)
    }
}

impl Checkpoint {
    pub fn from_parts(policy: &str, algorithm: &str, step: u64, nets: &[&Mlp], extra: &[&[f64]]) -> Self {
        let mut shapes: Vec<Vec<usize>> = nets.iter().map(|n| n.sizes().to_vec()).collect();
        shapes.extend(extra.iter().map(|v| vec![v.len()]));
        let params = nets.iter().flat_map(|n| n.params.iter().copied()).chain(extra.iter().flat_map(|v| v.iter().copied())).collect();
        Checkpoint { policy: policy.into(), algorithm: algorithm.into(), step, nets: shapes, params }
    }

    /// Checks the tag and shapes, then returns one parameter slice per network.
    pub fn unpack(&self, algorithm: &str, shapes: &[Vec<usize>]) -> Result<Vec<&[f64]>, CheckpointError> {
        if self.algorithm != algorithm {
            return Err(CheckpointError::AlgorithmTag { expected: algorithm.into(), got: self.algorithm.clone() });
        }
        if self.nets != shapes {
            return Err(CheckpointError::Shape(format!("expected {shapes:?}, got {:?}", self.nets)));
        }
        let mut out = Vec::with_capacity(shapes.len());
        let mut rest = &self.params[..];
        for s in shapes {
            let (head, tail) = rest.split_at(net_len(s));
            out.push(head);
            rest = tail;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 8 * self.params.len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for s in [&self.policy, &self.algorithm] {
            b.extend_from_slice(&(s.len() as u32).to_le_bytes());
            b.extend_from_slice(s.as_bytes());
        }
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.nets.len() as u32).to_le_bytes());
        for n in &self.nets {
            b.extend_from_slice(&(n.len() as u32).to_le_bytes());
            for s in n {
                b.extend_from_slice(&(*s as u32).to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            b.extend_from_slice(&p.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Corrupt(format!("unsupported format version {version}")));
        }
        let policy = r.string()?;
        let algorithm = r.string()?;
        let step = r.u64()?;
        let n_nets = r.u32()? as usize;
        let mut nets = Vec::new();
        for _ in 0..n_nets {
            let n_layers = r.u32()? as usize;
            if n_layers == 0 || n_layers > 64 {
                return Err(CheckpointError::Corrupt("bad layer count".into()));
            }
            nets.push((0..n_layers).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?);
        }
        let count = r.u64()? as usize;
        let expected: usize = nets.iter().map(|n| net_len(n)).sum();
        if count != expected {
            return Err(CheckpointError::Corrupt(format!("parameter count {count} does not match layers ({expected})")));
        }
        if r.bytes.len() - r.pos != 8 * count {
            return Err(CheckpointError::Corrupt("payload length mismatch".into()));
        }
        let params = (0..count).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>, _>>()?;
        Ok(Checkpoint { policy, algorithm, step, nets, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Corrupt("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("non-utf8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut rng = seed::rng(&[4]);
        let a = Mlp::init(&[3, 5, 2], &mut rng).unwrap();
        let b = Mlp::init(&[4, 1], &mut rng).unwrap();
        Checkpoint::from_parts("pol", "sac", 17, &[&a, &b], &[&[0.5, -0.25]])
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
        let parts = back.unpack("sac", &[vec![3, 5, 2], vec![4, 1], vec![2]]).unwrap();
        assert_eq!(parts[2], &[0.5, -0.25]);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Corrupt(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn wrong_algorithm_is_rejected() {
        let c = sample();
        let e = c.unpack("ppo", &c.nets).unwrap_err();
        assert!(matches!(e, CheckpointError::AlgorithmTag { .. }));
        assert!(e.is_corrupt());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    proptest! {
        #[test]
        fn arbitrary_params_round_trip(params in prop::collection::vec(any::<f64>(), 7), step in any::<u64>()) {
            let c = Checkpoint { policy: "p".into(), algorithm: "ppo".into(), step, nets: vec![vec![2, 2], vec![1]], params };
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), c.to_bytes());
        }
    }
}
