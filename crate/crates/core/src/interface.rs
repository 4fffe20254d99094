//! Multi-entity environment contract.
//!
//! A single-entity step/reset interface is extended to lists: one value per
//! entity for observations, actions, rewards and infos, with a single shared
//! `done` flag that ends the episode for everyone at once.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Flat string map attached to every entity on every step.
pub type Info = BTreeMap<String, String>;

/// Info key set on an entity whose observation is the null value.
pub const INFO_EXITED: &str = "exited";
/// Info key carrying the final observation of an auto-reset episode.
pub const INFO_TERMINAL_OBS: &str = "terminal_obs";
/// Info key marking an episode cut short by a time limit rather than a terminal state.
pub const INFO_TRUNCATED: &str = "truncated";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceSpec {
    Discrete { n: u32 },
    Box { shape: Vec<usize>, low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpaceError {
    #[error("discrete space needs n >= 1")]
    EmptyDiscrete,
    #[error("box space needs low < high (got {low} .. {high})")]
    InvertedBounds { low: f64, high: f64 },
    #[error("box shape must be nonempty with all dims >= 1")]
    BadShape,
}

impl SpaceSpec {
    pub fn discrete(n: u32) -> Self {
        SpaceSpec::Discrete { n }
    }

    pub fn boxed(shape: &[usize], low: f64, high: f64) -> Self {
        SpaceSpec::Box { shape: shape.to_vec(), low, high }
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        match self {
            SpaceSpec::Discrete { n } if *n == 0 => Err(SpaceError::EmptyDiscrete),
            SpaceSpec::Discrete { .. } => Ok(()),
            SpaceSpec::Box { shape, low, high } => {
                if shape.is_empty() || shape.contains(&0) {
                    Err(SpaceError::BadShape)
                } else if !(low < high) {
                    Err(SpaceError::InvertedBounds { low: *low, high: *high })
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Number of reals a learner sees for one value of this space.
    pub fn flat_dim(&self) -> usize {
        match self {
            SpaceSpec::Discrete { .. } => 1,
            SpaceSpec::Box { shape, .. } => shape.iter().product(),
        }
    }

    pub fn contains(&self, value: &Value) -> bool {
        match (self, value) {
            (SpaceSpec::Discrete { n }, Value::Discrete(k)) => *k >= 0 && (*k as u64) < *n as u64,
            (SpaceSpec::Box { shape, low, high }, Value::Real(xs)) => {
                xs.len() == shape.iter().product::<usize>()
                    && xs.iter().all(|x| *x >= *low && *x <= *high)
            }
            _ => false,
        }
    }

    /// Canonical in-space value substituted wherever a null is exchanged.
    ///
    /// Discrete spaces use index 0. Box spaces use zero clamped into the
    /// bounds; when zero lies outside `[low, high]` the interval midpoint is
    /// used instead.
    pub fn null_action(&self) -> Value {
        match self {
            SpaceSpec::Discrete { .. } => Value::Discrete(0),
            SpaceSpec::Box { shape, low, high } => {
                let v = if 0.0 < *low || 0.0 > *high { 0.5 * (low + high) } else { 0.0 };
                Value::Real(vec![v; shape.iter().product()])
            }
        }
    }

    /// Uniform sample from the space.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            SpaceSpec::Discrete { n } => Value::Discrete(rng.random_range(0..*n as i64)),
            SpaceSpec::Box { shape, low, high } => {
                let n: usize = shape.iter().product();
                Value::Real((0..n).map(|_| rng.random_range(*low..=*high)).collect())
            }
        }
    }
}

/// One entity's observation or action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Null,
    Discrete(i64),
    /// Row-major flattened tensor.
    Real(Vec<f64>),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    /// Feature vector of length `dim`; null values become zeros.
    pub fn to_features(&self, dim: usize) -> Vec<f64> {
        match self {
            Value::Null => vec![0.0; dim],
            Value::Discrete(k) => {
                let mut v = vec![0.0; dim.max(1)];
                v[0] = *k as f64;
                v
            }
            Value::Real(xs) => xs.clone(),
        }
    }

    /// Sum of components; discrete values count as their index.
    pub fn numeric(&self) -> f64 {
        match self {
            Value::Null => 0.0,
            Value::Discrete(k) => *k as f64,
            Value::Real(xs) => xs.iter().sum(),
        }
    }

    /// Bitwise equality, treating NaN payloads as ordinary bits.
    pub fn bit_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Null, Value::Null) => true,
            (Value::Discrete(a), Value::Discrete(b)) => a == b,
            (Value::Real(a), Value::Real(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    /// Text form stored in infos (`terminal_obs`); exact for every f64.
    pub fn to_info_text(&self) -> String {
        serde_json::to_string(self).expect("value serializes")
    }

    pub fn from_info_text(text: &str) -> Option<Value> {
        serde_json::from_str(text).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpec {
    pub entity_id: usize,
    pub obs_space: SpaceSpec,
    pub act_space: SpaceSpec,
}

/// Checks that entity ids run 0..E-1 without gaps and all spaces are valid.
pub fn validate_entity_specs(specs: &[EntitySpec]) -> Result<(), BatchError> {
    if specs.is_empty() {
        return Err(BatchError::NoEntities);
    }
    for (i, s) in specs.iter().enumerate() {
        if s.entity_id != i {
            return Err(BatchError::EntityIdGap { position: i, found: s.entity_id });
        }
        s.obs_space.validate().map_err(|e| BatchError::InvalidSpace(i, e))?;
        s.act_space.validate().map_err(|e| BatchError::InvalidSpace(i, e))?;
    }
    Ok(())
}

/// Unit of lock-step exchange: per-entity lists plus one shared done flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBatch {
    pub observations: Vec<Value>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub infos: Vec<Info>,
}

impl StepBatch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Bit-exact comparison through the canonical frame.
    pub fn bit_eq(&self, other: &StepBatch) -> bool {
        self.to_frame() == other.to_frame()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BatchError {
    #[error("length mismatch: expected {expected} entities, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("observation of entity {0} is outside its space")]
    SpaceViolation(usize),
    #[error("environment declares no entities")]
    NoEntities,
    #[error("entity ids must be dense: position {position} has id {found}")]
    EntityIdGap { position: usize, found: usize },
    #[error("entity {0}: {1}")]
    InvalidSpace(usize, SpaceError),
}

/// Validates list lengths and observation membership. Null observations are
/// always accepted.
pub fn validate_batch(specs: &[EntitySpec], batch: &StepBatch) -> Result<(), BatchError> {
    let expected = specs.len();
    for got in [batch.observations.len(), batch.rewards.len(), batch.infos.len()] {
        if got != expected {
            return Err(BatchError::LengthMismatch { expected, got });
        }
    }
    for (spec, obs) in specs.iter().zip(&batch.observations) {
        if !obs.is_null() && !spec.obs_space.contains(obs) {
            return Err(BatchError::SpaceViolation(spec.entity_id));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("frame truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown value tag {0}")]
    BadTag(u8),
    #[error("discrete payload {0} is not an integer")]
    NotInteger(f64),
    #[error("invalid utf-8 in info text")]
    BadText,
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
}

const TAG_NULL: u8 = 0;
const TAG_DISCRETE: u8 = 1;
const TAG_REAL: u8 = 2;

impl StepBatch {
    /// Self-describing binary frame.
    ///
    /// Layout (all integers little-endian):
    /// `u32 E`; per entity `u8 tag, u32 ndim, ndim x u32 dims, payload f64s, f64 reward`;
    /// `u8 done`; per entity `u32 npairs` then `u32 len, key, u32 len, value` per pair.
    /// Discrete values are a rank-0 tensor holding one f64; nulls have rank 0 and no payload.
    pub fn to_frame(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * 64);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (i, obs) in self.observations.iter().enumerate() {
            match obs {
                Value::Null => {
                    out.push(TAG_NULL);
                    out.extend_from_slice(&0u32.to_le_bytes());
                }
                Value::Discrete(k) => {
                    out.push(TAG_DISCRETE);
                    out.extend_from_slice(&0u32.to_le_bytes());
                    out.extend_from_slice(&(*k as f64).to_le_bytes());
                }
                Value::Real(xs) => {
                    out.push(TAG_REAL);
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(xs.len() as u32).to_le_bytes());
                    for x in xs {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
            let reward = self.rewards.get(i).copied().unwrap_or(0.0);
            out.extend_from_slice(&reward.to_le_bytes());
        }
        out.push(self.done as u8);
        for i in 0..self.len() {
            let info = self.infos.get(i).cloned().unwrap_or_default();
            out.extend_from_slice(&(info.len() as u32).to_le_bytes());
            for (k, v) in &info {
                for s in [k, v] {
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_frame(bytes: &[u8]) -> Result<StepBatch, FrameError> {
        let mut r = FrameReader { bytes, pos: 0 };
        let n = r.u32()? as usize;
        let mut observations = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        for _ in 0..n {
            let tag = r.u8()?;
            let ndim = r.u32()? as usize;
            let mut count = 1usize;
            for _ in 0..ndim {
                count = count.saturating_mul(r.u32()? as usize);
            }
            let value = match tag {
                TAG_NULL => Value::Null,
                TAG_DISCRETE => {
                    let x = r.f64()?;
                    if x.fract() != 0.0 || !x.is_finite() {
                        return Err(FrameError::NotInteger(x));
                    }
                    Value::Discrete(x as i64)
                }
                TAG_REAL => {
                    let mut xs = Vec::with_capacity(count.min(1 << 20));
                    for _ in 0..count {
                        xs.push(r.f64()?);
                    }
                    Value::Real(xs)
                }
                t => return Err(FrameError::BadTag(t)),
            };
            observations.push(value);
            rewards.push(r.f64()?);
        }
        let done = r.u8()? != 0;
        let mut infos = Vec::with_capacity(n);
        for _ in 0..n {
            let pairs = r.u32()? as usize;
            let mut info = Info::new();
            for _ in 0..pairs {
                let k = r.text()?;
                let v = r.text()?;
                info.insert(k, v);
            }
            infos.push(info);
        }
        if r.pos != bytes.len() {
            return Err(FrameError::Trailing(bytes.len() - r.pos));
        }
        Ok(StepBatch { observations, rewards, done, infos })
    }
}

struct FrameReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl FrameReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], FrameError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FrameError::Truncated(self.pos)),
        }
    }

    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FrameError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<String, FrameError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FrameError::BadText)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec3() -> Vec<EntitySpec> {
        (0..3)
            .map(|i| EntitySpec {
                entity_id: i,
                obs_space: SpaceSpec::boxed(&[2], -1.0, 1.0),
                act_space: SpaceSpec::discrete(3),
            })
            .collect()
    }

    fn batch(obs: Vec<Value>) -> StepBatch {
        let n = obs.len();
        StepBatch { observations: obs, rewards: vec![0.0; n], done: false, infos: vec![Info::new(); n] }
    }

    #[test]
    fn contains_boundaries() {
        let d = SpaceSpec::discrete(3);
        assert!(d.contains(&Value::Discrete(2)));
        assert!(!d.contains(&Value::Discrete(3)));
        assert!(!d.contains(&Value::Discrete(-1)));
        let b = SpaceSpec::boxed(&[2], -1.0, 1.0);
        assert!(b.contains(&Value::Real(vec![0.5, -1.0])));
        assert!(!b.contains(&Value::Real(vec![0.5])));
        assert!(!b.contains(&Value::Real(vec![0.5, 1.01])));
        assert!(!b.contains(&Value::Discrete(0)));
    }

    #[test]
    fn null_actions() {
        assert_eq!(SpaceSpec::discrete(4).null_action(), Value::Discrete(0));
        assert_eq!(SpaceSpec::boxed(&[2], -1.0, 1.0).null_action(), Value::Real(vec![0.0, 0.0]));
        // zero lies below the interval: midpoint of [2, 5]
        assert_eq!(SpaceSpec::boxed(&[1], 2.0, 5.0).null_action(), Value::Real(vec![3.5]));
        assert_eq!(SpaceSpec::boxed(&[1], -5.0, -2.0).null_action(), Value::Real(vec![-3.5]));
        assert_eq!(SpaceSpec::boxed(&[1], 0.0, 5.0).null_action(), Value::Real(vec![0.0]));
    }

    #[test]
    fn space_validation() {
        assert_eq!(SpaceSpec::discrete(0).validate(), Err(SpaceError::EmptyDiscrete));
        assert_eq!(SpaceSpec::boxed(&[], 0.0, 1.0).validate(), Err(SpaceError::BadShape));
        assert_eq!(SpaceSpec::boxed(&[2, 0], 0.0, 1.0).validate(), Err(SpaceError::BadShape));
        assert!(matches!(SpaceSpec::boxed(&[1], 1.0, 1.0).validate(), Err(SpaceError::InvertedBounds { .. })));
    }

    #[test]
    fn validate_batch_cases() {
        let specs = spec3();
        let ok = batch(vec![Value::Real(vec![0.0, 0.0]); 3]);
        assert_eq!(validate_batch(&specs, &ok), Ok(()));

        let short = batch(vec![Value::Real(vec![0.0, 0.0]); 2]);
        assert_eq!(validate_batch(&specs, &short), Err(BatchError::LengthMismatch { expected: 3, got: 2 }));

        let mut bad = ok.clone();
        bad.observations[1] = Value::Real(vec![0.0, 3.0]);
        assert_eq!(validate_batch(&specs, &bad), Err(BatchError::SpaceViolation(1)));

        let mut null = ok.clone();
        null.observations[2] = Value::Null;
        assert_eq!(validate_batch(&specs, &null), Ok(()));

        let mut short_rewards = ok;
        short_rewards.rewards.pop();
        assert_eq!(
            validate_batch(&specs, &short_rewards),
            Err(BatchError::LengthMismatch { expected: 3, got: 2 })
        );
    }

    #[test]
    fn entity_id_gaps_rejected() {
        let mut specs = spec3();
        specs[2].entity_id = 5;
        assert_eq!(validate_entity_specs(&specs), Err(BatchError::EntityIdGap { position: 2, found: 5 }));
    }

    #[test]
    fn truncated_frame_is_an_error() {
        let b = batch(vec![Value::Real(vec![0.25, -0.5]), Value::Discrete(2), Value::Null]);
        let frame = b.to_frame();
        for cut in [0, 3, 10, frame.len() - 1] {
            assert!(StepBatch::from_frame(&frame[..cut]).is_err());
        }
    }

    fn arb_value() -> impl Strategy<Value = super::Value> {
        prop_oneof![
            Just(super::Value::Null),
            any::<i32>().prop_map(|k| super::Value::Discrete(k as i64)),
            proptest::collection::vec(any::<f64>(), 0..6).prop_map(super::Value::Real),
        ]
    }

    proptest! {
        #[test]
        fn frame_round_trip_is_bit_exact(
            entities in proptest::collection::vec(
                (arb_value(), any::<f64>(), proptest::collection::btree_map("[a-z_]{0,8}", "\\PC{0,12}", 0..3)),
                0..5),
            done in any::<bool>(),
        ) {
            let b = StepBatch {
                observations: entities.iter().map(|e| e.0.clone()).collect(),
                rewards: entities.iter().map(|e| e.1).collect(),
                done,
                infos: entities.iter().map(|e| e.2.clone()).collect(),
            };
            let frame = b.to_frame();
            let back = StepBatch::from_frame(&frame).unwrap();
            prop_assert_eq!(back.to_frame(), frame);
            prop_assert_eq!(back.done, done);
            for (x, y) in back.observations.iter().zip(&b.observations) {
                prop_assert!(x.bit_eq(y));
            }
        }

        #[test]
        fn null_action_always_in_space(n in 1u32..50, low in -10.0f64..10.0, width in 0.001f64..10.0, dims in proptest::collection::vec(1usize..4, 1..3)) {
            let d = SpaceSpec::discrete(n);
            prop_assert!(d.contains(&d.null_action()));
            let b = SpaceSpec::boxed(&dims, low, low + width);
            prop_assert!(b.contains(&b.null_action()));
        }

        #[test]
        fn info_text_round_trip(xs in proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..6)) {
            let v = super::Value::Real(xs);
            let back = super::Value::from_info_text(&v.to_info_text()).unwrap();
            prop_assert!(back.bit_eq(&v));
        }
    }
}
