//! Gradient averaging across the members of one policy group.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Flattened parameters of one policy at a given version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub policy: String,
    pub version: u64,
    pub values: Vec<f64>,
}

/// One member's gradient contribution for a collective step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradVector {
    pub policy: String,
    pub version: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CollectiveError {
    #[error("collective called with no contributions")]
    Empty,
    #[error("gradient length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u64, got: u64 },
    #[error("policy mismatch: expected {expected}, got {got}")]
    PolicyMismatch { expected: String, got: String },
}

/// Element-wise mean of all contributions.
///
/// Members are summed in lexicographic order of their gradient vectors, so
/// the result is bit-identical under any permutation of the members.
pub fn allreduce_mean(contribs: &[GradVector]) -> Result<GradVector, CollectiveError> {
    let first = contribs.first().ok_or(CollectiveError::Empty)?;
    for c in &contribs[1..] {
        if c.values.len() != first.values.len() {
            return Err(CollectiveError::LengthMismatch { expected: first.values.len(), got: c.values.len() });
        }
        if c.version != first.version {
            return Err(CollectiveError::VersionMismatch { expected: first.version, got: c.version });
        }
        if c.policy != first.policy {
            return Err(CollectiveError::PolicyMismatch { expected: first.policy.clone(), got: c.policy.clone() });
        }
    }
    let mut order: Vec<&[f64]> = contribs.iter().map(|c| c.values.as_slice()).collect();
    order.sort_by(|a, b| a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let mut sum = order[0].to_vec();
    for v in &order[1..] {
        for (s, x) in sum.iter_mut().zip(*v) {
            *s += x;
        }
    }
    let n = contribs.len() as f64;
    let values = sum.into_iter().map(|s| s / n).collect();
    Ok(GradVector { policy: first.policy.clone(), version: first.version, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(values: Vec<f64>) -> GradVector {
        GradVector { policy: "p".into(), version: 3, values }
    }

    #[test]
    fn mean_of_two() {
        let out = allreduce_mean(&[g(vec![1.0, 4.0]), g(vec![3.0, -2.0])]).unwrap();
        assert_eq!(out.values, vec![2.0, 1.0]);
    }

    #[test]
    fn single_member_is_identity() {
        let v = vec![0.1, -0.0, 1e-300, 7.25];
        let out = allreduce_mean(&[g(v.clone())]).unwrap();
        assert!(out.values.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_mismatches() {
        assert_eq!(allreduce_mean(&[]), Err(CollectiveError::Empty));
        assert_eq!(
            allreduce_mean(&[g(vec![1.0]), g(vec![1.0, 2.0])]),
            Err(CollectiveError::LengthMismatch { expected: 1, got: 2 })
        );
        let mut other = g(vec![1.0]);
        other.version = 4;
        assert_eq!(
            allreduce_mean(&[g(vec![1.0]), other]),
            Err(CollectiveError::VersionMismatch { expected: 3, got: 4 })
        );
    }

    proptest! {
        #[test]
        fn permutation_invariant_bitwise(
            rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 5), 1..9),
            seed in any::<u64>(),
        ) {
            let contribs: Vec<_> = rows.into_iter().map(g).collect();
            let mut shuffled = contribs.clone();
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            let a = allreduce_mean(&contribs).unwrap();
            let b = allreduce_mean(&shuffled).unwrap();
            prop_assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
            // within rounding of the naive mean
            for (k, v) in a.values.iter().enumerate() {
                let naive: f64 = contribs.iter().map(|c| c.values[k]).sum::<f64>() / contribs.len() as f64;
                prop_assert!((v - naive).abs() <= 1e-6 * (1.0 + naive.abs()));
            }
        }
    }
}
