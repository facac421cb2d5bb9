//! Weighted averaging of worker distributions, exact and compressed.

use crate::compression::{Strategy, TopKPayload};
use crate::dist::{Distribution, Vocab};
use crate::error::{Error, Result};

const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// Per-worker aggregation weights. Validated, never silently renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("weight vector is empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidParameter(format!("invalid weight {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidParameter(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter("weight vector is empty".into()));
        }
        Self::new(vec![1.0 / m as f64; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-worker top-K sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKProfile(Vec<usize>);

impl TopKProfile {
    pub fn new(ks: Vec<usize>, vocab: Vocab) -> Result<Self> {
        if ks.is_empty() {
            return Err(Error::InvalidParameter("top-K profile is empty".into()));
        }
        for &k in &ks {
            if k == 0 || k > vocab.size() {
                return Err(Error::KOutOfRange {
                    k,
                    vocab_size: vocab.size(),
                });
            }
        }
        Ok(Self(ks))
    }

    /// Every worker transmits its whole distribution.
    pub fn lossless(m: usize, vocab: Vocab) -> Self {
        Self(vec![vocab.size(); m])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// p̄(x) = Σ_i w_i p_i(x), summed in ascending worker order.
pub fn aggregate(dists: &[Distribution], weights: &WeightVector) -> Result<Distribution> {
    if dists.is_empty() {
        return Err(Error::InvalidParameter("no distributions to aggregate".into()));
    }
    if dists.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            left: dists.len(),
            right: weights.len(),
        });
    }
    let n = dists[0].len();
    if let Some(bad) = dists.iter().find(|d| d.len() != n) {
        return Err(Error::DimensionMismatch {
            left: n,
            right: bad.len(),
        });
    }
    let mut out = vec![0.0; n];
    for (d, &w) in dists.iter().zip(weights.as_slice()) {
        for (o, p) in out.iter_mut().zip(d.probs()) {
            *o += w * p;
        }
    }
    Distribution::new(out)
}

/// Reconstructs every payload with `strategy`, then aggregates.
pub fn aggregate_compressed(
    payloads: &[TopKPayload],
    weights: &WeightVector,
    strategy: Strategy,
) -> Result<Distribution> {
    if let Some(first) = payloads.first() {
        if let Some(bad) = payloads.iter().find(|p| p.vocab_size() != first.vocab_size()) {
            return Err(Error::DimensionMismatch {
                left: first.vocab_size(),
                right: bad.vocab_size(),
            });
        }
    }
    let reconstructed = payloads
        .iter()
        .map(|p| strategy.reconstruct(p))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&reconstructed, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::truncate_topk;
    use crate::compression::Strategy;
    use proptest::prelude::*;
    use proptest::strategy::Strategy as _;

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    fn close(a: &Distribution, b: &[f64], tol: f64) -> bool {
        a.probs().iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn aggregate_examples() {
        let single = d(&[0.1, 0.2, 0.7]);
        assert_eq!(
            aggregate(&[single.clone()], &WeightVector::new(vec![1.0]).unwrap()).unwrap(),
            single
        );

        let half = WeightVector::uniform(2).unwrap();
        let out = aggregate(&[d(&[0.6, 0.4]), d(&[0.2, 0.8])], &half).unwrap();
        assert!(close(&out, &[0.4, 0.6], 1e-15));

        let out = aggregate(&[d(&[0.5, 0.3, 0.15, 0.05]), d(&[0.1, 0.2, 0.3, 0.4])], &half).unwrap();
        assert!(close(&out, &[0.3, 0.25, 0.225, 0.225], 1e-15));
    }

    #[test]
    fn compressed_examples() {
        let half = WeightVector::uniform(2).unwrap();
        let p1 = truncate_topk(&d(&[0.5, 0.3, 0.15, 0.05]), 2).unwrap();
        let p2 = truncate_topk(&d(&[0.1, 0.2, 0.3, 0.4]), 2).unwrap();
        let payloads = [p1, p2];

        let renorm = aggregate_compressed(&payloads, &half, Strategy::Renormalized).unwrap();
        assert!(close(&renorm, &[0.3125, 0.1875, 3.0 / 14.0, 2.0 / 7.0], 1e-12));

        let resid = aggregate_compressed(&payloads, &half, Strategy::ResidualUniform).unwrap();
        // reconstructions [0.5, 0.3, 0.1, 0.1] and [0.15, 0.15, 0.3, 0.4]:
        // the second worker keeps tokens 3 and 2, so its tail is tokens 0 and 1
        assert!(close(&resid, &[0.325, 0.225, 0.2, 0.25], 1e-12));

        let a = d(&[0.5, 0.3, 0.15, 0.05]);
        let b = d(&[0.1, 0.2, 0.3, 0.4]);
        let lossless = [truncate_topk(&a, 4).unwrap(), truncate_topk(&b, 4).unwrap()];
        let exact = aggregate(&[a, b], &half).unwrap();
        for s in Strategy::ALL {
            assert_eq!(aggregate_compressed(&lossless, &half, s).unwrap(), exact);
        }
    }

    #[test]
    fn weights_are_validated() {
        assert!(WeightVector::new(vec![]).is_err());
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
        assert!(WeightVector::new(vec![1.5, -0.5]).is_err());
        assert!(WeightVector::new(vec![0.0, 1.0]).is_ok());
        let vocab = Vocab::new(4).unwrap();
        assert!(TopKProfile::new(vec![1, 4], vocab).is_ok());
        assert!(TopKProfile::new(vec![0], vocab).is_err());
        assert!(TopKProfile::new(vec![5], vocab).is_err());
    }

    #[test]
    fn mismatches_are_errors() {
        let half = WeightVector::uniform(2).unwrap();
        assert!(aggregate(&[d(&[0.5, 0.5])], &half).is_err());
        assert!(aggregate(&[d(&[0.5, 0.5]), d(&[0.2, 0.3, 0.5])], &half).is_err());
        let p1 = truncate_topk(&d(&[0.5, 0.5]), 1).unwrap();
        let p2 = truncate_topk(&d(&[0.2, 0.3, 0.5]), 1).unwrap();
        assert!(aggregate_compressed(&[p1, p2], &half, Strategy::Renormalized).is_err());
    }

    fn instance() -> impl proptest::strategy::Strategy<Value = (Vec<Distribution>, WeightVector, Vec<usize>)> {
        (1usize..5, 2usize..24).prop_flat_map(|(m, n)| {
            (
                prop::collection::vec(prop::collection::vec(0.001f64..1.0, n), m),
                prop::collection::vec(0.0f64..1.0, m),
                prop::collection::vec(1usize..=n, m),
            )
                .prop_map(|(raw, w, ks)| {
                    let dists = raw
                        .into_iter()
                        .map(|v| {
                            let s: f64 = v.iter().sum();
                            Distribution::new(v.iter().map(|x| x / s).collect()).unwrap()
                        })
                        .collect();
                    let ws: f64 = w.iter().sum::<f64>() + 1e-9;
                    let mut w: Vec<f64> = w.iter().map(|x| (x + 1e-9 / w.len() as f64) / ws).collect();
                    let s: f64 = w.iter().sum();
                    w.iter_mut().for_each(|x| *x /= s);
                    (dists, WeightVector::new(w).unwrap(), ks)
                })
        })
    }

    proptest! {
        #[test]
        fn aggregate_matches_componentwise_definition((dists, w, _) in instance()) {
            let out = aggregate(&dists, &w).unwrap();
            for x in 0..out.len() {
                let expected: f64 = dists.iter().zip(w.as_slice()).map(|(d, wi)| wi * d.probs()[x]).sum();
                prop_assert!((out.probs()[x] - expected).abs() <= 1e-12);
            }
        }

        #[test]
        fn compressed_equals_aggregate_of_reconstructions((dists, w, ks) in instance()) {
            let payloads: Vec<_> = dists.iter().zip(&ks).map(|(d, &k)| truncate_topk(d, k).unwrap()).collect();
            for s in Strategy::ALL {
                let via = aggregate_compressed(&payloads, &w, s).unwrap();
                let recon: Vec<_> = payloads.iter().map(|p| s.reconstruct(p).unwrap()).collect();
                prop_assert_eq!(&via, &aggregate(&recon, &w).unwrap());
                prop_assert!((via.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}
