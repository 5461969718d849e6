//! Dynamic routing by agreement between primary and class capsules.
//!
//! Coupling coefficients are recomputed from zero logits on every forward
//! pass and never stored as parameters; only the prediction matrices `W` are
//! trainable.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// Standard deviation of the normal initialization of the prediction matrices.
pub const WEIGHT_INIT_STD: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RoutingConfig {
    pub iterations: usize,
    /// Stop gradients through the predictions in the agreement update of
    /// non-final iterations.
    #[cfg_attr(feature = "serde", serde(default))]
    pub detach_agreement: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            detach_agreement: false,
        }
    }
}

/// Result of [`route`]: class capsules plus the coupling coefficients used in
/// every iteration (`[b, n_in, n_out]` each).
#[derive(Debug, Clone)]
pub struct Routed {
    pub output: Var,
    pub couplings: Vec<Var>,
}

/// Routes `pcs: [b, n_in, in_dim]` through `weights: [n_in, n_out, out_dim, in_dim]`.
///
/// `uhat = W u`; then `iterations` rounds of `c = softmax_j(b)`,
/// `s_j = sum_i c_ij uhat_j|i`, `v_j = squash(s_j)`, `b_ij += uhat_j|i . v_j`,
/// starting from `b = 0`. Returns `v: [b, n_out, out_dim]`.
pub fn route<T: Element>(
    tape: &mut Tape<T>,
    pcs: Var,
    weights: Var,
    iterations: usize,
    detach_agreement: bool,
) -> Result<Routed> {
    if iterations == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let uhat = tape.capsule_predict(pcs, weights)?;
    let &[b, n_in, n_out, _] = tape.shape(uhat) else {
        unreachable!("capsule_predict yields rank 4");
    };
    let mut logits = tape.constant(Tensor::zeros(&[b, n_in, n_out]));
    let mut couplings = Vec::with_capacity(iterations);
    let mut output = None;
    for it in 0..iterations {
        let c = tape.softmax(logits, 2)?;
        couplings.push(c);
        let s = tape.weighted_sum(c, uhat)?;
        let v = tape.squash(s);
        output = Some(v);
        if it + 1 < iterations {
            let pred = if detach_agreement { tape.detach(uhat) } else { uhat };
            let agree = tape.agreement(pred, v)?;
            logits = tape.add(logits, agree)?;
        }
    }
    Ok(Routed {
        output: output.expect("iterations >= 1"),
        couplings,
    })
}

/// Index of the longest capsule per sample. Ties go to the lowest index.
pub fn classify<T: Element>(caps: &Tensor<T>) -> Result<Vec<usize>> {
    let &[_, n, d] = caps.shape() else {
        return Err(Error::InvalidArgument(format!(
            "expected [batch, n_out, dim], got {:?}",
            caps.shape()
        )));
    };
    Ok(caps
        .data()
        .chunks(n * d)
        .map(|sample| {
            let mut best = 0;
            let mut best_len = T::neg_infinity();
            for (j, cap) in sample.chunks(d).enumerate() {
                let len = cap.iter().map(|&x| x * x).sum::<T>();
                if len > best_len {
                    best = j;
                    best_len = len;
                }
            }
            best
        })
        .collect())
}

/// Class-capsule layer: trainable prediction matrices plus routing settings.
#[derive(Debug, Clone)]
pub struct DigitCaps {
    pub weights: ParamId,
    pub n_in: usize,
    pub n_out: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub config: RoutingConfig,
}

impl DigitCaps {
    pub fn declare(
        builder: &mut ParamBuilder,
        n_in: usize,
        in_dim: usize,
        n_out: usize,
        out_dim: usize,
        config: RoutingConfig,
    ) -> Result<Self> {
        if config.iterations == 0 {
            return Err(Error::Config("routing needs at least one iteration".into()));
        }
        let weights = builder.add(
            "routing.weights",
            &[n_in, n_out, out_dim, in_dim],
            Init::Normal { std: WEIGHT_INIT_STD },
        );
        Ok(Self {
            weights,
            n_in,
            n_out,
            in_dim,
            out_dim,
            config,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, pcs: Var) -> Result<Routed> {
        route(tape, pcs, p[self.weights], self.config.iterations, self.config.detach_agreement)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_picks_longest() {
        let caps = Tensor::<f32>::from_f64(&[1, 3, 1], &[0.1, 0.9, 0.2]).unwrap();
        assert_eq!(classify(&caps).unwrap(), [1]);
    }

    #[test]
    fn classify_ties_go_to_lowest_index() {
        let caps = Tensor::<f32>::from_f64(&[2, 3, 2], &[0.3, 0.4, 0.5, 0.0, 0.0, -0.5, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]).unwrap();
        assert_eq!(classify(&caps).unwrap(), [0, 0]);
    }

    #[test]
    fn single_output_capsule_has_unit_couplings() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::from_f64(&[1, 3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, 0.0]).unwrap());
        let w = tape.constant(Tensor::full(&[3, 1, 2, 2], 0.5));
        let routed = route(&mut tape, u, w, 3, false).unwrap();
        for c in routed.couplings {
            assert!(tape.data(c).iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn first_iteration_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::full(&[2, 5, 3], 0.2));
        let w = tape.constant(Tensor::full(&[5, 4, 2, 3], 0.1));
        let routed = route(&mut tape, u, w, 2, false).unwrap();
        assert!(tape.data(routed.couplings[0]).iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_iterations_rejected() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::full(&[1, 1, 1], 0.2));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 0.1));
        assert!(route(&mut tape, u, w, 0, false).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::full(&[1, 2, 3], 0.2));
        let w = tape.constant(Tensor::full(&[2, 2, 4, 8], 0.1));
        assert!(matches!(route(&mut tape, u, w, 3, false), Err(Error::ShapeMismatch { .. })));
    }
}
