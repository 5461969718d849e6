//! Margin loss, reconstruction regularizer and the hard-training margins.

use alloc::format;
use alloc::vec;

use crate::autograd::{Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Round {
    #[default]
    Standard,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    /// Multiplies the per-image sum of squared pixel errors.
    pub recon_weight: f64,
    /// Margins used by the second (hard) round.
    pub hard_m_plus: f64,
    pub hard_m_minus: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub round: Round,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
            recon_weight: 0.0005,
            hard_m_plus: 0.95,
            hard_m_minus: 0.05,
            round: Round::Standard,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !(in_unit(self.m_plus) && in_unit(self.m_minus) && self.m_plus > self.m_minus) {
            return Err(Error::Config(format!(
                "margins need 0 < m_minus < m_plus < 1, got m_plus={} m_minus={}",
                self.m_plus, self.m_minus
            )));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda {} outside (0, 1]", self.lambda)));
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return Err(Error::Config(format!("recon_weight {} invalid", self.recon_weight)));
        }
        let hard_ok = in_unit(self.hard_m_plus)
            && in_unit(self.hard_m_minus)
            && self.hard_m_plus > self.m_plus
            && self.hard_m_minus < self.m_minus;
        if !hard_ok {
            return Err(Error::Config(
                "hard-round margins must be strictly tighter than the standard ones".into(),
            ));
        }
        Ok(())
    }
}

/// Second-round parameters: the hard margins become the active ones.
pub fn hard_round_params(p: &LossParams) -> LossParams {
    LossParams {
        m_plus: p.hard_m_plus,
        m_minus: p.hard_m_minus,
        round: Round::Hard,
        ..*p
    }
}

/// `T max(0, m+ - |v|)^2 + lambda (1 - T) max(0, |v| - m-)^2` for one class.
pub fn margin_term(length: f64, present: bool, p: &LossParams) -> f64 {
    if present {
        let d = (p.m_plus - length).max(0.0);
        d * d
    } else {
        let d = (length - p.m_minus).max(0.0);
        p.lambda * d * d
    }
}

fn one_hot<T: Element>(targets: &[usize], n: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); targets.len() * n];
    for (row, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(Error::IndexOutOfRange { index: t, bound: n });
        }
        data[row * n + t] = T::one();
    }
    Tensor::new(&[targets.len(), n], data)
}

/// Margin loss on capsule lengths `[b, n_out]`: summed over classes, averaged
/// over the batch.
pub fn margin_loss<T: Element>(tape: &mut Tape<T>, lengths: Var, targets: &[usize], p: &LossParams) -> Result<Var> {
    let &[b, n] = tape.shape(lengths) else {
        return Err(Error::InvalidArgument(format!(
            "margin loss expects [batch, classes], got {:?}",
            tape.shape(lengths)
        )));
    };
    if targets.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} targets for a batch of {b}",
            targets.len()
        )));
    }
    let present = one_hot::<T>(targets, n)?;
    let mut absent = present.clone();
    absent.data_mut().iter_mut().for_each(|x| *x = T::one() - *x);
    let present = tape.constant(present);
    let absent = tape.constant(absent);

    let neg = tape.neg(lengths);
    let up = tape.add_scalar(neg, T::from_f64(p.m_plus));
    let up = tape.relu(up);
    let up = tape.square(up);
    let up = tape.mul(up, present)?;

    let down = tape.add_scalar(lengths, T::from_f64(-p.m_minus));
    let down = tape.relu(down);
    let down = tape.square(down);
    let down = tape.mul(down, absent)?;
    let down = tape.mul_scalar(down, T::from_f64(p.lambda));

    let per_class = tape.add(up, down)?;
    let total = tape.sum(per_class);
    Ok(tape.mul_scalar(total, T::from_f64(1.0 / b as f64)))
}

/// `recon_weight * sum((recon - image)^2) / batch`.
pub fn reconstruction_loss<T: Element>(tape: &mut Tape<T>, recon: Var, image: Var, p: &LossParams) -> Result<Var> {
    if tape.shape(recon) != tape.shape(image) {
        return Err(Error::shape("reconstruction_loss", tape.shape(recon), tape.shape(image)));
    }
    let b = tape.shape(recon)[0];
    let diff = tape.sub(recon, image)?;
    let sq = tape.square(diff);
    let sse = tape.sum(sq);
    Ok(tape.mul_scalar(sse, T::from_f64(p.recon_weight / b as f64)))
}

/// Margin loss on the lengths of `caps: [b, n_out, d]` plus the reconstruction
/// term when a reconstruction is given.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    caps: Var,
    targets: &[usize],
    recon: Option<(Var, Var)>,
    p: &LossParams,
) -> Result<Var> {
    let lengths = tape.l2_norm(caps, 2)?;
    let margin = margin_loss(tape, lengths, targets, p)?;
    match recon {
        Some((r, image)) => {
            let rl = reconstruction_loss(tape, r, image, p)?;
            tape.add(margin, rl)
        }
        None => Ok(margin),
    }
}
