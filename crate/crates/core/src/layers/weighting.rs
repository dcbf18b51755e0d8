use super::Activation;
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Trainable elementwise mask `x ⊙ σ(W)` over one input block of any rank.
///
/// `W` has the shape of a single sample of the block and is repeated over the
/// leading batch axis. Its entries start i.i.d. `U(-γ, +γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWeightingLayer {
    pub weights: ParamId,
    pub shape: Vec<usize>,
    pub activation: Activation,
    pub gamma: f64,
}

impl FeatureWeightingLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        name: &str,
        shape: &[usize],
        gamma: f64,
        activation: Activation,
    ) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::config(format!(
                "feature weighting gamma must be positive, got {gamma}"
            )));
        }
        let w = init.uniform(name, shape, gamma)?;
        let weights = store.add(name, ParamGroup::FeatureWeighting, w)?;
        Ok(Self {
            weights,
            shape: shape.to_vec(),
            activation,
            gamma,
        })
    }

    /// `x` is either one sample (shape equal to the mask) or a batch `[R, ..mask]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let sx = tape.shape(x);
        let fits = sx == self.shape.as_slice()
            || (sx.len() == self.shape.len() + 1 && sx[1..] == self.shape[..]);
        if !fits {
            return Err(Error::dim(format!(
                "feature weighting: input {sx:?} does not match mask {:?}",
                self.shape
            )));
        }
        let mask = self.activation.apply(tape, params.get(self.weights))?;
        tape.mul_leading(x, mask)
    }

    /// `σ(W)` evaluated outside any tape.
    pub fn mask<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<f64> {
        store
            .get(self.weights)
            .data()
            .iter()
            .map(|w| self.activation.eval(w.to_f64_lossy()))
            .collect()
    }
}
