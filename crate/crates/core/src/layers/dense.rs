use super::Activation;
use crate::error::Result;
use crate::params::{Bound, Initializer, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Fully connected layer `activation(W x + b)` on the trailing axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
        half_width: f64,
    ) -> Result<Self> {
        let w = init.uniform(&format!("{name}.w"), &[output, input], half_width)?;
        let weight = store.add(format!("{name}.w"), ParamGroup::Architecture, w)?;
        let bias = store.add(format!("{name}.b"), ParamGroup::Architecture, Tensor::zeros(&[output]))?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
            activation,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let y = tape.linear(x, params.get(self.weight), Some(params.get(self.bias)))?;
        self.activation.apply(tape, y)
    }
}
