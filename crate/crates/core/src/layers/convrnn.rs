use super::Activation;
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

fn check_len(name: &str, len: usize) -> Result<()> {
    if len % 2 == 0 {
        return Err(Error::config(format!("`{name}`: filter length {len} must be odd")));
    }
    Ok(())
}

/// One-dimensional convolution over zones: `[.., N, F] -> [.., N, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub filters: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
    pub len: usize,
    pub activation: Activation,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        name: &str,
        input: usize,
        output: usize,
        len: usize,
        activation: Activation,
        half_width: f64,
    ) -> Result<Self> {
        check_len(name, len)?;
        let w = init.uniform(&format!("{name}.w"), &[output, input, len], half_width)?;
        let filters = store.add(format!("{name}.w"), ParamGroup::Architecture, w)?;
        let bias = store.add(format!("{name}.b"), ParamGroup::Architecture, Tensor::zeros(&[output]))?;
        Ok(Self {
            filters,
            bias,
            input,
            output,
            len,
            activation,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, p.get(self.filters), Some(p.get(self.bias)))?;
        self.activation.apply(tape, y)
    }
}

/// Convolutional recurrent cell
/// `H_t = act(U ∗ X_t + W ∗ H_{t-1} + b)` with `U [K, F, L]`, `W [K, K, L]`, `b [K]`.
///
/// Both convolutions use the same odd length and "same" zero padding. The
/// activation is ReLU unless configured otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvRnnCell {
    pub input_filters: ParamId,
    pub recurrent_filters: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub channels: usize,
    pub len: usize,
    pub activation: Activation,
}

impl ConvRnnCell {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        name: &str,
        input: usize,
        channels: usize,
        len: usize,
        activation: Activation,
        half_width: f64,
    ) -> Result<Self> {
        check_len(name, len)?;
        if channels == 0 {
            return Err(Error::config(format!("`{name}`: ConvRNN needs at least one filter")));
        }
        let u = init.uniform(&format!("{name}.u"), &[channels, input, len], half_width)?;
        let w = init.uniform(&format!("{name}.w"), &[channels, channels, len], half_width)?;
        Ok(Self {
            input_filters: store.add(format!("{name}.u"), ParamGroup::Architecture, u)?,
            recurrent_filters: store.add(format!("{name}.w"), ParamGroup::Architecture, w)?,
            bias: store.add(format!("{name}.b"), ParamGroup::Architecture, Tensor::zeros(&[channels]))?,
            input,
            channels,
            len,
            activation,
        })
    }

    /// One step on `X_t [.., N, F]`; `h_prev` of `None` is the zero state.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h_prev: Option<Var>) -> Result<Var> {
        let sx = tape.shape(x).to_vec();
        if sx.len() < 2 || sx[sx.len() - 1] != self.input {
            return Err(Error::dim(format!(
                "ConvRNN step: input {sx:?} does not end with F = {}",
                self.input
            )));
        }
        let mut pre = tape.conv1d(x, p.get(self.input_filters), Some(p.get(self.bias)))?;
        if let Some(h) = h_prev {
            let sh = tape.shape(h);
            if sh.len() != sx.len() || sh[..sh.len() - 1] != sx[..sx.len() - 1] || sh[sh.len() - 1] != self.channels {
                return Err(Error::dim(format!(
                    "ConvRNN step: state {sh:?} does not match input {sx:?} with K = {}",
                    self.channels
                )));
            }
            let rec = tape.conv1d(h, p.get(self.recurrent_filters), None)?;
            pre = tape.add(pre, rec)?;
        }
        self.activation.apply(tape, pre)
    }

    fn unroll<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, xs: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(xs).to_vec();
        if shape.len() < 3 || shape[shape.len() - 2] != self.input {
            return Err(Error::dim(format!(
                "ConvRNN sequence: input {shape:?} should be [.., N, {}, B]",
                self.input
            )));
        }
        let time_axis = shape.len() - 1;
        let mut h = None;
        let mut states = Vec::with_capacity(shape[time_axis]);
        for t in 0..shape[time_axis] {
            let x = tape.select(xs, time_axis, t)?;
            let next = self.step(tape, p, x, h)?;
            states.push(next);
            h = Some(next);
        }
        if states.is_empty() {
            return Err(Error::usage("ConvRNN sequence needs at least one time step"));
        }
        Ok(states)
    }

    /// `[.., N, F, B] -> [.., N, K, B]`, starting from the zero state.
    pub fn sequence<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, xs: Var) -> Result<Var> {
        let states = self.unroll(tape, p, xs)?;
        let axis = tape.shape(states[0]).len();
        tape.stack(&states, axis)
    }

    /// Final hidden state only: `[.., N, F, B] -> [.., N, K]`.
    pub fn final_state<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, xs: Var) -> Result<Var> {
        Ok(*self.unroll(tape, p, xs)?.last().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(store: &mut ParamStore<f64>) -> ConvRnnCell {
        ConvRnnCell::init(store, &Initializer::new(2), "c", 2, 3, 3, Activation::Relu, 0.5).unwrap()
    }

    #[test]
    fn zero_recurrent_filters_reduce_to_conv_relu() {
        let mut store = ParamStore::new();
        let c = cell(&mut store);
        *store.get_mut(c.recurrent_filters) = Tensor::zeros(&[3, 3, 3]);
        *store.get_mut(c.bias) = Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[4, 2], &[0.5, -1., 2., 0.3, -0.4, 0.9, 1.1, -0.6]).unwrap());
        let h = tape.constant(Tensor::from_f64(&[4, 3], &[1.0; 12]).unwrap());
        let y = c.step(&mut tape, &p, x, Some(h)).unwrap();
        let conv = tape.conv1d(x, p.get(c.input_filters), Some(p.get(c.bias))).unwrap();
        let relu = tape.relu(conv).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(relu).data());
    }

    #[test]
    fn all_zero_params_give_zero() {
        let mut store = ParamStore::new();
        let c = cell(&mut store);
        for id in store.ids().collect::<Vec<_>>() {
            let s = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&s);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs = tape.constant(Tensor::full(&[4, 2, 3], 0.7));
        let y = c.sequence(&mut tape, &p, xs).unwrap();
        assert_eq!(tape.shape(y), &[4, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_sequence_matches_step() {
        let mut store = ParamStore::new();
        let c = cell(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs = tape.constant(Tensor::from_f64(&[2, 4, 2, 1], &(0..16).map(|i| i as f64 * 0.1 - 0.7).collect::<Vec<_>>()).unwrap());
        let seq = c.sequence(&mut tape, &p, xs).unwrap();
        assert_eq!(tape.shape(seq), &[2, 4, 3, 1]);
        let x = tape.select(xs, 3, 0).unwrap();
        let step = c.step(&mut tape, &p, x, None).unwrap();
        assert_eq!(tape.value(seq).data(), tape.value(step).data());
    }

    #[test]
    fn even_length_is_a_config_error() {
        let mut store = ParamStore::<f64>::new();
        let r = ConvRnnCell::init(&mut store, &Initializer::new(0), "c", 2, 3, 4, Activation::Relu, 0.05);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
