use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Gated recurrent unit with input weights `U_* [H, F]`, recurrent weights
/// `W_* [H, H]` and biases `b_* [H]` for the update, reset and candidate paths.
///
/// ```text
/// z  = σ(U_z x + W_z h + b_z)
/// r  = σ(U_r x + W_r h + b_r)
/// h~ = tanh(U_h x + r ⊙ (W_h h) + b_h)
/// h' = z ⊙ h~ + (1 - z) ⊙ h
/// ```
/// The reset gate multiplies the recurrent product, not the state.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        name: &str,
        input: usize,
        hidden: usize,
        half_width: f64,
    ) -> Result<Self> {
        if hidden == 0 || input == 0 {
            return Err(Error::config(format!(
                "GRU `{name}` needs positive sizes, got input {input} hidden {hidden}"
            )));
        }
        let mut mat = |suffix: &str, rows: usize, cols: usize| -> Result<ParamId> {
            let key = format!("{name}.{suffix}");
            let t = init.uniform(&key, &[rows, cols], half_width)?;
            store.add(key, ParamGroup::Architecture, t)
        };
        let u_z = mat("u_z", hidden, input)?;
        let u_r = mat("u_r", hidden, input)?;
        let u_h = mat("u_h", hidden, input)?;
        let w_z = mat("w_z", hidden, hidden)?;
        let w_r = mat("w_r", hidden, hidden)?;
        let w_h = mat("w_h", hidden, hidden)?;
        let mut bias = |suffix: &str| store.add(format!("{name}.{suffix}"), ParamGroup::Architecture, Tensor::zeros(&[hidden]));
        let b_z = bias("b_z")?;
        let b_r = bias("b_r")?;
        let b_h = bias("b_h")?;
        Ok(Self {
            u_z,
            u_r,
            u_h,
            w_z,
            w_r,
            w_h,
            b_z,
            b_r,
            b_h,
            input,
            hidden,
        })
    }

    /// One step on `x [.., F]` with previous state `h [.., H]`.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h_prev: Var) -> Result<Var> {
        let (sx, sh) = (tape.shape(x).to_vec(), tape.shape(h_prev).to_vec());
        if sx.last() != Some(&self.input)
            || sh.last() != Some(&self.hidden)
            || sx[..sx.len() - 1] != sh[..sh.len() - 1]
        {
            return Err(Error::dim(format!(
                "GRU step: input {sx:?} / state {sh:?} do not fit a cell with F={} H={}",
                self.input, self.hidden
            )));
        }
        let gate = |tape: &mut Tape<T>, u: ParamId, w: ParamId, b: ParamId| -> Result<Var> {
            let xin = tape.linear(x, p.get(u), Some(p.get(b)))?;
            let hin = tape.linear(h_prev, p.get(w), None)?;
            let s = tape.add(xin, hin)?;
            tape.sigmoid(s)
        };
        let z = gate(tape, self.u_z, self.w_z, self.b_z)?;
        let r = gate(tape, self.u_r, self.w_r, self.b_r)?;
        let xin = tape.linear(x, p.get(self.u_h), Some(p.get(self.b_h)))?;
        let hin = tape.linear(h_prev, p.get(self.w_h), None)?;
        let gated = tape.hadamard(r, hin)?;
        let pre = tape.add(xin, gated)?;
        let cand = tape.tanh(pre)?;
        let keep = tape.one_minus(z)?;
        let new_part = tape.hadamard(z, cand)?;
        let old_part = tape.hadamard(keep, h_prev)?;
        tape.add(new_part, old_part)
    }

    fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, lead: &[usize]) -> Var {
        let mut shape = lead.to_vec();
        shape.push(self.hidden);
        tape.constant(Tensor::zeros(&shape))
    }

    fn check_seq(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() < 2 || shape[shape.len() - 1] != self.input {
            return Err(Error::dim(format!(
                "GRU sequence: input {shape:?} should end with [B, {}]",
                self.input
            )));
        }
        Ok(shape[shape.len() - 2])
    }

    /// Run over `xs [.., B, F]` in chronological order, returning every state `[.., B, H]`.
    pub fn sequence_states<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, xs: Var, h0: Option<Var>) -> Result<Var> {
        let states = self.unroll(tape, p, xs, h0)?;
        let axis = tape.shape(states[0]).len() - 1;
        tape.stack(&states, axis)
    }

    /// Run over `xs [.., B, F]` and return the final state `[.., H]`.
    pub fn sequence<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, xs: Var, h0: Option<Var>) -> Result<Var> {
        let states = self.unroll(tape, p, xs, h0)?;
        Ok(*states.last().unwrap())
    }

    fn unroll<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, xs: Var, h0: Option<Var>) -> Result<Vec<Var>> {
        let shape = tape.shape(xs).to_vec();
        if shape.len() >= 2 && shape[shape.len() - 2] == 0 {
            return Err(Error::usage("GRU sequence needs at least one time step"));
        }
        let steps = self.check_seq(&shape)?;
        let time_axis = shape.len() - 2;
        let mut h = match h0 {
            Some(h) => h,
            None => self.zero_state(tape, &shape[..time_axis]),
        };
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = tape.select(xs, time_axis, t)?;
            h = self.step(tape, p, x, h)?;
            states.push(h);
        }
        Ok(states)
    }

    /// The same cell applied to every zone of `X [.., N, B, F]`, giving `[.., N, H]`.
    pub fn zone_distributed<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::dim(format!(
                "zone-distributed GRU expects [.., N, B, F], got {shape:?}"
            )));
        }
        self.sequence(tape, p, x, None)
    }

    /// Zone-distributed run keeping every step: `[.., N, B, F] -> [.., N, B, H]`.
    pub fn zone_distributed_states<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::dim(format!(
                "zone-distributed GRU expects [.., N, B, F], got {shape:?}"
            )));
        }
        self.sequence_states(tape, p, x, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_cell(store: &mut ParamStore<f64>, f: usize, h: usize) -> GruCell {
        let cell = GruCell::init(store, &Initializer::new(0), "g", f, h, 0.05).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        cell
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store, 2, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[2], &[0.3, -0.7]).unwrap());
        let h = tape.constant(Tensor::from_f64(&[3], &[1., -2., 4.]).unwrap());
        let out = cell.step(&mut tape, &p, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 2.0]);

        let h0 = tape.constant(Tensor::zeros(&[3]));
        let out = cell.step(&mut tape, &p, x, h0).unwrap();
        assert_eq!(tape.value(out).data(), &[0., 0., 0.]);

        let xs = tape.constant(Tensor::zeros(&[3, 2]));
        let fin = cell.sequence(&mut tape, &p, xs, Some(h)).unwrap();
        assert_eq!(tape.value(fin).data(), &[0.125, -0.25, 0.5]);
    }

    #[test]
    fn rejects_mismatched_dims() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store, 2, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[3]));
        let h = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(cell.step(&mut tape, &p, x, h), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_step_sequence_equals_step() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::init(&mut store, &Initializer::new(5), "g", 2, 3, 0.5).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs = tape.constant(Tensor::from_f64(&[4, 1, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap());
        let seq = cell.sequence(&mut tape, &p, xs, None).unwrap();
        let x = tape.reshape(xs, &[4, 2]).unwrap();
        let h0 = tape.constant(Tensor::zeros(&[4, 3]));
        let step = cell.step(&mut tape, &p, x, h0).unwrap();
        assert_eq!(tape.value(seq).data(), tape.value(step).data());
    }
}
