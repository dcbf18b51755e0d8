//! Central-difference checks (f64, h = 1e-4) of reverse-mode gradients (f32).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stmoe::model::{GesmeNet, ModelConfig};
use stmoe::train::total_loss;
use stmoe::{Scalar, Tape, Tensor, Var};

use super::*;

pub const H: f64 = 1e-4;


trait Case {
    fn shapes(&self) -> Vec<Vec<usize>>;
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var;
    /// Inputs must stay away from kinks (relu, abs).
    fn away_from_zero(&self) -> bool {
        false
    }
}

macro_rules! case {
    ($name:ident, [$($s:expr),*], |$t:ident, $v:ident| $body:expr) => {
        case!($name, [$($s),*], false, |$t, $v| $body);
    };
    ($name:ident, [$($s:expr),*], $kink:expr, |$t:ident, $v:ident| $body:expr) => {
        struct $name;
        impl Case for $name {
            fn shapes(&self) -> Vec<Vec<usize>> {
                vec![$($s.to_vec()),*]
            }
            fn apply<T: Scalar>(&self, $t: &mut Tape<T>, $v: &[Var]) -> Var {
                $body.unwrap()
            }
            fn away_from_zero(&self) -> bool {
                $kink
            }
        }
    };
}

case!(Matmul, [[2, 3, 4], [4, 5]], |t, v| t.matmul(v[0], v[1]));
case!(MatmulBatched, [[2, 3, 4], [2, 4, 2]], |t, v| t.matmul(v[0], v[1]));
case!(Linear, [[3, 4], [5, 4], [5]], |t, v| t.linear(v[0], v[1], Some(v[2])));
case!(Conv1d, [[2, 5, 3], [4, 3, 3], [4]], |t, v| t.conv1d(v[0], v[1], Some(v[2])));
case!(Conv1dWide, [[1, 4, 2], [3, 2, 7]], |t, v| t.conv1d(v[0], v[1], None));
case!(Add, [[3, 4], [3, 4]], |t, v| t.add(v[0], v[1]));
case!(Sub, [[3, 4], [3, 4]], |t, v| t.sub(v[0], v[1]));
case!(Hadamard, [[3, 4], [3, 4]], |t, v| t.hadamard(v[0], v[1]));
case!(MulLeading, [[2, 3, 4], [3, 4]], |t, v| t.mul_leading(v[0], v[1]));
case!(AddBias, [[2, 3, 4], [4]], |t, v| t.add_bias(v[0], v[1]));
case!(Affine, [[3, 4]], |t, v| t.affine(v[0], T::from_f64_lossy(-1.5), T::from_f64_lossy(0.25)));
case!(Scale, [[3, 4]], |t, v| t.scale(v[0], T::from_f64_lossy(2.5)));
case!(OneMinus, [[3, 4]], |t, v| t.one_minus(v[0]));
case!(Sigmoid, [[3, 4]], |t, v| t.sigmoid(v[0]));
case!(Tanh, [[3, 4]], |t, v| t.tanh(v[0]));
case!(Relu, [[3, 4]], true, |t, v| t.relu(v[0]));
case!(Square, [[3, 4]], |t, v| t.square(v[0]));
case!(Abs, [[3, 4]], true, |t, v| t.abs(v[0]));
case!(Softmax, [[3, 4]], |t, v| t.softmax(v[0]));
case!(Concat, [[2, 3, 1], [2, 3, 2]], |t, v| t.concat(&[v[0], v[1]], 2));
case!(Permute, [[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1]));
case!(Reshape, [[2, 3, 4]], |t, v| t.reshape(v[0], &[6, 4]));
case!(Select, [[2, 3, 4]], |t, v| t.select(v[0], 1, 2));
case!(Stack, [[2, 3], [2, 3]], |t, v| t.stack(&[v[0], v[1]], 1));
case!(Repeat, [[2, 3]], |t, v| t.repeat(v[0], 1, 4));
case!(Sum, [[3, 4]], |t, v| t.sum(v[0]));
case!(Mean, [[3, 4]], |t, v| t.mean(v[0]));
case!(SumAxis, [[2, 3, 4]], |t, v| t.sum_axis(v[0], 1));
case!(MeanAxis, [[2, 3, 4]], |t, v| t.mean_axis(v[0], 2));
case!(Mix, [[2, 3, 2], [2, 3, 2], [2, 2]], |t, v| {
    let g = t.softmax(v[2]).unwrap();
    t.mix(&[v[0], v[1]], g)
});

/// `Σ out ⊙ c` for a fixed random `c`, so every output element matters.
fn scalar_loss<T: Scalar, C: Case>(case: &C, inputs: &[Vec<f64>], coef: &[f64], want_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::<T>::new();
    let shapes = case.shapes();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&shapes)
        .map(|(x, s)| {
            let t = Tensor::from_f64(s, x).unwrap();
            if want_grad {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        })
        .collect();
    let out = case.apply(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let c = tape.constant(Tensor::from_f64(&shape, &coef[..shape.iter().product::<usize>()]).unwrap());
    let prod = tape.hadamard(out, c).unwrap();
    let loss = tape.sum(prod).unwrap();
    let value = tape.value(loss).data()[0].to_f64_lossy();
    if !want_grad {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|v| tape.grad(*v).unwrap().iter().map(|g| g.to_f64_lossy()).collect())
        .collect();
    (value, grads)
}

fn check_case<C: Case>(case: C, rng: &mut ChaCha8Rng) -> f64 {
    let inputs: Vec<Vec<f64>> = case
        .shapes()
        .iter()
        .map(|s| {
            (0..s.iter().product::<usize>())
                .map(|_| loop {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    if !case.away_from_zero() || v.abs() > 0.05 {
                        // f32-representable so both precisions see the same point
                        break v as f32 as f64;
                    }
                })
                .collect()
        })
        .collect();
    let coef: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, analytic) = scalar_loss::<f32, _>(&case, &inputs, &coef, true);
    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(g.len());
        for j in 0..g.len() {
            let mut plus = inputs.clone();
            plus[i][j] += H;
            let mut minus = inputs.clone();
            minus[i][j] -= H;
            let fp = scalar_loss::<f64, _>(&case, &plus, &coef, false).0;
            let fm = scalar_loss::<f64, _>(&case, &minus, &coef, false).0;
            numeric.push((fp - fm) / (2.0 * H));
        }
        worst = worst.max(rel_err(g, &numeric, 1e-6));
    }
    worst
}

/// Worst relative error of every tape op over `rounds` random draws.
pub fn op_errors(seed: u64, rounds: usize) -> Vec<(&'static str, f64)> {
    let mut g = rng(seed);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut note = |name: &'static str, e: f64| match out.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => out.push((name, e)),
    };
    for _ in 0..rounds {
        note("matmul", check_case(Matmul, &mut g));
        note("matmul_batched", check_case(MatmulBatched, &mut g));
        note("linear", check_case(Linear, &mut g));
        note("conv1d", check_case(Conv1d, &mut g));
        note("conv1d_wide", check_case(Conv1dWide, &mut g));
        note("add", check_case(Add, &mut g));
        note("sub", check_case(Sub, &mut g));
        note("hadamard", check_case(Hadamard, &mut g));
        note("mul_leading", check_case(MulLeading, &mut g));
        note("add_bias", check_case(AddBias, &mut g));
        note("affine", check_case(Affine, &mut g));
        note("scale", check_case(Scale, &mut g));
        note("one_minus", check_case(OneMinus, &mut g));
        note("sigmoid", check_case(Sigmoid, &mut g));
        note("tanh", check_case(Tanh, &mut g));
        note("relu", check_case(Relu, &mut g));
        note("square", check_case(Square, &mut g));
        note("abs", check_case(Abs, &mut g));
        note("softmax", check_case(Softmax, &mut g));
        note("concat", check_case(Concat, &mut g));
        note("permute", check_case(Permute, &mut g));
        note("reshape", check_case(Reshape, &mut g));
        note("select", check_case(Select, &mut g));
        note("stack", check_case(Stack, &mut g));
        note("repeat", check_case(Repeat, &mut g));
        note("sum", check_case(Sum, &mut g));
        note("mean", check_case(Mean, &mut g));
        note("sum_axis", check_case(SumAxis, &mut g));
        note("mean_axis", check_case(MeanAxis, &mut g));
        note("mix", check_case(Mix, &mut g));
    }
    out
}

/// Micro GESME model: N=3, b=2, m=2, hidden 2.
pub fn micro_config(tasks: usize, seed: u64) -> ModelConfig {
    let mut c = ModelConfig::table1((0..tasks).map(|i| format!("task{i}")).collect());
    c.experts = 2;
    c.layers = 2;
    c.conv_filters = vec![2, 3];
    c.convrnn_filters = vec![2, 3];
    c.conv_filter_len = 3;
    c.convrnn_filter_len = 3;
    c.gru_hidden = 2;
    c.gate_hidden = 2;
    c.gate_filters = 2;
    c.seed = seed;
    c
}

fn loss_f64(net: &GesmeNet<f64>, batch: &stmoe::model::SampleBatch<f64>) -> f64 {
    let mut tape = Tape::new();
    let p = net.params.bind_frozen(&mut tape);
    let parts = total_loss(&mut tape, net, &p, batch, 0.001, 0.001).unwrap();
    tape.value(parts.total).data()[0]
}

/// End-to-end relative error over the parameters of one seeded model, and
/// the number of coordinates skipped because a ReLU kink lies within `h`.
///
/// A coordinate is skipped when its one-sided differences disagree by more
/// than smooth curvature at this step size could explain.
pub fn end_to_end_error(seed: u64) -> (f64, usize, usize) {
    let mut g = rng(1000 + seed);
    let ro = roster(3, 2, 2, 2, 1);
    let cfg = micro_config(2, seed);
    let mut net32 = GesmeNet::<f32>::build(&cfg, &ro).unwrap();
    randomize(&mut net32.params, 0.5, &mut g);
    let batch = random_batch(&ro, 2, 4, &mut g);

    let mut tape = Tape::new();
    let p = net32.params.bind(&mut tape);
    let b32 = batch.cast::<f32>();
    let parts = total_loss(&mut tape, &net32, &p, &b32, 0.001, 0.001).unwrap();
    tape.backward(parts.total).unwrap();
    let grads: Vec<f64> = net32
        .params
        .gradients(&tape, &p)
        .into_iter()
        .flatten()
        .map(|v| v.to_f64_lossy())
        .collect();

    let mut net = net32.cast::<f64>();
    let batch = b32.cast::<f64>();
    let f0 = loss_f64(&net, &batch);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    let mut k = 0;
    for id in net.params.ids().collect::<Vec<_>>() {
        for j in 0..net.params.get(id).len() {
            let orig = net.params.get(id).data()[j];
            net.params.get_mut(id).data_mut()[j] = orig + H;
            let fp = loss_f64(&net, &batch);
            net.params.get_mut(id).data_mut()[j] = orig - H;
            let fm = loss_f64(&net, &batch);
            net.params.get_mut(id).data_mut()[j] = orig;
            let central = (fp - fm) / (2.0 * H);
            let (right, left) = ((fp - f0) / H, (f0 - fm) / H);
            if (right - left).abs() > 1e-3 * central.abs().max(1.0) {
                skipped += 1;
            } else {
                analytic.push(grads[k]);
                numeric.push(central);
            }
            k += 1;
        }
    }
    (rel_err(&analytic, &numeric, 1e-6), skipped, k)
}

