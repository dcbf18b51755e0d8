//! Gating networks and gated mixtures of spatio-temporal experts.
//!
//! A [`MixtureLayer`] owns `m` identically shaped experts and, depending on
//! its [`Sharing`] mode, one gate per task, one gate shared by every task, or
//! no gate at all (a single shared-bottom expert). The task output is
//! `Σ_i gate(X)_i · expert_i(X)`, with one probability vector per sample
//! broadcast over all expert output axes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, ConvLayer, ConvRnnCell, DenseLayer, GruCell};
use crate::params::{Bound, Initializer, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Which subnetwork family the experts (and recurrent gates) belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// `[R, N, F] -> [R, N, K]`, gated by a dense softmax on the flattened input.
    Conv,
    /// `[R, B, F] -> [R, H]` (or `[R, B, H]`), gated by a GRU.
    Gru,
    /// `[R, N, B, F] -> [R, N, H]` (or `[R, N, B, H]`), one GRU shared by all zones.
    ZoneGru,
    /// `[R, N, F, B] -> [R, N, K]` (or `[R, N, K, B]`).
    ConvRnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// One gate per task.
    MultiGate,
    /// One gate for all tasks.
    SharedGate,
    /// A single expert and no gate.
    SharedBottom,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpertNet {
    Conv(ConvLayer),
    Gru { cell: GruCell, sequences: bool },
    ZoneGru { cell: GruCell, sequences: bool },
    ConvRnn { cell: ConvRnnCell, sequences: bool },
}

impl ExpertNet {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            ExpertNet::Conv(layer) => layer.forward(tape, p, x),
            ExpertNet::Gru { cell, sequences } => {
                if *sequences {
                    cell.sequence_states(tape, p, x, None)
                } else {
                    cell.sequence(tape, p, x, None)
                }
            }
            ExpertNet::ZoneGru { cell, sequences } => {
                if *sequences {
                    cell.zone_distributed_states(tape, p, x)
                } else {
                    cell.zone_distributed(tape, p, x)
                }
            }
            ExpertNet::ConvRnn { cell, sequences } => {
                if *sequences {
                    cell.sequence(tape, p, x)
                } else {
                    cell.final_state(tape, p, x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum GateBody {
    Flatten,
    Gru(GruCell),
    ZoneGru(GruCell),
    ConvRnn(ConvRnnCell),
}

/// Subnetwork emitting a softmax distribution over `m` experts.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNetwork {
    body: GateBody,
    projection: DenseLayer,
    experts: usize,
}

impl GateNetwork {
    pub fn experts(&self) -> usize {
        self.experts
    }

    /// Pre-softmax scores `[R, m]`.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let features = match &self.body {
            GateBody::Flatten => {
                let s = tape.shape(x).to_vec();
                let rest: usize = s[1..].iter().product();
                tape.reshape(x, &[s[0], rest])?
            }
            GateBody::Gru(cell) => cell.sequence(tape, p, x, None)?,
            GateBody::ZoneGru(cell) => {
                let states = cell.zone_distributed(tape, p, x)?;
                tape.mean_axis(states, 1)?
            }
            GateBody::ConvRnn(cell) => {
                let last = cell.final_state(tape, p, x)?;
                tape.mean_axis(last, 1)?
            }
        };
        self.projection.forward(tape, p, features)
    }

    /// Gate probabilities `[R, m]`.
    pub fn probs<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let logits = self.logits(tape, p, x)?;
        tape.softmax(logits)
    }
}

/// Construction parameters for one [`MixtureLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub kind: ExpertKind,
    /// Input feature/channel count per zone (or per step for `Gru`).
    pub input: usize,
    /// Filters or hidden units per expert.
    pub output: usize,
    /// Filter length for convolutional kinds.
    pub filter_len: usize,
    /// Zones, needed to size the flattened dense gate.
    pub zones: usize,
    /// Time steps, needed to size the flattened dense gate.
    pub steps: usize,
    pub experts: usize,
    pub sharing: Sharing,
    pub tasks: Vec<String>,
    /// Recurrent experts return every state instead of the last one.
    pub sequences: bool,
    /// Hidden units / filters of recurrent gate bodies.
    pub gate_hidden: usize,
    pub activation: Activation,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureLayer {
    pub kind: ExpertKind,
    pub sharing: Sharing,
    pub experts: Vec<ExpertNet>,
    pub gates: Vec<GateNetwork>,
    pub tasks: Vec<String>,
    pub output: usize,
}

impl MixtureLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        name: &str,
        spec: &MixtureSpec,
    ) -> Result<Self> {
        if spec.experts == 0 {
            return Err(Error::config(format!("`{name}`: need at least one expert")));
        }
        if spec.tasks.is_empty() {
            return Err(Error::config(format!("`{name}`: need at least one task")));
        }
        if spec.sharing == Sharing::SharedBottom && spec.experts != 1 {
            return Err(Error::config(format!(
                "`{name}`: a shared bottom has exactly one expert, got {}",
                spec.experts
            )));
        }
        let hw = spec.half_width;
        let mut experts = Vec::with_capacity(spec.experts);
        for i in 0..spec.experts {
            let en = format!("{name}.expert{i}");
            let expert = match spec.kind {
                ExpertKind::Conv => ExpertNet::Conv(ConvLayer::init(
                    store,
                    init,
                    &en,
                    spec.input,
                    spec.output,
                    spec.filter_len,
                    spec.activation,
                    hw,
                )?),
                ExpertKind::Gru => ExpertNet::Gru {
                    cell: GruCell::init(store, init, &en, spec.input, spec.output, hw)?,
                    sequences: spec.sequences,
                },
                ExpertKind::ZoneGru => ExpertNet::ZoneGru {
                    cell: GruCell::init(store, init, &en, spec.input, spec.output, hw)?,
                    sequences: spec.sequences,
                },
                ExpertKind::ConvRnn => ExpertNet::ConvRnn {
                    cell: ConvRnnCell::init(
                        store,
                        init,
                        &en,
                        spec.input,
                        spec.output,
                        spec.filter_len,
                        spec.activation,
                        hw,
                    )?,
                    sequences: spec.sequences,
                },
            };
            experts.push(expert);
        }
        let gate_names: Vec<String> = match spec.sharing {
            Sharing::MultiGate => spec.tasks.iter().map(|t| format!("{name}.gate.{t}")).collect(),
            Sharing::SharedGate => vec![format!("{name}.gate.shared")],
            Sharing::SharedBottom => Vec::new(),
        };
        let mut gates = Vec::with_capacity(gate_names.len());
        for gn in gate_names {
            let (body, width) = match spec.kind {
                ExpertKind::Conv => (GateBody::Flatten, spec.zones * spec.input),
                ExpertKind::Gru => (
                    GateBody::Gru(GruCell::init(store, init, &format!("{gn}.cell"), spec.input, spec.gate_hidden, hw)?),
                    spec.gate_hidden,
                ),
                ExpertKind::ZoneGru => (
                    GateBody::ZoneGru(GruCell::init(store, init, &format!("{gn}.cell"), spec.input, spec.gate_hidden, hw)?),
                    spec.gate_hidden,
                ),
                ExpertKind::ConvRnn => (
                    GateBody::ConvRnn(ConvRnnCell::init(
                        store,
                        init,
                        &format!("{gn}.cell"),
                        spec.input,
                        spec.gate_hidden,
                        spec.filter_len,
                        Activation::Relu,
                        hw,
                    )?),
                    spec.gate_hidden,
                ),
            };
            let projection = DenseLayer::init(store, init, &format!("{gn}.proj"), width, spec.experts, Activation::Linear, hw)?;
            gates.push(GateNetwork {
                body,
                projection,
                experts: spec.experts,
            });
        }
        Ok(Self {
            kind: spec.kind,
            sharing: spec.sharing,
            experts,
            gates,
            tasks: spec.tasks.clone(),
            output: spec.output,
        })
    }

    pub fn task_index(&self, task: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| Error::usage(format!("unknown task `{task}` (known: {:?})", self.tasks)))
    }

    /// Gate used by `task`, or `None` for a shared bottom.
    pub fn gate_for(&self, task: &str) -> Result<Option<&GateNetwork>> {
        let idx = self.task_index(task)?;
        Ok(match self.sharing {
            Sharing::MultiGate => Some(&self.gates[idx]),
            Sharing::SharedGate => Some(&self.gates[0]),
            Sharing::SharedBottom => None,
        })
    }

    pub fn gate_probs<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, task: &str, x: Var) -> Result<Var> {
        match self.gate_for(task)? {
            Some(g) => g.probs(tape, p, x),
            None => Err(Error::usage("a shared-bottom layer has no gate")),
        }
    }

    pub fn expert_outputs<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        self.experts.iter().map(|e| e.forward(tape, p, x)).collect()
    }

    /// Mixture with externally supplied gate probabilities `[R, m]`.
    pub fn forward_with_gate<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, probs: Var) -> Result<Var> {
        let outs = self.expert_outputs(tape, p, x)?;
        tape.mix(&outs, probs)
    }

    /// Task-specific mixture output.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, task: &str, x: Var) -> Result<Var> {
        match self.gate_for(task)? {
            None => self.experts[0].forward(tape, p, x),
            Some(gate) => {
                let outs = self.expert_outputs(tape, p, x)?;
                let probs = gate.probs(tape, p, x)?;
                tape.mix(&outs, probs)
            }
        }
    }

    /// Output of the single shared network; identical for every task.
    pub fn shared_bottom_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if self.sharing != Sharing::SharedBottom {
            return Err(Error::usage(format!(
                "shared_bottom_forward on a {:?} layer",
                self.sharing
            )));
        }
        self.experts[0].forward(tape, p, x)
    }
}

/// Sequentially applied mixture layers; each layer gates independently.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureStack {
    pub layers: Vec<MixtureLayer>,
}

impl MixtureStack {
    pub fn output(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn tasks(&self) -> &[String] {
        &self.layers[0].tasks
    }

    /// Output for one task.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, task: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, p, task, h)?;
        }
        Ok(h)
    }

    /// Outputs for every task, in task order.
    ///
    /// Expert evaluations are shared between tasks whose inputs coincide, so
    /// shared-gate and shared-bottom stacks run each expert once.
    pub fn forward_all<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let n_tasks = self.tasks().len();
        let mut routes = vec![x];
        let mut route_of = vec![0usize; n_tasks];
        for layer in &self.layers {
            let outs: Vec<Vec<Var>> = routes
                .iter()
                .map(|&r| layer.expert_outputs(tape, p, r))
                .collect::<Result<_>>()?;
            match layer.sharing {
                Sharing::SharedBottom => {
                    routes = outs.iter().map(|o| o[0]).collect();
                }
                Sharing::SharedGate => {
                    let mut next = Vec::with_capacity(routes.len());
                    for (r, o) in routes.iter().zip(&outs) {
                        let probs = layer.gates[0].probs(tape, p, *r)?;
                        next.push(tape.mix(o, probs)?);
                    }
                    routes = next;
                }
                Sharing::MultiGate => {
                    let mut next = Vec::with_capacity(n_tasks);
                    for (t, route) in route_of.iter_mut().enumerate() {
                        let probs = layer.gates[t].probs(tape, p, routes[*route])?;
                        next.push(tape.mix(&outs[*route], probs)?);
                        *route = t;
                    }
                    routes = next;
                }
            }
        }
        Ok(route_of.iter().map(|&r| routes[r]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn spec(kind: ExpertKind, sharing: Sharing, m: usize) -> MixtureSpec {
        MixtureSpec {
            kind,
            input: 2,
            output: 3,
            filter_len: 3,
            zones: 4,
            steps: 3,
            experts: m,
            sharing,
            tasks: vec!["a".into(), "b".into()],
            sequences: false,
            gate_hidden: 2,
            activation: Activation::Relu,
            half_width: 0.5,
        }
    }

    fn input(kind: ExpertKind) -> Tensor<f64> {
        let shape: &[usize] = match kind {
            ExpertKind::Conv => &[2, 4, 2],
            ExpertKind::Gru => &[2, 3, 2],
            ExpertKind::ZoneGru => &[2, 4, 3, 2],
            ExpertKind::ConvRnn => &[2, 4, 2, 3],
        };
        let n: usize = shape.iter().product();
        Tensor::from_f64(shape, &(0..n).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.3).collect::<Vec<_>>()).unwrap()
    }

    const KINDS: [ExpertKind; 4] = [ExpertKind::Conv, ExpertKind::Gru, ExpertKind::ZoneGru, ExpertKind::ConvRnn];

    #[test]
    fn zero_gate_weights_give_uniform_probs() {
        for kind in KINDS {
            let mut store = ParamStore::new();
            let layer = MixtureLayer::init(&mut store, &Initializer::new(1), "l", &spec(kind, Sharing::MultiGate, 3)).unwrap();
            for g in &layer.gates {
                let w = g.projection.weight;
                let s = store.get(w).shape().to_vec();
                *store.get_mut(w) = Tensor::zeros(&s);
            }
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.constant(input(kind));
            let probs = layer.gate_probs(&mut tape, &p, "a", x).unwrap();
            for v in tape.value(probs).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unknown_task_is_usage_error() {
        let mut store = ParamStore::new();
        let layer = MixtureLayer::init(&mut store, &Initializer::new(1), "l", &spec(ExpertKind::Conv, Sharing::MultiGate, 2)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(input(ExpertKind::Conv));
        assert!(matches!(layer.forward(&mut tape, &p, "zzz", x), Err(Error::Usage(_))));
    }

    #[test]
    fn single_expert_mixture_equals_expert() {
        for kind in KINDS {
            let mut store = ParamStore::new();
            let layer = MixtureLayer::init(&mut store, &Initializer::new(4), "l", &spec(kind, Sharing::MultiGate, 1)).unwrap();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.constant(input(kind));
            let mixed = layer.forward(&mut tape, &p, "b", x).unwrap();
            let alone = layer.experts[0].forward(&mut tape, &p, x).unwrap();
            assert_eq!(tape.value(mixed).data(), tape.value(alone).data());
        }
    }

    #[test]
    fn shared_bottom_ignores_task_and_rejects_other_modes() {
        let mut store = ParamStore::new();
        let layer = MixtureLayer::init(&mut store, &Initializer::new(4), "l", &spec(ExpertKind::ZoneGru, Sharing::SharedBottom, 1)).unwrap();
        assert!(layer.gates.is_empty());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(input(ExpertKind::ZoneGru));
        let a = layer.forward(&mut tape, &p, "a", x).unwrap();
        let b = layer.forward(&mut tape, &p, "b", x).unwrap();
        let s = layer.shared_bottom_forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
        assert_eq!(tape.value(a).data(), tape.value(s).data());

        let mut store2 = ParamStore::new();
        let gated = MixtureLayer::init(&mut store2, &Initializer::new(4), "l", &spec(ExpertKind::ZoneGru, Sharing::SharedGate, 2)).unwrap();
        let mut tape2 = Tape::new();
        let p2 = store2.bind(&mut tape2);
        let x2 = tape2.constant(input(ExpertKind::ZoneGru));
        assert!(matches!(gated.shared_bottom_forward(&mut tape2, &p2, x2), Err(Error::Usage(_))));
        assert!(MixtureLayer::init(&mut ParamStore::<f64>::new(), &Initializer::new(0), "x", &spec(ExpertKind::Conv, Sharing::SharedBottom, 2)).is_err());
    }

    #[test]
    fn forward_all_matches_per_task_forward() {
        for sharing in [Sharing::MultiGate, Sharing::SharedGate, Sharing::SharedBottom] {
            let m = if sharing == Sharing::SharedBottom { 1 } else { 2 };
            let mut store = ParamStore::new();
            let l1 = MixtureLayer::init(&mut store, &Initializer::new(8), "l1", &MixtureSpec { sequences: true, ..spec(ExpertKind::ConvRnn, sharing, m) }).unwrap();
            let l2 = MixtureLayer::init(&mut store, &Initializer::new(8), "l2", &MixtureSpec { input: 3, output: 5, ..spec(ExpertKind::ConvRnn, sharing, m) }).unwrap();
            let stack = MixtureStack { layers: vec![l1, l2] };
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.constant(input(ExpertKind::ConvRnn));
            let all = stack.forward_all(&mut tape, &p, x).unwrap();
            for (i, task) in ["a", "b"].iter().enumerate() {
                let one = stack.forward(&mut tape, &p, task, x).unwrap();
                assert_eq!(tape.shape(one), &[2, 4, 5]);
                assert_eq!(tape.value(one).data(), tape.value(all[i]).data());
            }
        }
    }
}
