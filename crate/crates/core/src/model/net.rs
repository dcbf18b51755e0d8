use super::{Block, FeatureRoster, GateSharing, ModelConfig, SampleBatch, CONTEXT_COLUMNS};
use crate::error::{Error, Result};
use crate::layers::{Activation, DenseLayer, FeatureWeightingLayer};
use crate::moe::{ExpertKind, MixtureLayer, MixtureSpec, MixtureStack, Sharing};
use crate::params::{Bound, Initializer, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// One weighting layer per input block.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightingSet {
    pub st: FeatureWeightingLayer,
    pub weather: FeatureWeightingLayer,
    pub cd: FeatureWeightingLayer,
    pub cw: FeatureWeightingLayer,
    /// Absent when Conv-ME (the only consumer of POI context) is ablated.
    pub cp: Option<FeatureWeightingLayer>,
}

/// Input blocks of a batch as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct BlockInputs {
    pub st: Var,
    pub weather: Var,
    pub cd: Var,
    pub cw: Var,
    pub cp: Var,
}

/// Parameter names split by regularization group.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionAudit {
    pub feature_weighting: Vec<String>,
    pub architecture: Vec<String>,
}

/// The assembled network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GesmeNet<T> {
    pub config: ModelConfig,
    pub roster: FeatureRoster,
    pub params: ParamStore<T>,
    pub weighting: Option<WeightingSet>,
    pub convrnn: Option<MixtureStack>,
    pub conv: Option<MixtureStack>,
    pub zonedist: Option<MixtureStack>,
    pub gru: Option<MixtureStack>,
    pub towers: Vec<DenseLayer>,
}

fn sharing(g: GateSharing) -> Sharing {
    match g {
        GateSharing::Multi => Sharing::MultiGate,
        GateSharing::Shared => Sharing::SharedGate,
        GateSharing::None => Sharing::SharedBottom,
    }
}

impl<T: Scalar> GesmeNet<T> {
    pub fn build(config: &ModelConfig, roster: &FeatureRoster) -> Result<Self> {
        config.validate(roster)?;
        let init = Initializer::new(config.seed);
        let mut store = ParamStore::new();
        let (n, b) = (roster.zones, roster.lookback);
        let hw = config.init_half_width;

        let weighting = if config.has(Block::Weighting) {
            let mut w = |name: &str, shape: &[usize]| {
                FeatureWeightingLayer::init(
                    &mut store,
                    &init,
                    &format!("weighting.{name}"),
                    shape,
                    config.gamma,
                    config.weighting_activation,
                )
            };
            let st = w("st", &[n, roster.f_st(), b])?;
            let weather = w("weather", &[b, roster.f_w()])?;
            let cd = w("cd", &[n, 3])?;
            let cw = w("cw", &[n])?;
            let cp = if config.has(Block::ConvMe) {
                Some(w("cp", &[n, roster.c_p()])?)
            } else {
                None
            };
            Some(WeightingSet { st, weather, cd, cw, cp })
        } else {
            None
        };

        let base = MixtureSpec {
            kind: ExpertKind::Conv,
            input: 0,
            output: 0,
            filter_len: 1,
            zones: n,
            steps: b,
            experts: config.experts,
            sharing: sharing(config.gate_sharing),
            tasks: config.tasks.clone(),
            sequences: false,
            gate_hidden: config.gate_hidden,
            activation: Activation::Relu,
            half_width: hw,
        };
        let mut stack = |block: Block, first_input: usize, widths: &[usize], spec: MixtureSpec| -> Result<Option<MixtureStack>> {
            if !config.has(block) {
                return Ok(None);
            }
            let mut layers = Vec::with_capacity(widths.len());
            let mut input = first_input;
            for (l, &w) in widths.iter().enumerate() {
                let s = MixtureSpec {
                    input,
                    output: w,
                    sequences: l + 1 < widths.len(),
                    ..spec.clone()
                };
                layers.push(MixtureLayer::init(&mut store, &init, &format!("{block}.L{l}"), &s)?);
                input = w;
            }
            Ok(Some(MixtureStack { layers }))
        };
        let gru_widths = vec![config.gru_hidden; config.layers];
        let convrnn = stack(
            Block::ConvrnnMe,
            roster.f_st(),
            &config.convrnn_filters,
            MixtureSpec {
                kind: ExpertKind::ConvRnn,
                filter_len: config.convrnn_filter_len,
                gate_hidden: config.gate_filters,
                activation: config.convrnn_activation,
                ..base.clone()
            },
        )?;
        let conv = stack(
            Block::ConvMe,
            roster.f_st() * b + roster.c_p(),
            &config.conv_filters,
            MixtureSpec {
                kind: ExpertKind::Conv,
                filter_len: config.conv_filter_len,
                activation: config.conv_activation,
                ..base.clone()
            },
        )?;
        let zonedist = stack(
            Block::ZonedistGruMe,
            roster.f_st(),
            &gru_widths,
            MixtureSpec {
                kind: ExpertKind::ZoneGru,
                ..base.clone()
            },
        )?;
        let gru = stack(
            Block::GruMe,
            roster.f_w(),
            &gru_widths,
            MixtureSpec {
                kind: ExpertKind::Gru,
                ..base.clone()
            },
        )?;

        let width = config.tower_width();
        let surviving: usize = [&convrnn, &conv, &zonedist, &gru]
            .iter()
            .filter_map(|s| s.as_ref().map(|s| s.output()))
            .sum();
        assert_eq!(surviving + CONTEXT_COLUMNS, width, "tower width bookkeeping");
        let towers = config
            .tasks
            .iter()
            .map(|t| DenseLayer::init(&mut store, &init, &format!("tower.{t}"), width, 1, Activation::Relu, hw))
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config: config.clone(),
            roster: roster.clone(),
            params: store,
            weighting,
            convrnn,
            conv,
            zonedist,
            gru,
            towers,
        })
    }

    pub fn tasks(&self) -> &[String] {
        &self.config.tasks
    }

    pub fn task_index(&self, task: &str) -> Result<usize> {
        self.config
            .tasks
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| Error::usage(format!("unknown task `{task}` (known: {:?})", self.config.tasks)))
    }

    pub fn tower_width(&self) -> usize {
        self.towers[0].input
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Record the batch's input blocks as constants.
    pub fn inputs(&self, tape: &mut Tape<T>, batch: &SampleBatch<T>) -> Result<BlockInputs> {
        batch.check(&self.roster)?;
        Ok(BlockInputs {
            st: tape.constant(batch.x_st.clone()),
            weather: tape.constant(batch.x_w.clone()),
            cd: tape.constant(batch.cd.clone()),
            cw: tape.constant(batch.cw.clone()),
            cp: tape.constant(batch.cp.clone()),
        })
    }

    /// Apply the weighting layers; identity when weighting is ablated.
    pub fn weighted(&self, tape: &mut Tape<T>, p: &Bound, x: BlockInputs) -> Result<BlockInputs> {
        let Some(w) = &self.weighting else {
            return Ok(x);
        };
        Ok(BlockInputs {
            st: w.st.forward(tape, p, x.st)?,
            weather: w.weather.forward(tape, p, x.weather)?,
            cd: w.cd.forward(tape, p, x.cd)?,
            cw: w.cw.forward(tape, p, x.cw)?,
            cp: match &w.cp {
                Some(l) => l.forward(tape, p, x.cp)?,
                None => x.cp,
            },
        })
    }

    /// Pre-tower features `[R, N, D]` for every task, in task order.
    pub fn features(&self, tape: &mut Tape<T>, p: &Bound, x: BlockInputs) -> Result<Vec<Var>> {
        let x = self.weighted(tape, p, x)?;
        let s = tape.shape(x.st).to_vec();
        let (r, n, f, b) = (s[0], s[1], s[2], s[3]);
        let n_tasks = self.config.tasks.len();
        let mut parts: Vec<Vec<Var>> = vec![Vec::new(); n_tasks];
        let mut push = |outs: Vec<Var>| {
            for (dst, v) in parts.iter_mut().zip(outs) {
                dst.push(v);
            }
        };

        if let Some(st) = &self.convrnn {
            push(st.forward_all(tape, p, x.st)?);
        }
        if let Some(st) = &self.conv {
            let flat = tape.reshape(x.st, &[r, n, f * b])?;
            let joined = tape.concat(&[flat, x.cp], 2)?;
            push(st.forward_all(tape, p, joined)?);
        }
        if let Some(st) = &self.zonedist {
            let by_step = tape.permute(x.st, &[0, 1, 3, 2])?;
            push(st.forward_all(tape, p, by_step)?);
        }
        if let Some(st) = &self.gru {
            let outs = st.forward_all(tape, p, x.weather)?;
            let mut spread = Vec::with_capacity(outs.len());
            for o in outs {
                spread.push(tape.repeat(o, 1, n)?);
            }
            push(spread);
        }
        let cw = tape.reshape(x.cw, &[r, n, 1])?;
        let mut out = Vec::with_capacity(n_tasks);
        for mut p in parts {
            p.push(x.cd);
            p.push(cw);
            out.push(tape.concat(&p, 2)?);
        }
        Ok(out)
    }

    /// Predictions `[R, N]` for every task, in task order.
    pub fn forward_all(&self, tape: &mut Tape<T>, p: &Bound, x: BlockInputs) -> Result<Vec<Var>> {
        let feats = self.features(tape, p, x)?;
        let r = tape.shape(x.st)[0];
        let n = self.roster.zones;
        let mut out = Vec::with_capacity(feats.len());
        for (tower, f) in self.towers.iter().zip(feats) {
            let y = tower.forward(tape, p, f)?;
            out.push(tape.reshape(y, &[r, n])?);
        }
        Ok(out)
    }

    /// Prediction `[R, N]` for one task.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: BlockInputs, task: &str) -> Result<Var> {
        let idx = self.task_index(task)?;
        Ok(self.forward_all(tape, p, x)?[idx])
    }

    /// Evaluate every task on a fresh tape.
    pub fn predict(&self, batch: &SampleBatch<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = self.inputs(&mut tape, batch)?;
        let outs = self.forward_all(&mut tape, &p, x)?;
        Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Pre-tower features on a fresh tape.
    pub fn predict_features(&self, batch: &SampleBatch<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = self.inputs(&mut tape, batch)?;
        let outs = self.features(&mut tape, &p, x)?;
        Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Check that the two regularization groups cover every parameter once,
    /// and that the weighting group holds exactly the weighting layers.
    pub fn partition_audit(&self) -> Result<PartitionAudit> {
        let mut audit = PartitionAudit {
            feature_weighting: Vec::new(),
            architecture: Vec::new(),
        };
        for e in self.params.entries() {
            match e.group {
                ParamGroup::FeatureWeighting => audit.feature_weighting.push(e.name.clone()),
                ParamGroup::Architecture => audit.architecture.push(e.name.clone()),
            }
        }
        let mut expected: Vec<String> = match &self.weighting {
            None => Vec::new(),
            Some(w) => [Some(&w.st), Some(&w.weather), Some(&w.cd), Some(&w.cw), w.cp.as_ref()]
                .into_iter()
                .flatten()
                .map(|l| self.params.entries()[l.weights.index()].name.clone())
                .collect(),
        };
        let mut got = audit.feature_weighting.clone();
        expected.sort();
        got.sort();
        if expected != got {
            return Err(Error::config(format!(
                "weighting group {got:?} differs from weighting layers {expected:?}"
            )));
        }
        if audit.feature_weighting.len() + audit.architecture.len() != self.params.len() {
            return Err(Error::config("parameter partition is not exhaustive"));
        }
        Ok(audit)
    }

    /// Same architecture and parameter values at another precision.
    pub fn cast<U: Scalar>(&self) -> GesmeNet<U> {
        GesmeNet {
            config: self.config.clone(),
            roster: self.roster.clone(),
            params: self.params.cast(),
            weighting: self.weighting.clone(),
            convrnn: self.convrnn.clone(),
            conv: self.conv.clone(),
            zonedist: self.zonedist.clone(),
            gru: self.gru.clone(),
            towers: self.towers.clone(),
        }
    }
}
