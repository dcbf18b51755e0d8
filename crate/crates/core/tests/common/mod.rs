//! Straight-line f64 references and small fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stmoe::layers::Activation;
use stmoe::model::{Block, FeatureRoster, GateSharing, GesmeNet, ModelConfig, SampleBatch};
use stmoe::params::ParamStore;
use stmoe::{Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Linear => x,
        Activation::Sigmoid => sigmoid(x),
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Tanh => x.tanh(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `y[z,k] = Σ_{f,l} x[z + l - L/2, f] · w[k,f,l] + b[k]`, zero outside `0..n`.
pub fn conv1d(x: &[f64], n: usize, f: usize, w: &[f64], k: usize, l: usize, b: Option<&[f64]>) -> Vec<f64> {
    let half = (l / 2) as isize;
    let mut y = vec![0.0; n * k];
    for z in 0..n {
        for kk in 0..k {
            let mut s = b.map_or(0.0, |b| b[kk]);
            for ff in 0..f {
                for ll in 0..l {
                    let src = z as isize + ll as isize - half;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    s += x[src as usize * f + ff] * w[(kk * f + ff) * l + ll];
                }
            }
            y[z * k + kk] = s;
        }
    }
    y
}

/// `W x + b` with `W [out, in]`.
pub fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let inp = x.len();
    assert_eq!(w.len(), out * inp);
    (0..out)
        .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    let zero = vec![0.0; w.len() / x.len()];
    dense(x, w, &zero)
}

pub fn param<T: Scalar>(store: &ParamStore<T>, name: &str) -> Vec<f64> {
    let id = store.id_of(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
    store.get(id).to_f64_vec()
}

pub fn has_param<T: Scalar>(store: &ParamStore<T>, name: &str) -> bool {
    store.id_of(name).is_some()
}

pub struct Gru {
    u: [Vec<f64>; 3],
    w: [Vec<f64>; 3],
    b: [Vec<f64>; 3],
    pub hidden: usize,
}

impl Gru {
    pub fn load<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Self {
        let g = |s: &str| param(store, &format!("{prefix}.{s}"));
        let b = g("b_z");
        Gru {
            hidden: b.len(),
            u: [g("u_z"), g("u_r"), g("u_h")],
            w: [g("w_z"), g("w_r"), g("w_h")],
            b: [b, g("b_r"), g("b_h")],
        }
    }

    pub fn step(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let ux: Vec<Vec<f64>> = (0..3).map(|i| dense(x, &self.u[i], &self.b[i])).collect();
        let wh: Vec<Vec<f64>> = (0..3).map(|i| matvec(&self.w[i], h)).collect();
        (0..self.hidden)
            .map(|j| {
                let z = sigmoid(ux[0][j] + wh[0][j]);
                let r = sigmoid(ux[1][j] + wh[1][j]);
                let c = (ux[2][j] + r * wh[2][j]).tanh();
                z * c + (1.0 - z) * h[j]
            })
            .collect()
    }

    pub fn run(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut h = vec![0.0; self.hidden];
        xs.iter()
            .map(|x| {
                h = self.step(x, &h);
                h.clone()
            })
            .collect()
    }
}

pub struct ConvRnn {
    u: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
    pub input: usize,
    pub channels: usize,
    pub len: usize,
    pub act: Activation,
}

impl ConvRnn {
    pub fn load<T: Scalar>(store: &ParamStore<T>, prefix: &str, act: Activation) -> Self {
        let id = store.id_of(&format!("{prefix}.u")).unwrap();
        let s = store.get(id).shape().to_vec();
        ConvRnn {
            u: param(store, &format!("{prefix}.u")),
            w: param(store, &format!("{prefix}.w")),
            b: param(store, &format!("{prefix}.b")),
            channels: s[0],
            input: s[1],
            len: s[2],
            act,
        }
    }

    /// `x [N·F]`, `h [N·K]` or the zero state.
    pub fn step(&self, x: &[f64], h: Option<&[f64]>, n: usize) -> Vec<f64> {
        let mut pre = conv1d(x, n, self.input, &self.u, self.channels, self.len, Some(&self.b));
        if let Some(h) = h {
            let rec = conv1d(h, n, self.channels, &self.w, self.channels, self.len, None);
            pre.iter_mut().zip(rec).for_each(|(p, r)| *p += r);
        }
        pre.into_iter().map(|v| act(self.act, v)).collect()
    }

    pub fn run(&self, xs: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for x in xs {
            let h = self.step(x, out.last().map(|v| v.as_slice()), n);
            out.push(h);
        }
        out
    }
}

pub fn mix(probs: &[f64], outs: &[Vec<f64>]) -> Vec<f64> {
    let mut y = vec![0.0; outs[0].len()];
    for (p, o) in probs.iter().zip(outs) {
        y.iter_mut().zip(o).for_each(|(d, v)| *d += p * v);
    }
    y
}

fn gate_name(cfg: &ModelConfig, task: &str) -> Option<String> {
    match cfg.gate_sharing {
        GateSharing::Multi => Some(format!("gate.{task}")),
        GateSharing::Shared => Some("gate.shared".to_string()),
        GateSharing::None => None,
    }
}

/// Mix per-step expert sequences with gate probabilities.
fn mix_seq(probs: &[f64], outs: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    (0..outs[0].len())
        .map(|t| {
            let at: Vec<Vec<f64>> = outs.iter().map(|o| o[t].clone()).collect();
            mix(probs, &at)
        })
        .collect()
}

/// ConvRNN mixture stack over `xs` (B steps of `[N·F]`); returns the final `[N·K]`.
fn convrnn_block<T: Scalar>(s: &ParamStore<T>, cfg: &ModelConfig, task: &str, mut xs: Vec<Vec<f64>>, n: usize) -> Vec<f64> {
    let g = gate_name(cfg, task);
    for l in 0..cfg.layers {
        let p = format!("convrnn_me.L{l}");
        let outs: Vec<Vec<Vec<f64>>> = (0..cfg.experts)
            .map(|i| ConvRnn::load(s, &format!("{p}.expert{i}"), cfg.convrnn_activation).run(&xs, n))
            .collect();
        xs = match &g {
            None => outs[0].clone(),
            Some(g) => {
                let cell = ConvRnn::load(s, &format!("{p}.{g}.cell"), Activation::Relu);
                let last = cell.run(&xs, n).pop().unwrap();
                let k = cell.channels;
                let pooled: Vec<f64> = (0..k).map(|c| (0..n).map(|z| last[z * k + c]).sum::<f64>() / n as f64).collect();
                let probs = softmax(&dense(&pooled, &param(s, &format!("{p}.{g}.proj.w")), &param(s, &format!("{p}.{g}.proj.b"))));
                mix_seq(&probs, &outs)
            }
        };
    }
    xs.pop().unwrap()
}

/// Conv mixture stack over `[N·F]`.
fn conv_block<T: Scalar>(s: &ParamStore<T>, cfg: &ModelConfig, task: &str, mut x: Vec<f64>, n: usize) -> Vec<f64> {
    let g = gate_name(cfg, task);
    for l in 0..cfg.layers {
        let p = format!("conv_me.L{l}");
        let fin = x.len() / n;
        let outs: Vec<Vec<f64>> = (0..cfg.experts)
            .map(|i| {
                let e = format!("{p}.expert{i}");
                let k = param(s, &format!("{e}.b")).len();
                conv1d(&x, n, fin, &param(s, &format!("{e}.w")), k, cfg.conv_filter_len, Some(&param(s, &format!("{e}.b"))))
                    .into_iter()
                    .map(|v| act(cfg.conv_activation, v))
                    .collect()
            })
            .collect();
        x = match &g {
            None => outs[0].clone(),
            Some(g) => {
                let probs = softmax(&dense(&x, &param(s, &format!("{p}.{g}.proj.w")), &param(s, &format!("{p}.{g}.proj.b"))));
                mix(&probs, &outs)
            }
        };
    }
    x
}

/// GRU mixture stack run independently per zone; `xs[z][t]` is `[F]`. Returns `[N][H]`.
fn gru_block<T: Scalar>(s: &ParamStore<T>, cfg: &ModelConfig, prefix: &str, task: &str, mut xs: Vec<Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    let g = gate_name(cfg, task);
    let n = xs.len();
    for l in 0..cfg.layers {
        let p = format!("{prefix}.L{l}");
        let outs: Vec<Vec<Vec<Vec<f64>>>> = (0..cfg.experts)
            .map(|i| {
                let cell = Gru::load(s, &format!("{p}.expert{i}"));
                xs.iter().map(|seq| cell.run(seq)).collect()
            })
            .collect();
        xs = match &g {
            None => outs[0].clone(),
            Some(g) => {
                let cell = Gru::load(s, &format!("{p}.{g}.cell"));
                let finals: Vec<Vec<f64>> = xs.iter().map(|seq| cell.run(seq).pop().unwrap()).collect();
                let pooled: Vec<f64> = (0..cell.hidden).map(|j| finals.iter().map(|h| h[j]).sum::<f64>() / n as f64).collect();
                let probs = softmax(&dense(&pooled, &param(s, &format!("{p}.{g}.proj.w")), &param(s, &format!("{p}.{g}.proj.b"))));
                (0..n)
                    .map(|z| {
                        let per: Vec<Vec<Vec<f64>>> = outs.iter().map(|o| o[z].clone()).collect();
                        mix_seq(&probs, &per)
                    })
                    .collect()
            }
        };
    }
    xs.into_iter().map(|mut seq| seq.pop().unwrap()).collect()
}

/// Pre-tower features per task, each `[R·N·D]` in row-major order.
pub fn reference_features<T: Scalar>(net: &GesmeNet<T>, batch: &SampleBatch<T>) -> Vec<Vec<f64>> {
    let cfg = &net.config;
    let ro = &net.roster;
    let s = &net.params;
    let (n, b, f, fw, cp) = (ro.zones, ro.lookback, ro.f_st(), ro.f_w(), ro.c_p());
    let r = batch.rows();
    let mask = |name: &str, len: usize| -> Vec<f64> {
        if cfg.has(Block::Weighting) && has_param(s, name) {
            param(s, name).into_iter().map(|w| act(cfg.weighting_activation, w)).collect()
        } else {
            vec![1.0; len]
        }
    };
    let m_st = mask("weighting.st", n * f * b);
    let m_w = mask("weighting.weather", b * fw);
    let m_cd = mask("weighting.cd", n * 3);
    let m_cw = mask("weighting.cw", n);
    let m_cp = mask("weighting.cp", n * cp);
    let (xst, xw, cd, cw, xcp) = (
        batch.x_st.to_f64_vec(),
        batch.x_w.to_f64_vec(),
        batch.cd.to_f64_vec(),
        batch.cw.to_f64_vec(),
        batch.cp.to_f64_vec(),
    );
    let mut out = vec![Vec::new(); cfg.tasks.len()];
    for row in 0..r {
        let st = |z: usize, j: usize, k: usize| {
            let i = (z * f + j) * b + k;
            xst[row * n * f * b + i] * m_st[i]
        };
        let weather: Vec<Vec<f64>> = (0..b)
            .map(|k| (0..fw).map(|j| xw[row * b * fw + k * fw + j] * m_w[k * fw + j]).collect())
            .collect();
        for (ti, task) in cfg.tasks.iter().enumerate() {
            let mut cols: Vec<Vec<f64>> = vec![Vec::new(); n];
            if cfg.has(Block::ConvrnnMe) {
                let xs: Vec<Vec<f64>> = (0..b)
                    .map(|k| (0..n).flat_map(|z| (0..f).map(move |j| (z, j))).map(|(z, j)| st(z, j, k)).collect())
                    .collect();
                let y = convrnn_block(s, cfg, task, xs, n);
                let k = y.len() / n;
                for z in 0..n {
                    cols[z].extend_from_slice(&y[z * k..(z + 1) * k]);
                }
            }
            if cfg.has(Block::ConvMe) {
                let mut x = Vec::new();
                for z in 0..n {
                    for j in 0..f {
                        for k in 0..b {
                            x.push(st(z, j, k));
                        }
                    }
                    for c in 0..cp {
                        x.push(xcp[row * n * cp + z * cp + c] * m_cp[z * cp + c]);
                    }
                }
                let y = conv_block(s, cfg, task, x, n);
                let k = y.len() / n;
                for z in 0..n {
                    cols[z].extend_from_slice(&y[z * k..(z + 1) * k]);
                }
            }
            if cfg.has(Block::ZonedistGruMe) {
                let xs: Vec<Vec<Vec<f64>>> = (0..n)
                    .map(|z| (0..b).map(|k| (0..f).map(|j| st(z, j, k)).collect()).collect())
                    .collect();
                for (z, h) in gru_block(s, cfg, "zonedist_gru_me", task, xs).into_iter().enumerate() {
                    cols[z].extend(h);
                }
            }
            if cfg.has(Block::GruMe) {
                let h = gru_block(s, cfg, "gru_me", task, vec![weather.clone()]).pop().unwrap();
                for c in cols.iter_mut() {
                    c.extend_from_slice(&h);
                }
            }
            for z in 0..n {
                for j in 0..3 {
                    cols[z].push(cd[(row * n + z) * 3 + j] * m_cd[z * 3 + j]);
                }
                cols[z].push(cw[row * n + z] * m_cw[z]);
                out[ti].extend_from_slice(&cols[z]);
            }
        }
    }
    out
}

/// Predictions per task, each `[R·N]`.
pub fn reference_forward<T: Scalar>(net: &GesmeNet<T>, batch: &SampleBatch<T>) -> Vec<Vec<f64>> {
    let feats = reference_features(net, batch);
    let width = net.config.tower_width();
    net.config
        .tasks
        .iter()
        .zip(feats)
        .map(|(task, f)| {
            let w = param(&net.params, &format!("tower.{task}.w"));
            let b = param(&net.params, &format!("tower.{task}.b"));
            f.chunks(width).map(|row| act(Activation::Relu, dense(row, &w, &b)[0])).collect()
        })
        .collect()
}

pub fn roster(n: usize, b: usize, f_st: usize, f_w: usize, c_p: usize) -> FeatureRoster {
    FeatureRoster {
        zones: n,
        lookback: b,
        st_features: (0..f_st).map(|i| format!("st{i}")).collect(),
        weather_features: (0..f_w).map(|i| format!("w{i}")).collect(),
        poi_channels: (0..c_p).map(|i| format!("poi{i}")).collect(),
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    let v: Vec<f64> = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Random inputs and targets for `rows` samples.
pub fn random_batch(ro: &FeatureRoster, tasks: usize, rows: usize, rng: &mut ChaCha8Rng) -> SampleBatch<f64> {
    let (n, b) = (ro.zones, ro.lookback);
    let mut cd = vec![0.0; rows * n * 3];
    let mut cw = vec![0.0; rows * n];
    for r in 0..rows {
        let bin = rng.gen_range(0..3);
        let weekend = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
        for z in 0..n {
            cd[(r * n + z) * 3 + bin] = 1.0;
            cw[r * n + z] = weekend;
        }
    }
    SampleBatch {
        x_st: uniform_tensor(rng, &[rows, n, ro.f_st(), b], 0.0, 1.0),
        x_w: uniform_tensor(rng, &[rows, b, ro.f_w()], -1.5, 1.5),
        cd: Tensor::from_f64(&[rows, n, 3], &cd).unwrap(),
        cw: Tensor::from_f64(&[rows, n], &cw).unwrap(),
        cp: uniform_tensor(rng, &[rows, n, ro.c_p()], 0.0, 1.0),
        targets: (0..tasks).map(|_| uniform_tensor(rng, &[rows, n], 0.0, 1.0)).collect(),
    }
}

/// Overwrite every parameter (biases included) with `U(-hw, hw)`.
pub fn randomize<T: Scalar>(store: &mut ParamStore<T>, hw: f64, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = uniform_tensor(rng, &shape, -hw, hw).cast();
    }
}

/// A small random configuration; every mixture kind, sharing mode and ablation can appear.
pub fn random_config(rng: &mut ChaCha8Rng, n: usize) -> ModelConfig {
    let tasks: Vec<String> = (0..rng.gen_range(1..=2)).map(|i| format!("task{i}")).collect();
    let mut c = ModelConfig::table1(tasks);
    c.gate_sharing = *[GateSharing::Multi, GateSharing::Shared, GateSharing::None].choose(rng).unwrap();
    c.experts = if c.gate_sharing == GateSharing::None { 1 } else { rng.gen_range(1..=3) };
    c.layers = rng.gen_range(1..=2);
    c.conv_filters = (0..c.layers).map(|_| rng.gen_range(1..=4)).collect();
    c.convrnn_filters = (0..c.layers).map(|_| rng.gen_range(1..=4)).collect();
    let lens: Vec<usize> = [1, 3, 5].into_iter().filter(|&l| l <= 2 * n - 1).collect();
    c.conv_filter_len = *lens.choose(rng).unwrap();
    c.convrnn_filter_len = *lens.choose(rng).unwrap();
    c.gru_hidden = rng.gen_range(1..=3);
    c.gate_hidden = rng.gen_range(1..=3);
    c.gate_filters = rng.gen_range(1..=3);
    let acts = [Activation::Linear, Activation::Sigmoid, Activation::Relu, Activation::Tanh];
    c.conv_activation = *acts.choose(rng).unwrap();
    c.convrnn_activation = *acts.choose(rng).unwrap();
    c.weighting_activation = *acts.choose(rng).unwrap();
    let mut ablation = BTreeSet::new();
    for b in Block::ALL {
        if rng.gen_bool(0.25) {
            ablation.insert(b);
        }
    }
    if [Block::ConvrnnMe, Block::ConvMe, Block::ZonedistGruMe, Block::GruMe]
        .iter()
        .all(|b| ablation.contains(b))
    {
        ablation.remove(&Block::GruMe);
    }
    c.ablation = ablation;
    c.seed = rng.gen();
    c
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(floor)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
