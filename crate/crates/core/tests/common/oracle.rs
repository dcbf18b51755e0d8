//! Layer and network outputs against independent f64 loops.

use rand::Rng;
use stmoe::layers::{Activation, ConvRnnCell, GruCell};
use stmoe::moe::{ExpertKind, MixtureLayer, MixtureSpec, Sharing};
use stmoe::model::GesmeNet;
use stmoe::params::{Initializer, ParamStore};
use stmoe::{Tape, Tensor};

use super::*;

fn vec_of(rng: &mut rand_chacha::ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn conv1d_matches_loops() {
    let mut g = rng(11);
    for _ in 0..50 {
        let n = g.gen_range(1..=6);
        let f = g.gen_range(1..=3);
        let k = g.gen_range(1..=4);
        let lens: Vec<usize> = (1..=2 * n - 1).step_by(2).collect();
        let l = lens[g.gen_range(0..lens.len())];
        let rows = g.gen_range(1..=3);
        let x = vec_of(&mut g, rows * n * f);
        let w = vec_of(&mut g, k * f * l);
        let b = vec_of(&mut g, k);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::from_f64(&[rows, n, f], &x).unwrap());
        let wv = tape.constant(Tensor::from_f64(&[k, f, l], &w).unwrap());
        let bv = tape.constant(Tensor::from_f64(&[k], &b).unwrap());
        let y = tape.conv1d(xv, wv, Some(bv)).unwrap();
        let got = tape.value(y).to_f64_vec();
        let want: Vec<f64> = x.chunks(n * f).flat_map(|row| conv1d(row, n, f, &w, k, l, Some(&b))).collect();
        assert!(max_abs_diff(&got, &want) < 1e-12, "n={n} f={f} k={k} l={l}");
    }
}

pub fn gru_step_matches_loops() {
    let mut g = rng(12);
    for seed in 0..20 {
        let (f, h) = (g.gen_range(1..=4), g.gen_range(1..=4));
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::init(&mut store, &Initializer::new(seed), "g", f, h, 0.05).unwrap();
        randomize(&mut store, 0.8, &mut g);
        let reference = Gru::load(&store, "g");
        let steps = g.gen_range(1..=4);
        let xs = vec_of(&mut g, steps * f);
        let h0 = vec_of(&mut g, h);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::from_f64(&[steps, f], &xs).unwrap());
        let hv = tape.constant(Tensor::from_f64(&[h], &h0).unwrap());
        let fin = cell.sequence(&mut tape, &p, xv, Some(hv)).unwrap();
        let mut state = h0.clone();
        for x in xs.chunks(f) {
            state = reference.step(x, &state);
        }
        assert!(max_abs_diff(&tape.value(fin).to_f64_vec(), &state) < 1e-12);
    }
}

pub fn convrnn_matches_loops() {
    let mut g = rng(13);
    for seed in 0..20 {
        let n = g.gen_range(1..=6);
        let (f, k) = (g.gen_range(1..=3), g.gen_range(1..=4));
        let l = [1, 3, 5].into_iter().filter(|&l| l <= 2 * n - 1).last().unwrap();
        let steps = g.gen_range(1..=4);
        let act = [Activation::Relu, Activation::Tanh, Activation::Linear][seed as usize % 3];
        let mut store = ParamStore::<f64>::new();
        let cell = ConvRnnCell::init(&mut store, &Initializer::new(seed), "c", f, k, l, act, 0.05).unwrap();
        randomize(&mut store, 0.6, &mut g);
        let reference = ConvRnn::load(&store, "c", act);
        // [N, F, B] input
        let x = vec_of(&mut g, n * f * steps);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::from_f64(&[1, n, f, steps], &x).unwrap());
        let seq = cell.sequence(&mut tape, &p, xv).unwrap();
        let xs: Vec<Vec<f64>> = (0..steps)
            .map(|t| (0..n * f).map(|i| x[i * steps + t]).collect())
            .collect();
        let states = reference.run(&xs, n);
        let got = tape.value(seq).to_f64_vec();
        for (t, s) in states.iter().enumerate() {
            let at: Vec<f64> = (0..n * k).map(|i| got[i * steps + t]).collect();
            assert!(max_abs_diff(&at, s) < 1e-12, "step {t}");
        }
    }
}

pub fn conv_mixture_matches_loops() {
    let mut g = rng(14);
    for seed in 0..20 {
        let n = g.gen_range(2..=6);
        let (f, k, m) = (g.gen_range(1..=3), g.gen_range(1..=3), g.gen_range(1..=3));
        let spec = MixtureSpec {
            kind: ExpertKind::Conv,
            input: f,
            output: k,
            filter_len: 3,
            zones: n,
            steps: 1,
            experts: m,
            sharing: Sharing::MultiGate,
            tasks: vec!["a".into(), "b".into()],
            sequences: false,
            gate_hidden: 2,
            activation: Activation::Relu,
            half_width: 0.05,
        };
        let mut store = ParamStore::<f64>::new();
        let layer = MixtureLayer::init(&mut store, &Initializer::new(seed), "mx", &spec).unwrap();
        randomize(&mut store, 0.7, &mut g);
        let rows = 2;
        let x = vec_of(&mut g, rows * n * f);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::from_f64(&[rows, n, f], &x).unwrap());
        for task in ["a", "b"] {
            let y = layer.forward(&mut tape, &p, task, xv).unwrap();
            let got = tape.value(y).to_f64_vec();
            for (r, row) in x.chunks(n * f).enumerate() {
                let outs: Vec<Vec<f64>> = (0..m)
                    .map(|i| {
                        let w = param(&store, &format!("mx.expert{i}.w"));
                        let b = param(&store, &format!("mx.expert{i}.b"));
                        conv1d(row, n, f, &w, k, 3, Some(&b)).into_iter().map(|v| v.max(0.0)).collect()
                    })
                    .collect();
                let logits = dense(row, &param(&store, &format!("mx.gate.{task}.proj.w")), &param(&store, &format!("mx.gate.{task}.proj.b")));
                let want = mix(&softmax(&logits), &outs);
                assert!(max_abs_diff(&got[r * n * k..(r + 1) * n * k], &want) < 1e-12);
            }
        }
    }
}

pub fn full_forward_matches_reference() {
    let mut g = rng(15);
    for case in 0..40 {
        let n = g.gen_range(1..=6);
        let b = g.gen_range(1..=4);
        let ro = roster(n, b, g.gen_range(1..=3), g.gen_range(1..=3), g.gen_range(1..=2));
        let cfg = random_config(&mut g, n);
        let mut net = GesmeNet::<f64>::build(&cfg, &ro).unwrap();
        randomize(&mut net.params, 0.6, &mut g);
        let batch = random_batch(&ro, cfg.tasks.len(), 3, &mut g);

        let got: Vec<Vec<f64>> = net.predict(&batch).unwrap().iter().map(|t| t.to_f64_vec()).collect();
        let feats: Vec<Vec<f64>> = net.predict_features(&batch).unwrap().iter().map(|t| t.to_f64_vec()).collect();
        let want = reference_forward(&net, &batch);
        let want_feats = reference_features(&net, &batch);
        for t in 0..cfg.tasks.len() {
            assert!(max_abs_diff(&feats[t], &want_feats[t]) < 1e-10, "case {case} features {cfg:?}");
            assert!(max_abs_diff(&got[t], &want[t]) < 1e-10, "case {case} {cfg:?}");
        }

        // the working precision stays within 1e-5 of the reference
        let net32: GesmeNet<f32> = net.cast();
        let got32 = net32.predict(&batch.cast()).unwrap();
        for t in 0..cfg.tasks.len() {
            let d = max_abs_diff(&got32[t].to_f64_vec(), &want[t]);
            assert!(d < 1e-5, "case {case}: f32 off by {d}");
        }
    }
}
