mod common;

use df2m::autodiff::Tape;
use df2m::seqnets::{
    attention_weights, forward_attention, forward_gru, forward_lin, forward_lstm, layer_norm, AttnVars, EncoderConfig,
    EncoderKind, EncoderParams, GruVars, LstmVars,
};
use nalgebra::DMatrix;

use common::{finite_diff, grad_mismatch, random_matrix};

const KINDS: [EncoderKind; 4] = [EncoderKind::Lin, EncoderKind::Lstm, EncoderKind::Gru, EncoderKind::Attn];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn scalar(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

/// Stacked 2×1 weight `[w_h; w_x]`.
fn stacked(wh: f64, wx: f64) -> DMatrix<f64> {
    DMatrix::from_column_slice(2, 1, &[wh, wx])
}

#[test]
fn lstm_scalar_steps_match_hand_computation() {
    let (wf, wi, wc, wo) = ((0.3, -0.5), (0.8, 0.2), (-0.4, 1.1), (0.6, 0.7));
    let (bf, bi, bc, bo) = (0.1, -0.2, 0.05, 0.3);
    let xs = [0.9, -1.4];

    let mut t = Tape::new();
    let p = LstmVars {
        wf: t.leaf(stacked(wf.0, wf.1)),
        wi: t.leaf(stacked(wi.0, wi.1)),
        wc: t.leaf(stacked(wc.0, wc.1)),
        wo: t.leaf(stacked(wo.0, wo.1)),
        bf: t.leaf(scalar(bf)),
        bi: t.leaf(scalar(bi)),
        bc: t.leaf(scalar(bc)),
        bo: t.leaf(scalar(bo)),
    };
    let x = t.constant(DMatrix::from_column_slice(2, 1, &xs));
    let out = forward_lstm(&mut t, &p, x).unwrap();

    let (mut h, mut c) = (0.0, 0.0);
    for (s, x) in xs.iter().enumerate() {
        let f = sigmoid(wf.0 * h + wf.1 * x + bf);
        let i = sigmoid(wi.0 * h + wi.1 * x + bi);
        let cand = (wc.0 * h + wc.1 * x + bc).tanh();
        let o = sigmoid(wo.0 * h + wo.1 * x + bo);
        c = f * c + i * cand;
        h = o * c.tanh();
        assert!((t.value(out)[(s, 0)] - h).abs() < 1e-15, "step {s}");
    }
}

#[test]
fn gru_scalar_steps_match_hand_computation() {
    let (wz, wr, wh) = ((0.4, -0.9), (-0.3, 0.6), (1.2, 0.5));
    let (bz, br, bh) = (0.2, 0.1, -0.3);
    let xs = [1.3, -0.2, 0.7];

    let mut t = Tape::new();
    let p = GruVars {
        wz: t.leaf(stacked(wz.0, wz.1)),
        wr: t.leaf(stacked(wr.0, wr.1)),
        wh: t.leaf(stacked(wh.0, wh.1)),
        bz: t.leaf(scalar(bz)),
        br: t.leaf(scalar(br)),
        bh: t.leaf(scalar(bh)),
    };
    let x = t.constant(DMatrix::from_column_slice(3, 1, &xs));
    let out = forward_gru(&mut t, &p, x).unwrap();

    let mut h = 0.0;
    for (s, x) in xs.iter().enumerate() {
        let z = sigmoid(wz.0 * h + wz.1 * x + bz);
        let r = sigmoid(wr.0 * h + wr.1 * x + br);
        let cand = (wh.0 * (r * h) + wh.1 * x + bh).tanh();
        h = (1.0 - z) * h + z * cand;
        assert!((t.value(out)[(s, 0)] - h).abs() < 1e-15, "step {s}");
    }
}

fn attn(t: &mut Tape, d: usize, seed: u64) -> AttnVars {
    AttnVars {
        wq: t.leaf(random_matrix(d, d, seed)),
        wk: t.leaf(random_matrix(d, d, seed + 1)),
        wv: t.leaf(random_matrix(d, d, seed + 2)),
    }
}

#[test]
fn attention_first_row_is_its_own_value() {
    let mut t = Tape::new();
    let p = attn(&mut t, 3, 4);
    let xm = random_matrix(4, 3, 9);
    let x = t.constant(xm.clone());
    let out = forward_attention(&mut t, &p, x).unwrap();
    let v1 = xm.row(0) * t.value(p.wv);
    assert_eq!(t.value(out).row(0).into_owned(), v1);
}

#[test]
fn identical_queries_and_keys_average_uniformly() {
    let mut t = Tape::new();
    let p = AttnVars {
        wq: t.leaf(DMatrix::zeros(3, 3)),
        wk: t.leaf(random_matrix(3, 3, 1)),
        wv: t.leaf(random_matrix(3, 3, 2)),
    };
    let x = t.constant(random_matrix(5, 3, 3));
    let a = attention_weights(&mut t, &p, x).unwrap();
    let a = t.value(a);
    for r in 0..5 {
        for s in 0..5 {
            let expect = if s <= r { 1.0 / (r + 1) as f64 } else { 0.0 };
            assert!((a[(r, s)] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn attention_weights_are_causal_and_normalized() {
    for seed in 0..10 {
        let mut t = Tape::new();
        let p = attn(&mut t, 4, 10 * seed);
        let x = t.constant(random_matrix(5, 4, 10 * seed + 5) * 3.0);
        let a = attention_weights(&mut t, &p, x).unwrap();
        let a = t.value(a);
        for r in 0..5 {
            let row: f64 = (0..=r).map(|s| a[(r, s)]).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for s in r + 1..5 {
                assert_eq!(a[(r, s)], 0.0);
            }
        }
    }
}

#[test]
fn lin_layer_identity_and_relu() {
    let mut t = Tape::new();
    let w = t.leaf(DMatrix::identity(3, 3));
    let b = t.leaf(DMatrix::zeros(1, 3));
    let pos = random_matrix(4, 3, 2).abs();
    let xp = t.constant(pos.clone());
    let out = forward_lin(&mut t, w, b, xp).unwrap();
    assert_eq!(t.value(out), &pos);
    let xn = t.constant(-pos);
    let out = forward_lin(&mut t, w, b, xn).unwrap();
    assert!(t.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn lin_layer_matches_affine_relu_oracle() {
    let (wm, bm, xm) = (random_matrix(3, 2, 1), random_matrix(1, 2, 2), random_matrix(5, 3, 3));
    let mut t = Tape::new();
    let (w, b, x) = (t.leaf(wm.clone()), t.leaf(bm.clone()), t.constant(xm.clone()));
    let out = forward_lin(&mut t, w, b, x).unwrap();
    for r in 0..5 {
        for c in 0..2 {
            let pre: f64 = (0..3).map(|j| xm[(r, j)] * wm[(j, c)]).sum::<f64>() + bm[(0, c)];
            assert!((t.value(out)[(r, c)] - pre.max(0.0)).abs() < 1e-15);
        }
    }
}

fn encoder(kind: EncoderKind, seed: u64) -> EncoderParams {
    EncoderParams::init(EncoderConfig::new(kind, 6, 5, seed).unwrap())
}

#[test]
fn features_are_causal() {
    for kind in KINDS {
        let enc = encoder(kind, 3);
        let x = random_matrix(6, 6, 4);
        let base = enc.features(&x).unwrap();
        for t in 0..6 {
            let mut y = x.clone();
            for j in 0..6 {
                y[(t, j)] += 0.7 + j as f64;
            }
            let moved = enc.features(&y).unwrap();
            for s in 0..t {
                assert_eq!(base.row(s), moved.row(s), "{kind:?}: row {s} moved after perturbing {t}");
            }
            if kind == EncoderKind::Lin {
                for s in t + 1..6 {
                    assert_eq!(base.row(s), moved.row(s), "lin: row {s} moved after perturbing {t}");
                }
            }
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    for kind in KINDS {
        let enc = encoder(kind, 8);
        let x = layer_norm(&random_matrix(4, 6, 9));
        let probe = random_matrix(4, 5, 10);
        let loss = |values: &[DMatrix<f64>]| -> f64 {
            let mut e = enc.clone();
            for (tensor, v) in e.tensors.iter_mut().zip(values) {
                tensor.value = v.clone();
            }
            let mut t = Tape::new();
            let vars = e.to_tape(&mut t);
            let xv = t.constant(x.clone());
            let h = vars.features(&mut t, xv).unwrap();
            t.value(h).component_mul(&probe).sum()
        };
        let mut t = Tape::new();
        let vars = enc.to_tape(&mut t);
        let xv = t.constant(x.clone());
        let h = vars.features(&mut t, xv).unwrap();
        let pv = t.constant(probe.clone());
        let prod = t.mul(h, pv).unwrap();
        let out = t.sum(prod).unwrap();
        let grads = t.backward(out, &vars.all()).unwrap();
        let values: Vec<_> = enc.tensors.iter().map(|t| t.value.clone()).collect();
        let fd = finite_diff(&values, 1e-6, loss);
        for ((name, v), g) in vars.vars.iter().zip(&fd) {
            let (rel, abs) = grad_mismatch(grads.get(*v).unwrap(), g, 1e-6);
            assert!(rel <= 1e-4 && abs <= 1e-8, "{kind:?} {name}: rel {rel:e} abs {abs:e}");
        }
    }
}

#[test]
fn spectrally_normalized_dense_layers_are_nonexpansive() {
    // input dense + ReLU followed by the LIN core: each layer has operator norm ≤ 1
    let mut enc = encoder(EncoderKind::Lin, 12);
    for t in enc.tensors.iter_mut().filter(|t| t.is_weight) {
        t.value *= 4.0;
    }
    enc.spectral_normalize();
    let feats = |x: &DMatrix<f64>| {
        let mut t = Tape::new();
        let vars = enc.to_tape(&mut t);
        let xv = t.constant(x.clone());
        let h = vars.features(&mut t, xv).unwrap();
        t.value(h).clone()
    };
    for seed in 0..50 {
        let a = random_matrix(1, 6, 100 + seed) * 3.0;
        let b = &a + random_matrix(1, 6, 200 + seed) * (0.01 + seed as f64 * 0.05);
        let dh = (feats(&a) - feats(&b)).norm();
        let dx = (&a - &b).norm();
        assert!(dh <= 1.05 * dx, "pair {seed}: {dh} > {dx}");
    }
}
