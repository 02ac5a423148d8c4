#![allow(dead_code)]

use std::path::PathBuf;

use plab::model::toy::{bundled_toy_model, ToySpec};
use plab::model::{LayerWeights, ModelWeights};
use plab::prompt::Category;
use plab::rope::RopeParams;
use plab::tokenizer::{Tokenizer, WordTokenizer};
use plab::{fixtures, Model, Model32, Model64, ModelConfig, Scalar, Tensor2D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn json(name: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(data(name)).unwrap()).unwrap()
}

/// Deterministic small weights shared with `tests/data/gen_oracles.py`.
pub fn formula<T: Scalar>(seed: usize, rows: usize, cols: usize) -> Tensor2D<T> {
    let data = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| T::of((((i * 5 + j * 3 + seed * 7) % 11) as f64 - 5.0) / 8.0)))
        .collect();
    Tensor2D::new(rows, cols, data).unwrap()
}

pub fn formula_gains<T: Scalar>(seed: usize, n: usize) -> Vec<T> {
    (0..n).map(|i| T::of(1.0 + (((i + seed) % 3) as f64 - 1.0) / 10.0)).collect()
}

pub fn tiny_config(vocab: usize, d_ff: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 4,
        n_heads: 1,
        n_kv_heads: 1,
        head_dim: 4,
        d_ff,
        vocab_size: vocab,
        rope: RopeParams::new(10_000.0, 4).unwrap(),
        norm_eps: 1e-5,
        tied_embeddings: false,
    }
}

/// The 1-layer, 1-head, `d_model` 4 model of the forward oracle.
pub fn tiny_model<T: Scalar>() -> Model<T> {
    let layer = LayerWeights {
        attention_norm: formula_gains(2, 4),
        wq: formula(3, 4, 4),
        wk: formula(4, 4, 4),
        wv: formula(5, 4, 4),
        wo: formula(6, 4, 4),
        ffn_norm: formula_gains(7, 4),
        w_gate: formula(8, 4, 3),
        w_up: formula(9, 4, 3),
        w_down: formula(10, 3, 4),
    };
    let weights = ModelWeights {
        tok_embeddings: formula(1, 6, 4),
        layers: vec![layer],
        norm: formula_gains(11, 4),
        output: Some(formula(12, 4, 6)),
    };
    Model::new(tiny_config(6, 3), weights).unwrap()
}

pub fn toy() -> Model32 {
    bundled_toy_model(7).unwrap()
}

pub fn toy_with(f: impl FnOnce(&mut ToySpec)) -> Model32 {
    let tok = fixtures::bundled_tokenizer();
    let mut spec = ToySpec::standard(7, tok.vocab().len());
    f(&mut spec);
    spec.build(Some(tok.vocab().to_vec())).unwrap()
}

pub fn tokenizer() -> WordTokenizer {
    fixtures::bundled_tokenizer()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x.wide() - y.wide()).abs()).fold(0.0, f64::max)
}

pub fn small_spec(n_kv_heads: usize, seed: u64) -> ToySpec {
    let mut s = ToySpec::standard(seed, 20);
    s.d_model = 16;
    s.n_heads = 4;
    s.n_kv_heads = n_kv_heads;
    s.d_ff = 24;
    s.theta_base = 10_000.0;
    s
}

/// Plain multi-head attention transformer, written independently of the
/// runtime: every head has its own key and value projection.
pub fn reference_mha(m: &Model64, tokens: &[u32]) -> Vec<f64> {
    let c = m.config();
    let w = m.weights();
    let (d, hd, nh) = (c.d_model, c.head_dim, c.n_heads);
    let rms = |x: &[f64], g: &[f64]| {
        let s = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + c.norm_eps).sqrt();
        x.iter().zip(g).map(|(v, g)| g * v / s).collect::<Vec<f64>>()
    };
    let mm = |x: &[f64], t: &Tensor2D<f64>| {
        (0..t.cols()).map(|j| (0..t.rows()).map(|i| x[i] * t.get(i, j)).sum::<f64>()).collect::<Vec<f64>>()
    };
    let rot = |x: &[f64], pos: usize| {
        let half = x.len() / 2;
        let mut out = vec![0.0; x.len()];
        for i in 0..half {
            let ang = pos as f64 * c.rope.theta_base.powf(-2.0 * i as f64 / hd as f64);
            out[i] = x[i] * ang.cos() - x[i + half] * ang.sin();
            out[i + half] = x[i] * ang.sin() + x[i + half] * ang.cos();
        }
        out
    };
    let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| w.tok_embeddings.row(t as usize).to_vec()).collect();
    for lw in &w.layers {
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, &lw.attention_norm)).collect();
        let mut concat = vec![vec![0.0; nh * hd]; xs.len()];
        for h in 0..nh {
            let cols = |t: &Tensor2D<f64>, x: &[f64]| mm(x, t)[h * hd..(h + 1) * hd].to_vec();
            let q: Vec<Vec<f64>> = normed.iter().enumerate().map(|(p, x)| rot(&cols(&lw.wq, x), p)).collect();
            let k: Vec<Vec<f64>> = normed.iter().enumerate().map(|(p, x)| rot(&cols(&lw.wk, x), p)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|x| cols(&lw.wv, x)).collect();
            for t in 0..xs.len() {
                let s: Vec<f64> = (0..=t)
                    .map(|j| q[t].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for i in 0..hd {
                        concat[t][h * hd + i] += ej / z * v[j][i];
                    }
                }
            }
        }
        for (x, hc) in xs.iter_mut().zip(&concat) {
            for (a, b) in x.iter_mut().zip(mm(hc, &lw.wo)) {
                *a += b;
            }
        }
        for x in xs.iter_mut() {
            let n = rms(x, &lw.ffn_norm);
            let g = mm(&n, &lw.w_gate);
            let u = mm(&n, &lw.w_up);
            let hid: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            for (a, b) in x.iter_mut().zip(mm(&hid, &lw.w_down)) {
                *a += b;
            }
        }
    }
    let last = rms(xs.last().unwrap(), &w.norm);
    let _ = d;
    mm(&last, w.output.as_ref().unwrap())
}

/// Layer-0 attention weights and value vectors recomputed in f64 straight
/// from the weight matrices.
pub fn layer0_by_hand(m: &Model32, tokens: &[u32], head: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let c = m.config();
    let w = &m.weights().layers[0];
    let hd = c.head_dim;
    let kv = head / (c.n_heads / c.n_kv_heads);
    let normed: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| {
            let x: Vec<f64> = m.weights().tok_embeddings.row(t as usize).iter().map(|&v| v as f64).collect();
            let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
            let r = 1.0 / (ms + c.norm_eps).sqrt();
            x.iter().zip(&w.attention_norm).map(|(v, g)| v * r * *g as f64).collect()
        })
        .collect();
    let proj = |x: &[f64], wt: &plab::Tensor2D<f32>, off: usize| -> Vec<f64> {
        (0..hd).map(|j| x.iter().enumerate().map(|(i, v)| v * wt.get(i, off + j) as f64).sum()).collect()
    };
    let rope = |v: Vec<f64>, pos: usize| -> Vec<f64> {
        let half = hd / 2;
        let mut out = v.clone();
        for i in 0..half {
            let a = pos as f64 * c.rope.theta_base.powf(-2.0 * i as f64 / hd as f64);
            out[i] = v[i] * a.cos() - v[i + half] * a.sin();
            out[i + half] = v[i] * a.sin() + v[i + half] * a.cos();
        }
        out
    };
    let qs: Vec<_> = normed.iter().enumerate().map(|(p, x)| rope(proj(x, &w.wq, head * hd), p)).collect();
    let ks: Vec<_> = normed.iter().enumerate().map(|(p, x)| rope(proj(x, &w.wk, kv * hd), p)).collect();
    let vs: Vec<_> = normed.iter().map(|x| proj(x, &w.wv, kv * hd)).collect();
    let scale = 1.0 / (hd as f64).sqrt();
    let pattern = (0..tokens.len())
        .map(|i| {
            let s: Vec<f64> =
                (0..=i).map(|j| qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            s.iter().map(|v| (v - mx).exp() / z).collect()
        })
        .collect();
    (pattern, vs)
}

/// One-layer toy whose key/value head 0 (query heads 0 and 1) reads a
/// single embedding coordinate that only racial identity tokens carry.
pub fn planted_model() -> Model32 {
    let tok = tokenizer();
    let (cfg, mut w, vocab) = toy_with(|s| s.n_layers = 1).into_parts();
    for row in 0..cfg.vocab_size {
        w.tok_embeddings.set(row, 0, 0.0);
    }
    for id in fixtures::identities().all().iter().filter(|i| i.category == Category::Racial) {
        let t = tok.encode(&format!(" {}", id.surface)).unwrap();
        assert_eq!(t.len(), 1);
        w.tok_embeddings.set(t[0] as usize, 0, 3.0);
    }
    let wv = &mut w.layers[0].wv;
    for col in 0..cfg.head_dim {
        for row in 0..cfg.d_model {
            wv.set(row, col, if row == 0 { 10.0 } else { 0.0 });
        }
    }
    Model::with_vocab(cfg, w, vocab).unwrap()
}
