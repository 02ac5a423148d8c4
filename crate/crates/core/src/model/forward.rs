use std::collections::{BTreeMap, BTreeSet};

use crate::cache::ActivationCache;
use crate::error::{Error, Result};
use crate::model::{HookSite, Model};
use crate::rope::rope_apply;
use crate::scalar::Scalar;
use crate::tensor::{add_assign, dot, rms_norm, softmax, vec_mat, Tensor2D};

/// Replacement vectors keyed by `(site, position)`.
pub(crate) type PatchMap<'a, T> = BTreeMap<(HookSite, usize), &'a [T]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LogitsScope {
    All,
    Last,
}

pub(crate) struct RunOutput<T> {
    /// `seq × vocab` for [`LogitsScope::All`], `1 × vocab` for `Last`.
    pub logits: Tensor2D<T>,
    pub cache: ActivationCache<T>,
}

/// Logits at every position plus the captured activations.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Tensor2D<T>,
    pub cache: ActivationCache<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    /// Answer-selection logits (last position).
    pub fn last_logits(&self) -> &[T] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Full-sequence causal forward pass, capturing the requested sites at every
/// position. Capturing never alters the computation.
pub fn forward<T: Scalar>(model: &Model<T>, tokens: &[u32], capture: &BTreeSet<HookSite>) -> Result<ForwardOutput<T>> {
    let out = run(model, tokens, capture, &PatchMap::new(), LogitsScope::All)?;
    Ok(ForwardOutput { logits: out.logits, cache: out.cache })
}

/// The residual-stream contribution of one head: `head_out` times the head's
/// rows of the output projection.
pub fn head_contribution<T: Scalar>(model: &Model<T>, layer: usize, head: usize, head_out: &[T]) -> Result<Vec<T>> {
    let cfg = model.config();
    HookSite::head_out(layer, head).validate(cfg)?;
    if head_out.len() != cfg.head_dim {
        return Err(Error::Shape(format!("head output of length {} vs head_dim {}", head_out.len(), cfg.head_dim)));
    }
    let wo = &model.weights().layers[layer].wo;
    let mut out = vec![T::zero(); cfg.d_model];
    for (i, &x) in head_out.iter().enumerate() {
        let row = wo.row(head * cfg.head_dim + i);
        for (o, &w) in out.iter_mut().zip(row) {
            *o = *o + x * w;
        }
    }
    Ok(out)
}

fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

struct Recorder<'a, T> {
    capture: &'a BTreeSet<HookSite>,
    cache: ActivationCache<T>,
}

impl<T: Scalar> Recorder<'_, T> {
    fn wants(&self, site: &HookSite) -> bool {
        self.capture.contains(site)
    }

    fn record(&mut self, site: HookSite, pos: usize, v: &[T]) {
        if self.wants(&site) {
            self.cache.insert_unchecked(site, pos, v.to_vec());
        }
    }
}

fn apply_patch<T: Scalar>(patches: &PatchMap<'_, T>, site: HookSite, pos: usize, v: &mut [T]) -> Result<()> {
    if let Some(src) = patches.get(&(site, pos)) {
        if src.len() != v.len() {
            return Err(Error::Shape(format!(
                "patch for {site} at {pos} has length {}, expected {}",
                src.len(),
                v.len()
            )));
        }
        v.copy_from_slice(src);
    }
    Ok(())
}

pub(crate) fn run<T: Scalar>(
    model: &Model<T>,
    tokens: &[u32],
    capture: &BTreeSet<HookSite>,
    patches: &PatchMap<'_, T>,
    scope: LogitsScope,
) -> Result<RunOutput<T>> {
    let cfg = model.config();
    let w = model.weights();
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {bad} out of range for vocab_size {}", cfg.vocab_size)));
    }
    for site in capture {
        site.validate(cfg)?;
    }
    let n = tokens.len();
    let hd = cfg.head_dim;
    let eps = T::of(cfg.norm_eps);
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut rec = Recorder { capture, cache: ActivationCache::new(n, model.fingerprint().to_string()) };

    let mut resid: Vec<Vec<T>> = Vec::with_capacity(n);
    for (p, &t) in tokens.iter().enumerate() {
        let mut e = w.tok_embeddings.row(t as usize).to_vec();
        apply_patch(patches, HookSite::embed(), p, &mut e)?;
        rec.record(HookSite::embed(), p, &e);
        resid.push(e);
    }

    for (l, lw) in w.layers.iter().enumerate() {
        // attention
        let mut q = Vec::with_capacity(n);
        let mut k = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (p, x) in resid.iter().enumerate() {
            let normed = rms_norm(x, &lw.attention_norm, eps)?;
            let mut qp = vec_mat(&normed, &lw.wq)?;
            let mut kp = vec_mat(&normed, &lw.wk)?;
            for chunk in qp.chunks_mut(hd) {
                let r = rope_apply(chunk, p, &cfg.rope)?;
                chunk.copy_from_slice(&r);
            }
            for chunk in kp.chunks_mut(hd) {
                let r = rope_apply(chunk, p, &cfg.rope)?;
                chunk.copy_from_slice(&r);
            }
            q.push(qp);
            k.push(kp);
            v.push(vec_mat(&normed, &lw.wv)?);
        }

        let mut heads_concat = vec![vec![T::zero(); cfg.n_heads * hd]; n];
        for h in 0..cfg.n_heads {
            let kvh = cfg.kv_head_for(h);
            let kv_range = kvh * hd..(kvh + 1) * hd;
            let vv_site = HookSite::value_vectors(l, h);
            if rec.wants(&vv_site) {
                for (s, vs) in v.iter().enumerate() {
                    rec.record(vv_site, s, &vs[kv_range.clone()]);
                }
            }
            for t in 0..n {
                let qt = &q[t][h * hd..(h + 1) * hd];
                let scores: Vec<T> = (0..=t).map(|s| dot(qt, &k[s][kv_range.clone()]) * scale).collect();
                let pattern = softmax(&scores)?;
                let pat_site = HookSite::attn_pattern(l, h);
                if rec.wants(&pat_site) {
                    let mut row = pattern.clone();
                    row.resize(n, T::zero());
                    rec.record(pat_site, t, &row);
                }
                let mut out = vec![T::zero(); hd];
                for (s, &a) in pattern.iter().enumerate() {
                    for (o, &vx) in out.iter_mut().zip(&v[s][kv_range.clone()]) {
                        *o = *o + a * vx;
                    }
                }
                let site = HookSite::head_out(l, h);
                apply_patch(patches, site, t, &mut out)?;
                rec.record(site, t, &out);
                heads_concat[t][h * hd..(h + 1) * hd].copy_from_slice(&out);
            }
        }
        for (t, hc) in heads_concat.iter().enumerate() {
            let mut attn = vec_mat(hc, &lw.wo)?;
            let site = HookSite::attn_out(l);
            apply_patch(patches, site, t, &mut attn)?;
            rec.record(site, t, &attn);
            add_assign(&mut resid[t], &attn);
        }

        // mlp
        for (t, x) in resid.iter_mut().enumerate() {
            let normed = rms_norm(x, &lw.ffn_norm, eps)?;
            let gate = vec_mat(&normed, &lw.w_gate)?;
            let up = vec_mat(&normed, &lw.w_up)?;
            let hidden: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let mut mlp = vec_mat(&hidden, &lw.w_down)?;
            let site = HookSite::mlp_out(l);
            apply_patch(patches, site, t, &mut mlp)?;
            rec.record(site, t, &mlp);
            add_assign(x, &mlp);
        }
    }

    for (t, x) in resid.iter().enumerate() {
        rec.record(HookSite::resid_final(), t, x);
    }
    let positions: Vec<usize> = match scope {
        LogitsScope::All => (0..n).collect(),
        LogitsScope::Last => vec![n - 1],
    };
    let mut rows = Vec::with_capacity(positions.len());
    for &p in &positions {
        rows.push(model.logits_from_residual(&resid[p])?);
    }
    let logits = Tensor2D::from_rows(&rows)?;
    let mut cache = rec.cache;
    cache.set_last_logits(logits.row(logits.rows() - 1).to_vec());
    Ok(RunOutput { logits, cache })
}
