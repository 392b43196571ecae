//! Forward and backward passes for one sequence at a time.

use crate::error::{Error, Result};
use crate::scalar::{gemm_into, matmul, Mat, Scalar};
use crate::vocab::TokenId;

use super::Model;

/// Keys (after rotation) and values of every processed position.
#[derive(Clone, Debug, Default)]
pub struct KvCache<T> {
    layers: Vec<(Vec<T>, Vec<T>)>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new(), len: 0 }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops positions at and after `len`.
    pub fn truncate(&mut self, len: usize, model_dim: usize) {
        if len < self.len {
            for (k, v) in &mut self.layers {
                k.truncate(len * model_dim);
                v.truncate(len * model_dim);
            }
            self.len = len;
        }
    }
}

/// Which logit rows a cached forward call returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wanted {
    All,
    Last,
    None,
}

/// Activations kept for the backward pass.
pub(crate) struct LayerCache<T> {
    x_in: Vec<T>,
    r1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    x_mid: Vec<T>,
    r2: Vec<T>,
    h2: Vec<T>,
    g: Vec<T>,
    u: Vec<T>,
    s: Vec<T>,
}

pub(crate) struct SeqCache<T> {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    r_final: Vec<T>,
    h_final: Vec<T>,
}

fn rmsnorm<T: Scalar>(x: &[T], n: usize, d: usize, gain: &[T], eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); n * d];
    let mut rs = Vec::with_capacity(n);
    let dn = T::from_usize(d).expect("dim");
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let r = T::one() / (ms + eps).sqrt();
        for i in 0..d {
            out[t * d + i] = row[i] * r * gain[i];
        }
        rs.push(r);
    }
    (out, rs)
}

/// Accumulates input and gain gradients of `y = x * r * gain`.
fn rmsnorm_backward<T: Scalar>(dy: &[T], x: &[T], r: &[T], gain: &[T], d: usize, dx: &mut [T], dgain: &mut [T]) {
    let dn = T::from_usize(d).expect("dim");
    for (t, &rt) in r.iter().enumerate() {
        let row = t * d..(t + 1) * d;
        let (dy, x, dx) = (&dy[row.clone()], &x[row.clone()], &mut dx[row]);
        let mut dot = T::zero();
        for i in 0..d {
            dgain[i] += dy[i] * x[i] * rt;
            dot += dy[i] * gain[i] * x[i];
        }
        let coef = rt * rt * rt * dot / dn;
        for i in 0..d {
            dx[i] += rt * dy[i] * gain[i] - x[i] * coef;
        }
    }
}

fn silu_parts<T: Scalar>(g: T) -> (T, T) {
    let sig = T::one() / (T::one() + (-g).exp());
    (g * sig, sig * (T::one() + g * (T::one() - sig)))
}

impl<T: Scalar> Model<T> {
    fn check_ids(&self, ids: &[TokenId], offset: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("forward needs at least one token"));
        }
        if offset + ids.len() > self.cfg.context_length {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds context length {}",
                offset + ids.len(),
                self.cfg.context_length
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId]) -> Vec<T> {
        let d = self.cfg.model_dim;
        let table = self.p(self.layout.embed, self.cfg.vocab_size * d);
        let mut x = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            x.extend_from_slice(&table[id as usize * d..(id as usize + 1) * d]);
        }
        x
    }

    /// Rotates each head's adjacent coordinate pairs by the position angle;
    /// `inverse` applies the transpose rotation.
    fn rope(&self, buf: &mut [T], n: usize, pos0: usize, inverse: bool) {
        let (d, hd) = (self.cfg.model_dim, self.cfg.head_dim());
        let half = hd / 2;
        for t in 0..n {
            let table = (pos0 + t) * half;
            for h in 0..self.cfg.heads {
                let base = t * d + h * hd;
                for i in 0..half {
                    let (c, mut s) = (self.rope_cos[table + i], self.rope_sin[table + i]);
                    if inverse {
                        s = -s;
                    }
                    let (a, b) = (buf[base + 2 * i], buf[base + 2 * i + 1]);
                    buf[base + 2 * i] = a * c - b * s;
                    buf[base + 2 * i + 1] = a * s + b * c;
                }
            }
        }
    }

    /// Runs one layer over `n` new rows of `x` in place, appending the new
    /// keys and values to `kv`.
    fn layer_forward(&self, l: usize, x: &mut [T], n: usize, kv: &mut (Vec<T>, Vec<T>), store: bool) -> Option<LayerCache<T>> {
        let cfg = &self.cfg;
        let (d, hd, nh, hid) = (cfg.model_dim, cfg.head_dim(), cfg.heads, cfg.hidden_dim());
        let eps = T::from_f64_lossy(cfg.norm_eps);
        let o = self.layout.layers[l];
        let past = kv.0.len() / d;
        let total = past + n;

        let x_in = store.then(|| x.to_vec());
        let (h1, r1) = rmsnorm(x, n, d, self.p(o.attn_norm, d), eps);
        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * d];
        let mut v = vec![T::zero(); n * d];
        matmul(Mat::new(&h1, n, d), Mat::new(self.p(o.wq, d * d), d, d), &mut q, false);
        matmul(Mat::new(&h1, n, d), Mat::new(self.p(o.wk, d * d), d, d), &mut k, false);
        matmul(Mat::new(&h1, n, d), Mat::new(self.p(o.wv, d * d), d, d), &mut v, false);
        self.rope(&mut q, n, past, false);
        self.rope(&mut k, n, past, false);
        kv.0.extend_from_slice(&k);
        kv.1.extend_from_slice(&v);

        let scale = T::one() / T::from_usize(hd).expect("dim").sqrt();
        let mut att = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); if store { nh * n * total } else { n * total }];
        for h in 0..nh {
            let p = if store { &mut probs[h * n * total..(h + 1) * n * total] } else { &mut probs[..] };
            gemm_into(
                Mat::strided(&q[h * hd..], n, hd, d, 1),
                Mat::strided(&kv.0[h * hd..], hd, total, 1, d),
                p,
                total,
                false,
            );
            for i in 0..n {
                let row = &mut p[i * total..(i + 1) * total];
                let visible = past + i + 1;
                let mut max = T::neg_infinity();
                for s in &mut row[..visible] {
                    *s = *s * scale;
                    max = max.max(*s);
                }
                let mut sum = T::zero();
                for s in &mut row[..visible] {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in &mut row[..visible] {
                    *s = *s / sum;
                }
                row[visible..].fill(T::zero());
            }
            gemm_into(Mat::new(p, n, total), Mat::strided(&kv.1[h * hd..], total, hd, d, 1), &mut att[h * hd..], d, false);
        }
        matmul(Mat::new(&att, n, d), Mat::new(self.p(o.wo, d * d), d, d), x, true);

        let x_mid = store.then(|| x.to_vec());
        let (h2, r2) = rmsnorm(x, n, d, self.p(o.mlp_norm, d), eps);
        let mut g = vec![T::zero(); n * hid];
        let mut u = vec![T::zero(); n * hid];
        matmul(Mat::new(&h2, n, d), Mat::new(self.p(o.w_gate, d * hid), d, hid), &mut g, false);
        matmul(Mat::new(&h2, n, d), Mat::new(self.p(o.w_up, d * hid), d, hid), &mut u, false);
        let s: Vec<T> = g.iter().zip(&u).map(|(&g, &u)| silu_parts(g).0 * u).collect();
        matmul(Mat::new(&s, n, hid), Mat::new(self.p(o.w_down, hid * d), hid, d), x, true);

        store.then(|| LayerCache {
            x_in: x_in.expect("stored"),
            r1,
            h1,
            q,
            k,
            v,
            probs,
            att,
            x_mid: x_mid.expect("stored"),
            r2,
            h2,
            g,
            u,
            s,
        })
    }

    /// Logits for the rows of the final hidden state `hf` (`n x model_dim`).
    fn head(&self, hf: &[T], n: usize) -> Vec<T> {
        let (d, vs) = (self.cfg.model_dim, self.cfg.vocab_size);
        let mut logits = vec![T::zero(); n * vs];
        match self.head_offset() {
            Some(off) => matmul(Mat::new(hf, n, d), Mat::new(self.p(off, d * vs), d, vs), &mut logits, false),
            None => matmul(Mat::new(hf, n, d), Mat::new(self.p(self.layout.embed, vs * d), vs, d).t(), &mut logits, false),
        }
        logits
    }

    /// Processes `ids` after the positions already in `cache` and returns
    /// the requested logit rows (`rows x vocab_size`, row-major).
    pub fn forward_cached(&self, cache: &mut KvCache<T>, ids: &[TokenId], wanted: Wanted) -> Result<Vec<T>> {
        self.check_ids(ids, cache.len)?;
        if cache.layers.is_empty() {
            cache.layers = vec![(Vec::new(), Vec::new()); self.cfg.layers];
        }
        let (n, d) = (ids.len(), self.cfg.model_dim);
        let mut x = self.embed(ids);
        for (l, kv) in cache.layers.iter_mut().enumerate() {
            self.layer_forward(l, &mut x, n, kv, false);
        }
        cache.len += n;
        let eps = T::from_f64_lossy(self.cfg.norm_eps);
        let gain = self.p(self.layout.final_norm, d);
        Ok(match wanted {
            Wanted::None => Vec::new(),
            Wanted::All => self.head(&rmsnorm(&x, n, d, gain, eps).0, n),
            Wanted::Last => self.head(&rmsnorm(&x[(n - 1) * d..], 1, d, gain, eps).0, 1),
        })
    }

    /// Logits for every position: `len x vocab_size`, row-major.
    pub fn forward(&self, ids: &[TokenId]) -> Result<Vec<T>> {
        self.forward_cached(&mut KvCache::new(), ids, Wanted::All)
    }

    /// Logits at the last position only.
    pub fn forward_last(&self, ids: &[TokenId]) -> Result<Vec<T>> {
        self.forward_cached(&mut KvCache::new(), ids, Wanted::Last)
    }

    /// Last-position logits for several independent sequences. Each
    /// sequence is computed exactly as by [`Model::forward_last`].
    pub fn forward_batch(&self, seqs: &[&[TokenId]]) -> Result<Vec<Vec<T>>> {
        seqs.iter().map(|s| self.forward_last(s)).collect()
    }

    pub(crate) fn forward_train(&self, ids: &[TokenId]) -> Result<(Vec<T>, SeqCache<T>)> {
        self.check_ids(ids, 0)?;
        let (n, d) = (ids.len(), self.cfg.model_dim);
        let mut x = self.embed(ids);
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let mut kv = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
            layers.push(self.layer_forward(l, &mut x, n, &mut kv, true).expect("stored"));
        }
        let eps = T::from_f64_lossy(self.cfg.norm_eps);
        let (h_final, r_final) = rmsnorm(&x, n, d, self.p(self.layout.final_norm, d), eps);
        let logits = self.head(&h_final, n);
        Ok((logits, SeqCache { tokens: ids.to_vec(), layers, x_final: x, r_final, h_final }))
    }

    /// Accumulates parameter gradients into `grads` given `dlogits`.
    pub(crate) fn backward(&self, cache: &SeqCache<T>, dlogits: &[T], grads: &mut [T]) {
        let cfg = &self.cfg;
        let (vs, d, hd, nh, hid) = (cfg.vocab_size, cfg.model_dim, cfg.head_dim(), cfg.heads, cfg.hidden_dim());
        let n = cache.tokens.len();
        let lay = &self.layout;

        let mut dhf = vec![T::zero(); n * d];
        match lay.head {
            Some(off) => {
                matmul(Mat::new(&cache.h_final, n, d).t(), Mat::new(dlogits, n, vs), &mut grads[off..off + d * vs], true);
                matmul(Mat::new(dlogits, n, vs), Mat::new(self.p(off, d * vs), d, vs).t(), &mut dhf, false);
            }
            None => {
                let e = lay.embed;
                matmul(Mat::new(dlogits, n, vs).t(), Mat::new(&cache.h_final, n, d), &mut grads[e..e + vs * d], true);
                matmul(Mat::new(dlogits, n, vs), Mat::new(self.p(e, vs * d), vs, d), &mut dhf, false);
            }
        }
        let mut dx = vec![T::zero(); n * d];
        let fnorm = lay.final_norm;
        let dgain = &mut grads[fnorm..fnorm + d];
        rmsnorm_backward(&dhf, &cache.x_final, &cache.r_final, self.p(fnorm, d), d, &mut dx, dgain);

        let scale = T::one() / T::from_usize(hd).expect("dim").sqrt();
        for l in (0..cfg.layers).rev() {
            let o = lay.layers[l];
            let c = &cache.layers[l];

            // feed-forward block
            let mut ds = vec![T::zero(); n * hid];
            matmul(Mat::new(&dx, n, d), Mat::new(self.p(o.w_down, hid * d), hid, d).t(), &mut ds, false);
            matmul(Mat::new(&c.s, n, hid).t(), Mat::new(&dx, n, d), &mut grads[o.w_down..o.w_down + hid * d], true);
            let mut dg = vec![T::zero(); n * hid];
            let mut du = vec![T::zero(); n * hid];
            for i in 0..n * hid {
                let (act, dact) = silu_parts(c.g[i]);
                du[i] = ds[i] * act;
                dg[i] = ds[i] * c.u[i] * dact;
            }
            let mut dh2 = vec![T::zero(); n * d];
            matmul(Mat::new(&dg, n, hid), Mat::new(self.p(o.w_gate, d * hid), d, hid).t(), &mut dh2, false);
            matmul(Mat::new(&du, n, hid), Mat::new(self.p(o.w_up, d * hid), d, hid).t(), &mut dh2, true);
            matmul(Mat::new(&c.h2, n, d).t(), Mat::new(&dg, n, hid), &mut grads[o.w_gate..o.w_gate + d * hid], true);
            matmul(Mat::new(&c.h2, n, d).t(), Mat::new(&du, n, hid), &mut grads[o.w_up..o.w_up + d * hid], true);
            let dgain = &mut grads[o.mlp_norm..o.mlp_norm + d];
            rmsnorm_backward(&dh2, &c.x_mid, &c.r2, self.p(o.mlp_norm, d), d, &mut dx, dgain);

            // attention block
            let mut datt = vec![T::zero(); n * d];
            matmul(Mat::new(&dx, n, d), Mat::new(self.p(o.wo, d * d), d, d).t(), &mut datt, false);
            matmul(Mat::new(&c.att, n, d).t(), Mat::new(&dx, n, d), &mut grads[o.wo..o.wo + d * d], true);
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            let mut dp = vec![T::zero(); n * n];
            for h in 0..nh {
                let p = &c.probs[h * n * n..(h + 1) * n * n];
                let datt_h = Mat::strided(&datt[h * hd..], n, hd, d, 1);
                gemm_into(datt_h, Mat::strided(&c.v[h * hd..], hd, n, 1, d), &mut dp, n, false);
                gemm_into(Mat::new(p, n, n).t(), datt_h, &mut dv[h * hd..], d, false);
                for i in 0..n {
                    let row = i * n..(i + 1) * n;
                    let dot: T = p[row.clone()].iter().zip(&dp[row.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in row {
                        dp[j] = p[j] * (dp[j] - dot) * scale;
                    }
                }
                gemm_into(Mat::new(&dp, n, n), Mat::strided(&c.k[h * hd..], n, hd, d, 1), &mut dq[h * hd..], d, false);
                gemm_into(Mat::new(&dp, n, n).t(), Mat::strided(&c.q[h * hd..], n, hd, d, 1), &mut dk[h * hd..], d, false);
            }
            self.rope(&mut dq, n, 0, true);
            self.rope(&mut dk, n, 0, true);
            let mut dh1 = vec![T::zero(); n * d];
            for (w, dw) in [(o.wq, &dq), (o.wk, &dk), (o.wv, &dv)] {
                matmul(Mat::new(dw, n, d), Mat::new(self.p(w, d * d), d, d).t(), &mut dh1, true);
                matmul(Mat::new(&c.h1, n, d).t(), Mat::new(dw, n, d), &mut grads[w..w + d * d], true);
            }
            let dgain = &mut grads[o.attn_norm..o.attn_norm + d];
            rmsnorm_backward(&dh1, &c.x_in, &c.r1, self.p(o.attn_norm, d), d, &mut dx, dgain);
        }

        let e = lay.embed;
        for (t, &id) in cache.tokens.iter().enumerate() {
            let row = &mut grads[e + id as usize * d..e + (id as usize + 1) * d];
            for (g, &v) in row.iter_mut().zip(&dx[t * d..(t + 1) * d]) {
                *g += v;
            }
        }
    }
}
