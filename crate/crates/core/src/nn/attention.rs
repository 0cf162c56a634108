use rand::Rng;

use super::layers::{add_into, Linear};
use super::params::{Grads, Group, ParamStore};
use super::tensor::{gemm, View, ViewMut};

/// Which keys a query may attend to.
#[derive(Clone, Copy, Debug)]
pub struct AttnMask<'a> {
    /// `false` marks padding keys.
    pub key_valid: &'a [bool],
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
}

impl<'a> AttnMask<'a> {
    fn allows(&self, query: usize, key: usize) -> bool {
        self.key_valid[key] && (!self.causal || key <= query)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d: usize,
}

pub struct AttnCache {
    xq: Vec<f64>,
    /// Empty for self-attention, where keys come from `xq`.
    xkv: Vec<f64>,
    is_self: bool,
    n: usize,
    m: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × n × m` attention weights.
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

impl AttnCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, d: usize, heads: usize, group: Group, rng: &mut R) -> Self {
        assert!(d.is_multiple_of(heads), "d_model must be divisible by the head count");
        MultiHeadAttention {
            query: Linear::new(ps, &format!("{name}.query"), d, d, group, rng),
            key: Linear::new(ps, &format!("{name}.key"), d, d, group, rng),
            value: Linear::new(ps, &format!("{name}.value"), d, d, group, rng),
            output: Linear::new(ps, &format!("{name}.output"), d, d, group, rng),
            heads,
            d,
        }
    }

    /// Attends from `xq` (`n × d`) to `xkv` (`m × d`). Pass `None` for `xkv`
    /// to attend over `xq` itself.
    pub fn forward(
        &self,
        ps: &ParamStore,
        xq: &[f64],
        xkv: Option<&[f64]>,
        mask: AttnMask<'_>,
    ) -> (Vec<f64>, AttnCache) {
        let d = self.d;
        let n = xq.len() / d;
        let kv_src = xkv.unwrap_or(xq);
        let m = kv_src.len() / d;
        assert_eq!(mask.key_valid.len(), m, "mask length differs from key count");

        let q = self.query.forward(ps, xq, n);
        let k = self.key.forward(ps, kv_src, m);
        let v = self.value.forward(ps, kv_src, m);
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut probs = vec![0.0; self.heads * n * m];
        let mut ctx = vec![0.0; n * d];
        for h in 0..self.heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                View::new(&q, n, d).columns(h * dh, dh),
                View::new(&k, m, d).columns(h * dh, dh).t(),
                ViewMut::new(p, n, m),
                scale,
                0.0,
            );
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter().enumerate() {
                    if mask.allows(i, j) && *s > max {
                        max = *s;
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.iter_mut().for_each(|s| *s = 0.0);
                    continue;
                }
                let mut total = 0.0;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if mask.allows(i, j) { (*s - max).exp() } else { 0.0 };
                    total += *s;
                }
                row.iter_mut().for_each(|s| *s /= total);
            }
            gemm(
                View::new(p, n, m),
                View::new(&v, m, d).columns(h * dh, dh),
                ViewMut::new(&mut ctx, n, d).columns(h * dh, dh),
                1.0,
                0.0,
            );
        }
        let out = self.output.forward(ps, &ctx, n);
        let cache = AttnCache {
            xq: xq.to_vec(),
            xkv: xkv.map(<[f64]>::to_vec).unwrap_or_default(),
            is_self: xkv.is_none(),
            n,
            m,
            q,
            k,
            v,
            probs,
            ctx,
        };
        (out, cache)
    }

    /// Returns `(dL/dxq, dL/dxkv)`. For self-attention the second buffer is
    /// already folded into the first and returned empty.
    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &AttnCache, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let (n, m) = (cache.n, cache.m);
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dctx = self.output.backward(ps, grads, &cache.ctx, dout, n);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut dp = vec![0.0; n * m];
        for h in 0..self.heads {
            let p = &cache.probs[h * n * m..(h + 1) * n * m];
            // dP = dC_h V_h^T
            gemm(
                View::new(&dctx, n, d).columns(h * dh, dh),
                View::new(&cache.v, m, d).columns(h * dh, dh).t(),
                ViewMut::new(&mut dp, n, m),
                1.0,
                0.0,
            );
            // dV_h = P^T dC_h
            gemm(
                View::new(p, n, m).t(),
                View::new(&dctx, n, d).columns(h * dh, dh),
                ViewMut::new(&mut dv, m, d).columns(h * dh, dh),
                1.0,
                0.0,
            );
            // softmax backward, in place: dS = P * (dP - <dP, P>)
            for i in 0..n {
                let pr = &p[i * m..(i + 1) * m];
                let dr = &mut dp[i * m..(i + 1) * m];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                dr.iter_mut().zip(pr).for_each(|(g, &pv)| *g = pv * (*g - dot));
            }
            gemm(
                View::new(&dp, n, m),
                View::new(&cache.k, m, d).columns(h * dh, dh),
                ViewMut::new(&mut dq, n, d).columns(h * dh, dh),
                scale,
                0.0,
            );
            gemm(
                View::new(&dp, n, m).t(),
                View::new(&cache.q, n, d).columns(h * dh, dh),
                ViewMut::new(&mut dk, m, d).columns(h * dh, dh),
                scale,
                0.0,
            );
        }
        let self_attention = cache.is_self;
        let kv_src: &[f64] = if self_attention { &cache.xq } else { &cache.xkv };
        let mut dxq = self.query.backward(ps, grads, &cache.xq, &dq, n);
        let mut dxkv = self.key.backward(ps, grads, kv_src, &dk, m);
        add_into(&mut dxkv, &self.value.backward(ps, grads, kv_src, &dv, m));
        if self_attention {
            add_into(&mut dxq, &dxkv);
            dxkv.clear();
        }
        (dxq, dxkv)
    }
}
