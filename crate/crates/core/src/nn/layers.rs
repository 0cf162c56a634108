use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, Group, Init, ParamId, ParamStore};
use super::tensor::{gemm, View, ViewMut};

const LN_EPS: f64 = 1e-5;

/// Forward-pass mode. Dropout is active only when a rate and a generator are
/// both present.
pub struct Ctx {
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Ctx {
            dropout,
            rng: (dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Applies inverted dropout in place and returns the scale mask, or
    /// `None` when dropout is off.
    pub(crate) fn dropout(&mut self, x: &mut [f64]) -> Option<Vec<f64>> {
        let rng = self.rng.as_mut()?;
        let keep = 1.0 - self.dropout;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        Some(mask)
    }
}

pub(crate) fn apply_mask(dy: &[f64], mask: &Option<Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => dy.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => dy.to_vec(),
    }
}

pub(crate) fn add_into(acc: &mut [f64], other: &[f64]) {
    acc.iter_mut().zip(other).for_each(|(a, b)| *a += b);
}

/// Affine map `y = x W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        group: Group,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(
            format!("{name}.weight"),
            &[din, dout],
            group,
            Init::Glorot {
                fan_in: din,
                fan_out: dout,
            },
            rng,
        );
        let b = ps.add(format!("{name}.bias"), &[dout], group, Init::Zeros, rng);
        Linear { w, b, din, dout }
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64], n: usize) -> Vec<f64> {
        let bias = ps.value(self.b);
        let mut y: Vec<f64> = Vec::with_capacity(n * self.dout);
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        gemm(
            View::new(x, n, self.din),
            View::new(ps.value(self.w), self.din, self.dout),
            ViewMut::new(&mut y, n, self.dout),
            1.0,
            1.0,
        );
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, x: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
        self.accumulate(grads, x, dy, n);
        let mut dx = vec![0.0; n * self.din];
        gemm(
            View::new(dy, n, self.dout),
            View::new(ps.value(self.w), self.din, self.dout).t(),
            ViewMut::new(&mut dx, n, self.din),
            1.0,
            0.0,
        );
        dx
    }

    fn accumulate(&self, grads: &mut Grads, x: &[f64], dy: &[f64], n: usize) {
        gemm(
            View::new(x, n, self.din).t(),
            View::new(dy, n, self.dout),
            ViewMut::new(grads.get_mut(self.w), self.din, self.dout),
            1.0,
            1.0,
        );
        let db = grads.get_mut(self.b);
        for row in dy.chunks_exact(self.dout) {
            add_into(db, row);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub d: usize,
}

pub struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, d: usize, group: Group, rng: &mut R) -> Self {
        let gain = ps.add(format!("{name}.gain"), &[d], group, Init::Ones, rng);
        let bias = ps.add(format!("{name}.bias"), &[d], group, Init::Zeros, rng);
        LayerNorm { gain, bias, d }
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> (Vec<f64>, LnCache) {
        let (g, b) = (ps.value(self.gain), ps.value(self.bias));
        let n = x.len() / self.d;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &x[r * self.d..(r + 1) * self.d];
            let mean = row.iter().sum::<f64>() / self.d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..self.d {
                let h = (row[c] - mean) * inv;
                xhat[r * self.d + c] = h;
                y[r * self.d + c] = h * g[c] + b[c];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &LnCache, dy: &[f64]) -> Vec<f64> {
        let g = ps.value(self.gain);
        let d = self.d;
        let mut dx = vec![0.0; dy.len()];
        {
            let dg = grads.get_mut(self.gain);
            for (dyr, hr) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
                for c in 0..d {
                    dg[c] += dyr[c] * hr[c];
                }
            }
        }
        {
            let db = grads.get_mut(self.bias);
            for dyr in dy.chunks_exact(d) {
                add_into(db, dyr);
            }
        }
        for (r, inv) in cache.inv_std.iter().enumerate() {
            let dyr = &dy[r * d..(r + 1) * d];
            let hr = &cache.xhat[r * d..(r + 1) * d];
            let mut mean_dh = 0.0;
            let mut mean_dh_h = 0.0;
            for c in 0..d {
                let dh = dyr[c] * g[c];
                mean_dh += dh;
                mean_dh_h += dh * hr[c];
            }
            mean_dh /= d as f64;
            mean_dh_h /= d as f64;
            for c in 0..d {
                let dh = dyr[c] * g[c];
                dx[r * d + c] = inv * (dh - mean_dh - hr[c] * mean_dh_h);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Position-wise two-layer network with a GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

pub struct FfnCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl FeedForward {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, d: usize, hidden: usize, group: Group, rng: &mut R) -> Self {
        FeedForward {
            inner: Linear::new(ps, &format!("{name}.inner"), d, hidden, group, rng),
            outer: Linear::new(ps, &format!("{name}.outer"), hidden, d, group, rng),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64], n: usize) -> (Vec<f64>, FfnCache) {
        let pre = self.inner.forward(ps, x, n);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.outer.forward(ps, &act, n);
        (
            y,
            FfnCache {
                x: x.to_vec(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &FfnCache, dy: &[f64]) -> Vec<f64> {
        let n = cache.x.len() / self.inner.din;
        let mut dact = self.outer.backward(ps, grads, &cache.act, dy, n);
        dact.iter_mut()
            .zip(&cache.pre)
            .for_each(|(g, &p)| *g *= gelu_grad(p));
        self.inner.backward(ps, grads, &cache.x, &dact, n)
    }
}
