//! Policy/value network: one shared ReLU torso feeding a policy head and a
//! scalar baseline head, with hand-written reverse mode.

use rand::Rng;

use super::array::{Array, DimError};
use super::scalar::Scalar;

pub const DEFAULT_HIDDEN: usize = 128;

/// Parameter names in storage order; also the checkpoint record names.
pub const PARAM_NAMES: [&str; 6] = ["W1", "b1", "Wp", "bp", "Wv", "bv"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub obs_dim: usize,
    pub hidden: usize,
    pub num_actions: usize,
}

impl ModelShape {
    pub fn new(obs_dim: usize, hidden: usize, num_actions: usize) -> Self {
        ModelShape {
            obs_dim,
            hidden,
            num_actions,
        }
    }

    /// Expected dims of each parameter, in [`PARAM_NAMES`] order.
    pub fn param_dims(&self) -> [Vec<usize>; 6] {
        let (d, h, a) = (self.obs_dim, self.hidden, self.num_actions);
        [vec![h, d], vec![h], vec![a, h], vec![a], vec![1, h], vec![1]]
    }
}

/// Weights and biases of the network plus a version counter bumped by every
/// optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub w1: Array<S>,
    pub b1: Array<S>,
    pub wp: Array<S>,
    pub bp: Array<S>,
    pub wv: Array<S>,
    pub bv: Array<S>,
    pub version: u64,
}

/// Gradients matching [`ModelParams`] field for field.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<S> {
    pub w1: Array<S>,
    pub b1: Array<S>,
    pub wp: Array<S>,
    pub bp: Array<S>,
    pub wv: Array<S>,
    pub bv: Array<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<S> {
    /// `[N, num_actions]`
    pub logits: Array<S>,
    /// `[N]`
    pub baseline: Array<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn zeros(shape: ModelShape) -> Self {
        let [w1, b1, wp, bp, wv, bv] = shape.param_dims();
        ModelParams {
            w1: Array::zeros(&w1),
            b1: Array::zeros(&b1),
            wp: Array::zeros(&wp),
            bp: Array::zeros(&bp),
            wv: Array::zeros(&wv),
            bv: Array::zeros(&bv),
            version: 0,
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation for every layer.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let fan_ins = [
            shape.obs_dim,
            shape.obs_dim,
            shape.hidden,
            shape.hidden,
            shape.hidden,
            shape.hidden,
        ];
        for ((_, t), fan_in) in p.tensors_mut().into_iter().zip(fan_ins) {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for x in t.data_mut() {
                *x = S::lit(rng.gen_range(-bound..bound));
            }
        }
        p
    }

    /// Builds from raw arrays, checking that their shapes agree.
    pub fn from_arrays(arrays: [Array<S>; 6], version: u64) -> Result<Self, DimError> {
        let [w1, b1, wp, bp, wv, bv] = arrays;
        if w1.ndim() != 2 || wp.ndim() != 2 {
            return Err(DimError::new("W1/Wp rank", &[2, 2], &[w1.ndim(), wp.ndim()]));
        }
        let shape = ModelShape::new(w1.dims()[1], w1.dims()[0], wp.dims()[0]);
        let p = ModelParams {
            w1,
            b1,
            wp,
            bp,
            wv,
            bv,
            version,
        };
        p.check_shape(shape)?;
        Ok(p)
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape::new(self.w1.dims()[1], self.w1.dims()[0], self.wp.dims()[0])
    }

    /// Verifies every parameter against `shape`, naming the first offender.
    pub fn check_shape(&self, shape: ModelShape) -> Result<(), DimError> {
        for ((name, t), dims) in self.tensors().into_iter().zip(shape.param_dims()) {
            t.expect_dims(name, &dims)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> [(&'static str, &Array<S>); 6] {
        [
            (PARAM_NAMES[0], &self.w1),
            (PARAM_NAMES[1], &self.b1),
            (PARAM_NAMES[2], &self.wp),
            (PARAM_NAMES[3], &self.bp),
            (PARAM_NAMES[4], &self.wv),
            (PARAM_NAMES[5], &self.bv),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Array<S>); 6] {
        [
            (PARAM_NAMES[0], &mut self.w1),
            (PARAM_NAMES[1], &mut self.b1),
            (PARAM_NAMES[2], &mut self.wp),
            (PARAM_NAMES[3], &mut self.bp),
            (PARAM_NAMES[4], &mut self.wv),
            (PARAM_NAMES[5], &mut self.bv),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data().iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c = |a: &Array<S>| a.map(|x| U::lit(x.as_f64()));
        ModelParams {
            w1: c(&self.w1),
            b1: c(&self.b1),
            wp: c(&self.wp),
            bp: c(&self.bp),
            wv: c(&self.wv),
            bv: c(&self.bv),
            version: self.version,
        }
    }

    fn check_obs(&self, obs: &Array<S>) -> Result<usize, DimError> {
        let d = self.shape().obs_dim;
        if obs.ndim() != 2 || obs.dims()[1] != d || obs.dims()[0] == 0 {
            let n = obs.dims().first().copied().unwrap_or(0).max(1);
            return Err(DimError::new("observations", &[n, d], obs.dims()));
        }
        Ok(obs.dims()[0])
    }

    /// Writes the pre-activations `W1·x + b1` of one observation into `pre`.
    fn hidden_pre(&self, x: &[S], pre: &mut [S]) {
        let d = x.len();
        for ((p, w_row), &b) in pre.iter_mut().zip(self.w1.data().chunks_exact(d)).zip(self.b1.data()) {
            let mut acc = b;
            for (&w, &xi) in w_row.iter().zip(x) {
                acc += w * xi;
            }
            *p = acc;
        }
    }

    /// Policy logits and baseline for a batch of observations `[N, obs_dim]`.
    pub fn forward(&self, obs: &Array<S>) -> Result<ForwardOutput<S>, DimError> {
        let n = self.check_obs(obs)?;
        let shape = self.shape();
        let (h, a) = (shape.hidden, shape.num_actions);
        let mut logits = Array::zeros(&[n, a]);
        let mut baseline = Array::zeros(&[n]);
        let mut hid = vec![S::zero(); h];
        for (i, x) in obs.rows().enumerate() {
            self.hidden_pre(x, &mut hid);
            for v in hid.iter_mut() {
                *v = v.max(S::zero());
            }
            let out = &mut logits.data_mut()[i * a..(i + 1) * a];
            for ((o, w_row), &b) in out.iter_mut().zip(self.wp.data().chunks_exact(h)).zip(self.bp.data()) {
                *o = b + dot(w_row, &hid);
            }
            baseline.data_mut()[i] = self.bv.data()[0] + dot(self.wv.data(), &hid);
        }
        Ok(ForwardOutput { logits, baseline })
    }

    /// Gradient of `Σ upstream_logits ⊙ logits + Σ upstream_baseline ⊙ baseline`
    /// with respect to every parameter.
    pub fn backward(
        &self,
        obs: &Array<S>,
        upstream_logits: &Array<S>,
        upstream_baseline: &Array<S>,
    ) -> Result<GradientSet<S>, DimError> {
        let n = self.check_obs(obs)?;
        let shape = self.shape();
        let (d, h, a) = (shape.obs_dim, shape.hidden, shape.num_actions);
        upstream_logits.expect_dims("upstream logits gradient", &[n, a])?;
        upstream_baseline.expect_dims("upstream baseline gradient", &[n])?;

        let mut g = GradientSet::zeros(shape);
        let mut pre = vec![S::zero(); h];
        let mut hid = vec![S::zero(); h];
        let mut d_hid = vec![S::zero(); h];
        for (i, x) in obs.rows().enumerate() {
            self.hidden_pre(x, &mut pre);
            for (hv, &p) in hid.iter_mut().zip(&pre) {
                *hv = p.max(S::zero());
            }
            let gl = &upstream_logits.data()[i * a..(i + 1) * a];
            let gb = upstream_baseline.data()[i];

            d_hid.iter_mut().for_each(|v| *v = S::zero());
            for (k, &gk) in gl.iter().enumerate() {
                if gk == S::zero() {
                    continue;
                }
                g.bp.data_mut()[k] += gk;
                let w_row = &self.wp.data()[k * h..(k + 1) * h];
                let gw_row = &mut g.wp.data_mut()[k * h..(k + 1) * h];
                for j in 0..h {
                    gw_row[j] += gk * hid[j];
                    d_hid[j] += gk * w_row[j];
                }
            }
            g.bv.data_mut()[0] += gb;
            for j in 0..h {
                g.wv.data_mut()[j] += gb * hid[j];
                d_hid[j] += gb * self.wv.data()[j];
            }

            for j in 0..h {
                if pre[j] <= S::zero() {
                    continue;
                }
                let dp = d_hid[j];
                g.b1.data_mut()[j] += dp;
                let gw_row = &mut g.w1.data_mut()[j * d..(j + 1) * d];
                for (gw, &xi) in gw_row.iter_mut().zip(x) {
                    *gw += dp * xi;
                }
            }
        }
        Ok(g)
    }
}

impl<S: Scalar> GradientSet<S> {
    pub fn zeros(shape: ModelShape) -> Self {
        let [w1, b1, wp, bp, wv, bv] = shape.param_dims();
        GradientSet {
            w1: Array::zeros(&w1),
            b1: Array::zeros(&b1),
            wp: Array::zeros(&wp),
            bp: Array::zeros(&bp),
            wv: Array::zeros(&wv),
            bv: Array::zeros(&bv),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Array<S>); 6] {
        [
            (PARAM_NAMES[0], &self.w1),
            (PARAM_NAMES[1], &self.b1),
            (PARAM_NAMES[2], &self.wp),
            (PARAM_NAMES[3], &self.bp),
            (PARAM_NAMES[4], &self.wv),
            (PARAM_NAMES[5], &self.bv),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Array<S>); 6] {
        [
            (PARAM_NAMES[0], &mut self.w1),
            (PARAM_NAMES[1], &mut self.b1),
            (PARAM_NAMES[2], &mut self.wp),
            (PARAM_NAMES[3], &mut self.bp),
            (PARAM_NAMES[4], &mut self.wv),
            (PARAM_NAMES[5], &mut self.bv),
        ]
    }

    pub fn global_norm(&self) -> S {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|&x| x * x)
            .sum::<S>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: S) -> S {
        let norm = self.global_norm();
        if norm > max_norm && norm > S::zero() {
            let scale = max_norm / norm;
            for (_, t) in self.tensors_mut() {
                t.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data().iter().all(|x| x.is_finite()))
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
