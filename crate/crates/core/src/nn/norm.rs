use ndarray::{Array1, Array4, ArrayView4};

use super::{Mode, Param, ParamVisitor};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Array1<T>,
    pub var: Array1<T>,
}

/// Per-channel batch normalization with learnable scale and shift.
///
/// In [`Mode::Eval`] the layer uses `finalized` statistics when present and
/// falls back to the running averages otherwise.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running: BnStats<T>,
    pub finalized: Option<BnStats<T>>,
    pub momentum: T,
    pub eps: T,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Array4<T>,
    pub inv_std: Array1<T>,
    /// Batch statistics, present in train mode.
    pub batch: Option<BnStats<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running: BnStats { mean: Array1::zeros(channels), var: Array1::ones(channels) },
            finalized: None,
            momentum: T::lit(0.99),
            eps: T::lit(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: ArrayView4<T>, mode: Mode) -> (Array4<T>, BnCache<T>) {
        let (b, c, h, w) = x.dim();
        let hw = h * w;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let (mean, var, batch) = match mode {
            Mode::Train => {
                let n = T::lit((b * hw) as f64);
                let mut mean = Array1::<T>::zeros(c);
                let mut var = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        s += xs[off..off + hw].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut sq = T::zero();
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        for &v in &xs[off..off + hw] {
                            let d = v - m;
                            sq += d * d;
                        }
                    }
                    mean[ci] = m;
                    var[ci] = sq / n;
                }
                let stats = BnStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                let s = self.finalized.as_ref().unwrap_or(&self.running);
                (s.mean.clone(), s.var.clone(), None)
            }
        };
        let inv_std = var.mapv(|v| T::one() / (v + self.eps).sqrt());
        let mut xhat = Array4::<T>::zeros((b, c, h, w));
        let mut y = Array4::<T>::zeros((b, c, h, w));
        {
            let xh = xhat.as_slice_mut().expect("fresh");
            let ys = y.as_slice_mut().expect("fresh");
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    let (m, is) = (mean[ci], inv_std[ci]);
                    let (g, be) = (self.gamma.value[ci], self.beta.value[ci]);
                    for k in off..off + hw {
                        let v = (xs[k] - m) * is;
                        xh[k] = v;
                        ys[k] = g * v + be;
                    }
                }
            }
        }
        (y, BnCache { xhat, inv_std, batch })
    }

    /// Accumulates `gamma`/`beta` gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BnCache<T>, dy: ArrayView4<T>) -> Array4<T> {
        let (b, c, h, w) = dy.dim();
        let hw = h * w;
        let dy = dy.as_standard_layout();
        let gs = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh");
        let n = T::lit((b * hw) as f64);
        for ci in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for bi in 0..b {
                let off = (bi * c + ci) * hw;
                for k in off..off + hw {
                    sum_dy += gs[k];
                    sum_dy_xh += gs[k] * xh[k];
                }
            }
            self.gamma.grad[ci] += sum_dy_xh;
            self.beta.grad[ci] += sum_dy;
            let g = self.gamma.value[ci];
            let is = cache.inv_std[ci];
            for bi in 0..b {
                let off = (bi * c + ci) * hw;
                if cache.batch.is_some() {
                    let scale = g * is / n;
                    for k in off..off + hw {
                        dxs[k] = scale * (n * gs[k] - sum_dy - xh[k] * sum_dy_xh);
                    }
                } else {
                    for k in off..off + hw {
                        dxs[k] = g * is * gs[k];
                    }
                }
            }
        }
        dx
    }

    /// Folds batch statistics into the running averages.
    pub fn commit_running(&mut self, batch: &BnStats<T>) {
        let m = self.momentum;
        let one = T::one();
        self.running.mean = &self.running.mean * m + &batch.mean * (one - m);
        self.running.var = &self.running.var * m + &batch.var * (one - m);
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        v.visit(&format!("{prefix}.gamma"), &mut self.gamma);
        v.visit(&format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Averages per-layer batch statistics over many batches.
#[derive(Clone, Debug, Default)]
pub struct StatsAccumulator<T> {
    pub sums: Vec<(Array1<T>, Array1<T>)>,
    pub batches: usize,
}

impl<T: Real> StatsAccumulator<T> {
    pub fn add(&mut self, stats: &[BnStats<T>]) {
        if self.sums.is_empty() {
            self.sums = stats
                .iter()
                .map(|s| (Array1::zeros(s.mean.len()), Array1::zeros(s.var.len())))
                .collect();
        }
        assert_eq!(self.sums.len(), stats.len(), "layer count changed between batches");
        for ((sm, sv), s) in self.sums.iter_mut().zip(stats) {
            *sm += &s.mean;
            *sv += &s.var;
        }
        self.batches += 1;
    }

    pub fn finish(&self) -> Vec<BnStats<T>> {
        let n = T::lit(self.batches.max(1) as f64);
        self.sums.iter().map(|(m, v)| BnStats { mean: m / n, var: v / n }).collect()
    }
}
