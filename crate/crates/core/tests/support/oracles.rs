//! Double-loop reference implementations, written from the definitions with
//! no shared code, compared against the library kernels.

use lmdis::geometry::*;
use ndarray::{Array, Array3, Array4, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const TOLERANCE: f64 = 1e-5;
pub const INSTANCES: usize = 50;

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl OracleReport {
    pub fn ok(&self) -> bool {
        self.instances >= INSTANCES && self.worst <= TOLERANCE
    }
}

fn rng(op: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x0c1e_0000 + op * 1000 + i as u64)
}

fn normal<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(r: &mut ChaCha8Rng, shape: Sh) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || r.sample::<f64, _>(StandardNormal))
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (r.gen_range(1..=3), r.gen_range(2..=5), r.gen_range(3..=10), r.gen_range(3..=10))
}

fn max_diff<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn report(name: &'static str, errs: Vec<f64>) -> OracleReport {
    OracleReport { name, instances: errs.len(), worst: errs.into_iter().fold(0.0, f64::max) }
}

fn oracle_softmax(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut denom = 0.0;
                for k in 0..c {
                    denom += x[[bi, k, i, j]].exp();
                }
                for k in 0..c {
                    out[[bi, k, i, j]] = x[[bi, k, i, j]].exp() / denom;
                }
            }
        }
    }
    out
}

/// Mean 1-based pixel coordinate weighted by the map.
fn oracle_argmax(m: &Array4<f64>) -> Array3<f64> {
    let (b, c, h, w) = m.dim();
    let mut out = Array3::zeros((b, c, 2));
    for bi in 0..b {
        for k in 0..c {
            let (mut z, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let d = m[[bi, k, i, j]];
                    z += d;
                    sx += d * (j + 1) as f64;
                    sy += d * (i + 1) as f64;
                }
            }
            out[[bi, k, 0]] = sx / z;
            out[[bi, k, 1]] = sy / z;
        }
    }
    out
}

fn oracle_variance(m: &Array4<f64>) -> Array3<f64> {
    let (b, c, h, w) = m.dim();
    let mean = oracle_argmax(m);
    let mut out = Array3::zeros((b, c, 2));
    for bi in 0..b {
        for k in 0..c {
            let (mut z, mut vx, mut vy) = (0.0, 0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let d = m[[bi, k, i, j]];
                    z += d;
                    vx += d * ((j + 1) as f64 - mean[[bi, k, 0]]).powi(2);
                    vy += d * ((i + 1) as f64 - mean[[bi, k, 1]]).powi(2);
                }
            }
            out[[bi, k, 0]] = vx / z;
            out[[bi, k, 1]] = vy / z;
        }
    }
    out
}

fn probability_maps(r: &mut ChaCha8Rng) -> Array4<f64> {
    let (b, c, h, w) = dims(r);
    oracle_softmax(&(normal(r, (b, c, h, w)) * 2.0))
}

pub fn channel_softmax_oracle(n: usize) -> OracleReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(1, i);
            let (b, c, h, w) = dims(r);
            let x: Array4<f64> = normal(r, (b, c, h, w)) * 3.0;
            let got = channel_softmax(&ConfidenceMap::new(x.clone(), MapKind::RawScores)).unwrap().data;
            max_diff(&got, &oracle_softmax(&x))
        })
        .collect();
    report("channel_softmax", errs)
}

pub fn soft_argmax_oracle(n: usize) -> OracleReport {
    let errs = (0..n)
        .map(|i| {
            let m = probability_maps(&mut rng(2, i));
            let (got, zeta) = soft_argmax(m.view()).unwrap();
            let z_err = zeta
                .indexed_iter()
                .map(|((b, c), z)| (z - m.slice(ndarray::s![b, c, .., ..]).sum()).abs())
                .fold(0.0, f64::max);
            max_diff(&got, &oracle_argmax(&m)).max(z_err)
        })
        .collect();
    report("soft_argmax", errs)
}

pub fn spatial_variance_oracle(n: usize) -> OracleReport {
    let errs = (0..n)
        .map(|i| {
            let m = probability_maps(&mut rng(3, i));
            let (c, z) = soft_argmax(m.view()).unwrap();
            let got = spatial_variance(m.view(), c.view(), z.view()).unwrap();
            max_diff(&got, &oracle_variance(&m))
        })
        .collect();
    report("spatial_variance", errs)
}

pub fn masked_pool_oracle(n: usize) -> OracleReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(4, i);
            let (b, m, h, w) = dims(r);
            let (s, c) = (r.gen_range(1..=5), r.gen_range(1..=4));
            let feat: Array4<f64> = normal(r, (b, s, h, w));
            let masks = oracle_softmax(&normal(r, (b, m, h, w)));
            let proj: Array3<f64> = normal(r, (m, c, s));
            let got = masked_pool(feat.view(), masks.view(), proj.view()).unwrap().descriptors;
            let mut want = Array3::zeros((b, m, c));
            for bi in 0..b {
                for mi in 0..m {
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for si in 0..s {
                            let mut pooled = 0.0;
                            for y in 0..h {
                                for x in 0..w {
                                    pooled += masks[[bi, mi, y, x]] * feat[[bi, si, y, x]];
                                }
                            }
                            acc += proj[[mi, ci, si]] * pooled;
                        }
                        want[[bi, mi, ci]] = acc;
                    }
                }
            }
            max_diff(&got, &want)
        })
        .collect();
    report("masked_pool", errs)
}

pub fn unpool_oracle(n: usize) -> OracleReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(5, i);
            let (b, m, h, w) = dims(r);
            let (s, c) = (r.gen_range(1..=5), r.gen_range(1..=4));
            let dmaps = oracle_softmax(&normal(r, (b, m, h, w)));
            let desc: Array3<f64> = normal(r, (b, m, c));
            let bp: Array3<f64> = normal(r, (m, s, c));
            let slope = 0.2;
            let got = unpool(dmaps.view(), desc.view(), bp.view(), slope).unwrap().features;
            let mut want = Array4::zeros((b, s, h, w));
            for bi in 0..b {
                for si in 0..s {
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = 0.0;
                            for mi in 0..m {
                                let mut z = 0.0;
                                for ci in 0..c {
                                    z += bp[[mi, si, ci]] * desc[[bi, mi, ci]];
                                }
                                let act = if z >= 0.0 { z } else { slope * z };
                                acc += dmaps[[bi, mi, y, x]] * act;
                            }
                            want[[bi, si, y, x]] = acc;
                        }
                    }
                }
            }
            max_diff(&got, &want)
        })
        .collect();
    report("unpool", errs)
}

pub type OracleCheck = fn(usize) -> OracleReport;

pub const ALL: &[OracleCheck] =
    &[channel_softmax_oracle, soft_argmax_oracle, spatial_variance_oracle, masked_pool_oracle, unpool_oracle];
