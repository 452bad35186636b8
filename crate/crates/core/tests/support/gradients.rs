//! Analytic gradients against float64 central differences. Every check
//! reduces an op's output to a scalar with a random projection `Σ R ⊙ out`,
//! so the upstream gradient is `R`.

use lmdis::geometry::*;
use lmdis::losses::*;
use lmdis::model::{EncodeGrads, Model, ModelConfig, NetConfig};
use lmdis::nn::{Mode, Param, Resample};
use lmdis::tps::{solve_tps, TpsTransform};
use ndarray::{Array, Array2, Array3, Array4, ArrayView3, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    /// Worst relative error over all instances.
    pub worst: f64,
}

impl OpReport {
    pub fn ok(&self) -> bool {
        self.instances >= INSTANCES && self.worst <= TOLERANCE
    }
}

fn rng(op: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(op * 1000 + i as u64)
}

fn normal<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(r: &mut ChaCha8Rng, shape: Sh) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || r.sample::<f64, _>(StandardNormal))
}

fn uniform<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(
    r: &mut ChaCha8Rng,
    shape: Sh,
    lo: f64,
    hi: f64,
) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || r.gen_range(lo..hi))
}

fn grid_size(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.gen_range(6..=8), r.gen_range(6..=8))
}

fn project<D: Dimension>(a: &Array<f64, D>, w: &Array<f64, D>) -> f64 {
    (a * w).sum()
}

/// `max |analytic − numeric| / max |numeric|` for one input tensor.
fn rel_error<D: Dimension>(x: &Array<f64, D>, analytic: &Array<f64, D>, f: impl Fn(&Array<f64, D>) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut xp = x.clone();
    let mut num = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + STEP;
        let up = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - STEP;
        let down = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        num.push((up - down) / (2.0 * STEP));
    }
    let scale = num.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let diff = num.iter().zip(analytic.iter()).fold(0.0f64, |m, (n, a)| m.max((n - a).abs()));
    diff / scale
}

fn report(name: &'static str, errors: Vec<f64>) -> OpReport {
    OpReport { name, instances: errors.len(), worst: errors.into_iter().fold(0.0, f64::max) }
}

fn positive_maps(r: &mut ChaCha8Rng, b: usize, c: usize, (h, w): (usize, usize)) -> Array4<f64> {
    let raw = ConfidenceMap::new(normal(r, (b, c, h, w)), MapKind::RawScores);
    channel_softmax(&raw).unwrap().data
}

pub fn channel_softmax_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(1, i);
            let g = grid_size(r);
            let x: Array4<f64> = normal(r, (2, 4, g.0, g.1));
            let w: Array4<f64> = normal(r, x.raw_dim());
            let p = channel_softmax(&ConfidenceMap::new(x.clone(), MapKind::RawScores)).unwrap().data;
            let a = channel_softmax_backward(p.view(), w.view());
            rel_error(&x, &a, |x| project(&channel_softmax(&ConfidenceMap::new(x.clone(), MapKind::RawScores)).unwrap().data, &w))
        })
        .collect();
    report("channel_softmax", errs)
}

pub fn soft_argmax_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(2, i);
            let g = grid_size(r);
            let maps = positive_maps(r, 2, 3, g);
            let w: Array3<f64> = normal(r, (2, 3, 2));
            let (c, z) = soft_argmax(maps.view()).unwrap();
            let a = soft_argmax_backward(maps.dim(), c.view(), z.view(), w.view());
            rel_error(&maps, &a, |m| project(&soft_argmax(m.view()).unwrap().0, &w))
        })
        .collect();
    report("soft_argmax", errs)
}

pub fn spatial_variance_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(3, i);
            let g = grid_size(r);
            let maps = positive_maps(r, 2, 3, g);
            let w: Array3<f64> = normal(r, (2, 3, 2));
            let (c, z) = soft_argmax(maps.view()).unwrap();
            let var = spatial_variance(maps.view(), c.view(), z.view()).unwrap();
            let (mut dm, dc) = spatial_variance_backward(maps.view(), c.view(), z.view(), var.view(), w.view());
            dm += &soft_argmax_backward(maps.dim(), c.view(), z.view(), dc.view());
            rel_error(&maps, &dm, |m| {
                let (c, z) = soft_argmax(m.view()).unwrap();
                project(&spatial_variance(m.view(), c.view(), z.view()).unwrap(), &w)
            })
        })
        .collect();
    report("spatial_variance", errs)
}

fn render_instance(r: &mut ChaCha8Rng, mode: RenderMode, frame: Frame, per_landmark: bool) -> f64 {
    let (h, w) = grid_size(r);
    let (b, k) = (2, 3);
    let (lo, hi, slo, shi) = match frame {
        Frame::Pixel => (1.0, h.min(w) as f64, 0.8, 2.0),
        Frame::Normalized => {
            let e = edge_length((h, w));
            (1.0 / e, h.min(w) as f64 / e, 0.1, 0.3)
        }
    };
    let lm: Array3<f64> = uniform(r, (b, k, 2), lo, hi);
    let stds: Array2<f64> = uniform(r, (b, k), slo, shi);
    let var = stds.mapv(|s| s * s);
    let s0 = stds[[0, 0]];
    let c = match mode {
        RenderMode::ApproxDetection => k,
        RenderMode::Decoder => k + 1,
    };
    let wt: Array4<f64> = normal(r, (b, c, h, w));
    fn pick(v: &Array2<f64>, per_landmark: bool, s0: f64) -> Width<'_, f64> {
        if per_landmark {
            Width::Variance(v.view())
        } else {
            Width::Std(s0)
        }
    }
    let out = render_gaussian_maps(lm.view(), pick(&var, per_landmark, s0), (h, w), mode, frame).unwrap().data;
    let (d_lm, d_var) = render_gaussian_maps_backward(lm.view(), pick(&var, per_landmark, s0), out.view(), wt.view(), frame);
    let e_lm = rel_error(&lm, &d_lm, |l| {
        project(&render_gaussian_maps(l.view(), pick(&var, per_landmark, s0), (h, w), mode, frame).unwrap().data, &wt)
    });
    let e_var = match d_var {
        Some(dv) => rel_error(&var, &dv, |v| {
            project(&render_gaussian_maps(lm.view(), Width::Variance(v.view()), (h, w), mode, frame).unwrap().data, &wt)
        }),
        None => 0.0,
    };
    e_lm.max(e_var)
}

pub fn render_op(n: usize) -> OpReport {
    let combos = [
        (RenderMode::ApproxDetection, Frame::Pixel, true),
        (RenderMode::ApproxDetection, Frame::Normalized, true),
        (RenderMode::Decoder, Frame::Normalized, false),
        (RenderMode::Decoder, Frame::Pixel, false),
    ];
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(4, i);
            let (mode, frame, per) = combos[i % combos.len()];
            render_instance(r, mode, frame, per)
        })
        .collect();
    report("render_gaussian_maps", errs)
}

pub fn normalize_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(5, i);
            let g = grid_size(r);
            let raw: Array4<f64> = uniform(r, (2, 4, g.0, g.1), 0.05, 2.0);
            let w: Array4<f64> = normal(r, raw.raw_dim());
            let norm = |x: &Array4<f64>| normalize_decoder_maps(&ConfidenceMap::new(x.clone(), MapKind::RawScores)).unwrap().data;
            let out = norm(&raw);
            let a = normalize_decoder_maps_backward(raw.view(), out.view(), w.view());
            rel_error(&raw, &a, |x| project(&norm(x), &w))
        })
        .collect();
    report("normalize_decoder_maps", errs)
}

pub fn masked_pool_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(6, i);
            let (h, w) = grid_size(r);
            let (b, m, s, c) = (2, 3, 4, 2);
            let feat: Array4<f64> = normal(r, (b, s, h, w));
            let masks = positive_maps(r, b, m, (h, w));
            let proj: Array3<f64> = normal(r, (m, c, s));
            let wt: Array3<f64> = normal(r, (b, m, c));
            let pooled = masked_pool(feat.view(), masks.view(), proj.view()).unwrap();
            let (df, dm, dp) = masked_pool_backward(feat.view(), masks.view(), proj.view(), pooled.pooled.view(), wt.view());
            let f = |fe: &Array4<f64>, ma: &Array4<f64>, pr: &Array3<f64>| {
                project(&masked_pool(fe.view(), ma.view(), pr.view()).unwrap().descriptors, &wt)
            };
            rel_error(&feat, &df, |x| f(x, &masks, &proj))
                .max(rel_error(&masks, &dm, |x| f(&feat, x, &proj)))
                .max(rel_error(&proj, &dp, |x| f(&feat, &masks, x)))
        })
        .collect();
    report("masked_pool", errs)
}

pub fn unpool_op(n: usize) -> OpReport {
    let slope = LEAKY_SLOPE;
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(7, i);
            let (h, w) = grid_size(r);
            let (b, m, s, c) = (2, 3, 4, 2);
            let dmaps = positive_maps(r, b, m, (h, w));
            let desc: Array3<f64> = normal(r, (b, m, c));
            let bp: Array3<f64> = normal(r, (m, s, c));
            let wt: Array4<f64> = normal(r, (b, s, h, w));
            let up = unpool(dmaps.view(), desc.view(), bp.view(), slope).unwrap();
            let (dd, dde, dbp) = unpool_backward(dmaps.view(), desc.view(), bp.view(), up.pre.view(), slope, wt.view());
            let f = |dm: &Array4<f64>, de: &Array3<f64>, b: &Array3<f64>| {
                project(&unpool(dm.view(), de.view(), b.view(), slope).unwrap().features, &wt)
            };
            rel_error(&dmaps, &dd, |x| f(x, &desc, &bp))
                .max(rel_error(&desc, &dde, |x| f(&dmaps, x, &bp)))
                .max(rel_error(&bp, &dbp, |x| f(&dmaps, &desc, x)))
        })
        .collect();
    report("unpool", errs)
}

pub fn concentration_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(8, i);
            let var: Array3<f64> = uniform(r, (2, 4, 2), 1e-3, 0.05);
            let (_, g) = concentration_loss(var.view());
            rel_error(&var, &g, |v| concentration_loss(v.view()).0)
        })
        .collect();
    report("concentration_loss", errs)
}

pub fn separation_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(9, i);
            let lm: Array3<f64> = uniform(r, (2, 5, 2), 0.0, 1.0);
            let sigma = r.gen_range(0.1..0.4);
            let (_, g) = separation_loss(lm.view(), sigma);
            rel_error(&lm, &g, |l| separation_loss(l.view(), sigma).0)
        })
        .collect();
    report("separation_loss", errs)
}

fn random_tps(r: &mut ChaCha8Rng) -> TpsTransform {
    let p = r.gen_range(5..10);
    let src: Vec<[f64; 2]> = (0..p).map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)]).collect();
    let dst: Vec<[f64; 2]> = src.iter().map(|q| [q[0] + r.gen_range(-0.1..0.1), q[1] + r.gen_range(-0.1..0.1)]).collect();
    solve_tps(&src, &dst, 1e-4).unwrap()
}

pub fn equivariance_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(10, i);
            let lm: Array3<f64> = uniform(r, (2, 4, 2), 0.1, 0.9);
            let lw: Array3<f64> = uniform(r, (2, 4, 2), 0.1, 0.9);
            let t0 = random_tps(r);
            let t1 = random_tps(r);
            let s1 = Shifted { inner: &t1, offset: [0.02, -0.01] };
            let warps: [&dyn CoordWarp; 2] = [&t0, &s1];
            let terms = equivariance_loss(lm.view(), lw.view(), &warps).unwrap();
            let f = |a: &Array3<f64>, b: &Array3<f64>| equivariance_loss(a.view(), b.view(), &warps).unwrap().value;
            rel_error(&lm, &terms.d_landmarks, |x| f(x, &lw)).max(rel_error(&lw, &terms.d_warped, |x| f(&lm, x)))
        })
        .collect();
    report("equivariance_loss", errs)
}

pub fn flow_preference_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(11, i);
            let (h, w) = grid_size(r);
            let rendered: Array4<f64> = uniform(r, (2, 3, h, w), 0.0, 1.0);
            let mag: Array3<f64> = uniform(r, (2, h, w), 0.0, 4.0);
            let (_, g) = flow_preference_loss(rendered.view(), mag.view()).unwrap();
            rel_error(&rendered, &g, |x| flow_preference_loss(x.view(), mag.view()).unwrap().0)
        })
        .collect();
    report("flow_preference_loss", errs)
}

pub fn reconstruction_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(12, i);
            let (h, w) = grid_size(r);
            let img: Array4<f64> = uniform(r, (2, 3, h, w), 0.0, 1.0);
            let rec: Array4<f64> = uniform(r, (2, 3, h, w), 0.0, 1.0);
            let (_, g) = reconstruction_loss(img.view(), rec.view(), 0.05).unwrap();
            rel_error(&rec, &g, |x| reconstruction_loss(img.view(), x.view(), 0.05).unwrap().0)
        })
        .collect();
    report("reconstruction_loss", errs)
}

pub fn tiny_config(use_descriptors: bool, side: usize) -> ModelConfig {
    let net = NetConfig::new(&[3, 4], &[1, 1], Resample::Same);
    ModelConfig {
        image_size: [side, side],
        image_channels: 1,
        landmarks: 3,
        descriptor_dim: 2,
        feature_dim: 3,
        use_descriptors,
        decoder_sigmas: vec![0.2, 0.08],
        detector: net.clone(),
        feature_net: net.clone(),
        decoder: net,
        detector_head_scale: 1.0,
    }
}

/// Landmarks (and descriptors) through the whole decoder to the color output.
pub fn decode_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(13, i);
            let use_desc = i % 2 == 0;
            let side = [6, 8][i % 4 / 2];
            let mut model = Model::<f64>::new(tiny_config(use_desc, side), r).unwrap();
            let (b, k) = (2, 3);
            let lm: Array3<f64> = uniform(r, (b, k, 2), 0.15, 0.85);
            let desc: Array3<f64> = normal(r, (b, k + 1, 2));
            let wt: Array4<f64> = normal(r, (b, 1, side, side));
            fn pick(x: &Array3<f64>, on: bool) -> Option<ArrayView3<'_, f64>> {
                on.then(|| x.view())
            }
            let (_, cache) = model.decode(lm.view(), pick(&desc, use_desc), Mode::Train).unwrap();
            let (d_lm, d_desc) = model.decode_backward(&cache, wt.view());
            let f = |l: &Array3<f64>, de: &Array3<f64>| project(&model.decode(l.view(), pick(de, use_desc), Mode::Train).unwrap().0.color, &wt);
            let mut e = rel_error(&lm, &d_lm, |x| f(x, &desc));
            if let Some(dd) = d_desc {
                e = e.max(rel_error(&desc, &dd, |x| f(&lm, x)));
            }
            e
        })
        .collect();
    report("decode (through landmarks)", errs)
}

fn params(model: &mut Model<f64>) -> Vec<(String, Param<f64>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |n: &str, p: &mut Param<f64>| out.push((n.to_string(), p.clone())));
    out
}

fn set_param(model: &mut Model<f64>, name: &str, idx: usize, v: f64) {
    model.visit_params(&mut |n: &str, p: &mut Param<f64>| {
        if n == name {
            p.value.as_slice_mut().unwrap()[idx] = v;
        }
    });
}

/// Encoder parameters under a scalar of landmarks, variances and descriptors.
pub fn encode_op(n: usize) -> OpReport {
    let errs = (0..n)
        .map(|i| {
            let r = &mut rng(14, i);
            let use_desc = i % 2 == 0;
            let side = 8;
            let mut model = Model::<f64>::new(tiny_config(use_desc, side), r).unwrap();
            let x: Array4<f64> = uniform(r, (2, 1, side, side), 0.0, 1.0);
            let wl: Array3<f64> = normal(r, (2, 3, 2));
            let wv: Array3<f64> = normal(r, (2, 3, 2));
            let wd: Array3<f64> = normal(r, (2, 4, 2));
            let scalar = |m: &Model<f64>| {
                let (enc, _) = m.encode(x.view(), Mode::Train).unwrap();
                let mut s = project(&enc.landmarks, &wl) + project(&enc.var, &wv);
                if let Some(d) = &enc.descriptors {
                    s += project(d, &wd);
                }
                s
            };
            model.zero_grad();
            let (_, cache) = model.encode(x.view(), Mode::Train).unwrap();
            let grads = EncodeGrads { landmarks: wl.clone(), var: Some(wv.clone()), descriptors: use_desc.then(|| wd.clone()) };
            model.encode_backward(&cache, &grads);
            let ps = params(&mut model);
            // a random subset of entries from every tensor keeps this fast
            let mut num = Vec::new();
            let mut ana = Vec::new();
            for (name, p) in &ps {
                let len = p.value.len();
                for _ in 0..3.min(len) {
                    let idx = r.gen_range(0..len);
                    let orig = p.value.as_slice().unwrap()[idx];
                    set_param(&mut model, name, idx, orig + STEP);
                    let up = scalar(&model);
                    set_param(&mut model, name, idx, orig - STEP);
                    let down = scalar(&model);
                    set_param(&mut model, name, idx, orig);
                    num.push((up - down) / (2.0 * STEP));
                    ana.push(p.grad.as_slice().unwrap()[idx]);
                }
            }
            let scale = num.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            num.iter().zip(&ana).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
        })
        .collect();
    report("encode (parameters)", errs)
}

pub type OpCheck = fn(usize) -> OpReport;

pub const ALL: &[OpCheck] = &[
    channel_softmax_op,
    soft_argmax_op,
    spatial_variance_op,
    render_op,
    normalize_op,
    masked_pool_op,
    unpool_op,
    concentration_op,
    separation_op,
    equivariance_op,
    flow_preference_op,
    reconstruction_op,
    decode_op,
    encode_op,
];
