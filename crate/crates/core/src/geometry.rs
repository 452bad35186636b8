//! Differentiable heatmap geometry: channel softmax, soft-argmax, spatial
//! moments, Gaussian rendering, and mask-weighted pooling/unpooling.
//!
//! Every tensor is batched and laid out as `(batch, channel, row, col)`.
//! Pixel centers sit on integers: column `j` is `u = j + 1` and row `i` is
//! `v = i + 1`, so a `W`-wide map spans `u ∈ [1, W]`.
//!
//! Each forward kernel has a `*_backward` twin that maps an upstream gradient
//! onto every real-valued input. The model composes them by hand; there is no
//! tape.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

/// Floor on a channel's spatial mass before soft-argmax refuses to divide.
pub const MASS_EPSILON: f64 = 1e-12;

/// Negative slope of the unpooling activation.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    RawScores,
    Normalized,
    GaussianApprox,
}

/// Per-pixel scores or probabilities over landmark channels (plus background).
#[derive(Clone, Debug)]
pub struct ConfidenceMap<T> {
    pub data: Array4<T>,
    pub kind: MapKind,
}

impl<T: Real> ConfidenceMap<T> {
    pub fn new(data: Array4<T>, kind: MapKind) -> Self {
        Self { data, kind }
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, _, h, w) = self.data.dim();
        (h, w)
    }

    /// The first `k` channels.
    pub fn foreground(&self, k: usize) -> ArrayView4<'_, T> {
        self.data.slice(s![.., ..k, .., ..])
    }

    /// Checks the invariant implied by `kind`: entries in `[0, 1]` and unit
    /// channel sums for normalized maps, finiteness for everything.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("confidence map"));
        }
        if self.kind == MapKind::Normalized {
            let sums = self.data.sum_axis(Axis(1));
            for (idx, s) in sums.indexed_iter() {
                if (s.as_f64() - 1.0).abs() > tol {
                    return Err(Error::InvalidArgument(format!(
                        "channel sum {} at {:?} deviates from 1",
                        s, idx
                    )));
                }
            }
            if self.data.iter().any(|&v| v < T::zero() || v > T::one()) {
                return Err(Error::InvalidArgument("normalized entry outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Landmark coordinates in map-pixel units, shape `(batch, K, 2)` holding `(x, y)`.
#[derive(Clone, Debug)]
pub struct LandmarkSet<T> {
    pub coords: Array3<T>,
}

impl<T: Real> LandmarkSet<T> {
    pub fn new(coords: Array3<T>) -> Self {
        Self { coords }
    }

    pub fn len(&self) -> usize {
        self.coords.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates divided by the edge length `sqrt(W * H)` of the map.
    pub fn normalized(&self, grid: (usize, usize)) -> Array3<T> {
        &self.coords * T::lit(1.0 / edge_length(grid))
    }

    pub fn from_normalized(norm: Array3<T>, grid: (usize, usize)) -> Self {
        Self { coords: norm * T::lit(edge_length(grid)) }
    }
}

/// Spatial mass and per-axis variance of each landmark channel.
#[derive(Clone, Debug)]
pub struct LandmarkStatistics<T> {
    /// `(batch, K)`
    pub zeta: Array2<T>,
    /// `(batch, K, 2)` holding `(var_u, var_v)`.
    pub var: Array3<T>,
}

impl<T: Real> LandmarkStatistics<T> {
    /// Isotropic variance `(var_u + var_v) / 2` per landmark.
    pub fn sigma_det_sq(&self) -> Array2<T> {
        self.var.sum_axis(Axis(2)) * T::lit(0.5)
    }
}

/// Shared feature map, `(batch, S, H, W)`.
#[derive(Clone, Debug)]
pub struct FeatureMap<T>(pub Array4<T>);

/// Per-landmark latent codes, `(batch, K + 1, C)`; the last row is background.
#[derive(Clone, Debug)]
pub struct DescriptorSet<T>(pub Array3<T>);

/// Map edge length used to normalize coordinates.
pub fn edge_length((h, w): (usize, usize)) -> f64 {
    ((h * w) as f64).sqrt()
}

/// Units for Gaussian rendering. In [`Frame::Normalized`] the grid position
/// of pixel `u` is `u / sqrt(W * H)`, and landmarks, widths and densities are
/// all expressed in those units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Pixel,
    Normalized,
}

impl Frame {
    fn scale(self, grid: (usize, usize)) -> f64 {
        match self {
            Frame::Pixel => 1.0,
            Frame::Normalized => 1.0 / edge_length(grid),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    /// `(1 / WH) * N(.; mu_k, sigma^2 I)`, foreground channels only.
    ApproxDetection,
    /// `N(.; mu_k, sigma^2 I)` plus a trailing all-ones background channel.
    Decoder,
}

/// Gaussian width: one standard deviation for every landmark, or a
/// per-landmark variance of shape `(batch, K)`.
#[derive(Clone, Copy, Debug)]
pub enum Width<'a, T> {
    Std(T),
    Variance(ArrayView2<'a, T>),
}

fn check_finite<T: Real>(what: &'static str, it: impl IntoIterator<Item = T>) -> Result<()> {
    if it.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Softmax across channels at every pixel.
pub fn channel_softmax<T: Real>(raw: &ConfidenceMap<T>) -> Result<ConfidenceMap<T>> {
    check_finite("raw score map", raw.data.iter().copied())?;
    let (b, c, h, w) = raw.data.dim();
    let mut out = Array4::<T>::zeros((b, c, h, w));
    let plane = h * w;
    let src = raw.data.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("fresh array");
    let mut buf = vec![T::zero(); c];
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut mx = T::neg_infinity();
            for ci in 0..c {
                let v = src[base + ci * plane + p];
                buf[ci] = v;
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for v in buf.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            for ci in 0..c {
                dst[base + ci * plane + p] = buf[ci] * inv;
            }
        }
    }
    Ok(ConfidenceMap::new(out, MapKind::Normalized))
}

/// Gradient of [`channel_softmax`] given its output `probs`.
pub fn channel_softmax_backward<T: Real>(probs: ArrayView4<T>, d_probs: ArrayView4<T>) -> Array4<T> {
    let dot = (&probs * &d_probs).sum_axis(Axis(1)).insert_axis(Axis(1));
    &probs * &(&d_probs - &dot)
}

fn plane_moments<T: Real>(plane: ArrayView2<T>) -> (T, T, T) {
    let mut mass = T::zero();
    let mut mu = T::zero();
    let mut mv = T::zero();
    for (i, row) in plane.outer_iter().enumerate() {
        let v = T::lit((i + 1) as f64);
        let mut row_mass = T::zero();
        let mut row_u = T::zero();
        for (j, &d) in row.iter().enumerate() {
            row_mass += d;
            row_u += d * T::lit((j + 1) as f64);
        }
        mass += row_mass;
        mu += row_u;
        mv += row_mass * v;
    }
    (mass, mu, mv)
}

/// Confidence-weighted mean coordinate of every channel in `maps`.
///
/// Returns `(coords, zeta)` with shapes `(batch, C, 2)` and `(batch, C)`.
/// Pass a channel slice (e.g. [`ConfidenceMap::foreground`]) to skip the
/// background.
pub fn soft_argmax<T: Real>(maps: ArrayView4<T>) -> Result<(Array3<T>, Array2<T>)> {
    let (b, c, _, _) = maps.dim();
    let mut coords = Array3::<T>::zeros((b, c, 2));
    let mut zeta = Array2::<T>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let (mass, mu, mv) = plane_moments(maps.slice(s![bi, ci, .., ..]));
            if !(mass.as_f64() > MASS_EPSILON) {
                return Err(Error::DegenerateMass { batch: bi, channel: ci, zeta: mass.as_f64() });
            }
            zeta[[bi, ci]] = mass;
            coords[[bi, ci, 0]] = mu / mass;
            coords[[bi, ci, 1]] = mv / mass;
        }
    }
    Ok((coords, zeta))
}

/// Gradient of [`soft_argmax`] with respect to the maps.
pub fn soft_argmax_backward<T: Real>(
    maps_dim: (usize, usize, usize, usize),
    coords: ArrayView3<T>,
    zeta: ArrayView2<T>,
    d_coords: ArrayView3<T>,
) -> Array4<T> {
    let (b, c, h, w) = maps_dim;
    let mut d_maps = Array4::<T>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let inv = T::one() / zeta[[bi, ci]];
            let gx = d_coords[[bi, ci, 0]] * inv;
            let gy = d_coords[[bi, ci, 1]] * inv;
            let x = coords[[bi, ci, 0]];
            let y = coords[[bi, ci, 1]];
            let mut plane = d_maps.slice_mut(s![bi, ci, .., ..]);
            for (i, mut row) in plane.outer_iter_mut().enumerate() {
                let dy = gy * (T::lit((i + 1) as f64) - y);
                for (j, d) in row.iter_mut().enumerate() {
                    *d = gx * (T::lit((j + 1) as f64) - x) + dy;
                }
            }
        }
    }
    d_maps
}

/// Per-axis variance of each channel's mass about `centers`, normalized by
/// `zeta`. Shapes: `centers (batch, C, 2)`, `zeta (batch, C)`, output `(batch, C, 2)`.
pub fn spatial_variance<T: Real>(
    maps: ArrayView4<T>,
    centers: ArrayView3<T>,
    zeta: ArrayView2<T>,
) -> Result<Array3<T>> {
    let (b, c, _, _) = maps.dim();
    if centers.dim() != (b, c, 2) || zeta.dim() != (b, c) {
        return Err(shape_err("spatial_variance: centers/zeta do not match maps"));
    }
    let mut var = Array3::<T>::zeros((b, c, 2));
    for bi in 0..b {
        for ci in 0..c {
            let x = centers[[bi, ci, 0]];
            let y = centers[[bi, ci, 1]];
            let mut su = T::zero();
            let mut sv = T::zero();
            for (i, row) in maps.slice(s![bi, ci, .., ..]).outer_iter().enumerate() {
                let dv = T::lit((i + 1) as f64) - y;
                let mut row_mass = T::zero();
                for (j, &d) in row.iter().enumerate() {
                    let du = T::lit((j + 1) as f64) - x;
                    su += d * du * du;
                    row_mass += d;
                }
                sv += row_mass * dv * dv;
            }
            let z = zeta[[bi, ci]];
            var[[bi, ci, 0]] = su / z;
            var[[bi, ci, 1]] = sv / z;
        }
    }
    Ok(var)
}

/// Gradient of [`spatial_variance`] with respect to the maps and the centers,
/// where `zeta` is itself the channel sum of `maps`.
pub fn spatial_variance_backward<T: Real>(
    maps: ArrayView4<T>,
    centers: ArrayView3<T>,
    zeta: ArrayView2<T>,
    var: ArrayView3<T>,
    d_var: ArrayView3<T>,
) -> (Array4<T>, Array3<T>) {
    let (b, c, h, w) = maps.dim();
    let mut d_maps = Array4::<T>::zeros((b, c, h, w));
    let mut d_centers = Array3::<T>::zeros((b, c, 2));
    for bi in 0..b {
        for ci in 0..c {
            let x = centers[[bi, ci, 0]];
            let y = centers[[bi, ci, 1]];
            let inv = T::one() / zeta[[bi, ci]];
            let gu = d_var[[bi, ci, 0]] * inv;
            let gv = d_var[[bi, ci, 1]] * inv;
            let vu = var[[bi, ci, 0]];
            let vv = var[[bi, ci, 1]];
            let src = maps.slice(s![bi, ci, .., ..]);
            let mut dst = d_maps.slice_mut(s![bi, ci, .., ..]);
            let mut first_u = T::zero();
            let mut first_v = T::zero();
            for (i, (row, mut drow)) in src.outer_iter().zip(dst.outer_iter_mut()).enumerate() {
                let dv = T::lit((i + 1) as f64) - y;
                let term_v = gv * (dv * dv - vv);
                let mut row_mass = T::zero();
                for (j, (&d, g)) in row.iter().zip(drow.iter_mut()).enumerate() {
                    let du = T::lit((j + 1) as f64) - x;
                    *g = gu * (du * du - vu) + term_v;
                    first_u += d * du;
                    row_mass += d;
                }
                first_v += row_mass * dv;
            }
            let two = T::lit(2.0);
            d_centers[[bi, ci, 0]] = -two * gu * first_u;
            d_centers[[bi, ci, 1]] = -two * gv * first_v;
        }
    }
    (d_maps, d_centers)
}

fn landmark_variance<T: Real>(width: &Width<'_, T>, bi: usize, k: usize) -> T {
    match width {
        Width::Std(s) => *s * *s,
        Width::Variance(v) => v[[bi, k]],
    }
}

fn check_width<T: Real>(width: &Width<'_, T>, b: usize, k: usize) -> Result<()> {
    match width {
        Width::Std(s) => {
            if !(*s > T::zero()) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!("gaussian width must be > 0, got {s}")));
            }
        }
        Width::Variance(v) => {
            if v.dim() != (b, k) {
                return Err(shape_err(format!("variance shape {:?} != ({b}, {k})", v.dim())));
            }
            if v.iter().any(|x| !(*x > T::zero()) || !x.is_finite()) {
                return Err(Error::InvalidArgument("gaussian variance must be > 0".into()));
            }
        }
    }
    Ok(())
}

/// Renders an isotropic Gaussian per landmark onto an `h × w` grid.
///
/// `landmarks` are `(batch, K, 2)` in `frame` units. In
/// [`RenderMode::ApproxDetection`] the output has `K` channels scaled by
/// `1 / (W H)`; in [`RenderMode::Decoder`] it has `K + 1` channels, the last
/// being exactly one.
pub fn render_gaussian_maps<T: Real>(
    landmarks: ArrayView3<T>,
    width: Width<'_, T>,
    grid: (usize, usize),
    mode: RenderMode,
    frame: Frame,
) -> Result<ConfidenceMap<T>> {
    let (b, k, two) = landmarks.dim();
    if two != 2 {
        return Err(shape_err("landmarks must be (batch, K, 2)"));
    }
    check_width(&width, b, k)?;
    check_finite("landmarks", landmarks.iter().copied())?;
    let (h, w) = grid;
    let scale = T::lit(frame.scale(grid));
    let (channels, gain, kind) = match mode {
        RenderMode::ApproxDetection => (k, T::lit(1.0 / (h * w) as f64), MapKind::GaussianApprox),
        RenderMode::Decoder => (k + 1, T::one(), MapKind::RawScores),
    };
    let mut out = Array4::<T>::zeros((b, channels, h, w));
    let two_pi = T::lit(std::f64::consts::TAU);
    let mut gx = vec![T::zero(); w];
    let mut gy = vec![T::zero(); h];
    for bi in 0..b {
        for ki in 0..k {
            let var = landmark_variance(&width, bi, ki);
            let x = landmarks[[bi, ki, 0]];
            let y = landmarks[[bi, ki, 1]];
            let inv2 = T::one() / (T::lit(2.0) * var);
            let norm = gain / (two_pi * var);
            // separable: exp(-(du^2 + dv^2)/2s) = exp(-du^2/2s) * exp(-dv^2/2s)
            for (j, g) in gx.iter_mut().enumerate() {
                let du = T::lit((j + 1) as f64) * scale - x;
                *g = (-du * du * inv2).exp();
            }
            for (i, g) in gy.iter_mut().enumerate() {
                let dv = T::lit((i + 1) as f64) * scale - y;
                *g = (-dv * dv * inv2).exp() * norm;
            }
            let mut plane = out.slice_mut(s![bi, ki, .., ..]);
            for (i, mut row) in plane.outer_iter_mut().enumerate() {
                let fy = gy[i];
                for (j, v) in row.iter_mut().enumerate() {
                    *v = fy * gx[j];
                }
            }
        }
        if mode == RenderMode::Decoder {
            out.slice_mut(s![bi, k, .., ..]).fill(T::one());
        }
    }
    Ok(ConfidenceMap::new(out, kind))
}

/// Gradient of [`render_gaussian_maps`] with respect to the landmarks and,
/// for [`Width::Variance`], the per-landmark variances. `rendered` is the
/// forward output. The background channel (decoder mode) carries no gradient.
pub fn render_gaussian_maps_backward<T: Real>(
    landmarks: ArrayView3<T>,
    width: Width<'_, T>,
    rendered: ArrayView4<T>,
    d_rendered: ArrayView4<T>,
    frame: Frame,
) -> (Array3<T>, Option<Array2<T>>) {
    let (b, k, _) = landmarks.dim();
    let (_, _, h, w) = rendered.dim();
    let scale = T::lit(frame.scale((h, w)));
    let mut d_lm = Array3::<T>::zeros((b, k, 2));
    let mut d_var = match width {
        Width::Variance(_) => Some(Array2::<T>::zeros((b, k))),
        Width::Std(_) => None,
    };
    for bi in 0..b {
        for ki in 0..k {
            let var = landmark_variance(&width, bi, ki);
            let x = landmarks[[bi, ki, 0]];
            let y = landmarks[[bi, ki, 1]];
            let mut sx = T::zero();
            let mut sy = T::zero();
            let mut sd2 = T::zero();
            let mut s0 = T::zero();
            let out = rendered.slice(s![bi, ki, .., ..]);
            let g = d_rendered.slice(s![bi, ki, .., ..]);
            for (i, (orow, grow)) in out.outer_iter().zip(g.outer_iter()).enumerate() {
                let dv = T::lit((i + 1) as f64) * scale - y;
                for (j, (&o, &gg)) in orow.iter().zip(grow.iter()).enumerate() {
                    let du = T::lit((j + 1) as f64) * scale - x;
                    let og = o * gg;
                    sx += og * du;
                    sy += og * dv;
                    sd2 += og * (du * du + dv * dv);
                    s0 += og;
                }
            }
            d_lm[[bi, ki, 0]] = sx / var;
            d_lm[[bi, ki, 1]] = sy / var;
            if let Some(dv) = d_var.as_mut() {
                dv[[bi, ki]] = sd2 / (T::lit(2.0) * var * var) - s0 / var;
            }
        }
    }
    (d_lm, d_var)
}

/// Divides every channel by the per-pixel channel sum.
pub fn normalize_decoder_maps<T: Real>(raw: &ConfidenceMap<T>) -> Result<ConfidenceMap<T>> {
    check_finite("decoder raw map", raw.data.iter().copied())?;
    let sums = raw.data.sum_axis(Axis(1)).insert_axis(Axis(1));
    if sums.iter().any(|s| !(*s > T::zero())) {
        return Err(Error::InvalidArgument("decoder map has a non-positive channel sum".into()));
    }
    Ok(ConfidenceMap::new(&raw.data / &sums, MapKind::Normalized))
}

/// Gradient of [`normalize_decoder_maps`] with respect to the raw map.
pub fn normalize_decoder_maps_backward<T: Real>(
    raw: ArrayView4<T>,
    normalized: ArrayView4<T>,
    d_normalized: ArrayView4<T>,
) -> Array4<T> {
    let sums = raw.sum_axis(Axis(1)).insert_axis(Axis(1));
    let dot = (&normalized * &d_normalized).sum_axis(Axis(1)).insert_axis(Axis(1));
    (&d_normalized - &dot) / &sums
}

/// Output of [`masked_pool`].
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    /// `(batch, M, C)` projected descriptors.
    pub descriptors: Array3<T>,
    /// `(batch, M, S)` mask-weighted feature sums before projection.
    pub pooled: Array3<T>,
}

/// `f_m = W_m · Σ_{u,v} mask_m(u,v) F(u,v)` for every mask channel.
///
/// Shapes: `features (batch, S, H, W)`, `masks (batch, M, H, W)`,
/// `proj (M, C, S)`.
pub fn masked_pool<T: Real>(
    features: ArrayView4<T>,
    masks: ArrayView4<T>,
    proj: ArrayView3<T>,
) -> Result<Pooled<T>> {
    let (b, s_ch, h, w) = features.dim();
    let (mb, m, mh, mw) = masks.dim();
    let (pm, c, ps) = proj.dim();
    if mb != b || mh != h || mw != w || pm != m || ps != s_ch {
        return Err(shape_err(format!(
            "masked_pool: features {:?}, masks {:?}, proj {:?}",
            features.dim(),
            masks.dim(),
            proj.dim()
        )));
    }
    let mut pooled = Array3::<T>::zeros((b, m, s_ch));
    let mut desc = Array3::<T>::zeros((b, m, c));
    for bi in 0..b {
        let f = features.slice(s![bi, .., .., ..]);
        let f = f.as_standard_layout();
        let f2 = f.view().into_shape_with_order((s_ch, h * w)).expect("contiguous");
        let mk = masks.slice(s![bi, .., .., ..]);
        let mk = mk.as_standard_layout();
        let m2 = mk.view().into_shape_with_order((m, h * w)).expect("contiguous");
        let p = m2.dot(&f2.t());
        for mi in 0..m {
            let d = proj.slice(s![mi, .., ..]).dot(&p.row(mi));
            desc.slice_mut(s![bi, mi, ..]).assign(&d);
        }
        pooled.slice_mut(s![bi, .., ..]).assign(&p);
    }
    Ok(Pooled { descriptors: desc, pooled })
}

/// Gradients of [`masked_pool`]: `(d_features, d_masks, d_proj)`.
pub fn masked_pool_backward<T: Real>(
    features: ArrayView4<T>,
    masks: ArrayView4<T>,
    proj: ArrayView3<T>,
    pooled: ArrayView3<T>,
    d_desc: ArrayView3<T>,
) -> (Array4<T>, Array4<T>, Array3<T>) {
    let (b, s_ch, h, w) = features.dim();
    let (_, m, _, _) = masks.dim();
    let mut d_feat = Array4::<T>::zeros(features.dim());
    let mut d_masks = Array4::<T>::zeros(masks.dim());
    let mut d_proj = Array3::<T>::zeros(proj.dim());
    for bi in 0..b {
        let mut d_pooled = Array2::<T>::zeros((m, s_ch));
        for mi in 0..m {
            let g = d_desc.slice(s![bi, mi, ..]);
            d_pooled.row_mut(mi).assign(&proj.slice(s![mi, .., ..]).t().dot(&g));
            let outer = g
                .insert_axis(Axis(1))
                .dot(&pooled.slice(s![bi, mi, ..]).insert_axis(Axis(0)));
            let mut dp = d_proj.slice_mut(s![mi, .., ..]);
            dp += &outer;
        }
        let f = features.slice(s![bi, .., .., ..]);
        let f = f.as_standard_layout();
        let f2 = f.view().into_shape_with_order((s_ch, h * w)).expect("contiguous");
        let mk = masks.slice(s![bi, .., .., ..]);
        let mk = mk.as_standard_layout();
        let m2 = mk.view().into_shape_with_order((m, h * w)).expect("contiguous");
        let dm = d_pooled.dot(&f2);
        let df = d_pooled.t().dot(&m2);
        d_masks
            .slice_mut(s![bi, .., .., ..])
            .assign(&dm.into_shape_with_order((m, h, w)).expect("shape"));
        d_feat
            .slice_mut(s![bi, .., .., ..])
            .assign(&df.into_shape_with_order((s_ch, h, w)).expect("shape"));
    }
    (d_feat, d_masks, d_proj)
}

#[inline]
pub fn leaky_relu<T: Real>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x * slope
    }
}

/// Output of [`unpool`].
#[derive(Clone, Debug)]
pub struct Unpooled<T> {
    /// `(batch, S, H, W)`
    pub features: Array4<T>,
    /// `(batch, M, S)` pre-activation `W̃_m f_m`.
    pub pre: Array3<T>,
}

/// `F̃(u,v) = Σ_m D̃_m(u,v) · τ(W̃_m f_m)` with `τ` a leaky ReLU.
///
/// Shapes: `dmaps (batch, M, H, W)`, `descriptors (batch, M, C)`,
/// `back_proj (M, S, C)`.
pub fn unpool<T: Real>(
    dmaps: ArrayView4<T>,
    descriptors: ArrayView3<T>,
    back_proj: ArrayView3<T>,
    slope: T,
) -> Result<Unpooled<T>> {
    let (b, m, h, w) = dmaps.dim();
    let (db, dm, c) = descriptors.dim();
    let (pm, s_ch, pc) = back_proj.dim();
    if db != b || dm != m || pm != m || pc != c {
        return Err(shape_err(format!(
            "unpool: dmaps {:?}, descriptors {:?}, back_proj {:?}",
            dmaps.dim(),
            descriptors.dim(),
            back_proj.dim()
        )));
    }
    let mut pre = Array3::<T>::zeros((b, m, s_ch));
    let mut out = Array4::<T>::zeros((b, s_ch, h, w));
    for bi in 0..b {
        let mut act = Array2::<T>::zeros((m, s_ch));
        for mi in 0..m {
            let z = back_proj.slice(s![mi, .., ..]).dot(&descriptors.slice(s![bi, mi, ..]));
            act.row_mut(mi).assign(&z.mapv(|v| leaky_relu(v, slope)));
            pre.slice_mut(s![bi, mi, ..]).assign(&z);
        }
        let dmk = dmaps.slice(s![bi, .., .., ..]);
        let dmk = dmk.as_standard_layout();
        let d2 = dmk.view().into_shape_with_order((m, h * w)).expect("contiguous");
        let f = act.t().dot(&d2);
        out.slice_mut(s![bi, .., .., ..])
            .assign(&f.into_shape_with_order((s_ch, h, w)).expect("shape"));
    }
    Ok(Unpooled { features: out, pre })
}

/// Gradients of [`unpool`]: `(d_dmaps, d_descriptors, d_back_proj)`.
pub fn unpool_backward<T: Real>(
    dmaps: ArrayView4<T>,
    descriptors: ArrayView3<T>,
    back_proj: ArrayView3<T>,
    pre: ArrayView3<T>,
    slope: T,
    d_out: ArrayView4<T>,
) -> (Array4<T>, Array3<T>, Array3<T>) {
    let (b, m, h, w) = dmaps.dim();
    let (_, s_ch, _) = back_proj.dim();
    let mut d_dmaps = Array4::<T>::zeros(dmaps.dim());
    let mut d_desc = Array3::<T>::zeros(descriptors.dim());
    let mut d_bp = Array3::<T>::zeros(back_proj.dim());
    for bi in 0..b {
        let pre_b = pre.slice(s![bi, .., ..]);
        let act = pre_b.mapv(|v| leaky_relu(v, slope));
        let g = d_out.slice(s![bi, .., .., ..]);
        let g = g.as_standard_layout();
        let g2 = g.view().into_shape_with_order((s_ch, h * w)).expect("contiguous");
        let dmk = dmaps.slice(s![bi, .., .., ..]);
        let dmk = dmk.as_standard_layout();
        let d2 = dmk.view().into_shape_with_order((m, h * w)).expect("contiguous");
        let dd = act.dot(&g2);
        d_dmaps
            .slice_mut(s![bi, .., .., ..])
            .assign(&dd.into_shape_with_order((m, h, w)).expect("shape"));
        let mut d_act = d2.dot(&g2.t());
        Zip::from(&mut d_act).and(&pre_b).for_each(|da, &z| {
            if z < T::zero() {
                *da *= slope;
            }
        });
        for mi in 0..m {
            let dz = d_act.row(mi);
            let f = descriptors.slice(s![bi, mi, ..]);
            d_desc
                .slice_mut(s![bi, mi, ..])
                .assign(&back_proj.slice(s![mi, .., ..]).t().dot(&dz));
            let outer = dz.insert_axis(Axis(1)).dot(&f.insert_axis(Axis(0)));
            let mut dbp = d_bp.slice_mut(s![mi, .., ..]);
            dbp += &outer;
        }
    }
    (d_dmaps, d_desc, d_bp)
}
