//! Training objectives. Each loss returns its batch-mean value together with
//! the gradient with respect to its tensor inputs.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::edge_length;
use crate::real::Real;
use crate::tps::TpsTransform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_conc: f64,
    pub lambda_sep: f64,
    pub lambda_eqv: f64,
    /// Separation kernel width, normalized units.
    pub sigma_sep: f64,
    pub sigma_color: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_recon: 0.01,
            lambda_conc: 100.0,
            lambda_sep: 16.0,
            lambda_eqv: 1e4,
            sigma_sep: 0.06,
            sigma_color: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_recon, self.lambda_conc, self.lambda_sep, self.lambda_eqv];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.sigma_sep > 0.0) || !(self.sigma_color > 0.0) {
            return Err(Error::Config("sigma_sep and sigma_color must be positive".into()));
        }
        Ok(())
    }
}

/// Dense displacement field on an image grid, in pixels. For a frame pair
/// `(I, I')` the vector at pixel `(u, v)` of `I'` points to the matching
/// location in `I`, so `g(u, v) = (u, v) + O(u, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    /// `(H, W)`
    pub ox: Array2<f32>,
    /// `(H, W)`
    pub oy: Array2<f32>,
}

impl FlowField {
    pub fn new(ox: Array2<f32>, oy: Array2<f32>) -> Result<Self> {
        if ox.dim() != oy.dim() {
            return Err(shape_err(format!("flow components {:?} and {:?}", ox.dim(), oy.dim())));
        }
        if ox.iter().chain(oy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field"));
        }
        Ok(Self { ox, oy })
    }

    /// Constant displacement `(dx, dy)` everywhere.
    pub fn uniform(h: usize, w: usize, dx: f32, dy: f32) -> Self {
        Self { ox: Array2::from_elem((h, w), dx), oy: Array2::from_elem((h, w), dy) }
    }

    /// `(H, W)`
    pub fn dim(&self) -> (usize, usize) {
        self.ox.dim()
    }

    /// `O_n = O_x² + O_y²`
    pub fn magnitude(&self) -> Array2<f32> {
        ndarray::Zip::from(&self.ox).and(&self.oy).map_collect(|x, y| x * x + y * y)
    }

    /// Magnitude on a map grid whose sides divide or equal the flow grid,
    /// averaging over each block.
    pub fn magnitude_on(&self, grid: (usize, usize)) -> Result<Array2<f32>> {
        let mag = self.magnitude();
        let (h, w) = self.dim();
        if grid == (h, w) {
            return Ok(mag);
        }
        if grid.0 == 0 || grid.1 == 0 || h % grid.0 != 0 || w % grid.1 != 0 || h / grid.0 != w / grid.1 {
            return Err(shape_err(format!("cannot pool a {h}x{w} flow onto {grid:?}")));
        }
        let f = h / grid.0;
        Ok(Array2::from_shape_fn(grid, |(i, j)| {
            mag.slice(s![i * f..(i + 1) * f, j * f..(j + 1) * f]).mean().unwrap_or(0.0)
        }))
    }

    /// Bilinear sample at 1-based pixel coordinates with edge clamping.
    /// Returns the displacement, its spatial derivatives
    /// `[[dox/dx, dox/dy], [doy/dx, doy/dy]]`, and whether the point was inside.
    pub fn sample(&self, x: f64, y: f64) -> ([f64; 2], [[f64; 2]; 2], bool) {
        let (h, w) = self.dim();
        let inside = x >= 1.0 && x <= w as f64 && y >= 1.0 && y <= h as f64;
        let (vx, gx) = bilinear_with_grad(self.ox.view(), x, y);
        let (vy, gy) = bilinear_with_grad(self.oy.view(), x, y);
        ([vx, vy], [gx, gy], inside)
    }
}

fn bilinear_with_grad(plane: ArrayView2<f32>, x: f64, y: f64) -> (f64, [f64; 2]) {
    let (h, w) = plane.dim();
    let clamp = |v: f64, n: usize| (v - 1.0).clamp(0.0, (n - 1) as f64);
    let cx = clamp(x, w);
    let cy = clamp(y, h);
    let x_free = (x - 1.0) > 0.0 && (x - 1.0) < (w - 1) as f64;
    let y_free = (y - 1.0) > 0.0 && (y - 1.0) < (h - 1) as f64;
    let j0 = (cx.floor() as usize).min(w.saturating_sub(2));
    let i0 = (cy.floor() as usize).min(h.saturating_sub(2));
    let j1 = (j0 + 1).min(w - 1);
    let i1 = (i0 + 1).min(h - 1);
    let fx = cx - j0 as f64;
    let fy = cy - i0 as f64;
    let p = |i: usize, j: usize| plane[[i, j]] as f64;
    let (a, b, c, d) = (p(i0, j0), p(i0, j1), p(i1, j0), p(i1, j1));
    let top = a + (b - a) * fx;
    let bot = c + (d - c) * fx;
    let v = top + (bot - top) * fy;
    let dx = if x_free { (b - a) * (1.0 - fy) + (d - c) * fy } else { 0.0 };
    let dy = if y_free { bot - top } else { 0.0 };
    (v, [dx, dy])
}

/// A coordinate map `g` in normalized units, with its Jacobian.
pub trait CoordWarp {
    fn apply(&self, p: [f64; 2]) -> [f64; 2];
    fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2];
    /// Whether `p` falls where the warp is defined without clamping.
    fn in_domain(&self, _p: [f64; 2]) -> bool {
        true
    }
}

impl CoordWarp for TpsTransform {
    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        self.apply_point(p)
    }

    fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        TpsTransform::jacobian(self, p)
    }
}

/// `g(p) = p + O(p)` for a flow field on a grid with the given edge length.
pub struct FlowWarp<'a> {
    pub flow: &'a FlowField,
}

impl FlowWarp<'_> {
    fn edge(&self) -> f64 {
        edge_length(self.flow.dim())
    }
}

impl CoordWarp for FlowWarp<'_> {
    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let e = self.edge();
        let (o, _, _) = self.flow.sample(p[0] * e, p[1] * e);
        [p[0] + o[0] / e, p[1] + o[1] / e]
    }

    fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        let e = self.edge();
        let (_, g, _) = self.flow.sample(p[0] * e, p[1] * e);
        [[1.0 + g[0][0], g[0][1]], [g[1][0], 1.0 + g[1][1]]]
    }

    fn in_domain(&self, p: [f64; 2]) -> bool {
        let e = self.edge();
        self.flow.sample(p[0] * e, p[1] * e).2
    }
}

/// Conjugates an image-frame warp by a constant shift into the map frame:
/// `g_map(p) = g(p + offset) - offset`. When the detection maps are coarser
/// than the image, map pixel centers sit at a fixed normalized offset from
/// the image's.
pub struct Shifted<'a> {
    pub inner: &'a dyn CoordWarp,
    pub offset: [f64; 2],
}

impl CoordWarp for Shifted<'_> {
    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let q = self.inner.apply([p[0] + self.offset[0], p[1] + self.offset[1]]);
        [q[0] - self.offset[0], q[1] - self.offset[1]]
    }

    fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        self.inner.jacobian([p[0] + self.offset[0], p[1] + self.offset[1]])
    }

    fn in_domain(&self, p: [f64; 2]) -> bool {
        self.inner.in_domain([p[0] + self.offset[0], p[1] + self.offset[1]])
    }
}

/// Normalized offset from map-frame to image-frame coordinates.
pub fn map_to_image_offset(map: (usize, usize), image: (usize, usize)) -> [f64; 2] {
    let s = image.1 as f64 / map.1 as f64;
    let e = edge_length(image);
    let d = 0.5 * (1.0 - s) / e;
    [d, d]
}

const TWO_PI_E: f64 = std::f64::consts::TAU * std::f64::consts::E;

/// `mean_b Σ_k 2πe (var_u + var_v)²` on normalized variances `(batch, K, 2)`.
pub fn concentration_loss<T: Real>(var: ArrayView3<T>) -> (f64, Array3<T>) {
    let (b, k, _) = var.dim();
    let inv_b = 1.0 / b.max(1) as f64;
    let mut total = 0.0;
    let mut grad = Array3::<T>::zeros(var.dim());
    for bi in 0..b {
        for ki in 0..k {
            let s = var[[bi, ki, 0]].as_f64() + var[[bi, ki, 1]].as_f64();
            total += TWO_PI_E * s * s;
            let g = T::lit(2.0 * TWO_PI_E * s * inv_b);
            grad[[bi, ki, 0]] = g;
            grad[[bi, ki, 1]] = g;
        }
    }
    (total * inv_b, grad)
}

/// `mean_b Σ_{k≠k'} exp(-‖p_k - p_k'‖² / 2σ²)` over ordered pairs.
pub fn separation_loss<T: Real>(landmarks: ArrayView3<T>, sigma_sep: f64) -> (f64, Array3<T>) {
    let (b, k, _) = landmarks.dim();
    let mut grad = Array3::<T>::zeros(landmarks.dim());
    if k < 2 {
        log::warn!("separation loss needs at least two landmarks; returning 0");
        return (0.0, grad);
    }
    let inv_b = 1.0 / b.max(1) as f64;
    let inv2 = 1.0 / (2.0 * sigma_sep * sigma_sep);
    let mut total = 0.0;
    for bi in 0..b {
        for i in 0..k {
            for j in (i + 1)..k {
                let dx = landmarks[[bi, i, 0]].as_f64() - landmarks[[bi, j, 0]].as_f64();
                let dy = landmarks[[bi, i, 1]].as_f64() - landmarks[[bi, j, 1]].as_f64();
                let e = (-(dx * dx + dy * dy) * inv2).exp();
                total += 2.0 * e;
                // d(2e)/dp_i = -2e (p_i - p_j) / σ²
                let c = -4.0 * e * inv2 * inv_b;
                grad[[bi, i, 0]] += T::lit(c * dx);
                grad[[bi, i, 1]] += T::lit(c * dy);
                grad[[bi, j, 0]] -= T::lit(c * dx);
                grad[[bi, j, 1]] -= T::lit(c * dy);
            }
        }
    }
    (total * inv_b, grad)
}

/// Output of [`equivariance_loss`].
#[derive(Clone, Debug)]
pub struct EquivarianceTerms<T> {
    pub value: f64,
    /// Gradient with respect to the landmarks of `I`.
    pub d_landmarks: Array3<T>,
    /// Gradient with respect to the landmarks of `I'`.
    pub d_warped: Array3<T>,
    /// Landmarks of `I'` that fell outside the warp's domain.
    pub clamped: usize,
}

/// `mean_b Σ_k ‖g_b(p'_k) - p_k‖²`, one warp per batch element.
pub fn equivariance_loss<T: Real>(
    landmarks: ArrayView3<T>,
    warped: ArrayView3<T>,
    warps: &[&dyn CoordWarp],
) -> Result<EquivarianceTerms<T>> {
    let (b, k, _) = landmarks.dim();
    if warped.dim() != landmarks.dim() || warps.len() != b {
        return Err(shape_err(format!(
            "equivariance: landmarks {:?}, warped {:?}, {} warps",
            landmarks.dim(),
            warped.dim(),
            warps.len()
        )));
    }
    let inv_b = 1.0 / b.max(1) as f64;
    let mut d_lm = Array3::<T>::zeros(landmarks.dim());
    let mut d_w = Array3::<T>::zeros(landmarks.dim());
    let mut total = 0.0;
    let mut clamped = 0;
    for (bi, g) in warps.iter().enumerate() {
        for ki in 0..k {
            let q = [warped[[bi, ki, 0]].as_f64(), warped[[bi, ki, 1]].as_f64()];
            if !g.in_domain(q) {
                clamped += 1;
            }
            let gq = g.apply(q);
            let r = [gq[0] - landmarks[[bi, ki, 0]].as_f64(), gq[1] - landmarks[[bi, ki, 1]].as_f64()];
            total += r[0] * r[0] + r[1] * r[1];
            let j = g.jacobian(q);
            d_lm[[bi, ki, 0]] = T::lit(-2.0 * r[0] * inv_b);
            d_lm[[bi, ki, 1]] = T::lit(-2.0 * r[1] * inv_b);
            d_w[[bi, ki, 0]] = T::lit(2.0 * (j[0][0] * r[0] + j[1][0] * r[1]) * inv_b);
            d_w[[bi, ki, 1]] = T::lit(2.0 * (j[0][1] * r[0] + j[1][1] * r[1]) * inv_b);
        }
    }
    if clamped > 0 {
        log::debug!("equivariance: {clamped} warped landmarks sampled outside the flow field");
    }
    Ok(EquivarianceTerms { value: total * inv_b, d_landmarks: d_lm, d_warped: d_w, clamped })
}

/// `mean_b [-Σ_{u,v} O_n Σ_k R̃_k / Σ_{u,v} O_n]`, zero for frames without flow.
///
/// `rendered` holds the foreground decoder maps `(batch, K, h, w)`;
/// `magnitude` is `(batch, h, w)`.
pub fn flow_preference_loss<T: Real>(rendered: ArrayView4<T>, magnitude: ArrayView3<T>) -> Result<(f64, Array4<T>)> {
    let (b, k, h, w) = rendered.dim();
    if magnitude.dim() != (b, h, w) {
        return Err(shape_err(format!("flow magnitude {:?} vs maps {:?}", magnitude.dim(), rendered.dim())));
    }
    let inv_b = 1.0 / b.max(1) as f64;
    let mut grad = Array4::<T>::zeros(rendered.dim());
    let mut total = 0.0;
    for bi in 0..b {
        let mag = magnitude.slice(s![bi, .., ..]);
        let z = mag.iter().map(|v| v.as_f64()).sum::<f64>();
        if !(z > 0.0) {
            continue;
        }
        let mut acc = 0.0;
        for ki in 0..k {
            let r = rendered.slice(s![bi, ki, .., ..]);
            acc += ndarray::Zip::from(&r).and(&mag).fold(0.0, |a, &x, &m| a + x.as_f64() * m.as_f64());
            let scale = -inv_b / z;
            grad.slice_mut(s![bi, ki, .., ..]).zip_mut_with(&mag, |g, &m| *g = T::lit(scale * m.as_f64()));
        }
        total -= acc / z;
    }
    Ok((total * inv_b, grad))
}

/// Gaussian negative log-likelihood with fixed `σ`:
/// `mean_b [‖I - Ĩ‖²_F / σ² + ln(2πσ²)]`. Gradient is with respect to `recon`.
pub fn reconstruction_loss<T: Real>(
    image: ArrayView4<T>,
    recon: ArrayView4<T>,
    sigma_color: f64,
) -> Result<(f64, Array4<T>)> {
    if image.dim() != recon.dim() {
        return Err(shape_err(format!("reconstruction: image {:?} vs recon {:?}", image.dim(), recon.dim())));
    }
    let b = image.dim().0;
    let inv_b = 1.0 / b.max(1) as f64;
    let s2 = sigma_color * sigma_color;
    let mut sq = 0.0;
    let mut grad = Array4::<T>::zeros(image.dim());
    ndarray::Zip::from(&mut grad).and(&image).and(&recon).for_each(|g, &i, &r| {
        let d = r.as_f64() - i.as_f64();
        sq += d * d;
        *g = T::lit(2.0 * d / s2 * inv_b);
    });
    Ok((sq / s2 * inv_b + (std::f64::consts::TAU * s2).ln(), grad))
}

/// Raw loss values for one step. `flow` is present only for flow-paired batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub conc: f64,
    pub sep: f64,
    pub eqv: f64,
    pub flow: Option<f64>,
}

/// Raw and weighted per-term values plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub raw: LossParts,
    pub weighted: LossParts,
    pub total: f64,
}

/// Weighted sum; the flow preference term shares `lambda_eqv`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, step: u64) -> Result<LossBreakdown> {
    let named = [
        ("recon", Some(parts.recon)),
        ("conc", Some(parts.conc)),
        ("sep", Some(parts.sep)),
        ("eqv", Some(parts.eqv)),
        ("flow", parts.flow),
    ];
    let bad: Vec<String> =
        named.iter().filter_map(|(n, v)| v.filter(|x| !x.is_finite()).map(|x| format!("{n}={x}"))).collect();
    if !bad.is_empty() {
        return Err(Error::NonFiniteLoss { step, detail: bad.join(", ") });
    }
    let weighted = LossParts {
        recon: weights.lambda_recon * parts.recon,
        conc: weights.lambda_conc * parts.conc,
        sep: weights.lambda_sep * parts.sep,
        eqv: weights.lambda_eqv * parts.eqv,
        flow: parts.flow.map(|f| weights.lambda_eqv * f),
    };
    let total = weighted.recon + weighted.conc + weighted.sep + weighted.eqv + weighted.flow.unwrap_or(0.0);
    Ok(LossBreakdown { raw: *parts, weighted, total })
}
