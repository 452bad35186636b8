//! Thin-plate-spline coordinate transforms.
//!
//! Transforms act on normalized coordinates (pixel coordinate divided by the
//! map edge length `sqrt(W * H)`), so the same transform applies to images
//! and to normalized landmarks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::edge_length;
use crate::raster::{sample_bilinear, Image};

/// Relative singular-value floor below which a TPS system counts as singular.
const SINGULAR_RCOND: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpsTransform {
    /// `[[a11, a12, tx], [a21, a22, ty]]`
    pub affine: [[f64; 3]; 2],
    pub control_points: Vec<[f64; 2]>,
    pub kernel_weights: Vec<[f64; 2]>,
}

/// `r^2 log r` written in terms of `s = r^2`.
#[inline]
fn kernel(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        0.5 * s * s.ln()
    }
}

/// `d kernel / d s`, scaled by 2 so that `grad_p = dkernel2(s) * (p - c)`.
#[inline]
fn kernel_grad_factor(s: f64) -> f64 {
    if s <= 1e-300 {
        0.0
    } else {
        s.ln() + 1.0
    }
}

impl TpsTransform {
    pub fn identity() -> Self {
        Self { affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], control_points: vec![], kernel_weights: vec![] }
    }

    /// Pure affine transform with no kernel part.
    pub fn affine(affine: [[f64; 3]; 2]) -> Self {
        Self { affine, control_points: vec![], kernel_weights: vec![] }
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let a = &self.affine;
        let mut x = a[0][0] * p[0] + a[0][1] * p[1] + a[0][2];
        let mut y = a[1][0] * p[0] + a[1][1] * p[1] + a[1][2];
        for (c, w) in self.control_points.iter().zip(&self.kernel_weights) {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let phi = kernel(dx * dx + dy * dy);
            x += w[0] * phi;
            y += w[1] * phi;
        }
        [x, y]
    }

    /// Jacobian `[[dgx/dx, dgx/dy], [dgy/dx, dgy/dy]]` at `p`.
    pub fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        let a = &self.affine;
        let mut j = [[a[0][0], a[0][1]], [a[1][0], a[1][1]]];
        for (c, w) in self.control_points.iter().zip(&self.kernel_weights) {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let f = kernel_grad_factor(dx * dx + dy * dy);
            j[0][0] += w[0] * f * dx;
            j[0][1] += w[0] * f * dy;
            j[1][0] += w[1] * f * dx;
            j[1][1] += w[1] * f * dy;
        }
        j
    }

    pub fn apply(&self, coords: &[[f64; 2]]) -> Vec<[f64; 2]> {
        coords.iter().map(|&p| self.apply_point(p)).collect()
    }

    /// `max(|Σ w|, |Σ w·c|)`; zero for a proper TPS.
    pub fn side_condition_residual(&self) -> f64 {
        let mut sums = [0.0f64; 6];
        for (c, w) in self.control_points.iter().zip(&self.kernel_weights) {
            for d in 0..2 {
                sums[d] += w[d];
                sums[2 + d] += w[d] * c[0];
                sums[4 + d] += w[d] * c[1];
            }
        }
        sums.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `self` followed by `next`, for affine-only transforms.
    pub fn compose_affine(&self, next: &TpsTransform) -> Option<TpsTransform> {
        if !self.control_points.is_empty() || !next.control_points.is_empty() {
            return None;
        }
        let a = &self.affine;
        let b = &next.affine;
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                out[r][c] = b[r][0] * a[0][c] + b[r][1] * a[1][c];
            }
            out[r][2] += b[r][2];
        }
        Some(TpsTransform::affine(out))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Fits the TPS interpolating `src[i] -> dst[i]`, with `reg` added to the
/// kernel diagonal (`reg = 0` interpolates exactly).
pub fn solve_tps(src: &[[f64; 2]], dst: &[[f64; 2]], reg: f64) -> Result<TpsTransform> {
    let p = src.len();
    if p != dst.len() {
        return Err(Error::Shape(format!("solve_tps: {p} sources but {} targets", dst.len())));
    }
    if p < 3 {
        return Err(Error::InvalidArgument(format!("solve_tps needs at least 3 control points, got {p}")));
    }
    if reg < 0.0 || !reg.is_finite() {
        return Err(Error::InvalidArgument(format!("regularization must be >= 0, got {reg}")));
    }
    if src.iter().chain(dst).any(|q| !q[0].is_finite() || !q[1].is_finite()) {
        return Err(Error::NonFinite("TPS control points"));
    }
    let n = p + 3;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for i in 0..p {
        for j in 0..p {
            let dx = src[i][0] - src[j][0];
            let dy = src[i][1] - src[j][1];
            l[(i, j)] = kernel(dx * dx + dy * dy);
        }
        l[(i, i)] += reg;
        let row = [1.0, src[i][0], src[i][1]];
        for (k, v) in row.iter().enumerate() {
            l[(i, p + k)] = *v;
            l[(p + k, i)] = *v;
        }
    }
    let svd = l.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < SINGULAR_RCOND {
        return Err(Error::DegenerateControlPoints);
    }
    let mut rhs = DMatrix::<f64>::zeros(n, 2);
    for i in 0..p {
        rhs[(i, 0)] = dst[i][0];
        rhs[(i, 1)] = dst[i][1];
    }
    let sol = svd.solve(&rhs, 0.0).map_err(|_| Error::DegenerateControlPoints)?;
    let kernel_weights = (0..p).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
    let affine = [
        [sol[(p + 1, 0)], sol[(p + 2, 0)], sol[(p, 0)]],
        [sol[(p + 1, 1)], sol[(p + 2, 1)], sol[(p, 1)]],
    ];
    Ok(TpsTransform { affine, control_points: src.to_vec(), kernel_weights })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpsSampleConfig {
    /// Half-width of the uniform translation, in image-size units.
    pub translate_range: f64,
    pub rotation_std_deg: f64,
    /// Std of `log2(scale)`.
    pub log2_scale_std: f64,
    /// `log2(scale)` is clipped to `±log2_scale_clip`.
    pub log2_scale_clip: f64,
    pub grid_perturb_std: f64,
    pub landmark_perturb_std: f64,
    /// Control points per side of the regular grid.
    pub grid_size: usize,
    pub landmark_mode_prob: f64,
    /// Diagonal regularization for the TPS solve.
    pub reg: f64,
}

impl Default for TpsSampleConfig {
    fn default() -> Self {
        Self {
            translate_range: 0.15,
            rotation_std_deg: 10.0,
            log2_scale_std: 1.25,
            log2_scale_clip: 2.0,
            grid_perturb_std: 0.1,
            landmark_perturb_std: 0.05,
            grid_size: 5,
            landmark_mode_prob: 0.3,
            reg: 1e-6,
        }
    }
}

impl TpsSampleConfig {
    /// Every random component disabled.
    pub fn zeroed() -> Self {
        Self {
            translate_range: 0.0,
            rotation_std_deg: 0.0,
            log2_scale_std: 0.0,
            grid_perturb_std: 0.0,
            landmark_perturb_std: 0.0,
            landmark_mode_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.translate_range,
            self.rotation_std_deg,
            self.log2_scale_std,
            self.log2_scale_clip,
            self.grid_perturb_std,
            self.landmark_perturb_std,
            self.reg,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("TPS sampling ranges and stds must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.landmark_mode_prob) {
            return Err(Error::Config("landmark_mode_prob must lie in [0, 1]".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Config("TPS grid needs at least 2x2 control points".into()));
        }
        Ok(())
    }
}

/// Geometry of the image a transform acts on, in normalized units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Domain {
    pub height: usize,
    pub width: usize,
}

impl Domain {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn edge(&self) -> f64 {
        edge_length((self.height, self.width))
    }

    /// Normalized coordinates of the image center.
    pub fn center(&self) -> [f64; 2] {
        let e = self.edge();
        [(self.width as f64 + 1.0) / 2.0 / e, (self.height as f64 + 1.0) / 2.0 / e]
    }

    /// Normalized image width and height.
    pub fn extent(&self) -> [f64; 2] {
        let e = self.edge();
        [self.width as f64 / e, self.height as f64 / e]
    }

    pub fn grid_points(&self, n: usize) -> Vec<[f64; 2]> {
        let e = self.edge();
        let lerp = |k: usize, size: usize| {
            let t = k as f64 / (n - 1) as f64;
            (1.0 + t * (size as f64 - 1.0)) / e
        };
        let mut pts = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                pts.push([lerp(j, self.width), lerp(i, self.height)]);
            }
        }
        pts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Grid,
    Landmarks,
}

impl ControlMode {
    /// Landmark control points with probability `p`, otherwise the grid.
    pub fn draw<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Self {
        if p > 0.0 && rng.gen::<f64>() < p {
            ControlMode::Landmarks
        } else {
            ControlMode::Grid
        }
    }
}

/// Random global similarity about the image center.
fn sample_affine<R: Rng + ?Sized>(cfg: &TpsSampleConfig, domain: &Domain, rng: &mut R) -> [[f64; 3]; 2] {
    let ext = domain.extent();
    let mut tx = 0.0;
    let mut ty = 0.0;
    if cfg.translate_range > 0.0 {
        tx = rng.gen_range(-cfg.translate_range..=cfg.translate_range) * ext[0];
        ty = rng.gen_range(-cfg.translate_range..=cfg.translate_range) * ext[1];
    }
    let theta = if cfg.rotation_std_deg > 0.0 {
        Normal::new(0.0, cfg.rotation_std_deg.to_radians()).expect("std > 0").sample(rng)
    } else {
        0.0
    };
    let log_s = if cfg.log2_scale_std > 0.0 {
        Normal::new(0.0, cfg.log2_scale_std)
            .expect("std > 0")
            .sample(rng)
            .clamp(-cfg.log2_scale_clip, cfg.log2_scale_clip)
    } else {
        0.0
    };
    let s = log_s.exp2();
    let (sin, cos) = theta.sin_cos();
    let a = [[s * cos, -s * sin], [s * sin, s * cos]];
    let c = domain.center();
    // g(p) = c + A (p - c) + t
    [
        [a[0][0], a[0][1], c[0] - a[0][0] * c[0] - a[0][1] * c[1] + tx],
        [a[1][0], a[1][1], c[1] - a[1][0] * c[0] - a[1][1] * c[1] + ty],
    ]
}

fn apply_affine(a: &[[f64; 3]; 2], p: [f64; 2]) -> [f64; 2] {
    [a[0][0] * p[0] + a[0][1] * p[1] + a[0][2], a[1][0] * p[0] + a[1][1] * p[1] + a[1][2]]
}

/// Samples a TPS for an explicit control-point source. `landmarks` (normalized
/// coordinates) are required for [`ControlMode::Landmarks`]; if that solve is
/// degenerate the grid is used instead and the returned mode says so.
pub fn sample_tps_with_mode<R: Rng + ?Sized>(
    cfg: &TpsSampleConfig,
    mode: ControlMode,
    landmarks: Option<&[[f64; 2]]>,
    domain: &Domain,
    rng: &mut R,
) -> Result<(TpsTransform, ControlMode)> {
    let affine = sample_affine(cfg, domain, rng);
    let try_solve = |src: Vec<[f64; 2]>, std: f64, rng: &mut R| -> Result<TpsTransform> {
        let dst: Vec<[f64; 2]> = if std > 0.0 {
            let noise = Normal::new(0.0, std).expect("std > 0");
            src.iter()
                .map(|q| apply_affine(&affine, [q[0] + noise.sample(rng), q[1] + noise.sample(rng)]))
                .collect()
        } else {
            src.iter().map(|&q| apply_affine(&affine, q)).collect()
        };
        solve_tps(&src, &dst, cfg.reg)
    };
    if mode == ControlMode::Landmarks {
        let lm = landmarks.ok_or_else(|| {
            Error::InvalidArgument("landmark control points requested without landmarks".into())
        })?;
        match try_solve(lm.to_vec(), cfg.landmark_perturb_std, rng) {
            Ok(t) => return Ok((t, ControlMode::Landmarks)),
            Err(Error::DegenerateControlPoints) | Err(Error::InvalidArgument(_)) => {
                log::debug!("landmark control points degenerate; using the grid");
            }
            Err(e) => return Err(e),
        }
    }
    let t = try_solve(domain.grid_points(cfg.grid_size), cfg.grid_perturb_std, rng)?;
    Ok((t, ControlMode::Grid))
}

/// Samples a random TPS, choosing landmark control points with probability
/// `cfg.landmark_mode_prob` when landmarks are available.
pub fn sample_random_tps<R: Rng + ?Sized>(
    cfg: &TpsSampleConfig,
    landmarks: Option<&[[f64; 2]]>,
    domain: &Domain,
    rng: &mut R,
) -> Result<(TpsTransform, ControlMode)> {
    let mode = match landmarks {
        Some(_) => ControlMode::draw(cfg.landmark_mode_prob, rng),
        None => ControlMode::Grid,
    };
    sample_tps_with_mode(cfg, mode, landmarks, domain, rng)
}

/// Backward warp `I'(u, v) = I(g(u, v))` with bilinear sampling and edge clamping.
pub fn warp_image(img: &Image, t: &TpsTransform) -> Image {
    let (c, h, w) = img.data.dim();
    let e = edge_length((h, w));
    let mut out = ndarray::Array3::<f32>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let g = t.apply_point([(j + 1) as f64 / e, (i + 1) as f64 / e]);
            let (x, y) = (g[0] * e, g[1] * e);
            for ch in 0..c {
                out[[ch, i, j]] = sample_bilinear(img.data.slice(ndarray::s![ch, .., ..]), x, y);
            }
        }
    }
    Image { data: out }
}
