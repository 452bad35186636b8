//! Linear regression from discovered to annotated landmarks, NME, flip-aware
//! fitting, learning curves and loss ablations.

use std::fmt;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Annotations, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::geometry::edge_length;
use crate::losses::map_to_image_offset;
use crate::model::{stack_images, Model};
use crate::nn::Mode;
use crate::training::{landmark_spread_px, TrainConfig, Trainer};

/// Singular values below `SVD_EPS * σ_max` count as zero.
const SVD_EPS: f64 = 1e-10;
pub const FLIP_MAX_ITERS: usize = 20;

fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// `pred = discovered · weights`, no bias. Rows are images; columns are
/// `x1, y1, x2, y2, ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    /// `(2K, 2L)`
    pub weights: Array2<f64>,
}

impl RegressionModel {
    pub fn predict(&self, discovered: ArrayView2<f64>) -> Array2<f64> {
        discovered.dot(&self.weights)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Fit {
    pub model: RegressionModel,
    /// RMS of the training residual over all coordinates.
    pub residual_rms: f64,
    pub rank: usize,
    /// Fewer samples than regressor columns.
    pub underdetermined: bool,
}

/// Minimum-norm least squares via SVD.
pub fn fit_regressor(discovered: ArrayView2<f64>, annotated: ArrayView2<f64>) -> Result<Fit> {
    let (n, p) = discovered.dim();
    if annotated.nrows() != n || n == 0 {
        return Err(shape_err(format!("regression: {n} discovered rows vs {} annotated", annotated.nrows())));
    }
    if discovered.iter().chain(annotated.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression inputs"));
    }
    let underdetermined = n < p;
    if underdetermined {
        log::warn!("regression is underdetermined: {n} samples for {p} columns");
    }
    let x = to_na(discovered);
    let y = to_na(annotated);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = SVD_EPS * smax.max(f64::MIN_POSITIVE);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < p {
        log::warn!("rank-deficient design ({rank} < {p}); using the minimum-norm solution");
    }
    let w = svd.solve(&y, tol).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let r = &x * &w - &y;
    let residual_rms = (r.norm_squared() / r.len().max(1) as f64).sqrt();
    Ok(Fit { model: RegressionModel { weights: from_na(&w) }, residual_rms, rank, underdetermined })
}

/// Per-image error normalizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// Distance between two annotated landmarks (eye centers, wheel centers).
    Pair(usize, usize),
    /// A fixed length in the coordinate units, e.g. the image edge.
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmeReport {
    /// Mean error in percent of the normalizer.
    pub percent: f64,
    pub images: usize,
    /// Images dropped for a zero normalizer.
    pub skipped: usize,
}

fn point(a: ArrayView2<f64>, i: usize, l: usize) -> [f64; 2] {
    [a[[i, 2 * l]], a[[i, 2 * l + 1]]]
}

fn dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Mean over images and landmarks of `‖pred − gt‖ / normalizer × 100`.
pub fn nme(pred: ArrayView2<f64>, gt: ArrayView2<f64>, normalizer: Normalizer) -> Result<NmeReport> {
    if pred.dim() != gt.dim() || pred.ncols() % 2 != 0 {
        return Err(shape_err(format!("nme: pred {:?} vs gt {:?}", pred.dim(), gt.dim())));
    }
    let l = gt.ncols() / 2;
    if let Normalizer::Pair(a, b) = normalizer {
        if a >= l || b >= l {
            return Err(Error::InvalidArgument(format!("normalizer pair ({a}, {b}) with {l} landmarks")));
        }
    }
    let mut total = 0.0;
    let mut images = 0;
    let mut skipped = 0;
    for i in 0..gt.nrows() {
        let d = match normalizer {
            Normalizer::Pair(a, b) => dist(point(gt, i, a), point(gt, i, b)),
            Normalizer::Constant(c) => c,
        };
        if !(d > 0.0) {
            skipped += 1;
            continue;
        }
        let e: f64 = (0..l).map(|k| dist(point(pred, i, k), point(gt, i, k))).sum::<f64>() / l as f64;
        total += e / d;
        images += 1;
    }
    if skipped > 0 {
        log::warn!("nme: {skipped} images skipped for a zero normalizer");
    }
    let percent = if images > 0 { 100.0 * total / images as f64 } else { f64::NAN };
    Ok(NmeReport { percent, images, skipped })
}

/// Swaps the coordinates of every left/right pair in one annotation row.
pub fn flip_row(row: &mut [f64], pairs: &[[usize; 2]]) {
    for &[a, b] in pairs {
        row.swap(2 * a, 2 * b);
        row.swap(2 * a + 1, 2 * b + 1);
    }
}

/// Frontal when more than 2/3 of the left-side landmarks lie to the right
/// of their right-side counterparts.
pub fn is_frontal(row: &[f64], pairs: &[[usize; 2]]) -> bool {
    if pairs.is_empty() {
        return true;
    }
    let hits = pairs.iter().filter(|&&[l, r]| row[2 * l] > row[2 * r]).count();
    3 * hits > 2 * pairs.len()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlipFit {
    pub fit: Fit,
    /// `true` where the annotation was used left/right flipped.
    pub flipped: Vec<bool>,
    pub frontal: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
    /// Flag changes per refinement round.
    pub changes: Vec<usize>,
}

fn row_error(pred: &[f64], gt: &[f64]) -> f64 {
    pred.chunks(2).zip(gt.chunks(2)).map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1])).sum()
}

fn with_flips(annotated: ArrayView2<f64>, flags: &[bool], pairs: &[[usize; 2]]) -> Array2<f64> {
    let mut out = annotated.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        if flags[i] {
            flip_row(row.as_slice_mut().expect("contiguous row"), pairs);
        }
    }
    out
}

/// Regression that tolerates front/back confusions: fit on frontal views,
/// then alternate between picking each image's better orientation and
/// refitting on all images until the choices stop changing.
pub fn flip_aware_fit(discovered: ArrayView2<f64>, annotated: ArrayView2<f64>, pairs: &[[usize; 2]]) -> Result<FlipFit> {
    let n = annotated.nrows();
    let frontal: Vec<bool> = annotated.outer_iter().map(|r| is_frontal(&r.to_vec(), pairs)).collect();
    let idx: Vec<usize> = (0..n).filter(|&i| frontal[i]).collect();
    if idx.is_empty() {
        return Err(Error::NoFrontalImages);
    }
    let mut fit = fit_regressor(discovered.select(Axis(0), &idx).view(), annotated.select(Axis(0), &idx).view())?;
    let mut flags = vec![false; n];
    let mut changes = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < FLIP_MAX_ITERS {
        iterations += 1;
        let pred = fit.model.predict(discovered);
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let p = pred.row(i).to_vec();
            let g = annotated.row(i).to_vec();
            let mut gf = g.clone();
            flip_row(&mut gf, pairs);
            next.push(row_error(&p, &gf) < row_error(&p, &g));
        }
        let changed = next.iter().zip(&flags).filter(|(a, b)| a != b).count();
        changes.push(changed);
        flags = next;
        fit = fit_regressor(discovered, with_flips(annotated, &flags, pairs).view())?;
        if changed == 0 {
            converged = true;
            break;
        }
    }
    Ok(FlipFit { fit, flipped: flags, frontal, iterations, converged, changes })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurveRow {
    pub count: usize,
    pub nme: f64,
    pub underdetermined: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LearningCurve {
    pub seed: u64,
    pub eval_size: usize,
    pub rows: Vec<CurveRow>,
}

/// NME on a fixed held-out split as the number of labeled training samples
/// grows. `eval_size` rows are held out after a seeded shuffle.
pub fn learning_curve(
    discovered: ArrayView2<f64>,
    annotated: ArrayView2<f64>,
    counts: &[usize],
    eval_size: usize,
    normalizer: Normalizer,
    seed: u64,
) -> Result<LearningCurve> {
    let n = discovered.nrows();
    if eval_size >= n {
        return Err(Error::InvalidArgument(format!("eval split {eval_size} leaves no training rows of {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (eval, train) = order.split_at(eval_size);
    let (de, ae) = (discovered.select(Axis(0), eval), annotated.select(Axis(0), eval));
    let mut rows = Vec::new();
    for &c in counts {
        if c == 0 || c > train.len() {
            return Err(Error::InvalidArgument(format!("count {c} outside 1..={}", train.len())));
        }
        let sub = &train[..c];
        let fit = fit_regressor(discovered.select(Axis(0), sub).view(), annotated.select(Axis(0), sub).view())?;
        let r = nme(fit.model.predict(de.view()).view(), ae.view(), normalizer)?;
        rows.push(CurveRow { count: c, nme: r.percent, underdetermined: fit.underdetermined });
    }
    Ok(LearningCurve { seed, eval_size, rows })
}

/// Discovered landmarks of every listed image, in normalized image
/// coordinates, as rows `x1, y1, ..., xK, yK`.
pub fn discover(model: &Model<f32>, dataset: &Dataset, indices: &[usize]) -> Result<Array2<f64>> {
    let k = model.landmarks();
    let (h, w) = model.config.image_hw();
    let offset = map_to_image_offset(model.map_size(), (h, w));
    let mut out = Array2::<f64>::zeros((indices.len(), 2 * k));
    let mut row = 0;
    for chunk in indices.chunks(16) {
        let imgs = chunk.iter().map(|&i| dataset.get(i)).collect::<Result<Vec<_>>>()?;
        let x = stack_images::<f32>(&imgs)?;
        let (enc, _) = model.encode(x.view(), Mode::Eval)?;
        for bi in 0..imgs.len() {
            for ki in 0..k {
                out[[row, 2 * ki]] = enc.landmarks[[bi, ki, 0]] as f64 + offset[0];
                out[[row, 2 * ki + 1]] = enc.landmarks[[bi, ki, 1]] as f64 + offset[1];
            }
            row += 1;
        }
    }
    Ok(out)
}

/// Annotated points of `names`, mapped into the preprocessed frame and
/// normalized by the image edge.
pub fn annotated_rows(dataset: &Dataset, ann: &Annotations, indices: &[usize]) -> Result<Array2<f64>> {
    let l = ann.landmarks.len();
    let e = edge_length((dataset.spec.padded_size[0], dataset.spec.padded_size[1]));
    let mut out = Array2::<f64>::zeros((indices.len(), 2 * l));
    for (r, &i) in indices.iter().enumerate() {
        let name = &dataset.names[i];
        let pts = ann.points.get(name).ok_or_else(|| Error::Dataset(format!("{name} has no annotation")))?;
        let raw = match ann.raw_sizes.get(name) {
            Some(&[h, w]) => (h, w),
            None => dataset.raw_size(i)?,
        };
        for (k, p) in pts.iter().enumerate() {
            let q = dataset.spec.map_point(raw, *p);
            out[[r, 2 * k]] = q[0] / e;
            out[[r, 2 * k + 1]] = q[1] / e;
        }
    }
    Ok(out)
}

/// Result of evaluating a checkpoint against annotations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_images: usize,
    pub test_images: usize,
    pub landmarks: usize,
    pub annotated_landmarks: usize,
    pub train_residual_rms: f64,
    pub train_nme: NmeReport,
    pub test_nme: NmeReport,
    pub flip_aware: bool,
    /// Per-test-image NME in percent, `(name, value)`.
    pub per_image: Vec<(String, f64)>,
}

/// Fits the regressor on the training split and reports NME on the test
/// split. Annotated entries listed in `ann.test` form the test split; if
/// none are listed the last `test_fraction` of a seeded shuffle is used.
pub fn evaluate(
    model: &Model<f32>,
    dataset: &Dataset,
    ann: &Annotations,
    normalizer: Normalizer,
    test_fraction: f64,
    flip_aware: bool,
    seed: u64,
) -> Result<EvalReport> {
    let annotated: Vec<usize> = (0..dataset.len()).filter(|&i| ann.points.contains_key(&dataset.names[i])).collect();
    if annotated.len() < 2 {
        return Err(Error::Dataset("fewer than two annotated images in the dataset".into()));
    }
    let (mut train, mut test): (Vec<usize>, Vec<usize>) =
        annotated.iter().partition(|&&i| !ann.test.contains(&dataset.names[i]));
    if test.is_empty() {
        let mut order = annotated.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((order.len() as f64 * test_fraction).round() as usize).clamp(1, order.len() - 1);
        test = order.split_off(order.len() - n_test);
        train = order;
    }
    let (dtr, atr) = (discover(model, dataset, &train)?, annotated_rows(dataset, ann, &train)?);
    let (dte, ate) = (discover(model, dataset, &test)?, annotated_rows(dataset, ann, &test)?);
    let fit = if flip_aware {
        let ff = flip_aware_fit(dtr.view(), atr.view(), &ann.left_right_pairs)?;
        log::info!("flip-aware fit: {} rounds, {} flipped", ff.iterations, ff.flipped.iter().filter(|f| **f).count());
        ff.fit
    } else {
        fit_regressor(dtr.view(), atr.view())?
    };
    let score = |d: &Array2<f64>, a: &Array2<f64>| -> Result<(Array2<f64>, Array2<f64>)> {
        let pred = fit.model.predict(d.view());
        if !flip_aware {
            return Ok((pred, a.clone()));
        }
        // compare against whichever orientation of the annotation is closer
        let mut gt = a.clone();
        for (i, mut row) in gt.axis_iter_mut(Axis(0)).enumerate() {
            let p = pred.row(i).to_vec();
            let mut f = row.to_vec();
            flip_row(&mut f, &ann.left_right_pairs);
            if row_error(&p, &f) < row_error(&p, &row.to_vec()) {
                row.assign(&ndarray::Array1::from(f));
            }
        }
        Ok((pred, gt))
    };
    let (ptr, gtr) = score(&dtr, &atr)?;
    let (pte, gte) = score(&dte, &ate)?;
    let train_nme = nme(ptr.view(), gtr.view(), normalizer)?;
    let test_nme = nme(pte.view(), gte.view(), normalizer)?;
    let per_image = test
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let one = nme(pte.slice(ndarray::s![r..r + 1, ..]), gte.slice(ndarray::s![r..r + 1, ..]), normalizer);
            (dataset.names[i].clone(), one.map(|x| x.percent).unwrap_or(f64::NAN))
        })
        .collect();
    Ok(EvalReport {
        train_images: train.len(),
        test_images: test.len(),
        landmarks: model.landmarks(),
        annotated_landmarks: ann.landmarks.len(),
        train_residual_rms: fit.residual_rms,
        train_nme,
        test_nme,
        flip_aware,
        per_image,
    })
}

/// A loss term that an ablation can switch off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Recon,
    Conc,
    Sep,
    Eqv,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Recon, Term::Conc, Term::Sep, Term::Eqv];

    fn label(self) -> &'static str {
        match self {
            Term::Recon => "L_recon",
            Term::Conc => "L_conc",
            Term::Sep => "L_sep",
            Term::Eqv => "L_eqv",
        }
    }
}

/// Copy of `cfg` with the listed terms' weights set to zero.
pub fn ablate(cfg: &TrainConfig, disable: &[Term]) -> TrainConfig {
    let mut c = cfg.clone();
    for t in disable {
        match t {
            Term::Recon => c.weights.lambda_recon = 0.0,
            Term::Conc => c.weights.lambda_conc = 0.0,
            Term::Sep => c.weights.lambda_sep = 0.0,
            Term::Eqv => c.weights.lambda_eqv = 0.0,
        }
    }
    c
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub disabled: Vec<Term>,
    /// Test NME when annotations were supplied.
    pub nme: Option<f64>,
    /// Landmark spread in map pixels on the probe images.
    pub spread_px: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:<8} {:<8} {:<8} | {:>8} | {:>10}", "L_recon", "L_conc", "L_sep", "L_eqv", "NME", "spread px")?;
        for r in &self.rows {
            for t in Term::ALL {
                let mark = if r.disabled.contains(&t) { "" } else { "x" };
                write!(f, "{:<8} ", mark)?;
            }
            let nme = r.nme.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
            writeln!(f, "| {nme:>8} | {:>10.2}", r.spread_px)?;
        }
        let names: Vec<&str> = Term::ALL.iter().map(|t| t.label()).collect();
        write!(f, "(x = term enabled; columns {})", names.join(", "))
    }
}

/// Trains one model per variant for `iterations` steps and tabulates NME
/// (when `annotations` are given) and landmark spread.
pub fn ablation_run(
    base: &TrainConfig,
    variants: &[Vec<Term>],
    iterations: u64,
    dataset: &Dataset,
    annotations: Option<(&Annotations, Normalizer)>,
) -> Result<AblationTable> {
    let probe: Vec<_> = dataset.load_batch(&(0..dataset.len().min(64)).collect::<Vec<_>>()).into_iter().map(|p| p.1).collect();
    let mut rows = Vec::new();
    for disabled in variants {
        let cfg = ablate(base, disabled);
        let mut t = Trainer::new(cfg.clone())?;
        t.run(dataset, iterations, None)?;
        crate::training::finalize_batchnorm(&mut t.model, dataset, cfg.finalize_batches, cfg.batch_size, cfg.seed)?;
        let nme = match annotations {
            Some((ann, norm)) => Some(evaluate(&t.model, dataset, ann, norm, 0.2, false, cfg.seed)?.test_nme.percent),
            None => None,
        };
        let spread_px = landmark_spread_px(&t.model, &probe)?;
        log::info!("ablation {disabled:?}: spread {spread_px:.2} px");
        rows.push(AblationRow { disabled: disabled.clone(), nme, spread_px });
    }
    Ok(AblationTable { rows })
}
