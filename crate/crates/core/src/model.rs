//! Detector, feature and decoder hourglasses wired into the encode and decode passes.

use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{
    channel_softmax, channel_softmax_backward, edge_length, masked_pool, masked_pool_backward,
    normalize_decoder_maps, normalize_decoder_maps_backward, render_gaussian_maps,
    render_gaussian_maps_backward, soft_argmax, soft_argmax_backward, spatial_variance,
    spatial_variance_backward, unpool, unpool_backward, ConfidenceMap, Frame, MapKind, RenderMode, Width,
};
use crate::nn::{
    lrelu_slope, BatchNorm, BnStats, Hourglass, HourglassCache, HourglassSpec, Mode, Param, ParamVisitor, Resample,
};
use crate::raster::Image;
use crate::real::Real;

/// Smallest detection-mask width, in map pixels. Keeps the pooling mask
/// resolvable on the grid when a channel collapses onto a single pixel.
pub const MIN_MASK_STD_PX: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Channel width per level, finest first.
    pub widths: Vec<usize>,
    /// 3×3 conv blocks on each level's skip link.
    pub skip_convs: Vec<usize>,
    pub resample: Resample,
}

impl NetConfig {
    pub fn new(widths: &[usize], skip_convs: &[usize], resample: Resample) -> Self {
        Self { widths: widths.to_vec(), skip_convs: skip_convs.to_vec(), resample }
    }

    fn spec(&self, in_channels: usize, out_channels: usize) -> HourglassSpec {
        HourglassSpec::new(in_channels, out_channels, &self.widths, &self.skip_convs).with_resample(self.resample)
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::new(&[32, 64, 128, 256], &[3, 3, 2, 2], Resample::Same)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Padded input size `[height, width]`.
    pub image_size: [usize; 2],
    pub image_channels: usize,
    /// Number of landmarks `K`.
    pub landmarks: usize,
    /// Descriptor length `C`.
    pub descriptor_dim: usize,
    /// Shared feature channels `S`.
    pub feature_dim: usize,
    pub use_descriptors: bool,
    /// Decoder Gaussian widths in normalized units.
    pub decoder_sigmas: Vec<f64>,
    pub detector: NetConfig,
    pub feature_net: NetConfig,
    pub decoder: NetConfig,
    /// Multiplier on the detector head's initial weights. Small values start
    /// every landmark near the map center.
    pub detector_head_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: [96, 96],
            image_channels: 3,
            landmarks: 10,
            descriptor_dim: 8,
            feature_dim: 32,
            use_descriptors: true,
            decoder_sigmas: vec![0.10, 0.02],
            detector: NetConfig::default(),
            feature_net: NetConfig::default(),
            decoder: NetConfig::default(),
            detector_head_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn image_hw(&self) -> (usize, usize) {
        (self.image_size[0], self.image_size[1])
    }

    /// Size of the detection and feature maps.
    pub fn map_size(&self) -> (usize, usize) {
        self.detector.spec(self.image_channels, self.landmarks + 1).output_size(self.image_hw())
    }

    fn decoder_in_channels(&self) -> usize {
        let per = self.landmarks + 1 + if self.use_descriptors { self.feature_dim } else { 0 };
        per * self.decoder_sigmas.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.landmarks == 0 {
            return bad("need at least one landmark".into());
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return bad(format!("image_channels must be 1 or 3, got {}", self.image_channels));
        }
        if self.decoder_sigmas.is_empty() || self.decoder_sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return bad("decoder_sigmas must be a non-empty list of positive widths".into());
        }
        if !(self.detector_head_scale >= 0.0 && self.detector_head_scale.is_finite()) {
            return bad(format!("detector_head_scale must be finite and non-negative, got {}", self.detector_head_scale));
        }
        if self.use_descriptors && (self.descriptor_dim == 0 || self.feature_dim == 0) {
            return bad("descriptor_dim and feature_dim must be positive".into());
        }
        for (name, n) in [("detector", &self.detector), ("feature_net", &self.feature_net), ("decoder", &self.decoder)] {
            if n.widths.is_empty() || n.widths.len() != n.skip_convs.len() || n.widths.contains(&0) {
                return bad(format!("{name}: widths and skip_convs must be non-empty and the same length"));
            }
        }
        let det = self.detector.spec(self.image_channels, self.landmarks + 1);
        det.check_input(self.image_hw())?;
        let map = self.map_size();
        if self.use_descriptors {
            if self.feature_net.resample != self.detector.resample {
                return bad("feature_net must produce maps the size of the detector's".into());
            }
            self.feature_net.spec(self.image_channels, self.feature_dim).check_input(self.image_hw())?;
        }
        let dec = self.decoder.spec(self.decoder_in_channels(), 2 * self.image_channels);
        dec.check_input(map)?;
        if dec.output_size(map) != self.image_hw() {
            return bad(format!(
                "decoder maps {map:?} to {:?}, expected the image size {:?}",
                dec.output_size(map),
                self.image_hw()
            ));
        }
        Ok(())
    }
}

/// Output of the encode pass. Landmarks and variances are in normalized units
/// (divided by the map edge length).
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    /// `(batch, K, 2)`
    pub landmarks: Array3<T>,
    /// `(batch, K, 2)` per-axis variance of each detection channel.
    pub var: Array3<T>,
    /// `(batch, K)`
    pub zeta: Array2<T>,
    /// Softmax-normalized detection maps `(batch, K+1, h, w)`.
    pub probs: Array4<T>,
    /// `(batch, K+1, C)`, absent for descriptorless models.
    pub descriptors: Option<Array3<T>>,
}

#[derive(Clone, Debug)]
struct FeatureCache<T> {
    hg: HourglassCache<T>,
    features: Array4<T>,
    masks: Array4<T>,
    /// Clamped detection-mask variance `(batch, K)`.
    mask_var: Array2<T>,
    floored: Array2<bool>,
    bg_zeta: Vec<T>,
    pooled: Array3<T>,
}

#[derive(Clone, Debug)]
pub struct EncodeCache<T> {
    det: HourglassCache<T>,
    probs: Array4<T>,
    coords_px: Array3<T>,
    zeta: Array2<T>,
    var_px: Array3<T>,
    landmarks: Array3<T>,
    feat: Option<FeatureCache<T>>,
}

/// Upstream gradients for [`Model::encode_backward`].
#[derive(Clone, Debug)]
pub struct EncodeGrads<T> {
    pub landmarks: Array3<T>,
    pub var: Option<Array3<T>>,
    pub descriptors: Option<Array3<T>>,
}

#[derive(Clone, Debug)]
pub struct Decoded<T> {
    /// `(batch, channels, H, W)` in `(0, 1)`.
    pub color: Array4<T>,
    /// Per-pixel standard deviation head, `(batch, channels, H, W)`.
    pub std: Array4<T>,
}

#[derive(Clone, Debug)]
struct SigmaCache<T> {
    raw: Array4<T>,
    norm: Array4<T>,
    unpool_pre: Option<Array3<T>>,
}

#[derive(Clone, Debug)]
pub struct DecodeCache<T> {
    landmarks: Array3<T>,
    descriptors: Option<Array3<T>>,
    sigmas: Vec<SigmaCache<T>>,
    hg: HourglassCache<T>,
    color: Array4<T>,
}

/// `z ↦ ln(1 + 2 e^z) / 2`
pub fn std_head<T: Real>(z: T) -> T {
    let half = T::lit(0.5);
    if z > T::zero() {
        half * (z + T::lit(std::f64::consts::LN_2) + (half * (-z).exp()).ln_1p())
    } else {
        half * (T::lit(2.0) * z.exp()).ln_1p()
    }
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// The three hourglasses plus per-landmark projections.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub detector: Hourglass<T>,
    pub features: Option<Hourglass<T>>,
    pub decoder: Hourglass<T>,
    /// `W_k`, shape `(K+1, C, S)`.
    pub proj: Option<Param<T>>,
    /// `W̃_k`, shape `(K+1, S, C)`.
    pub back_proj: Option<Param<T>>,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k1 = config.landmarks + 1;
        let mut detector = Hourglass::new(config.detector.spec(config.image_channels, k1), rng);
        let scale = T::lit(config.detector_head_scale);
        detector.head.weight.value.mapv_inplace(|w| w * scale);
        let (features, proj, back_proj) = if config.use_descriptors {
            let (c, s) = (config.descriptor_dim, config.feature_dim);
            (
                Some(Hourglass::new(config.feature_net.spec(config.image_channels, s), rng)),
                Some(Param::he_normal(&[k1, c, s], s, rng)),
                Some(Param::he_normal(&[k1, s, c], c, rng)),
            )
        } else {
            (None, None, None)
        };
        let decoder = Hourglass::new(config.decoder.spec(config.decoder_in_channels(), 2 * config.image_channels), rng);
        Ok(Self { config, detector, features, decoder, proj, back_proj })
    }

    pub fn map_size(&self) -> (usize, usize) {
        self.config.map_size()
    }

    pub fn landmarks(&self) -> usize {
        self.config.landmarks
    }

    pub fn encode(&self, images: ArrayView4<T>, mode: Mode) -> Result<(Encoded<T>, EncodeCache<T>)> {
        let k = self.config.landmarks;
        let (b, c, h, w) = images.dim();
        if c != self.config.image_channels || (h, w) != self.config.image_hw() {
            return Err(shape_err(format!(
                "encode expects ({}, {:?}) images, got ({c}, {:?})",
                self.config.image_channels,
                self.config.image_hw(),
                (h, w)
            )));
        }
        let grid = self.map_size();
        let edge = T::lit(edge_length(grid));
        let (raw, det) = self.detector.forward(images, mode)?;
        let probs = channel_softmax(&ConfidenceMap::new(raw, MapKind::RawScores))?.data;
        let fg = probs.slice(s![.., ..k, .., ..]);
        let (coords_px, zeta) = soft_argmax(fg)?;
        let var_px = spatial_variance(fg, coords_px.view(), zeta.view())?;
        let landmarks = coords_px.mapv(|v| v / edge);
        let var = var_px.mapv(|v| v / (edge * edge));

        let mut descriptors = None;
        let mut feat = None;
        if let (Some(fnet), Some(proj)) = (&self.features, &self.proj) {
            let (features, hg) = fnet.forward(images, mode)?;
            let floor = T::lit((MIN_MASK_STD_PX / edge_length(grid)).powi(2));
            let half = T::lit(0.5);
            let mut mask_var = Array2::<T>::zeros((b, k));
            let mut floored = Array2::from_elem((b, k), false);
            for bi in 0..b {
                for ki in 0..k {
                    let v = half * (var[[bi, ki, 0]] + var[[bi, ki, 1]]);
                    if v < floor {
                        mask_var[[bi, ki]] = floor;
                        floored[[bi, ki]] = true;
                    } else {
                        mask_var[[bi, ki]] = v;
                    }
                }
            }
            let fg_masks = render_gaussian_maps(
                landmarks.view(),
                Width::Variance(mask_var.view()),
                grid,
                RenderMode::ApproxDetection,
                Frame::Normalized,
            )?
            .data;
            let bg = probs.slice(s![.., k..k + 1, .., ..]);
            let bg_zeta: Vec<T> = (0..b).map(|bi| bg.slice(s![bi, 0, .., ..]).sum()).collect();
            let mut bg_mask = bg.to_owned();
            for (bi, z) in bg_zeta.iter().enumerate() {
                bg_mask.slice_mut(s![bi, .., .., ..]).mapv_inplace(|v| v / *z);
            }
            let masks = concatenate(Axis(1), &[fg_masks.view(), bg_mask.view()]).expect("same grid");
            let pv = proj.value.view().into_dimensionality().expect("(K+1, C, S)");
            let pooled = masked_pool(features.view(), masks.view(), pv)?;
            descriptors = Some(pooled.descriptors);
            feat = Some(FeatureCache { hg, features, masks, mask_var, floored, bg_zeta, pooled: pooled.pooled });
        }
        let enc = Encoded { landmarks: landmarks.clone(), var, zeta: zeta.clone(), probs: probs.clone(), descriptors };
        Ok((enc, EncodeCache { det, probs, coords_px, zeta, var_px, landmarks, feat }))
    }

    /// Accumulates parameter gradients of the encoder.
    pub fn encode_backward(&mut self, cache: &EncodeCache<T>, grads: &EncodeGrads<T>) {
        let k = self.config.landmarks;
        let grid = self.map_size();
        let edge = T::lit(edge_length(grid));
        let edge2 = edge * edge;
        let mut d_coords = grads.landmarks.mapv(|v| v / edge);
        let mut d_var_px = match &grads.var {
            Some(v) => v.mapv(|x| x / edge2),
            None => Array3::zeros(cache.var_px.dim()),
        };
        let mut d_probs = Array4::<T>::zeros(cache.probs.dim());

        if let (Some(fc), Some(d_desc)) = (&cache.feat, &grads.descriptors) {
            let proj = self.proj.as_mut().expect("descriptor model");
            let pv = proj.value.view().into_dimensionality().expect("(K+1, C, S)");
            let (d_feat, d_masks, d_proj) =
                masked_pool_backward(fc.features.view(), fc.masks.view(), pv, fc.pooled.view(), d_desc.view());
            proj.grad += &d_proj.into_dyn();
            self.features.as_mut().expect("feature net").backward(&fc.hg, d_feat.view());

            let fg_masks = fc.masks.slice(s![.., ..k, .., ..]);
            let d_fg = d_masks.slice(s![.., ..k, .., ..]);
            let (d_lm, d_mv) = render_gaussian_maps_backward(
                cache.landmarks.view(),
                Width::Variance(fc.mask_var.view()),
                fg_masks,
                d_fg,
                Frame::Normalized,
            );
            d_coords += &d_lm.mapv(|v| v / edge);
            let d_mv = d_mv.expect("variance width");
            let half = T::lit(0.5);
            for ((bi, ki), &g) in d_mv.indexed_iter() {
                if !fc.floored[[bi, ki]] {
                    let gp = half * g / edge2;
                    d_var_px[[bi, ki, 0]] += gp;
                    d_var_px[[bi, ki, 1]] += gp;
                }
            }
            // background mask D_{K+1} / zeta_{K+1}
            for (bi, &z) in fc.bg_zeta.iter().enumerate() {
                let dm = d_masks.slice(s![bi, k, .., ..]);
                let bg = cache.probs.slice(s![bi, k, .., ..]);
                let dot = (&dm * &bg).sum() / (z * z);
                let mut dst = d_probs.slice_mut(s![bi, k, .., ..]);
                ndarray::Zip::from(&mut dst).and(&dm).for_each(|d, &g| *d += g / z - dot);
            }
        }

        let fg = cache.probs.slice(s![.., ..k, .., ..]);
        let (d_fg_var, d_centers) =
            spatial_variance_backward(fg, cache.coords_px.view(), cache.zeta.view(), cache.var_px.view(), d_var_px.view());
        d_coords += &d_centers;
        let d_fg_arg = soft_argmax_backward(fg.dim(), cache.coords_px.view(), cache.zeta.view(), d_coords.view());
        {
            let mut dst = d_probs.slice_mut(s![.., ..k, .., ..]);
            dst += &d_fg_var;
            dst += &d_fg_arg;
        }
        let d_raw = channel_softmax_backward(cache.probs.view(), d_probs.view());
        self.detector.backward(&cache.det, d_raw.view());
    }

    pub fn decode(
        &self,
        landmarks: ArrayView3<T>,
        descriptors: Option<ArrayView3<T>>,
        mode: Mode,
    ) -> Result<(Decoded<T>, DecodeCache<T>)> {
        let k = self.config.landmarks;
        let (b, lk, two) = landmarks.dim();
        if lk != k || two != 2 {
            return Err(shape_err(format!("decode expects (batch, {k}, 2) landmarks, got {:?}", landmarks.dim())));
        }
        let grid = self.map_size();
        let desc = if self.config.use_descriptors {
            let d = descriptors.ok_or_else(|| Error::InvalidArgument("this model needs descriptors".into()))?;
            if d.dim() != (b, k + 1, self.config.descriptor_dim) {
                return Err(shape_err(format!("descriptors {:?} do not match the model", d.dim())));
            }
            Some(d)
        } else {
            None
        };
        let slope = lrelu_slope::<T>();
        let mut parts: Vec<Array4<T>> = Vec::new();
        let mut sigmas = Vec::with_capacity(self.config.decoder_sigmas.len());
        for &sigma in &self.config.decoder_sigmas {
            let raw =
                render_gaussian_maps(landmarks, Width::Std(T::lit(sigma)), grid, RenderMode::Decoder, Frame::Normalized)?;
            let norm = normalize_decoder_maps(&raw)?.data;
            parts.push(norm.clone());
            let mut unpool_pre = None;
            if let (Some(d), Some(bp)) = (desc, &self.back_proj) {
                let bpv = bp.value.view().into_dimensionality().expect("(K+1, S, C)");
                let up = unpool(norm.view(), d, bpv, slope)?;
                parts.push(up.features);
                unpool_pre = Some(up.pre);
            }
            sigmas.push(SigmaCache { raw: raw.data, norm, unpool_pre });
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let input = concatenate(Axis(1), &views).expect("same grid");
        let (out, hg) = self.decoder.forward(input.view(), mode)?;
        let ch = self.config.image_channels;
        let color = out.slice(s![.., ..ch, .., ..]).mapv(sigmoid);
        let std = out.slice(s![.., ch.., .., ..]).mapv(std_head);
        let cache = DecodeCache {
            landmarks: landmarks.to_owned(),
            descriptors: desc.map(|d| d.to_owned()),
            sigmas,
            hg,
            color: color.clone(),
        };
        Ok((Decoded { color, std }, cache))
    }

    /// Accumulates decoder gradients given `d_color`; returns the gradients
    /// with respect to the landmarks and descriptors.
    pub fn decode_backward(&mut self, cache: &DecodeCache<T>, d_color: ArrayView4<T>) -> (Array3<T>, Option<Array3<T>>) {
        let k1 = self.config.landmarks + 1;
        let ch = self.config.image_channels;
        let (b, _, h, w) = d_color.dim();
        let mut d_out = Array4::<T>::zeros((b, 2 * ch, h, w));
        {
            let mut dst = d_out.slice_mut(s![.., ..ch, .., ..]);
            ndarray::Zip::from(&mut dst)
                .and(&d_color)
                .and(&cache.color)
                .for_each(|d, &g, &c| *d = g * c * (T::one() - c));
        }
        let d_in = self.decoder.backward(&cache.hg, d_out.view());
        let s_dim = if self.config.use_descriptors { self.config.feature_dim } else { 0 };
        let per = k1 + s_dim;
        let slope = lrelu_slope::<T>();
        let mut d_lm = Array3::<T>::zeros(cache.landmarks.dim());
        let mut d_desc = cache.descriptors.as_ref().map(|d| Array3::<T>::zeros(d.dim()));
        for (m, (&sigma, sc)) in self.config.decoder_sigmas.iter().zip(&cache.sigmas).enumerate() {
            let off = m * per;
            let mut d_norm = d_in.slice(s![.., off..off + k1, .., ..]).to_owned();
            if let (Some(desc), Some(pre), Some(bp)) = (&cache.descriptors, &sc.unpool_pre, self.back_proj.as_mut()) {
                let d_feat = d_in.slice(s![.., off + k1..off + per, .., ..]);
                let bpv = bp.value.view().into_dimensionality().expect("(K+1, S, C)");
                let (d_maps, dd, d_bp) = unpool_backward(sc.norm.view(), desc.view(), bpv, pre.view(), slope, d_feat);
                bp.grad += &d_bp.into_dyn();
                d_norm += &d_maps;
                if let Some(acc) = d_desc.as_mut() {
                    *acc += &dd;
                }
            }
            let d_raw = normalize_decoder_maps_backward(sc.raw.view(), sc.norm.view(), d_norm.view());
            let (g, _) = render_gaussian_maps_backward(
                cache.landmarks.view(),
                Width::Std(T::lit(sigma)),
                sc.raw.view(),
                d_raw.view(),
                Frame::Normalized,
            );
            d_lm += &g;
        }
        (d_lm, d_desc)
    }

    pub fn visit_params(&mut self, v: &mut dyn ParamVisitor<T>) {
        self.detector.visit_params("detector", v);
        if let Some(f) = &mut self.features {
            f.visit_params("features", v);
        }
        self.decoder.visit_params("decoder", v);
        if let Some(p) = &mut self.proj {
            v.visit("proj", p);
        }
        if let Some(p) = &mut self.back_proj {
            v.visit("back_proj", p);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_: &str, p: &mut Param<T>| p.zero_grad());
    }

    /// Named parameter values, in visiting order.
    pub fn named_params(&mut self) -> Vec<(String, ndarray::ArrayD<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n: &str, p: &mut Param<T>| out.push((n.to_string(), p.value.clone())));
        out
    }

    /// Every BN layer: detector, then feature net, then decoder.
    pub fn bns_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = self.detector.bns_mut();
        if let Some(f) = &mut self.features {
            out.extend(f.bns_mut());
        }
        out.extend(self.decoder.bns_mut());
        out
    }

    /// Batch statistics of a training pass in [`Model::bns_mut`] order.
    /// The decode cache may be omitted when only the encoder ran.
    pub fn batch_stats(enc: &EncodeCache<T>, dec: Option<&DecodeCache<T>>) -> Vec<BnStats<T>> {
        let mut out = enc.det.bn_stats();
        if let Some(f) = &enc.feat {
            out.extend(f.hg.bn_stats());
        }
        if let Some(d) = dec {
            out.extend(d.hg.bn_stats());
        }
        out
    }

    /// Folds a successful training pass into the running BN averages.
    pub fn commit_running(&mut self, enc: &EncodeCache<T>, dec: &DecodeCache<T>) {
        self.detector.commit_running(&enc.det);
        if let (Some(f), Some(fc)) = (&mut self.features, &enc.feat) {
            f.commit_running(&fc.hg);
        }
        self.decoder.commit_running(&dec.hg);
    }

    pub fn is_finalized(&mut self) -> bool {
        self.bns_mut().iter().all(|bn| bn.finalized.is_some())
    }

    pub fn set_finalized(&mut self, stats: Vec<BnStats<T>>) -> Result<()> {
        let bns = self.bns_mut();
        if bns.len() != stats.len() {
            return Err(shape_err(format!("{} BN layers but {} stat entries", bns.len(), stats.len())));
        }
        for (bn, s) in bns.into_iter().zip(stats) {
            if s.mean.len() != bn.channels() {
                return Err(shape_err("BN statistics width mismatch"));
            }
            bn.finalized = Some(s);
        }
        Ok(())
    }

    pub fn clear_finalized(&mut self) {
        for bn in self.bns_mut() {
            bn.finalized = None;
        }
    }
}

/// Per-landmark flag: `true` when the landmark lies outside the map.
pub fn out_of_bounds<T: Real>(landmarks: ArrayView3<T>, grid: (usize, usize)) -> Array2<bool> {
    let e = edge_length(grid);
    let (h, w) = grid;
    let (b, k, _) = landmarks.dim();
    Array2::from_shape_fn((b, k), |(bi, ki)| {
        let x = landmarks[[bi, ki, 0]].as_f64() * e;
        let y = landmarks[[bi, ki, 1]].as_f64() * e;
        !(x >= 1.0 && x <= w as f64 && y >= 1.0 && y <= h as f64)
    })
}

/// Stacks same-sized images into a `(batch, channels, H, W)` tensor.
pub fn stack_images<T: Real>(images: &[Image]) -> Result<Array4<T>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let dim = first.data.dim();
    let views: Vec<_> = images
        .iter()
        .map(|im| {
            if im.data.dim() != dim {
                Err(shape_err(format!("image {:?} in a batch of {:?}", im.data.dim(), dim)))
            } else {
                Ok(im.data.view().insert_axis(Axis(0)))
            }
        })
        .collect::<Result<_>>()?;
    let stacked = concatenate(Axis(0), &views).expect("checked shapes");
    Ok(stacked.mapv(|v| T::lit(v as f64)))
}

/// Splits a `(batch, channels, H, W)` tensor into images, clamping to `[0, 1]`.
pub fn unstack_images<T: Real>(t: ArrayView4<T>) -> Vec<Image> {
    t.outer_iter()
        .map(|im| Image { data: im.mapv(|v| (v.as_f64() as f32).clamp(0.0, 1.0)) })
        .collect()
}

/// Largest elementwise difference between two named parameter snapshots.
pub fn max_abs_diff<T: Real>(a: &[(String, ndarray::ArrayD<T>)], b: &[(String, ndarray::ArrayD<T>)]) -> f64 {
    a.iter()
        .zip(b)
        .map(|((_, x), (_, y))| (x - y).iter().map(|d| d.as_f64().abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(use_descriptors: bool) -> ModelConfig {
        ModelConfig {
            image_size: [8, 8],
            image_channels: 1,
            landmarks: 2,
            descriptor_dim: 2,
            feature_dim: 3,
            use_descriptors,
            decoder_sigmas: vec![0.15, 0.3],
            detector: NetConfig::new(&[3, 4], &[1, 1], Resample::Same),
            feature_net: NetConfig::new(&[3, 4], &[1, 1], Resample::Same),
            decoder: NetConfig::new(&[3, 4], &[1, 1], Resample::Same),
            detector_head_scale: 1.0,
        }
    }

    #[test]
    fn std_head_at_zero() {
        assert_abs_diff_eq!(std_head(0.0f64), 3f64.ln() / 2.0, epsilon = 1e-15);
        for z in [-30.0f64, -2.0, 0.5, 3.0, 40.0] {
            let direct = (1.0 + 2.0 * z.exp()).ln() / 2.0;
            assert_abs_diff_eq!(std_head(z), direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn encode_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for desc in [false, true] {
            let model = Model::<f64>::new(tiny(desc), &mut rng).unwrap();
            let x = Array::from_shape_fn((3, 1, 8, 8), |_| rng.gen::<f64>());
            let (enc, _) = model.encode(x.view(), Mode::Train).unwrap();
            for s in enc.probs.sum_axis(Axis(1)).iter() {
                assert_abs_diff_eq!(*s, 1.0, epsilon = 1e-6);
            }
            let px = enc.landmarks.mapv(|v| v * 8.0);
            assert!(px.iter().all(|&v| (1.0..=8.0).contains(&v)));
            assert_eq!(enc.descriptors.is_some(), desc);
        }
    }

    #[test]
    fn decode_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::<f32>::new(tiny(true), &mut rng).unwrap();
        let x = Array::from_shape_fn((2, 1, 8, 8), |_| rng.gen::<f32>());
        let (enc, _) = model.encode(x.view(), Mode::Eval).unwrap();
        let (dec, _) = model.decode(enc.landmarks.view(), enc.descriptors.as_ref().map(|d| d.view()), Mode::Eval).unwrap();
        assert_eq!(dec.color.dim(), (2, 1, 8, 8));
        assert!(dec.color.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(dec.std.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn descriptorless_ignores_descriptors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::<f64>::new(tiny(false), &mut rng).unwrap();
        let lm = Array::from_shape_fn((1, 2, 2), |_| 0.2 + 0.6 * rng.gen::<f64>());
        let junk = Array::from_shape_fn((1, 3, 2), |_| rng.gen::<f64>());
        let a = model.decode(lm.view(), None, Mode::Eval).unwrap().0.color;
        let b = model.decode(lm.view(), Some(junk.view()), Mode::Eval).unwrap().0.color;
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_mismatched_config() {
        let mut cfg = tiny(false);
        cfg.decoder.resample = Resample::Up2;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(false);
        cfg.image_size = [7, 8];
        assert!(cfg.validate().is_err());
    }
}
