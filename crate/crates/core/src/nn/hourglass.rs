use ndarray::{Array4, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::Conv2d;
use super::norm::{BatchNorm, BnCache, BnStats};
use super::{lrelu_slope, Mode, ParamVisitor};
use crate::error::{shape_err, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub channels: usize,
    /// Number of 3×3 conv blocks on the skip link.
    pub skip_convs: usize,
}

/// Output resolution relative to the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    Same,
    /// Stem block plus max-pool ahead of the hourglass: output is half size.
    Down2,
    /// Upsample plus a block after the hourglass: output is double size.
    Up2,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourglassSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Finest level first.
    pub levels: Vec<LevelSpec>,
    pub resample: Resample,
}

impl HourglassSpec {
    /// Level widths `widths` with `skips` convs per level, full resolution output.
    pub fn new(in_channels: usize, out_channels: usize, widths: &[usize], skips: &[usize]) -> Self {
        assert_eq!(widths.len(), skips.len());
        Self {
            in_channels,
            out_channels,
            levels: widths
                .iter()
                .zip(skips)
                .map(|(&channels, &skip_convs)| LevelSpec { channels, skip_convs })
                .collect(),
            resample: Resample::Same,
        }
    }

    pub fn with_resample(mut self, r: Resample) -> Self {
        self.resample = r;
        self
    }

    pub fn output_size(&self, (h, w): (usize, usize)) -> (usize, usize) {
        match self.resample {
            Resample::Same => (h, w),
            Resample::Down2 => (h / 2, w / 2),
            Resample::Up2 => (h * 2, w * 2),
        }
    }

    /// Checks that `input` survives every pooling step without remainder.
    pub fn check_input(&self, (h, w): (usize, usize)) -> Result<()> {
        let mut div = 1usize << (self.levels.len().saturating_sub(1));
        if self.resample == Resample::Down2 {
            div *= 2;
        }
        if self.levels.is_empty() || h % div != 0 || w % div != 0 {
            return Err(shape_err(format!(
                "hourglass with {} levels cannot take a {h}x{w} input",
                self.levels.len()
            )));
        }
        Ok(())
    }
}

/// 3×3 conv → batch norm → leaky ReLU.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    x: Array4<T>,
    bn: BnCache<T>,
}

impl<T: Real> Block<T> {
    fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(in_ch, out_ch, 3, false, rng), bn: BatchNorm::new(out_ch) }
    }

    fn forward(&self, x: Array4<T>, mode: Mode) -> (Array4<T>, BlockCache<T>) {
        let z = self.conv.forward(x.view());
        let (mut y, bn) = self.bn.forward(z.view(), mode);
        let slope = lrelu_slope::<T>();
        y.mapv_inplace(|v| if v >= T::zero() { v } else { v * slope });
        (y, BlockCache { x, bn })
    }

    fn backward(&mut self, cache: &BlockCache<T>, mut dy: Array4<T>) -> Array4<T> {
        let slope = lrelu_slope::<T>();
        {
            let c = self.bn.channels();
            let (_, _, h, w) = dy.dim();
            let hw = h * w;
            let ds = dy.as_slice_mut().expect("standard layout");
            let xh = cache.bn.xhat.as_slice().expect("standard layout");
            for (k, d) in ds.iter_mut().enumerate() {
                let ci = (k / hw) % c;
                let pre = self.bn.gamma.value[ci] * xh[k] + self.bn.beta.value[ci];
                if pre < T::zero() {
                    *d *= slope;
                }
            }
        }
        let dz = self.bn.backward(&cache.bn, dy.view());
        self.conv.backward(cache.x.view(), dz.view())
    }

    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        self.conv.visit_params(&format!("{prefix}.conv"), v);
        self.bn.visit_params(&format!("{prefix}.bn"), v);
    }
}

#[derive(Clone, Debug)]
struct PoolCache {
    argmax: Vec<u8>,
    in_dim: (usize, usize, usize, usize),
}

fn maxpool2<T: Real>(x: &Array4<T>) -> (Array4<T>, PoolCache) {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<T>::zeros((b, c, oh, ow));
    let mut argmax = vec![0u8; b * c * oh * ow];
    let os = out.as_slice_mut().expect("fresh");
    for p in 0..b * c {
        let src = &xs[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let base = 2 * i * w + 2 * j;
                let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0u8;
                for k in 1..4u8 {
                    if cand[k as usize] > cand[best as usize] {
                        best = k;
                    }
                }
                let o = p * oh * ow + i * ow + j;
                os[o] = cand[best as usize];
                argmax[o] = best;
            }
        }
    }
    (out, PoolCache { argmax, in_dim: (b, c, h, w) })
}

fn maxpool2_backward<T: Real>(cache: &PoolCache, dy: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = cache.in_dim;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    let ds = dy.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().expect("fresh");
    for p in 0..b * c {
        for i in 0..oh {
            for j in 0..ow {
                let o = p * oh * ow + i * ow + j;
                let k = cache.argmax[o] as usize;
                let (di, dj) = (k / 2, k % 2);
                dxs[p * h * w + (2 * i + di) * w + 2 * j + dj] += ds[o];
            }
        }
    }
    dx
}

fn upsample2<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<T>::zeros((b, c, 2 * h, 2 * w));
    let os = out.as_slice_mut().expect("fresh");
    let ow = 2 * w;
    for p in 0..b * c {
        for i in 0..2 * h {
            let src = &xs[p * h * w + (i / 2) * w..p * h * w + (i / 2 + 1) * w];
            let dst = &mut os[p * 4 * h * w + i * ow..p * 4 * h * w + (i + 1) * ow];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[j / 2];
            }
        }
    }
    out
}

fn upsample2_backward<T: Real>(dy: &Array4<T>) -> Array4<T> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let ds = dy.as_slice().expect("standard layout");
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    let dxs = dx.as_slice_mut().expect("fresh");
    for p in 0..b * c {
        for i in 0..h2 {
            for j in 0..w2 {
                dxs[p * h * w + (i / 2) * w + j / 2] += ds[p * h2 * w2 + i * w2 + j];
            }
        }
    }
    dx
}

#[derive(Clone, Debug)]
struct Level<T> {
    enc: Block<T>,
    skips: Vec<Block<T>>,
    /// Maps the next-coarser level's channels back to this level's; absent at the bottom.
    dec: Option<Block<T>>,
}

/// Mirrored encoder/decoder with additive conv skip links, max-pool down and
/// nearest-neighbour up, and a final 1×1 conv head with bias.
#[derive(Clone, Debug)]
pub struct Hourglass<T> {
    pub spec: HourglassSpec,
    stem: Option<Block<T>>,
    levels: Vec<Level<T>>,
    post: Option<Block<T>>,
    pub head: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct HourglassCache<T> {
    stem: Option<(BlockCache<T>, PoolCache)>,
    enc: Vec<BlockCache<T>>,
    skips: Vec<Vec<BlockCache<T>>>,
    pools: Vec<PoolCache>,
    dec: Vec<Option<BlockCache<T>>>,
    post: Option<BlockCache<T>>,
    head_in: Array4<T>,
}

impl<T: Real> HourglassCache<T> {
    /// Batch statistics of every BN layer in canonical order (train mode only).
    pub fn bn_stats(&self) -> Vec<BnStats<T>> {
        let mut out = Vec::new();
        let mut push = |c: &BlockCache<T>| {
            if let Some(s) = &c.bn.batch {
                out.push(s.clone());
            }
        };
        if let Some((c, _)) = &self.stem {
            push(c);
        }
        for l in 0..self.enc.len() {
            push(&self.enc[l]);
            for s in &self.skips[l] {
                push(s);
            }
            if let Some(d) = &self.dec[l] {
                push(d);
            }
        }
        if let Some(c) = &self.post {
            push(c);
        }
        out
    }
}

impl<T: Real> Hourglass<T> {
    pub fn new<R: Rng + ?Sized>(spec: HourglassSpec, rng: &mut R) -> Self {
        assert!(!spec.levels.is_empty(), "hourglass needs at least one level");
        let first = spec.levels[0].channels;
        let (stem, mut prev) = match spec.resample {
            Resample::Down2 => (Some(Block::new(spec.in_channels, first, rng)), first),
            _ => (None, spec.in_channels),
        };
        let n = spec.levels.len();
        let mut levels = Vec::with_capacity(n);
        for (l, ls) in spec.levels.iter().enumerate() {
            let enc = Block::new(prev, ls.channels, rng);
            let skips = (0..ls.skip_convs).map(|_| Block::new(ls.channels, ls.channels, rng)).collect();
            let dec = (l + 1 < n).then(|| Block::new(spec.levels[l + 1].channels, ls.channels, rng));
            levels.push(Level { enc, skips, dec });
            prev = ls.channels;
        }
        let post = (spec.resample == Resample::Up2).then(|| Block::new(first, first, rng));
        let head = Conv2d::new(first, spec.out_channels, 1, true, rng);
        Self { spec, stem, levels, post, head }
    }

    pub fn forward(&self, x: ArrayView4<T>, mode: Mode) -> Result<(Array4<T>, HourglassCache<T>)> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.in_channels {
            return Err(shape_err(format!("hourglass expects {} channels, got {c}", self.spec.in_channels)));
        }
        self.spec.check_input((h, w))?;
        let mut cur = x.as_standard_layout().into_owned();
        let stem = match &self.stem {
            Some(b) => {
                let (y, bc) = b.forward(cur, mode);
                let (p, pc) = maxpool2(&y);
                cur = p;
                Some((bc, pc))
            }
            None => None,
        };
        let n = self.levels.len();
        let mut enc = Vec::with_capacity(n);
        let mut skips = Vec::with_capacity(n);
        let mut pools = Vec::with_capacity(n);
        let mut skip_out = Vec::with_capacity(n);
        for (l, level) in self.levels.iter().enumerate() {
            let (e, ec) = level.enc.forward(cur, mode);
            enc.push(ec);
            let mut s = e.clone();
            let mut sc = Vec::with_capacity(level.skips.len());
            for blk in &level.skips {
                let (y, c) = blk.forward(s, mode);
                s = y;
                sc.push(c);
            }
            skips.push(sc);
            skip_out.push(s);
            if l + 1 < n {
                let (p, pc) = maxpool2(&e);
                pools.push(pc);
                cur = p;
            } else {
                cur = Array4::zeros((0, 0, 0, 0));
            }
        }
        let mut dec: Vec<Option<BlockCache<T>>> = (0..n).map(|_| None).collect();
        let mut y = skip_out.pop().expect("at least one level");
        for l in (0..n - 1).rev() {
            let up = upsample2(&y);
            let (d, dc) = self.levels[l].dec.as_ref().expect("decoder block").forward(up, mode);
            dec[l] = Some(dc);
            y = d + &skip_out.pop().expect("skip output");
        }
        let post = match &self.post {
            Some(b) => {
                let (p, pc) = b.forward(upsample2(&y), mode);
                y = p;
                Some(pc)
            }
            None => None,
        };
        let out = self.head.forward(y.view());
        Ok((out, HourglassCache { stem, enc, skips, pools, dec, post, head_in: y }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &HourglassCache<T>, d_out: ArrayView4<T>) -> Array4<T> {
        let n = self.levels.len();
        let mut g = self.head.backward(cache.head_in.view(), d_out);
        if let (Some(b), Some(c)) = (&mut self.post, &cache.post) {
            g = upsample2_backward(&b.backward(c, g));
        }
        let mut d_skip: Vec<Option<Array4<T>>> = (0..n).map(|_| None).collect();
        for l in 0..n - 1 {
            d_skip[l] = Some(g.clone());
            let dc = cache.dec[l].as_ref().expect("decoder cache");
            let dd = self.levels[l].dec.as_mut().expect("decoder block").backward(dc, g);
            g = upsample2_backward(&dd);
        }
        d_skip[n - 1] = Some(g);
        let mut d_below: Option<Array4<T>> = None;
        for l in (0..n).rev() {
            let mut ds = d_skip[l].take().expect("skip grad");
            for (blk, c) in self.levels[l].skips.iter_mut().zip(&cache.skips[l]).rev() {
                ds = blk.backward(c, ds);
            }
            if let Some(db) = d_below.take() {
                ds += &maxpool2_backward(&cache.pools[l], &db);
            }
            d_below = Some(self.levels[l].enc.backward(&cache.enc[l], ds));
        }
        let mut dx = d_below.expect("input grad");
        if let (Some(b), Some((bc, pc))) = (&mut self.stem, &cache.stem) {
            dx = b.backward(bc, maxpool2_backward(pc, &dx));
        }
        dx
    }

    /// BN layers in the same canonical order as [`HourglassCache::bn_stats`].
    pub fn bns_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = Vec::new();
        if let Some(b) = &mut self.stem {
            out.push(&mut b.bn);
        }
        for level in &mut self.levels {
            out.push(&mut level.enc.bn);
            for s in &mut level.skips {
                out.push(&mut s.bn);
            }
            if let Some(d) = &mut level.dec {
                out.push(&mut d.bn);
            }
        }
        if let Some(b) = &mut self.post {
            out.push(&mut b.bn);
        }
        out
    }

    pub fn commit_running(&mut self, cache: &HourglassCache<T>) {
        for (bn, s) in self.bns_mut().into_iter().zip(cache.bn_stats()) {
            bn.commit_running(&s);
        }
    }

    pub fn set_finalized(&mut self, stats: Vec<BnStats<T>>) {
        let bns = self.bns_mut();
        assert_eq!(bns.len(), stats.len(), "BN layer count");
        for (bn, s) in bns.into_iter().zip(stats) {
            bn.finalized = Some(s);
        }
    }

    pub fn clear_finalized(&mut self) {
        for bn in self.bns_mut() {
            bn.finalized = None;
        }
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        if let Some(b) = &mut self.stem {
            b.visit_params(&format!("{prefix}.stem"), v);
        }
        for (l, level) in self.levels.iter_mut().enumerate() {
            level.enc.visit_params(&format!("{prefix}.level{l}.enc"), v);
            for (i, s) in level.skips.iter_mut().enumerate() {
                s.visit_params(&format!("{prefix}.level{l}.skip{i}"), v);
            }
            if let Some(d) = &mut level.dec {
                d.visit_params(&format!("{prefix}.level{l}.dec"), v);
            }
        }
        if let Some(b) = &mut self.post {
            b.visit_params(&format!("{prefix}.post"), v);
        }
        self.head.visit_params(&format!("{prefix}.head"), v);
    }

    /// Visits BN buffers as `(name, running, finalized)`.
    pub fn visit_bn_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNorm<T>)) {
        for (i, bn) in self.bns_mut().into_iter().enumerate() {
            f(&format!("{prefix}.bn{i}"), bn);
        }
    }
}
