use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{augment, schedule, Jitter, TrainConfig};
use crate::checkpoint;
use crate::data::{BatchSampler, Dataset, SamplerState};
use crate::error::{Error, Result};
use crate::geometry::{edge_length, render_gaussian_maps, render_gaussian_maps_backward, Frame, RenderMode, Width};
use crate::losses::{
    concentration_loss, equivariance_loss, flow_preference_loss, map_to_image_offset, reconstruction_loss,
    separation_loss, total_loss, CoordWarp, FlowField, FlowWarp, LossBreakdown, LossParts, Shifted,
};
use crate::model::{stack_images, EncodeGrads, Model};
use crate::nn::{Adam, Mode, Param, StatsAccumulator};
use crate::raster::{draw_landmarks, Image};
use crate::tps::{sample_tps_with_mode, warp_image, ControlMode, Domain};

/// Step records kept in memory and in checkpoints.
pub const HISTORY_LEN: usize = 1000;

/// Abort a run after this many consecutive non-finite steps.
const MAX_BAD_STEPS: usize = 10;

/// One training batch: plain images, paired with random TPS warps of
/// themselves, or video frame pairs with their flow.
#[derive(Clone, Debug)]
pub enum Batch {
    Images(Vec<Image>),
    /// `(I, I', flow)` where the flow lives on the grid of `I'`.
    Flow(Vec<(Image, Image, FlowField)>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Images(v) => v.len(),
            Batch::Flow(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub lr: f64,
    pub lambda_recon: f64,
    /// Control-point source of the TPS warps; absent for flow batches.
    pub control: Option<ControlMode>,
    pub losses: LossBreakdown,
    pub eqv_clamped: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LoopState {
    iteration: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    sampler: SamplerState,
    history: Vec<StepRecord>,
}

/// Owns the model, optimizer, RNG and data cursor of a run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub iteration: u64,
    pub history: VecDeque<StepRecord>,
    pub sampler: SamplerState,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.model.clone(), &mut rng)?;
        let adam = Adam::new(config.adam.clone());
        Ok(Self { config, model, adam, iteration: 0, history: VecDeque::new(), sampler: SamplerState::default(), rng })
    }

    /// Continues a run from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(config: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        config.validate()?;
        let path = path.as_ref();
        let ck = checkpoint::load(path)?;
        let bad = |why: &str| Error::Checkpoint { path: path.to_path_buf(), reason: why.into() };
        if ck.model.config != config.model {
            return Err(bad("model config differs from the training config"));
        }
        let adam_state = ck.adam.ok_or_else(|| bad("no optimizer state; not a resumable checkpoint"))?;
        let st: LoopState = serde_json::from_value(ck.train.ok_or_else(|| bad("no loop state"))?)?;
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&st.rng_seed, &mut seed).map_err(|e| bad(&e.to_string()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(st.rng_stream);
        rng.set_word_pos(st.rng_word_pos.parse::<u128>().map_err(|e| bad(&e.to_string()))?);
        let mut model = ck.model;
        model.clear_finalized();
        let mut adam = Adam::new(config.adam.clone());
        adam.state = adam_state;
        log::info!("resumed {} at iteration {}", path.display(), st.iteration);
        Ok(Self {
            config,
            model,
            adam,
            iteration: st.iteration,
            history: st.history.into(),
            sampler: st.sampler,
            rng,
        })
    }

    fn loop_state(&self) -> LoopState {
        LoopState {
            iteration: self.iteration,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            sampler: self.sampler,
            history: self.history.iter().cloned().collect(),
        }
    }

    /// Writes a resumable checkpoint. Returns the file hash.
    pub fn save_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<String> {
        let st = serde_json::to_value(self.loop_state())?;
        checkpoint::save(path, &mut self.model, Some(&self.adam.state), Some(&st))
    }

    /// One optimization step. On a non-finite loss the parameters, optimizer,
    /// BN statistics and RNG are left as they were.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let rng_before = self.rng.clone();
        let out = self.step_inner(batch);
        if let Err(e) = &out {
            self.rng = rng_before;
            self.model.zero_grad();
            log::error!("step {} aborted: {e}", self.iteration);
        }
        out
    }

    fn step_inner(&mut self, batch: &Batch) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let sched = schedule(self.iteration, &self.config);
        let mut weights = self.config.weights.clone();
        weights.lambda_recon = sched.lambda_recon;
        let k = self.model.landmarks();
        let (h, w) = self.model.config.image_hw();
        let grid = self.model.map_size();
        let offset = map_to_image_offset(grid, (h, w));
        let aug = self.config.augment.clone();
        self.model.zero_grad();

        let first: Vec<Image> = match batch {
            Batch::Images(v) => v.iter().map(|im| augment(im, &aug, &mut self.rng)).collect(),
            Batch::Flow(v) => v.iter().map(|t| t.0.clone()).collect(),
        };
        let mut second: Vec<Image> = Vec::new();
        let mut jitters = Vec::new();
        if let Batch::Flow(v) = batch {
            // the same jitter on both frames keeps the pair photometrically consistent
            for (a, b, flow) in v {
                if flow.dim() != (h, w) {
                    return Err(Error::Dataset(format!("flow {:?} does not match image size {:?}", flow.dim(), (h, w))));
                }
                let j = if aug.enabled && a.channels() == 3 { Jitter::draw(&aug, &mut self.rng) } else { Jitter::IDENTITY };
                jitters.push(j);
                second.push(j.apply(b));
            }
        }
        let first: Vec<Image> = if jitters.is_empty() {
            first
        } else {
            first.iter().zip(&jitters).map(|(im, j)| j.apply(im)).collect()
        };

        let x1 = stack_images::<f32>(&first)?;
        let (enc1, c1) = self.model.encode(x1.view(), Mode::Train)?;

        let mut tps_list = Vec::new();
        let mut control = None;
        if let Batch::Images(_) = batch {
            let mode = ControlMode::draw(sched.landmark_mode_prob, &mut self.rng);
            let domain = Domain::new(h, w);
            let mut used_landmarks = false;
            for (bi, img) in first.iter().enumerate() {
                let pts: Vec<[f64; 2]> = (0..k)
                    .map(|ki| {
                        [enc1.landmarks[[bi, ki, 0]] as f64 + offset[0], enc1.landmarks[[bi, ki, 1]] as f64 + offset[1]]
                    })
                    .collect();
                let (t, used) = sample_tps_with_mode(&self.config.tps, mode, Some(&pts), &domain, &mut self.rng)?;
                used_landmarks |= used == ControlMode::Landmarks;
                second.push(warp_image(img, &t));
                tps_list.push(t);
            }
            control = Some(if used_landmarks { ControlMode::Landmarks } else { ControlMode::Grid });
        }
        let x2 = stack_images::<f32>(&second)?;
        let (enc2, c2) = self.model.encode(x2.view(), Mode::Train)?;

        let flow_warps: Vec<FlowWarp<'_>> = match batch {
            Batch::Flow(v) => v.iter().map(|t| FlowWarp { flow: &t.2 }).collect(),
            Batch::Images(_) => Vec::new(),
        };
        let inner: Vec<&dyn CoordWarp> = if tps_list.is_empty() {
            flow_warps.iter().map(|f| f as &dyn CoordWarp).collect()
        } else {
            tps_list.iter().map(|t| t as &dyn CoordWarp).collect()
        };
        let shifted: Vec<Shifted<'_>> = inner.iter().map(|&g| Shifted { inner: g, offset }).collect();
        let warps: Vec<&dyn CoordWarp> = shifted.iter().map(|s| s as &dyn CoordWarp).collect();

        let (dec, dc) = self.model.decode(enc1.landmarks.view(), enc1.descriptors.as_ref().map(|d| d.view()), Mode::Train)?;
        let (recon, d_color) = reconstruction_loss(x1.view(), dec.color.view(), weights.sigma_color)?;
        let (conc1, dconc1) = concentration_loss(enc1.var.view());
        let (conc2, dconc2) = concentration_loss(enc2.var.view());
        let (sep1, dsep1) = separation_loss(enc1.landmarks.view(), weights.sigma_sep);
        let (sep2, dsep2) = separation_loss(enc2.landmarks.view(), weights.sigma_sep);
        let eqv = equivariance_loss(enc1.landmarks.view(), enc2.landmarks.view(), &warps)?;

        let mut flow_term = None;
        if let Batch::Flow(v) = batch {
            let sigma = self.model.config.decoder_sigmas.iter().cloned().fold(0.0, f64::max) as f32;
            let rendered = render_gaussian_maps(
                enc2.landmarks.view(),
                Width::Std(sigma),
                grid,
                RenderMode::Decoder,
                Frame::Normalized,
            )?
            .data;
            let fg = rendered.slice(s![.., ..k, .., ..]);
            let mags: Vec<_> = v.iter().map(|t| t.2.magnitude_on(grid)).collect::<Result<_>>()?;
            let mag_views: Vec<_> = mags.iter().map(|m| m.view().insert_axis(Axis(0))).collect();
            let mag = ndarray::concatenate(Axis(0), &mag_views).expect("same grid");
            let (val, d_fg) = flow_preference_loss(fg, mag.view())?;
            let (d_lm, _) =
                render_gaussian_maps_backward(enc2.landmarks.view(), Width::Std(sigma), fg, d_fg.view(), Frame::Normalized);
            flow_term = Some((val, d_lm));
        }

        let parts = LossParts {
            recon,
            conc: 0.5 * (conc1 + conc2),
            sep: 0.5 * (sep1 + sep2),
            eqv: eqv.value,
            flow: flow_term.as_ref().map(|f| f.0),
        };
        let losses = total_loss(&parts, &weights, self.iteration)?;

        let f = |x: f64| x as f32;
        let d_color = d_color.mapv(|g| g * f(weights.lambda_recon));
        let (d_lm_dec, d_desc) = self.model.decode_backward(&dc, d_color.view());
        let half_conc = f(0.5 * weights.lambda_conc);
        let half_sep = f(0.5 * weights.lambda_sep);
        let l_eqv = f(weights.lambda_eqv);
        let g1 = EncodeGrads {
            landmarks: &d_lm_dec + &dsep1.mapv(|g| g * half_sep) + &eqv.d_landmarks.mapv(|g| g * l_eqv),
            var: Some(dconc1.mapv(|g| g * half_conc)),
            descriptors: d_desc,
        };
        let mut lm2: Array3<f32> = dsep2.mapv(|g| g * half_sep) + &eqv.d_warped.mapv(|g| g * l_eqv);
        if let Some((_, d)) = &flow_term {
            lm2 += &d.mapv(|g| g * l_eqv);
        }
        let g2 = EncodeGrads { landmarks: lm2, var: Some(dconc2.mapv(|g| g * half_conc)), descriptors: None };
        self.model.encode_backward(&c1, &g1);
        self.model.encode_backward(&c2, &g2);

        let adam = &mut self.adam;
        adam.begin_step();
        self.model.visit_params(&mut |n: &str, p: &mut Param<f32>| adam.update(n, p, sched.lr));
        self.model.commit_running(&c1, &dc);

        let rec = StepRecord {
            iteration: self.iteration,
            lr: sched.lr,
            lambda_recon: sched.lambda_recon,
            control,
            losses,
            eqv_clamped: eqv.clamped,
        };
        self.iteration += 1;
        self.history.push_back(rec.clone());
        while self.history.len() > HISTORY_LEN {
            self.history.pop_front();
        }
        Ok(rec)
    }

    fn population(&self, dataset: &Dataset) -> usize {
        if self.config.dataset.use_flow {
            dataset.pairs.len()
        } else {
            dataset.len()
        }
    }

    fn load(&self, dataset: &Dataset, idx: &[usize]) -> Batch {
        if self.config.dataset.use_flow {
            Batch::Flow(dataset.load_flow_batch(idx))
        } else {
            Batch::Images(dataset.load_batch(idx).into_iter().map(|p| p.1).collect())
        }
    }

    /// Trains until `self.iteration == until`, writing progress, dumps and
    /// periodic checkpoints under `out` when given.
    pub fn run(&mut self, dataset: &Dataset, until: u64, out: Option<&Path>) -> Result<()> {
        let n = self.population(dataset);
        if n == 0 {
            return Err(Error::Dataset("no training examples".into()));
        }
        let mut sampler = BatchSampler::resume(n, self.config.batch_size, self.config.seed, self.sampler);
        let mut csv = match out {
            Some(dir) => Some(ProgressLog::open(dir)?),
            None => None,
        };
        let preview: Vec<Image> = dataset.load_batch(&(0..dataset.len().min(8)).collect::<Vec<_>>()).into_iter().map(|p| p.1).collect();
        let mut bad = 0;
        while self.iteration < until {
            let idx = sampler.next_batch();
            let batch = self.load(dataset, &idx);
            self.sampler = sampler.state();
            if batch.is_empty() {
                continue;
            }
            match self.train_step(&batch) {
                Ok(rec) => {
                    bad = 0;
                    if let Some(c) = csv.as_mut() {
                        c.write(&rec)?;
                    }
                    let it = self.iteration;
                    if self.config.log_every > 0 && (it % self.config.log_every == 0 || it == 1) {
                        let l = &rec.losses;
                        log::info!(
                            "iter {it}: total {:.4} recon {:.4} conc {:.4} sep {:.4} eqv {:.5} lr {:.0e}",
                            l.total,
                            l.raw.recon,
                            l.raw.conc,
                            l.raw.sep,
                            l.raw.eqv,
                            rec.lr
                        );
                    }
                    if let Some(dir) = out {
                        if self.config.dump_every > 0 && it % self.config.dump_every == 0 && !preview.is_empty() {
                            let path = dir.join("dumps").join(format!("iter_{it:07}.png"));
                            self.dump_overlay(&preview, &path)?;
                        }
                        if self.config.checkpoint_every > 0 && it % self.config.checkpoint_every == 0 {
                            self.save_checkpoint(dir.join("checkpoint.safetensors"))?;
                        }
                    }
                }
                Err(Error::NonFiniteLoss { .. }) => {
                    bad += 1;
                    if bad >= MAX_BAD_STEPS {
                        return Err(Error::Config(format!("{bad} consecutive non-finite steps; giving up")));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(c) = csv.as_mut() {
            c.flush()?;
        }
        Ok(())
    }

    /// Finalizes BN statistics and writes `model.safetensors` (plus a
    /// resumable checkpoint) into `out`. Returns the model path.
    pub fn finish(&mut self, dataset: &Dataset, out: &Path) -> Result<PathBuf> {
        self.save_checkpoint(out.join("checkpoint.safetensors"))?;
        finalize_batchnorm(
            &mut self.model,
            dataset,
            self.config.finalize_batches,
            self.config.batch_size,
            self.config.seed ^ 0x5eed,
        )?;
        let path = out.join("model.safetensors");
        let hash = checkpoint::save(&path, &mut self.model, None, None)?;
        log::info!("wrote {} (sha256 {hash})", path.display());
        Ok(path)
    }

    /// Saves the preview images side by side with landmark overlays.
    pub fn dump_overlay(&self, images: &[Image], path: &Path) -> Result<()> {
        let x = stack_images::<f32>(images)?;
        let (enc, _) = self.model.encode(x.view(), Mode::Eval)?;
        let (h, w) = self.model.config.image_hw();
        let offset = map_to_image_offset(self.model.map_size(), (h, w));
        let e = edge_length((h, w));
        let tiles: Vec<Image> = images
            .iter()
            .enumerate()
            .map(|(bi, im)| {
                let pts: Vec<[f64; 2]> = (0..self.model.landmarks())
                    .map(|ki| {
                        [
                            (enc.landmarks[[bi, ki, 0]] as f64 + offset[0]) * e,
                            (enc.landmarks[[bi, ki, 1]] as f64 + offset[1]) * e,
                        ]
                    })
                    .collect();
                draw_landmarks(im, &pts, 1)
            })
            .collect();
        let views: Vec<_> = tiles.iter().map(|t| t.data.view()).collect();
        let strip = ndarray::concatenate(Axis(2), &views).expect("same height");
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Image { data: strip }.save_png(path)
    }
}

/// Recomputes BN statistics from `batches` fixed-seed training-mode batches
/// and freezes them.
pub fn finalize_batchnorm(
    model: &mut Model<f32>,
    dataset: &Dataset,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    if batches < 10 {
        log::warn!("finalizing batch norm from only {batches} batches");
    }
    let mut sampler = BatchSampler::new(dataset.len(), batch_size, seed);
    let mut acc = StatsAccumulator::default();
    for _ in 0..batches {
        let imgs: Vec<Image> = dataset.load_batch(&sampler.next_batch()).into_iter().map(|p| p.1).collect();
        if imgs.is_empty() {
            continue;
        }
        let x = stack_images::<f32>(&imgs)?;
        let (enc, ec) = model.encode(x.view(), Mode::Train)?;
        let (_, dc) = model.decode(enc.landmarks.view(), enc.descriptors.as_ref().map(|d| d.view()), Mode::Train)?;
        acc.add(&Model::batch_stats(&ec, Some(&dc)));
    }
    if acc.batches == 0 {
        return Err(Error::Dataset("no batches available for BN finalization".into()));
    }
    model.set_finalized(acc.finish())
}

struct ProgressLog {
    writer: csv::Writer<fs::File>,
}

const CSV_HEADER: [&str; 16] = [
    "iteration",
    "lr",
    "lambda_recon",
    "control",
    "recon",
    "conc",
    "sep",
    "eqv",
    "flow",
    "w_recon",
    "w_conc",
    "w_sep",
    "w_eqv",
    "w_flow",
    "total",
    "eqv_clamped",
];

impl ProgressLog {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("progress.csv");
        let fresh = !path.exists();
        let file = fs::OpenOptions::new().create(true).append(true).open(&path)?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(CSV_HEADER).map_err(csv_err)?;
        }
        Ok(Self { writer })
    }

    fn write(&mut self, r: &StepRecord) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let (raw, wt) = (&r.losses.raw, &r.losses.weighted);
        let control = match r.control {
            Some(ControlMode::Grid) => "grid",
            Some(ControlMode::Landmarks) => "landmarks",
            None => "flow",
        };
        self.writer
            .write_record([
                r.iteration.to_string(),
                r.lr.to_string(),
                r.lambda_recon.to_string(),
                control.to_string(),
                raw.recon.to_string(),
                raw.conc.to_string(),
                raw.sep.to_string(),
                raw.eqv.to_string(),
                opt(raw.flow),
                wt.recon.to_string(),
                wt.conc.to_string(),
                wt.sep.to_string(),
                wt.eqv.to_string(),
                opt(wt.flow),
                r.losses.total.to_string(),
                r.eqv_clamped.to_string(),
            ])
            .map_err(csv_err)
    }

    fn flush(&mut self) -> Result<()> {
        Ok(self.writer.flush()?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
