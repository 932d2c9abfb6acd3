//! Self-supervised training loop, Adam, evaluation and resumable state.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Binding, Graph, ParamId, ParamStore, Tensor};
use crate::checkpoint::{Checkpoint, MomentPair, TrainState};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::geometry::{pose_params_to_transform, DepthMap, Pose};
use crate::losses::{total_ssl_loss, LossBreakdown, LossConfig, SslBatch};
use crate::metrics::{accumulate_trajectory, ate, depth_metrics, Alignment, DepthEvalConfig, DepthMetrics, Trajectory};
use crate::model::Model;
use crate::synth::SyntheticScene;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const TRAIN_LOG_HEADER: &str = "epoch,step,lr,total,ms_reproj,smoothness";
pub const VAL_LOG_HEADER: &str = "epoch,abs_rel";

/// Adam with bias correction; moments are kept per parameter id.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: usize) -> Self {
        Self { m: vec![None; params], v: vec![None; params], t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (id, g) in grads {
            let i = id.0;
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(*id);
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                *p -= update;
            }
        }
    }
}

/// Frames split into training and validation ranges, with triplet centres for training.
#[derive(Debug, Clone)]
pub struct Split {
    pub train_centres: Vec<usize>,
    pub val_frames: Vec<usize>,
}

impl Split {
    /// Hold out the trailing `val_fraction` of frames; training centres keep every offset in
    /// the training range.
    pub fn new(n_frames: usize, offsets: &[i64], val_fraction: f64) -> Result<Self> {
        let n_val = (n_frames as f64 * val_fraction).round() as usize;
        let n_train = n_frames - n_val;
        let lo = -offsets.iter().copied().min().unwrap_or(0).min(0);
        let hi = offsets.iter().copied().max().unwrap_or(0).max(0);
        let train_centres: Vec<usize> =
            (0..n_train as i64).filter(|&t| t - lo >= 0 && t + hi < n_train as i64).map(|t| t as usize).collect();
        if train_centres.is_empty() {
            return Err(Error::Config(format!("{n_frames} frames leave no training triplets for offsets {offsets:?}")));
        }
        Ok(Self { train_centres, val_frames: (n_train..n_frames).collect() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_frame: Vec<(usize, DepthMetrics)>,
    pub mean: DepthMetrics,
    pub ate: f64,
    pub alignment: Alignment,
}

impl EvalReport {
    pub fn depth_csv(&self) -> String {
        let mut s = format!("frame,{}\n", DepthMetrics::CSV_HEADER);
        for (f, m) in &self.per_frame {
            let _ = writeln!(s, "{f},{}", m.csv_row());
        }
        let _ = writeln!(s, "mean,{}", self.mean.csv_row());
        s
    }

    pub fn ate_csv(&self) -> String {
        let align =
            serde_json::to_value(self.alignment).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        format!("alignment,ate\n{align},{:.6}\n", self.ate)
    }
}

/// Metrics of given depth maps against scene ground truth on `frames`.
pub fn evaluate_depths(
    preds: &[DepthMap],
    scene: &SyntheticScene,
    frames: &[usize],
    cfg: &DepthEvalConfig,
) -> Result<Vec<(usize, DepthMetrics)>> {
    frames
        .iter()
        .zip(preds)
        .map(|(&f, p)| Ok((f, depth_metrics(p, &scene.depths[f], Some(&scene.valid[f]), cfg)?)))
        .collect()
}

/// Full-resolution depth metrics on `frames` and ATE of the chained pose estimates over them.
pub fn evaluate(
    model: &Model,
    scene: &SyntheticScene,
    frames: &[usize],
    cfg: &DepthEvalConfig,
    align: Alignment,
) -> Result<(EvalReport, Vec<DepthMap>)> {
    let preds = predict_depths(model, scene, frames)?;
    let per_frame = evaluate_depths(&preds, scene, frames, cfg)?;
    let mean = DepthMetrics::mean(&per_frame.iter().map(|(_, m)| *m).collect::<Vec<_>>())?;
    let ate = trajectory_error(model, scene, frames, align)?;
    Ok((EvalReport { per_frame, mean, ate, alignment: align }, preds))
}

pub fn predict_depths(model: &Model, scene: &SyntheticScene, frames: &[usize]) -> Result<Vec<DepthMap>> {
    frames.iter().map(|&f| Ok(model.predict(&scene.frames[f])?.depth(0))).collect()
}

/// Chain pose predictions between consecutive `frames` and compare with the ground truth.
pub fn trajectory_error(model: &Model, scene: &SyntheticScene, frames: &[usize], align: Alignment) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::Config("ATE needs at least two consecutive frames".into()));
    }
    let mut increments = Vec::new();
    for w in frames.windows(2) {
        // The network maps points in the first frame to the second; the camera moves by the inverse.
        let to_next = model.predict_pose(&scene.frames[w[0]], &scene.frames[w[1]])?.to_pose();
        increments.push(to_next.inverse());
    }
    let pred = accumulate_trajectory(&increments);
    let origin = scene.poses[frames[0]].inverse();
    let gt = Trajectory::from_poses(&frames.iter().map(|&f| origin.compose(&scene.poses[f])).collect::<Vec<Pose>>());
    ate(&pred, &gt, align)
}

/// One optimizer update's worth of output.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.loss.total, self.loss.ms_reproj, self.loss.smoothness
        )
    }
}

#[derive(Clone)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub best_abs_rel: f64,
    loss_cfg: LossConfig,
    frames: Vec<Tensor>,
    scene: SyntheticScene,
    split: Split,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, scene: SyntheticScene) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.lora.as_ref(), config.train.seed)?;
        Self::with_model(config, model, scene)
    }

    pub fn with_model(config: &ExperimentConfig, model: Model, scene: SyntheticScene) -> Result<Self> {
        let (w, h) = (scene.intrinsics.width, scene.intrinsics.height);
        config.model.check_input(h, w)?;
        let mut loss_cfg = config.loss.clone();
        loss_cfg.ms_ssim = loss_cfg.ms_ssim.fitted_to(h, w)?;
        let split = Split::new(scene.len(), &config.train.frame_offsets, config.train.val_fraction)?;
        let frames = scene.frames.iter().map(|f| f.to_tensor()).collect();
        let adam = Adam::new(model.store.len());
        Ok(Self {
            config: config.clone(),
            model,
            adam,
            step: 0,
            best_abs_rel: f64::INFINITY,
            loss_cfg,
            frames,
            scene,
            split,
        })
    }

    /// Rebuild from a checkpoint that carries training state.
    pub fn resume(ckpt: &Checkpoint, scene: SyntheticScene) -> Result<Self> {
        let mut t = Self::new(&ckpt.config, scene)?;
        ckpt.restore_into(&mut t.model.store)?;
        let state = ckpt.state.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        for mp in &state.moments {
            let id = t
                .model
                .store
                .id(&mp.name)
                .ok_or_else(|| Error::Checkpoint(format!("moment for unknown parameter {:?}", mp.name)))?;
            t.adam.m[id.0] = Some(mp.m.clone());
            t.adam.v[id.0] = Some(mp.v.clone());
        }
        t.adam.t = state.step;
        t.step = state.step;
        t.best_abs_rel = state.best_abs_rel;
        Ok(t)
    }

    pub fn checkpoint(&self, with_state: bool) -> Checkpoint {
        let state = with_state.then(|| TrainState {
            epoch: (self.step / self.steps_per_epoch() as u64),
            step: self.step,
            best_abs_rel: self.best_abs_rel,
            moments: self
                .model
                .store
                .iter()
                .filter_map(|(id, p)| {
                    Some(MomentPair {
                        name: p.name.clone(),
                        m: self.adam.m[id.0].clone()?,
                        v: self.adam.v[id.0].clone()?,
                    })
                })
                .collect(),
        });
        Checkpoint::from_store(&self.config, &self.model.store, state)
    }

    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.split.train_centres.len().div_ceil(self.config.train.batch_size)
    }

    /// Shuffled training centres for `epoch`, chunked into batches.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ 0x05ee_d0fb_a7c4);
        rng.set_stream(epoch as u64);
        let mut order = self.split.train_centres.clone();
        order.shuffle(&mut rng);
        order.chunks(self.config.train.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn stack(&self, idx: impl Iterator<Item = usize>) -> Tensor {
        let parts: Vec<&Tensor> = idx.map(|i| &self.frames[i]).collect();
        Tensor::concat(&parts, 0)
    }

    /// Loss on a batch of centre frames without updating anything.
    pub fn batch_loss(&self, centres: &[usize]) -> Result<LossBreakdown> {
        let g = Graph::new();
        let bind = Binding::new(&g, &self.model.store);
        let (_, br) = self.forward_loss(&bind, centres)?;
        Ok(br)
    }

    fn forward_loss<'g>(
        &self,
        bind: &Binding<'g, '_>,
        centres: &[usize],
    ) -> Result<(crate::autograd::Var<'g>, LossBreakdown)> {
        let g = bind.graph();
        let target = g.constant(self.stack(centres.iter().copied()));
        let disparities = self.model.depth_forward(bind, target)?;
        let mut sources = Vec::new();
        let mut poses = Vec::new();
        for &o in &self.config.train.frame_offsets {
            let src = g.constant(self.stack(centres.iter().map(|&c| (c as i64 + o) as usize)));
            let raw = self.model.pose_forward(bind, target, src)?;
            poses.push(pose_params_to_transform(raw));
            sources.push(src);
        }
        let batch = SslBatch {
            target,
            sources,
            poses,
            disparities,
            intrinsics: self.scene.intrinsics,
            min_depth: self.model.config.min_depth,
            max_depth: self.model.config.max_depth,
        };
        total_ssl_loss(&batch, &self.loss_cfg)
    }

    /// Forward, backward and one Adam update on trainable parameters at learning rate `lr`.
    pub fn train_step(&mut self, centres: &[usize], lr: f64) -> Result<LossBreakdown> {
        let (grads, br) = {
            let g = Graph::new();
            let bind = Binding::new(&g, &self.model.store);
            let (loss, br) = self.forward_loss(&bind, centres)?;
            if !br.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {}: total={} ms_reproj={} smoothness={} empty_mask={}",
                    self.step, br.total, br.ms_reproj, br.smoothness, br.empty_mask
                )));
            }
            (bind.collect(g.backward(loss)), br)
        };
        self.adam.step(&mut self.model.store, &grads, lr);
        self.step += 1;
        Ok(br)
    }

    /// Mean validation abs_rel (falls back to the training frames when nothing is held out).
    pub fn validate(&self) -> Result<f64> {
        let frames = if self.split.val_frames.is_empty() { &self.split.train_centres } else { &self.split.val_frames };
        let preds = predict_depths(&self.model, &self.scene, frames)?;
        let per = evaluate_depths(&preds, &self.scene, frames, &self.config.eval)?;
        Ok(per.iter().map(|(_, m)| m.abs_rel).sum::<f64>() / per.len() as f64)
    }

    /// Train until `config.train.epochs` (or `max_steps` total steps), calling `on_step` after
    /// every update and `on_epoch` with the validation abs_rel after every completed epoch.
    pub fn run(
        &mut self,
        max_steps: Option<u64>,
        mut on_step: impl FnMut(&StepReport) -> Result<()>,
        mut on_epoch: impl FnMut(&Trainer, usize, f64, bool) -> Result<()>,
    ) -> Result<()> {
        let spe = self.steps_per_epoch() as u64;
        let total = spe * self.config.train.epochs as u64;
        let limit = max_steps.map_or(total, |m| m.min(total));
        while self.step < limit {
            let epoch = (self.step / spe) as usize;
            let batches = self.epoch_batches(epoch);
            let lr = self.config.train.lr_at(epoch);
            while self.step < limit && self.step / spe == epoch as u64 {
                let b = &batches[(self.step % spe) as usize];
                let loss = self.train_step(b, lr)?;
                on_step(&StepReport { epoch, step: self.step, lr, loss })?;
            }
            if self.step.is_multiple_of(spe) {
                let abs_rel = self.validate()?;
                let improved = abs_rel < self.best_abs_rel;
                if improved {
                    self.best_abs_rel = abs_rel;
                }
                info!("epoch {epoch}: lr {lr:e}, validation abs_rel {abs_rel:.4}");
                on_epoch(self, epoch, abs_rel, improved)?;
            }
        }
        Ok(())
    }
}

/// Files written by [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutputs {
    pub best: PathBuf,
    pub last: PathBuf,
    pub train_log: PathBuf,
    pub val_log: PathBuf,
}

impl FitOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
            train_log: dir.join("train_log.csv"),
            val_log: dir.join("val_log.csv"),
        }
    }
}

fn append(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Train with checkpoints and CSV logs under `out`; resumes from `last.ckpt` when `resume`.
pub fn fit(
    config: &ExperimentConfig,
    scene: SyntheticScene,
    out: &Path,
    resume: bool,
    max_steps: Option<u64>,
) -> Result<Trainer> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let files = FitOutputs::in_dir(out);
    let mut trainer = if resume {
        let ckpt = Checkpoint::load(&files.last)?;
        if ckpt.config.architecture_hash() != config.architecture_hash() {
            return Err(Error::Config("resume config describes a different model than the checkpoint".into()));
        }
        // Drop log rows written after the checkpoint so the logs match an uninterrupted run.
        let step = ckpt.state.as_ref().map_or(0, |s| s.step);
        truncate_log(&files.train_log, |row| {
            row.split(',').nth(1).and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step)
        })?;
        let t = Trainer::resume(&ckpt, scene)?;
        let done_epochs = t.step / t.steps_per_epoch() as u64;
        truncate_log(&files.val_log, |row| {
            row.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|e| e < done_epochs)
        })?;
        t
    } else {
        for (p, header) in [(&files.train_log, TRAIN_LOG_HEADER), (&files.val_log, VAL_LOG_HEADER)] {
            fs::write(p, format!("{header}\n")).map_err(|e| Error::io(p, e))?;
        }
        Trainer::new(config, scene)?
    };
    let train_log = files.train_log.clone();
    let val_log = files.val_log.clone();
    trainer.run(
        max_steps,
        |r| append(&train_log, &(r.csv_row() + "\n")),
        |t, epoch, abs_rel, improved| {
            append(&val_log, &format!("{epoch},{abs_rel}\n"))?;
            if improved {
                t.checkpoint(false).save(&files.best)?;
            }
            t.checkpoint(true).save(&files.last)
        },
    )?;
    trainer.checkpoint(true).save(&files.last)?;
    if !files.best.exists() {
        trainer.checkpoint(false).save(&files.best)?;
    }
    Ok(trainer)
}

fn truncate_log(path: &Path, keep: impl Fn(&str) -> bool) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let mut out = lines.next().map(|h| format!("{h}\n")).unwrap_or_default();
    for l in lines.filter(|l| keep(l)) {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
