//! Dual-domain training: labeled source batches drive the detection loss, target
//! batches drive the adaptation term through the heatmap head only.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::codec::{encode_targets, BoxAnnotation, CodecError, TargetBatch};
use crate::config::Config;
use crate::data::{augment, epoch_plan, stack_images, DataError, DatasetManifest, Image, PairedStep};
use crate::losses::{combined_loss, detection_loss, mean_entropy, LossError, LossReport, UdaMode};
use crate::model::{build_model, DetectorParams, ModelError};
use crate::tensor::{Scalar, Tape, TensorError};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_HEADER: &str = "step,epoch,lr,L_h,L_off,L_size,L_det,L_uda,L_total,target_mean_heatmap,target_mean_entropy";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("non-finite total loss {value} at step {step}")]
    NonFinite { step: u64, value: f64 },
    #[error("checkpoint architecture does not match the configuration\n  checkpoint: {checkpoint}\n  config:     {config}")]
    ArchitectureMismatch { checkpoint: String, config: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: UdaMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// First epoch (0-based) trained at `learning_rate · gamma`.
    pub decay_epoch: usize,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub source_batch: usize,
    pub target_batch: usize,
    /// Feed heatmap logits instead of sigmoid outputs to the adaptation softmax.
    pub softmax_on_logits: bool,
    /// Write `epoch-NNN.ckpt` every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps in total (smoke runs).
    pub max_steps: Option<u64>,
    pub log_every: usize,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: UdaMode::Baseline,
            epochs: 40,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            decay_epoch: 30,
            gamma: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            source_batch: 16,
            target_batch: 16,
            softmax_on_logits: false,
            checkpoint_every: 0,
            max_steps: None,
            log_every: 25,
            source: None,
            target: None,
            out_dir: PathBuf::from("runs/train"),
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.source_batch == 0 || self.target_batch == 0 {
            return Err("train batch sizes must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.gamma > 0.0) {
            return Err("learning_rate and weight_decay must be >= 0, gamma > 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return Err("Adam needs 0 <= beta < 1 and epsilon > 0".into());
        }
        Ok(())
    }

    /// Step decay: the base rate before `decay_epoch`, scaled by `gamma` from then on.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.learning_rate * self.gamma
        } else {
            self.learning_rate
        }
    }

    pub fn adam(&self, epoch: usize) -> AdamHyper {
        AdamHyper {
            lr: self.lr_at_epoch(epoch),
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Adam moment buffers keyed by parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &DetectorParams<T>) -> Self {
        let zeros: BTreeMap<String, Vec<T>> = params.tensors.iter().map(|(k, t)| (k.clone(), vec![T::zero(); t.numel()])).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn matches(&self, params: &DetectorParams<T>) -> bool {
        params.tensors.iter().all(|(k, t)| self.m.get(k).map(Vec::len) == Some(t.numel()) && self.v.get(k).map(Vec::len) == Some(t.numel()))
            && self.m.len() == params.tensors.len()
            && self.v.len() == params.tensors.len()
    }
}

/// One bias-corrected Adam update with L2 weight decay added to the gradient.
/// Clears the gradients afterwards.
pub fn adam_step<T: Scalar>(params: &mut DetectorParams<T>, state: &mut OptimizerState<T>, hp: &AdamHyper) -> Result<(), TrainError> {
    if let Some((path, _)) = params.tensors.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(TrainError::MissingGradient(path.clone()));
    }
    if !state.matches(params) {
        return Err(TrainError::Config("optimizer state does not match the parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let one = T::one();
    let c1 = T::lit(1.0 - hp.beta1.powi(t));
    let c2 = T::lit(1.0 - hp.beta2.powi(t));
    let (lr, wd, eps) = (T::lit(hp.lr), T::lit(hp.weight_decay), T::lit(hp.epsilon));
    for (path, tensor) in params.tensors.iter_mut() {
        let grad = tensor.take_grad().expect("checked above");
        let m = state.m.get_mut(path).expect("checked above");
        let v = state.v.get_mut(path).expect("checked above");
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i] + wd * *p;
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Images and boxes of one domain, held in memory.
#[derive(Debug, Clone, Default)]
pub struct DomainData {
    pub images: Vec<Image>,
    pub boxes: Vec<Vec<BoxAnnotation>>,
}

impl DomainData {
    pub fn load(manifest: &DatasetManifest) -> Result<Self, DataError> {
        let images = crate::data::load_images(manifest)?;
        let boxes = manifest.images.iter().map(|r| r.annotations.clone()).collect();
        Ok(Self { images, boxes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// SplitMix64 finaliser folded over `parts`; used for per-image augmentation seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ p))
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            r.l_h,
            r.l_off,
            r.l_size,
            r.l_det,
            opt(r.l_uda),
            r.l_total,
            opt(r.target_mean_heatmap),
            opt(r.target_mean_entropy)
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(format!("expected 11 fields, got {}", f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            step: f[0].parse().map_err(|e| format!("step: {e}"))?,
            epoch: f[1].parse().map_err(|e| format!("epoch: {e}"))?,
            lr: num(f[2])?,
            report: LossReport {
                l_h: num(f[3])?,
                l_off: num(f[4])?,
                l_size: num(f[5])?,
                l_det: num(f[6])?,
                l_uda: opt(f[7])?,
                l_total: num(f[8])?,
                target_mean_heatmap: opt(f[9])?,
                target_mean_entropy: opt(f[10])?,
            },
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        rows.push(MetricsRow::parse_csv(&line).map_err(|e| TrainError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(rows)
}

/// Training state plus the in-memory datasets it iterates over.
pub struct Trainer<T: Scalar> {
    pub config: Config,
    pub params: DetectorParams<T>,
    pub optimizer: OptimizerState<T>,
    /// Number of completed epochs.
    pub epoch: usize,
    source: DomainData,
    target: Option<DomainData>,
    image_size: (usize, usize),
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialised from `config.run.seed`.
    pub fn new(config: Config, num_classes: usize, source: DomainData, target: Option<DomainData>) -> Result<Self, TrainError> {
        let params = build_model::<T>(&config.model, num_classes, config.run.seed)?;
        let optimizer = OptimizerState::new(&params);
        Self::assemble(config, params, optimizer, 0, source, target)
    }

    /// Continues from a training checkpoint. The architecture and class count must
    /// match the configuration exactly.
    pub fn from_checkpoint(config: Config, ckpt: Checkpoint<T>, source: DomainData, target: Option<DomainData>) -> Result<Self, TrainError> {
        if ckpt.params.arch != config.model {
            return Err(TrainError::ArchitectureMismatch {
                checkpoint: serde_json::to_string(&ckpt.params.arch).unwrap_or_default(),
                config: serde_json::to_string(&config.model).unwrap_or_default(),
            });
        }
        let optimizer = ckpt.optimizer.ok_or_else(|| TrainError::Config("checkpoint has no optimizer state; cannot resume".into()))?;
        Self::assemble(config, ckpt.params, optimizer, ckpt.epoch, source, target)
    }

    fn assemble(config: Config, params: DetectorParams<T>, optimizer: OptimizerState<T>, epoch: usize, source: DomainData, target: Option<DomainData>) -> Result<Self, TrainError> {
        config.train.validate().map_err(TrainError::Config)?;
        let first = source.images.first().ok_or_else(|| TrainError::Config("source set is empty".into()))?;
        let image_size = (first.height, first.width);
        if source.boxes.len() != source.images.len() {
            return Err(TrainError::Config("source boxes and images differ in count".into()));
        }
        let target = if config.train.mode == UdaMode::Baseline { None } else { target };
        if config.train.mode != UdaMode::Baseline && target.as_ref().map_or(true, DomainData::is_empty) {
            return Err(TrainError::Config(format!("mode {} needs a non-empty target set", config.train.mode)));
        }
        let all = source.images.iter().chain(target.iter().flat_map(|t| t.images.iter()));
        if all.clone().any(|im| (im.height, im.width) != image_size) {
            return Err(TrainError::Config("all training images must share one size".into()));
        }
        if config.augment.rot90 && image_size.0 != image_size.1 {
            return Err(TrainError::Config("augment.rot90 needs square images".into()));
        }
        if let Some(b) = source.boxes.iter().flatten().find(|b| b.class_id >= params.num_classes) {
            return Err(TrainError::Config(format!("source class id {} out of range for {} classes", b.class_id, params.num_classes)));
        }
        Ok(Self {
            config,
            params,
            optimizer,
            epoch,
            source,
            target,
            image_size,
        })
    }

    pub fn epoch_plan(&self, epoch: usize) -> Result<Vec<PairedStep>, TrainError> {
        let t = &self.config.train;
        let target_len = self.target.as_ref().map_or(0, DomainData::len);
        Ok(epoch_plan(self.source.len(), target_len, t.source_batch, t.target_batch, self.config.run.seed, epoch)?)
    }

    fn batch(&self, data: &DomainData, indices: &[usize], epoch: usize, domain: u64) -> (crate::tensor::Tensor<T>, Vec<Vec<BoxAnnotation>>) {
        let mut imgs = Vec::with_capacity(indices.len());
        let mut boxes = Vec::with_capacity(indices.len());
        for &i in indices {
            let seed = derive_seed(self.config.run.seed, &[epoch as u64, domain, i as u64]);
            let (img, b) = augment(&data.images[i], &data.boxes[i], &self.config.augment, seed);
            imgs.push(img);
            boxes.push(b);
        }
        (stack_images(&imgs), boxes)
    }

    /// Detection targets of a source batch.
    fn targets(&self, boxes: &[Vec<BoxAnnotation>]) -> Result<TargetBatch<T>, TrainError> {
        let maps = boxes
            .iter()
            .map(|b| encode_targets(b, self.image_size, self.params.output_stride(), self.params.num_classes, self.config.codec.min_overlap))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TargetBatch::stack(&maps)?)
    }

    /// Forward, backward and one optimizer update for a paired batch.
    pub fn step(&mut self, step: &PairedStep, epoch: usize) -> Result<MetricsRow, TrainError> {
        let cfg = &self.config;
        let (src, src_boxes) = self.batch(&self.source, &step.source, epoch, 0);
        let targets = self.targets(&src_boxes)?;

        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.constant(src);
        let out = self.params.forward(&mut tape, &bound, x)?;
        let det = detection_loss(&mut tape, &out, &targets, &cfg.loss)?;

        let mut target_heatmap = None;
        let mut uda_input = None;
        if let (Some(data), true) = (&self.target, cfg.train.mode != UdaMode::Baseline) {
            let (tgt, _) = self.batch(data, &step.target, epoch, 1);
            let tx = tape.constant(tgt);
            let hv = self.params.forward_heatmap(&mut tape, &bound, tx)?;
            target_heatmap = Some(hv.heatmap);
            uda_input = Some(if cfg.train.softmax_on_logits { hv.logits } else { hv.heatmap });
        }
        let combined = combined_loss(&mut tape, cfg.train.mode, &det, uda_input, &cfg.loss, self.params.output_stride())?;

        let f = |v| tape.item(v).to_f64().unwrap_or(f64::NAN);
        let (target_mean_heatmap, target_mean_entropy) = match target_heatmap {
            Some(h) => {
                let hm = tape.value(h);
                (Some(hm.mean().to_f64().unwrap_or(f64::NAN)), Some(mean_entropy(&hm)?))
            }
            None => (None, None),
        };
        let report = LossReport {
            l_h: f(det.heatmap),
            l_size: f(det.size),
            l_off: f(det.offset),
            l_det: f(det.total),
            l_uda: combined.uda.map(f),
            l_total: f(combined.total),
            target_mean_heatmap,
            target_mean_entropy,
        };
        let step_index = self.optimizer.step + 1;
        if !report.l_total.is_finite() {
            return Err(TrainError::NonFinite {
                step: step_index,
                value: report.l_total,
            });
        }
        tape.backward(combined.total)?;
        self.params.collect_grads(&tape, &bound)?;
        drop(tape);
        let hp = self.config.train.adam(epoch);
        adam_step(&mut self.params, &mut self.optimizer, &hp)?;
        Ok(MetricsRow {
            step: step_index,
            epoch,
            lr: hp.lr,
            report,
        })
    }

    /// Gradients of the adaptation term alone on a target batch, keyed by path.
    /// Parameters the term does not reach get exact zeros.
    pub fn adaptation_gradients(&self, target_indices: &[usize], epoch: usize) -> Result<BTreeMap<String, Vec<T>>, TrainError> {
        let data = self.target.as_ref().ok_or_else(|| TrainError::Config("no target set attached".into()))?;
        let cfg = &self.config;
        let (tgt, _) = self.batch(data, target_indices, epoch, 1);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.constant(tgt);
        let hv = self.params.forward_heatmap(&mut tape, &bound, x)?;
        let input = if cfg.train.softmax_on_logits { hv.logits } else { hv.heatmap };
        let stride = self.params.output_stride();
        let term = match cfg.train.mode {
            UdaMode::Em => crate::losses::entropy_loss(&mut tape, input)?,
            UdaMode::Msl => crate::losses::max_squares_loss(&mut tape, input, stride)?,
            UdaMode::Baseline => return Err(TrainError::Config("baseline mode has no adaptation term".into())),
        };
        tape.backward(term)?;
        let mut out = BTreeMap::new();
        for (path, &v) in bound.iter() {
            let g = tape.grad(v).ok_or_else(|| TrainError::MissingGradient(path.clone()))?;
            out.insert(path.clone(), g.to_vec());
        }
        Ok(out)
    }

    /// Runs the remaining epochs, handing every row to `sink`. Stops early once
    /// `max_steps` optimizer steps have been taken; returns whether the schedule
    /// completed.
    pub fn fit(&mut self, mut sink: impl FnMut(&Self, &MetricsRow, bool) -> Result<(), TrainError>) -> Result<bool, TrainError> {
        while self.epoch < self.config.train.epochs {
            let epoch = self.epoch;
            let plan = self.epoch_plan(epoch)?;
            for (i, step) in plan.iter().enumerate() {
                if self.config.train.max_steps.is_some_and(|m| self.optimizer.step >= m) {
                    return Ok(false);
                }
                let row = self.step(step, epoch)?;
                let last_in_epoch = i + 1 == plan.len();
                if last_in_epoch {
                    self.epoch += 1;
                }
                sink(self, &row, last_in_epoch)?;
            }
        }
        Ok(true)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epoch,
            config: self.config.to_toml_string(),
        }
    }
}

/// Result of [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: u64,
    pub epochs: usize,
    pub last: Option<MetricsRow>,
}

/// Trains with the settings in `config`, writing `metrics.csv`, periodic and final
/// checkpoints to `out_dir`. With `resume`, continues from that checkpoint and
/// appends to the existing metrics log.
pub fn train_to_dir<T: Scalar>(config: &Config, source: &DatasetManifest, target: Option<&DatasetManifest>, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary, TrainError> {
    if !source.labeled {
        return Err(TrainError::Config("source manifest must be labeled".into()));
    }
    let source_data = DomainData::load(source)?;
    let target_data = match (config.train.mode, target) {
        (UdaMode::Baseline, _) => None,
        (_, Some(t)) => Some(DomainData::load(t)?),
        (mode, None) => return Err(TrainError::Config(format!("mode {mode} needs a target manifest"))),
    };
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = checkpoint::load::<T>(path)?;
            Trainer::from_checkpoint(config.clone(), ckpt, source_data, target_data)?
        }
        None => Trainer::new(config.clone(), source.num_classes(), source_data, target_data)?,
    };

    let metrics_path = out_dir.join(METRICS_FILE);
    let append = resume.is_some() && metrics_path.exists();
    if append {
        // Rows logged after the checkpoint was taken will be produced again.
        let text = std::fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?;
        let resumed_at = trainer.optimizer.step;
        let kept: String = text
            .lines()
            .enumerate()
            .filter(|(i, line)| *i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|step| step <= resumed_at))
            .map(|(_, line)| format!("{line}\n"))
            .collect();
        std::fs::write(&metrics_path, kept).map_err(io_err(&metrics_path))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let mut metrics = std::io::BufWriter::new(file);
    if !append {
        writeln!(metrics, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
    }

    let steps_per_epoch = trainer.epoch_plan(trainer.epoch.min(config.train.epochs.saturating_sub(1)))?.len();
    log::info!(
        "training {} for {} epochs ({} steps/epoch, {} parameters)",
        config.train.mode,
        config.train.epochs,
        steps_per_epoch,
        trainer.params.num_parameters()
    );
    let mut last = None;
    let every = config.train.checkpoint_every;
    let log_every = config.train.log_every.max(1) as u64;
    trainer.fit(|tr, row, epoch_done| {
        writeln!(metrics, "{}", row.to_csv()).map_err(io_err(&metrics_path))?;
        if row.step % log_every == 0 || epoch_done {
            let r = &row.report;
            log::info!(
                "epoch {} step {} lr {:.2e} L_det {:.4} L_uda {} L_total {:.4}",
                row.epoch,
                row.step,
                row.lr,
                r.l_det,
                r.l_uda.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                r.l_total
            );
        }
        if epoch_done && every > 0 && tr.epoch % every == 0 {
            metrics.flush().map_err(io_err(&metrics_path))?;
            checkpoint::save(&out_dir.join(format!("epoch-{:03}.ckpt", tr.epoch)), &tr.checkpoint())?;
        }
        last = Some(*row);
        Ok(())
    })?;
    metrics.flush().map_err(io_err(&metrics_path))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&final_checkpoint, &trainer.checkpoint())?;
    Ok(TrainSummary {
        final_checkpoint,
        metrics: metrics_path,
        steps: trainer.optimizer.step,
        epochs: trainer.epoch,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureDescriptor;
    use crate::tensor::Tensor;

    fn tiny_arch() -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            in_channels: 3,
            stem_channels: 4,
            stage_channels: vec![4, 4],
            residual_blocks: 0,
            decoder_channels: vec![],
            head_channels: 4,
        }
    }

    fn scalar_params(value: f64, grad: f64) -> DetectorParams<f64> {
        let mut t = Tensor::from_f64(&[1], &[value]).unwrap().with_requires_grad(true);
        t.set_grad(vec![grad]).unwrap();
        DetectorParams {
            arch: tiny_arch(),
            num_classes: 1,
            tensors: [("w".to_string(), t)].into_iter().collect(),
        }
    }

    fn hyper(lr: f64, wd: f64) -> AdamHyper {
        AdamHyper {
            lr,
            weight_decay: wd,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = scalar_params(1.0, 1.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &mut s, &hyper(0.001, 0.0)).unwrap();
        let w = p.tensors["w"].data()[0];
        assert!((w - 0.999).abs() < 1e-8, "{w}");
        assert!(p.tensors["w"].grad().is_none());
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = scalar_params(0.3, -2.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &mut s, &hyper(0.0, 1e-4)).unwrap();
        assert_eq!(p.tensors["w"].data()[0], 0.3);
    }

    #[test]
    fn weight_decay_is_added_to_gradient() {
        // with zero gradient the decay term alone drives the first step
        let mut p = scalar_params(2.0, 0.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &mut s, &hyper(0.01, 0.5)).unwrap();
        assert!((p.tensors["w"].data()[0] - 1.99).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = scalar_params(1.0, 1.0);
        p.tensors.get_mut("w").unwrap().clear_grad();
        let mut s = OptimizerState::new(&p);
        match adam_step(&mut p, &mut s, &hyper(0.1, 0.0)) {
            Err(TrainError::MissingGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn step_decay_schedule() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at_epoch(0), 1e-4);
        assert_eq!(t.lr_at_epoch(29), 1e-4);
        assert!((t.lr_at_epoch(30) - 1e-5).abs() < 1e-20);
        assert!((t.lr_at_epoch(39) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn metrics_row_round_trip() {
        let row = MetricsRow {
            step: 3,
            epoch: 1,
            lr: 1e-4,
            report: LossReport {
                l_h: 1.5,
                l_size: 2.25,
                l_off: 0.125,
                l_det: 1.9,
                l_uda: None,
                l_total: 1.9,
                target_mean_heatmap: Some(0.01),
                target_mean_entropy: None,
            },
        };
        assert_eq!(MetricsRow::parse_csv(&row.to_csv()).unwrap(), row);
        assert_eq!(METRICS_HEADER.split(',').count(), 11);
    }

    #[test]
    fn seeds_differ_per_part() {
        assert_ne!(derive_seed(1, &[0, 0, 1]), derive_seed(1, &[0, 0, 2]));
        assert_ne!(derive_seed(1, &[0, 1, 0]), derive_seed(1, &[1, 0, 0]));
        assert_eq!(derive_seed(5, &[3]), derive_seed(5, &[3]));
    }

    fn toy_data(n: usize) -> DomainData {
        let mut images = Vec::new();
        let mut boxes = Vec::new();
        for i in 0..n {
            let mut img = Image::filled(16, 16, 0.1);
            let x0 = 2 + i % 4;
            for c in 0..3 {
                for y in 4..10 {
                    for x in x0..x0 + 6 {
                        img.data[(c * 16 + y) * 16 + x] = 0.9;
                    }
                }
            }
            images.push(img);
            boxes.push(vec![BoxAnnotation::new(x0 as f64, 4.0, x0 as f64 + 6.0, 10.0, i % 2)]);
        }
        DomainData { images, boxes }
    }

    fn toy_config(mode: UdaMode) -> Config {
        let mut cfg = Config::default();
        cfg.model = tiny_arch();
        cfg.augment = crate::data::AugmentConfig::identity();
        cfg.train.mode = mode;
        cfg.train.source_batch = 2;
        cfg.train.target_batch = 2;
        cfg.train.learning_rate = 1e-2;
        cfg.train.epochs = 2;
        cfg
    }

    #[test]
    fn baseline_ignores_target_and_em_requires_it() {
        let t = Trainer::<f64>::new(toy_config(UdaMode::Baseline), 2, toy_data(4), Some(toy_data(4))).unwrap();
        assert!(t.target.is_none());
        assert!(Trainer::<f64>::new(toy_config(UdaMode::Em), 2, toy_data(4), None).is_err());
    }

    #[test]
    fn adaptation_term_skips_offset_and_size_heads() {
        for mode in [UdaMode::Em, UdaMode::Msl] {
            let t = Trainer::<f64>::new(toy_config(mode), 2, toy_data(4), Some(toy_data(4))).unwrap();
            let grads = t.adaptation_gradients(&[0, 1], 0).unwrap();
            for (path, g) in &grads {
                let zero = g.iter().all(|&v| v == 0.0);
                if path.starts_with("head.offset") || path.starts_with("head.size") {
                    assert!(zero, "{path} received gradient");
                } else if path.starts_with("head.heatmap") {
                    assert!(!zero, "{path} has no gradient");
                }
            }
        }
    }

    #[test]
    fn resume_rejects_other_architecture() {
        let t = Trainer::<f64>::new(toy_config(UdaMode::Baseline), 2, toy_data(2), None).unwrap();
        let ckpt = t.checkpoint();
        let mut cfg = toy_config(UdaMode::Baseline);
        cfg.model.head_channels = 8;
        match Trainer::<f64>::from_checkpoint(cfg, ckpt, toy_data(2), None) {
            Err(TrainError::ArchitectureMismatch { checkpoint, config }) => {
                assert!(checkpoint.contains("\"head_channels\":4"));
                assert!(config.contains("\"head_channels\":8"));
            }
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("accepted mismatched architecture"),
        }
    }

    #[test]
    fn fit_runs_all_epochs_and_counts_steps() {
        let mut t = Trainer::<f64>::new(toy_config(UdaMode::Msl), 2, toy_data(4), Some(toy_data(2))).unwrap();
        let mut rows = Vec::new();
        let done = t
            .fit(|_, r, _| {
                rows.push(*r);
                Ok(())
            })
            .unwrap();
        assert!(done);
        assert_eq!(rows.len(), 4);
        assert_eq!(t.epoch, 2);
        assert!(rows.iter().all(|r| r.report.l_uda.is_some() && r.report.l_total.is_finite()));
        assert_eq!(rows.last().unwrap().step, 4);
    }
}
