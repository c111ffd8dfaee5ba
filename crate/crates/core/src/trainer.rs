//! AdamW training with a cosine schedule, degraded inputs and clean targets.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataio::{random_crop_pair, ImagePair};
use crate::degradation::{self, rng_from_seed, DegradationKind, DegradationSpec, RandomSource};
use crate::error::{ensure, Error, Result};
use crate::imaging::Image;
use crate::losses::{loss_graph, LossBreakdown, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Required: there is no sensible default run length.
    pub total_steps: u64,
    #[serde(default = "ModelConfig::toy")]
    pub model: ModelConfig,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Square training crop; must divide by 8.
    #[serde(default = "defaults::crop_size")]
    pub crop_size: usize,
    #[serde(default = "defaults::lr_init")]
    pub lr_init: f64,
    #[serde(default = "defaults::lr_final")]
    pub lr_final: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::degrade_kinds")]
    pub degrade_kinds: Vec<DegradationKind>,
    /// Per-sample probability of degrading the network inputs.
    #[serde(default = "defaults::degrade_prob")]
    pub degrade_prob: f64,
    #[serde(default)]
    pub seed: u64,
    /// Optional global gradient-norm cap.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Dataset root with `vis/` and `ir/`; synthetic pairs are used when absent.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Size of the in-memory synthetic set used when `data` is absent.
    #[serde(default = "defaults::synth_pairs")]
    pub synth_pairs: usize,
    #[serde(default = "defaults::crop_size")]
    pub synth_size: usize,
}

mod defaults {
    use super::DegradationKind;

    pub fn batch_size() -> usize {
        4
    }
    pub fn crop_size() -> usize {
        64
    }
    pub fn lr_init() -> f64 {
        1e-4
    }
    pub fn lr_final() -> f64 {
        1e-6
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn degrade_kinds() -> Vec<DegradationKind> {
        vec![DegradationKind::Gaussian]
    }
    pub fn degrade_prob() -> f64 {
        0.5
    }
    pub fn synth_pairs() -> usize {
        8
    }
}

impl TrainConfig {
    /// Toy-scale defaults for the given run length.
    pub fn new(total_steps: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "total_steps": total_steps })).expect("defaults deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(
            self.crop_size >= 8 && self.crop_size.is_multiple_of(8),
            "crop_size must be a positive multiple of 8, got {}",
            self.crop_size
        );
        ensure!(
            self.lr_final.is_finite() && self.lr_init.is_finite() && 0.0 <= self.lr_final && self.lr_final <= self.lr_init,
            "need 0 <= lr_final <= lr_init, got {} and {}",
            self.lr_final,
            self.lr_init
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "betas must lie in [0, 1)"
        );
        ensure!(self.adam_eps > 0.0, "adam_eps must be positive");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure!(
            (0.0..=1.0).contains(&self.degrade_prob),
            "degrade_prob must lie in [0, 1], got {}",
            self.degrade_prob
        );
        ensure!(
            self.degrade_prob == 0.0 || !self.degrade_kinds.is_empty(),
            "degrade_kinds is empty but degrade_prob is {}",
            self.degrade_prob
        );
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, "grad_clip must be positive, got {c}");
        }
        ensure!(self.synth_pairs >= 1, "synth_pairs must be at least 1");
        Ok(())
    }
}

/// `lr_final + (lr_init - lr_final) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: u64, cfg: &TrainConfig) -> Result<f64> {
    ensure!(
        step <= cfg.total_steps,
        "step {step} beyond total_steps {}",
        cfg.total_steps
    );
    if step == 0 || cfg.total_steps == 0 {
        return Ok(cfg.lr_init);
    }
    if step == cfg.total_steps {
        return Ok(cfg.lr_final);
    }
    let c = (PI * step as f64 / cfg.total_steps as f64).cos();
    Ok(cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + c))
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m as f64 / bc1;
                let vhat = *v as f64 / bc2;
                let step = mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * *w as f64;
                *w = (*w as f64 - lr * step) as f32;
            }
        }
    }
}

/// Network inputs and loss targets for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub input_vis: Image,
    pub input_ir: Image,
    /// Always the clean visible image.
    pub target_vis: Image,
    /// Always the clean infrared image.
    pub target_ir: Image,
    /// The degradations applied to the inputs, if any.
    pub degradation: Option<[DegradationSpec; 2]>,
}

/// With probability `degrade_prob`, degrades both inputs with independently
/// drawn specs; targets stay clean.
pub fn prepare_sample<R: Rng>(pair: &ImagePair, cfg: &TrainConfig, rng: &mut R) -> Result<PreparedSample> {
    let degrade = cfg.degrade_prob > 0.0 && rng.random_bool(cfg.degrade_prob);
    let (input_vis, input_ir, degradation) = if degrade {
        let sv = degradation::sample_spec(rng, &cfg.degrade_kinds)?;
        let si = degradation::sample_spec(rng, &cfg.degrade_kinds)?;
        (
            degradation::apply(&pair.vis, &sv)?,
            degradation::apply(&pair.ir, &si)?,
            Some([sv, si]),
        )
    } else {
        (pair.vis.clone(), pair.ir.clone(), None)
    };
    Ok(PreparedSample {
        input_vis,
        input_ir,
        target_vis: pair.vis.clone(),
        target_ir: pair.ir.clone(),
        degradation,
    })
}

/// Loss and parameter gradients of one prepared sample.
pub fn sample_gradients(
    model: &Model,
    sample: &PreparedSample,
    weights: &LossWeights,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor<f32>>)> {
    let mut cx = Ctx::train(&model.params);
    let loss = sample_graph(model, &mut cx, sample, weights)?;
    let grads = cx.tape.backward(loss.total);
    Ok((loss.breakdown(&cx.tape, weights), cx.param_grads(&grads)))
}

fn sample_graph(
    model: &Model,
    cx: &mut Ctx<'_, f32>,
    s: &PreparedSample,
    weights: &LossWeights,
) -> Result<crate::losses::LossGraph> {
    let t = &mut cx.tape;
    let [iv, ii, tv, ti] = [&s.input_vis, &s.input_ir, &s.target_vis, &s.target_ir].map(|img| t.constant(img.to_rgb().to_tensor()));
    let out = model.arch().forward(cx, iv, ii)?;
    loss_graph(&mut cx.tape, out.fused, tv, ti, weights)
}

/// Batch-mean loss without gradients or updates.
pub fn batch_loss(model: &Model, samples: &[PreparedSample], weights: &LossWeights) -> Result<LossBreakdown> {
    ensure!(!samples.is_empty(), "empty batch");
    let items = samples
        .iter()
        .map(|s| {
            let mut cx = Ctx::infer(&model.params);
            let loss = sample_graph(model, &mut cx, s, weights)?;
            Ok(loss.breakdown(&cx.tape, weights))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&items, weights))
}

fn global_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// One optimization step on a batch: prepare samples, accumulate the
/// batch-mean gradient, then apply AdamW at `cosine_lr(step)`.
pub fn train_step<R: Rng>(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[ImagePair],
    cfg: &TrainConfig,
    rng: &mut R,
    step: u64,
) -> Result<LossBreakdown> {
    let samples = batch
        .iter()
        .map(|p| prepare_sample(p, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    train_step_prepared(model, opt, &samples, cfg, cosine_lr(step, cfg)?, step)
}

/// [`train_step`] with explicit samples and learning rate.
pub fn train_step_prepared(
    model: &mut Model,
    opt: &mut AdamW,
    samples: &[PreparedSample],
    cfg: &TrainConfig,
    lr: f64,
    step: u64,
) -> Result<LossBreakdown> {
    ensure!(!samples.is_empty(), "empty batch");
    let dims = samples[0].input_vis.dims();
    ensure!(
        samples.iter().all(|s| s.input_vis.dims() == dims),
        "batch samples differ in size"
    );
    let mut losses = Vec::with_capacity(samples.len());
    let mut total: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for s in samples {
        let (loss, grads) = sample_gradients(model, s, &cfg.loss_weights)?;
        losses.push(loss);
        for (k, g) in grads {
            match total.get_mut(&k) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    total.insert(k, g);
                }
            }
        }
    }
    let loss = LossBreakdown::mean(&losses, &cfg.loss_weights);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("loss {loss:?}"),
        });
    }
    let mut scale = 1.0 / samples.len() as f64;
    if let Some(max) = cfg.grad_clip {
        let norm = global_norm(&total) * scale;
        if norm > max {
            scale *= max / norm;
        }
    }
    for g in total.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * scale) as f32);
    }
    opt.update(&mut model.params, &total, lr, cfg);
    if !model.params.all_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("parameters diverged at lr {lr}"),
        });
    }
    model.step += 1;
    Ok(loss)
}

/// One line of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean total loss over records `range`.
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let r = &self.records[range];
        r.iter().map(|x| x.loss.total).sum::<f64>() / r.len() as f64
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TrainHistory { records })
    }
}

/// Names of the files written by [`train`] under `out_dir`.
pub const HISTORY_FILE: &str = "history.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn interval_checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Seeded batch sampler: reshuffles the index order every pass.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn next<R: Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == 0 {
                    self.order.shuffle(rng);
                }
                let i = self.order[self.pos];
                self.pos = (self.pos + 1) % self.order.len();
                i
            })
            .collect()
    }
}

/// Trains for `cfg.total_steps` steps. With `out_dir`, appends the history
/// as JSON lines, saves interval checkpoints and a final checkpoint.
pub fn train(
    mut model: Model,
    dataset: &[ImagePair],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            crate::persist::create_dir_all(dir)?;
            let path = dir.join(HISTORY_FILE);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };
    let mut rng: RandomSource = rng_from_seed(cfg.seed);
    let mut opt = AdamW::new();
    let mut batcher = Batcher {
        order: (0..dataset.len()).collect(),
        pos: 0,
    };
    let mut history = TrainHistory::default();
    for step in 0..cfg.total_steps {
        let batch = batcher
            .next(cfg.batch_size, &mut rng)
            .into_iter()
            .map(|i| random_crop_pair(&dataset[i], cfg.crop_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let lr = cosine_lr(step, cfg)?;
        let loss = train_step(&mut model, &mut opt, &batch, cfg, &mut rng, step)?;
        let record = TrainRecord {
            step: step + 1,
            lr,
            loss,
        };
        log::info!(
            "step {}/{} lr {:.3e} total {:.5} (pixel {:.5} grad {:.5} ssim {:.5} color {:.5})",
            record.step,
            cfg.total_steps,
            lr,
            loss.total,
            loss.pixel,
            loss.grad,
            loss.ssim,
            loss.color
        );
        history.records.push(record);
        if let (Some((path, w)), Some(dir)) = (log.as_mut(), out_dir) {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
            if cfg.checkpoint_interval > 0 && record.step.is_multiple_of(cfg.checkpoint_interval) {
                checkpoint::save(&model, &dir.join(interval_checkpoint_name(record.step)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&model, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((model, history))
}
