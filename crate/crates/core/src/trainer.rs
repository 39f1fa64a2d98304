//! Training loop: three supervised modes and two semi-supervised modes.
//!
//! A semi-supervised step follows this recipe:
//!
//! ```text
//! x_l = weak(labeled batch)
//! x_w = weak(unlabeled batch);  x_s = strong(x_w, style from the unlabeled batch)
//! p_w      = softmax(model(x_w))             (untracked pass)
//! p_l, p_s = softmax(model(cat(x_l, x_s))) split by view
//! pseudo, conf = argmax / max of p_w         (constants, no gradient)
//! loss_x = CE(p_l, gt)
//! loss_u = thresholded CE(p_s, pseudo, conf, tau)   or   beta-CE(p_s, pseudo, beta)
//! loss   = (loss_x + loss_u) / 2
//! ```
//!
//! Every source of randomness is derived from `(seed, stream, step)`, so a
//! run restored from a checkpoint at step t continues exactly as the
//! uninterrupted run would. Training steps and evaluation run with
//! subnormal floats flushed to zero.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_views, strong_views_in_batch, weak_gaussian, StrongAugConfig, WeakAugConfig,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fpenv::FlushSubnormals;
use crate::losses::{self, pseudo_label, DEFAULT_BETA, DEFAULT_TAU};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{forward, predict_probabilities, ModelParams, UNetConfig};
use crate::optim::{Adam, AdamConfig, DEFAULT_LR};
use crate::phantom::{PhantomSample, NUM_CLASSES};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Image, LabelMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    WeakAug,
    StrongAug,
    SemiThreshold,
    SemiBce,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Baseline,
        Mode::WeakAug,
        Mode::StrongAug,
        Mode::SemiThreshold,
        Mode::SemiBce,
    ];

    pub fn is_semi(self) -> bool {
        matches!(self, Mode::SemiThreshold | Mode::SemiBce)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::WeakAug => "weak_aug",
            Mode::StrongAug => "strong_aug",
            Mode::SemiThreshold => "semi_threshold",
            Mode::SemiBce => "semi_bce",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Loss applied to labeled pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedLoss {
    #[default]
    Ce,
    BetaCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: u64,
    pub lr: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub tau: f64,
    pub beta: f64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub weak: WeakAugConfig,
    pub strong: StrongAugConfig,
    pub supervised_loss: SupervisedLoss,
    /// Weight on the loss in supervised modes. 0.5 gives the labeled term
    /// the weight it carries inside a semi-supervised step.
    #[serde(default = "unit_weight")]
    pub supervised_weight: f64,
    pub model: UNetConfig,
}

fn unit_weight() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Baseline,
            steps: 2000,
            lr: DEFAULT_LR,
            batch_labeled: 8,
            batch_unlabeled: 8,
            tau: DEFAULT_TAU,
            beta: DEFAULT_BETA,
            seed: 0,
            eval_every: 0,
            weak: WeakAugConfig::default(),
            strong: StrongAugConfig::for_size(64, 64),
            supervised_loss: SupervisedLoss::Ce,
            supervised_weight: 1.0,
            model: UNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_labeled == 0 {
            return Err(Error::Config("batch_labeled must be positive".into()));
        }
        if self.mode.is_semi() && self.batch_unlabeled == 0 {
            return Err(Error::Config(format!(
                "{} mode requires batch_unlabeled > 0",
                self.mode
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.supervised_weight > 0.0 && self.supervised_weight.is_finite()) {
            return Err(Error::Config(format!(
                "supervised weight must be positive, got {}",
                self.supervised_weight
            )));
        }
        if self.model.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "model must predict {NUM_CLASSES} classes"
            )));
        }
        self.weak.validate()?;
        self.strong.validate()?;
        self.model.validate()?;
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Training inputs. Unlabeled samples are images only, so their ground
/// truth is out of reach of the training loop.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub labeled: &'a [PhantomSample],
    pub unlabeled: &'a [Image],
}

/// Held-out images with labels, used only for evaluation.
#[derive(Clone, Debug, Default)]
pub struct EvalSet<'a> {
    pub images: Vec<&'a Image>,
    pub labels: Vec<&'a LabelMap>,
}

impl<'a> EvalSet<'a> {
    pub fn from_samples(samples: &'a [PhantomSample]) -> Self {
        EvalSet {
            images: samples.iter().map(|s| &s.image).collect(),
            labels: samples.iter().map(|s| &s.labels).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_x: f64,
    pub loss_u: f64,
    /// Exactly `(loss_x + loss_u) / 2` in semi modes and
    /// `supervised_weight * loss_x` otherwise.
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub losses: Vec<StepRecord>,
    pub evals: Vec<(u64, MetricsReport)>,
}

/// Indices of the `step`-th batch: consecutive slices of per-epoch
/// permutations, each permutation seeded by its epoch number.
pub fn batch_indices(seed: u64, stream: Stream, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch as u64 {
        let p = step * batch as u64 + j;
        let epoch = p / n as u64;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream_rng(seed, stream, epoch));
            cached = Some((epoch, perm));
        }
        let (_, perm) = cached.as_ref().expect("set above");
        out.push(perm[(p % n as u64) as usize]);
    }
    out
}

/// Model, optimizer and step counter of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub optimizer: Adam<T>,
    /// Number of completed steps.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params =
            ModelParams::init(&config.model, &mut stream_rng(config.seed, Stream::Init, 0))?;
        let optimizer = Adam::new(config.adam(), &params)?;
        Ok(Trainer {
            config,
            params,
            optimizer,
            step: 0,
        })
    }

    /// Runs one step on the batch selected by the current step counter.
    pub fn train_step(&mut self, data: &TrainData<'_>) -> Result<StepRecord> {
        if data.labeled.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let rec = if self.config.mode.is_semi() {
            if data.unlabeled.is_empty() {
                return Err(Error::Config(format!(
                    "{} mode needs unlabeled images",
                    self.config.mode
                )));
            }
            self.train_step_semi(data)?
        } else {
            self.train_step_supervised(data)?
        };
        if !(rec.total.is_finite() && rec.loss_x.is_finite() && rec.loss_u.is_finite()) {
            return Err(Error::NonFiniteLoss(rec.step));
        }
        Ok(rec)
    }

    fn labeled_batch<'a>(&self, data: &TrainData<'a>) -> (Vec<&'a Image>, Vec<&'a LabelMap>) {
        let c = &self.config;
        batch_indices(
            c.seed,
            Stream::BatchLabeled,
            self.step,
            c.batch_labeled,
            data.labeled.len(),
        )
        .into_iter()
        .map(|i| (&data.labeled[i].image, &data.labeled[i].labels))
        .unzip()
    }

    fn weak_labeled(&self, images: &[&Image]) -> Result<Vec<Image>> {
        let mut rng = stream_rng(self.config.seed, Stream::AugLabeled, self.step);
        images
            .iter()
            .map(|im| weak_gaussian(im, &self.config.weak, &mut rng))
            .collect()
    }

    fn supervised_node(&self, g: &mut Graph<T>, prob: Var, labels: &LabelMap) -> Result<Var> {
        match self.config.supervised_loss {
            SupervisedLoss::Ce => losses::ce_node(g, prob, labels),
            SupervisedLoss::BetaCe => losses::beta_ce_node(g, prob, labels, self.config.beta),
        }
    }

    /// One supervised update: baseline uses raw images, weak_aug the weak
    /// view and strong_aug a style-mixed view with styles from the batch.
    pub fn train_step_supervised(&mut self, data: &TrainData<'_>) -> Result<StepRecord> {
        let _flush = FlushSubnormals::new();
        let (images, labels) = self.labeled_batch(data);
        let views: Vec<Image> = match self.config.mode {
            Mode::WeakAug => self.weak_labeled(&images)?,
            Mode::StrongAug => {
                let mut rng = stream_rng(self.config.seed, Stream::AugLabeled, self.step);
                strong_views_in_batch(&images, &self.config.strong, &mut rng)?
            }
            _ => images.iter().map(|&im| im.clone()).collect(),
        };
        let gt = LabelMap::cat_batch(&labels)?;

        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let refs: Vec<&Image> = views.iter().collect();
        let x = g.constant(Image::stack(&refs)?);
        let logits = forward(&mut g, &self.config.model, &vars, x)?;
        let prob = g.softmax_channels(logits)?;
        let loss = self.supervised_node(&mut g, prob, &gt)?;
        let loss_x = g.value(loss).item()?.as_f64();
        let weight = self.config.supervised_weight;
        let total = if weight == 1.0 {
            loss
        } else {
            g.scale(loss, T::from_f64_lossy(weight))
        };
        let total_value = g.value(total).item()?.as_f64();
        self.update(&mut g, total, &vars)?;
        Ok(StepRecord {
            step: self.step - 1,
            loss_x,
            loss_u: 0.0,
            total: total_value,
        })
    }

    /// One semi-supervised update over a labeled and an unlabeled batch.
    pub fn train_step_semi(&mut self, data: &TrainData<'_>) -> Result<StepRecord> {
        let _flush = FlushSubnormals::new();
        let c = self.config.clone();
        let (images, labels) = self.labeled_batch(data);
        let x_l = self.weak_labeled(&images)?;
        let u_idx = batch_indices(
            c.seed,
            Stream::BatchUnlabeled,
            self.step,
            c.batch_unlabeled,
            data.unlabeled.len(),
        );
        let x_u: Vec<&Image> = u_idx.iter().map(|&i| &data.unlabeled[i]).collect();
        let mut rng = stream_rng(c.seed, Stream::AugUnlabeled, self.step);
        let (x_w, x_s) = apply_views(&x_u, &c.weak, &c.strong, &x_u, &mut rng)?;
        let gt = LabelMap::cat_batch(&labels)?;

        // Pseudo-labels come from an untracked pass over the weak views, so
        // no gradient can reach that branch. Samples do not interact inside
        // the network, so this equals slicing a joint forward pass.
        let weak_refs: Vec<&Image> = x_w.iter().collect();
        let p_w = predict_probabilities(&self.params, &Image::stack(&weak_refs)?)?;
        let (pseudo, confidence) = pseudo_label(&p_w);

        let all: Vec<&Image> = x_l.iter().chain(&x_s).collect();
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let x = g.constant(Image::stack(&all)?);
        let logits = forward(&mut g, &c.model, &vars, x)?;
        let prob = g.softmax_channels(logits)?;
        let (bl, bu) = (c.batch_labeled, c.batch_unlabeled);
        let p_l = g.narrow_batch(prob, 0, bl)?;
        let p_s = g.narrow_batch(prob, bl, bu)?;

        let loss_x = self.supervised_node(&mut g, p_l, &gt)?;
        let loss_u = match c.mode {
            Mode::SemiThreshold => {
                losses::thresholded_ce_node(&mut g, p_s, &pseudo, &confidence, c.tau)?
            }
            _ => losses::beta_ce_node(&mut g, p_s, &pseudo, c.beta)?,
        };
        let total = losses::combined_node(&mut g, loss_x, loss_u)?;
        let rec = (
            g.value(loss_x).item()?.as_f64(),
            g.value(loss_u).item()?.as_f64(),
            g.value(total).item()?.as_f64(),
        );
        self.update(&mut g, total, &vars)?;
        Ok(StepRecord {
            step: self.step - 1,
            loss_x: rec.0,
            loss_u: rec.1,
            total: rec.2,
        })
    }

    fn update(&mut self, g: &mut Graph<T>, loss: Var, vars: &[Var]) -> Result<()> {
        g.backward(loss)?;
        let grads: Vec<Option<&[T]>> = vars.iter().map(|&v| g.grad(v)).collect();
        self.optimizer.step(&mut self.params, &grads)?;
        self.step += 1;
        Ok(())
    }

    pub fn evaluate(&self, eval: &EvalSet<'_>) -> Result<MetricsReport> {
        let _flush = FlushSubnormals::new();
        evaluate(&self.params, &eval.images, &eval.labels)
    }

    /// Trains until `config.steps` steps are complete, evaluating on `eval`
    /// every `eval_every` steps and once at the end.
    pub fn run(&mut self, data: &TrainData<'_>, eval: Option<&EvalSet<'_>>) -> Result<RunLog> {
        let mut log = RunLog::default();
        let every = self.config.eval_every;
        while self.step < self.config.steps {
            let rec = self.train_step(data)?;
            debug!(
                "step {} loss_x {:.5} loss_u {:.5} total {:.5}",
                rec.step, rec.loss_x, rec.loss_u, rec.total
            );
            log.losses.push(rec);
            if let Some(ev) = eval {
                if every > 0 && self.step.is_multiple_of(every) && self.step < self.config.steps {
                    let report = self.evaluate(ev)?;
                    info!(
                        "step {} mean foreground dice {:.3}",
                        self.step, report.foreground_mean
                    );
                    log.evals.push((self.step, report));
                }
            }
        }
        if let Some(ev) = eval {
            log.evals.push((self.step, self.evaluate(ev)?));
        }
        Ok(log)
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.params.entries.iter().map(|e| &e.tensor).collect()
    }
}
