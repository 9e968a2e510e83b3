//! The training loop: per-step batch doubling with augmented twins, the four
//! loss terms, head-routed backprop, Adam updates, a step learning-rate
//! schedule, and checkpointing.
//!
//! One step: augment each sample, concatenate `[x, x~]` along the batch axis,
//! run one train-mode forward over the doubled batch, evaluate the similarity
//! pairing loss on (g, g~) with the batch labels, the norm penalty on all
//! projection rows, the quantization loss on all pre-activations, and the
//! classification loss on all logits with duplicated labels, then apply one
//! optimizer step. Determinism is total: shuffles key on (seed, epoch) and
//! augmentations on (seed, iteration), so a run replays bit-for-bit from its
//! config.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentationPolicy};
use crate::datapipe::{batch_iterator, Dataset, LabeledBatch};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, reg_loss, sp_loss, squared_quantization_loss, total_loss, LossWeights,
};
use crate::netcore::{backward, forward_train, init_model, HeadGradients, ModelConfig, ModelParams};
use crate::rng::{derive_seed, SALT_TRAIN_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Which loss terms contribute gradients. All four values are still computed
/// and recorded; a disabled term simply does not train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermMask {
    pub sp: bool,
    pub reg: bool,
    pub sq: bool,
    pub cls: bool,
}

impl Default for TermMask {
    fn default() -> Self {
        TermMask {
            sp: true,
            reg: true,
            sq: true,
            cls: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub adam: AdamParams,
    pub terms: TermMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            learning_rate: 0.001,
            lr_decay: 0.9,
            lr_decay_every: 50,
            weights: LossWeights::default(),
            seed: 0,
            adam: AdamParams::default(),
            terms: TermMask::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(
                "lr_decay must lie in (0, 1]".into(),
            ));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::InvalidArgument(
                "lr_decay_every must be at least 1".into(),
            ));
        }
        self.weights.validate()
    }
}

/// Learning rate at a given epoch: gamma * decay^floor(epoch / every).
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    config.learning_rate * config.lr_decay.powi((epoch / config.lr_decay_every) as i32)
}

/// One row of the persisted loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub sp: f64,
    pub reg: f64,
    pub sq: f64,
    pub cls: f64,
    pub total: f64,
}

/// First and second Adam moments, flat slices aligned with
/// [`ModelParams::trainable`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.trainable().iter().map(|(_, _, s)| s.len()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(model_config: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_model(model_config, config.seed)?;
        let adam = AdamState::new(&params);
        Ok(TrainState {
            config,
            params,
            adam,
            epoch: 0,
            iteration: 0,
            history: Vec::new(),
        })
    }
}

fn check_finite(term: &'static str, value: f64, iteration: u64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { term, iteration });
    }
    Ok(value)
}

/// Run one optimizer step on a batch. `state.epoch` selects the learning
/// rate; the augmentation draw keys on (seed, iteration).
pub fn train_step(
    state: &mut TrainState,
    batch: &LabeledBatch,
    policy: &AugmentationPolicy,
) -> Result<()> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let cfg = state.config;
    let step_seed = derive_seed(cfg.seed, SALT_TRAIN_STEP + state.iteration);
    let augmented = augment_batch(policy, batch, step_seed)?;

    // [x, x~]_B: originals first, twins second
    let mut images = Vec::with_capacity(2 * n);
    images.extend(batch.images.iter().cloned());
    images.extend(augmented.images.iter().cloned());
    let mut labels2 = Vec::with_capacity(2 * n);
    labels2.extend(batch.labels.iter().copied());
    labels2.extend(batch.labels.iter().copied());

    let (out, cache) = forward_train(&mut state.params, &images)?;

    let g_orig = out.g.slice(s![..n, ..]);
    let g_aug = out.g.slice(s![n.., ..]);
    let (l_sp, d_g_orig, d_g_aug) = sp_loss(g_orig, g_aug, &batch.labels)?;
    let (l_reg, d_g_reg) = reg_loss(out.g.view());
    let (l_sq, d_q) = squared_quantization_loss(out.q.view());
    let (l_cls, d_logits) = classification_loss(out.logits.view(), &labels2)?;

    let it = state.iteration;
    check_finite("sp", l_sp, it)?;
    check_finite("reg", l_reg, it)?;
    check_finite("sq", l_sq, it)?;
    check_finite("cls", l_cls, it)?;

    let mut d_g: Array2<f64> = Array2::zeros(out.g.dim());
    if cfg.terms.sp {
        d_g.slice_mut(s![..n, ..]).zip_mut_with(&d_g_orig, |a, &b| *a += b);
        d_g.slice_mut(s![n.., ..]).zip_mut_with(&d_g_aug, |a, &b| *a += b);
    }
    if cfg.terms.reg {
        d_g.zip_mut_with(&d_g_reg, |a, &b| *a += cfg.weights.lambda1 * b);
    }
    let heads = HeadGradients {
        d_g: Some(d_g),
        d_q: cfg.terms.sq.then(|| d_q.mapv(|v| cfg.weights.lambda2 * v)),
        d_h: None,
        d_logits: cfg.terms.cls.then_some(d_logits),
    };

    let grads = backward(&state.params, &cache, &heads)?;

    // Adam with bias correction
    let lr = lr_at(&cfg, state.epoch);
    state.adam.t += 1;
    let t = state.adam.t as i32;
    let (b1, b2, eps) = (cfg.adam.beta1, cfg.adam.beta2, cfg.adam.epsilon);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let flat_grads = grads.flat();
    let mut tensors = state.params.trainable_mut();
    debug_assert_eq!(flat_grads.len(), tensors.len());
    for (k, (_, data)) in tensors.iter_mut().enumerate() {
        let g = flat_grads[k];
        let m = &mut state.adam.m[k];
        let v = &mut state.adam.v[k];
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    let mask = cfg.terms;
    let effective = total_loss(
        if mask.sp { l_sp } else { 0.0 },
        if mask.reg { l_reg } else { 0.0 },
        if mask.sq { l_sq } else { 0.0 },
        if mask.cls { l_cls } else { 0.0 },
        &cfg.weights,
    );
    state.history.push(LossRecord {
        iteration: state.iteration,
        epoch: state.epoch,
        lr,
        sp: l_sp,
        reg: l_reg,
        sq: l_sq,
        cls: l_cls,
        total: effective,
    });
    state.iteration += 1;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Where to write checkpoints and the loss history; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint every this many epochs (0 = final checkpoint only).
    pub checkpoint_every: usize,
    /// Print one progress line per epoch.
    pub verbose: bool,
}

/// Write the loss history as CSV with one row per iteration.
pub fn write_loss_history(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,epoch,lr,L_SP,L_reg,L_sQ,L_cls,L_T\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration, r.epoch, r.lr, r.sp, r.reg, r.sq, r.cls, r.total
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Train a fresh model on a dataset for the configured number of epochs,
/// checkpointing along the way.
pub fn fit(
    model_config: &ModelConfig,
    config: TrainConfig,
    dataset: &Dataset,
    policy: &AugmentationPolicy,
    opts: &FitOptions,
) -> Result<TrainState> {
    config.validate()?;
    policy.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if dataset.identity_count() < 2 {
        return Err(Error::InvalidArgument(
            "training needs at least 2 identities".into(),
        ));
    }
    if config.batch_size > dataset.len() {
        return Err(Error::BatchTooLarge {
            batch: config.batch_size,
            len: dataset.len(),
        });
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut state = TrainState::new(model_config, config)?;
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let mut sums = [0.0f64; 5];
        let mut steps = 0usize;
        for batch in batch_iterator(dataset, config.batch_size, config.seed, epoch)? {
            train_step(&mut state, &batch, policy)?;
            let rec = state.history.last().unwrap();
            sums[0] += rec.sp;
            sums[1] += rec.reg;
            sums[2] += rec.sq;
            sums[3] += rec.cls;
            sums[4] += rec.total;
            steps += 1;
        }
        state.epoch = epoch + 1;
        if opts.verbose && steps > 0 {
            let k = steps as f64;
            println!(
                "epoch {:>4}/{} lr {:.6} L_SP {:.4} L_reg {:.4} L_sQ {:.4} L_cls {:.4} L_T {:.4}",
                epoch + 1,
                config.epochs,
                lr_at(&config, epoch),
                sums[0] / k,
                sums[1] / k,
                sums[2] / k,
                sums[3] / k,
                sums[4] / k
            );
        }
        if let Some(dir) = &opts.out_dir {
            if opts.checkpoint_every > 0 && (epoch + 1) % opts.checkpoint_every == 0 {
                save_checkpoint(&state, &dir.join(format!("checkpoint-e{:04}.fhc", epoch + 1)))?;
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&state, &dir.join("checkpoint-final.fhc"))?;
        write_loss_history(&state.history, &dir.join("loss_history.csv"))?;
    }
    Ok(state)
}
