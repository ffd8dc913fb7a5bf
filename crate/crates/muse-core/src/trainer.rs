//! The training loop: token-batched teacher forcing, gradient accumulation,
//! clipping, Adam with a warmup schedule, per-epoch checkpoints, and a
//! metrics log. Single-threaded by contract so identical seeds give
//! bit-identical loss trajectories.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::batch::{plan_token_batches, BatchPlan};
use crate::block::Dropout;
use crate::checkpoint::Checkpoint;
use crate::error::{MuseError, Result};
use crate::model::{self, ModelConfig, ModelParams, BOS, EOS};
use crate::optim::{adam_step, clip_global_norm, AdamState, GradAccumulator, ScheduleConfig};
use crate::params::ParamStore;
use crate::tensor::{Elem, Tape};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    /// Token budget per micro-batch.
    pub max_tokens: usize,
    /// Micro-batches accumulated per optimizer step.
    pub accum: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    /// Global-norm clip; 0 disables clipping.
    pub clip_norm: Elem,
    pub weight_decay: Elem,
    pub beta1: Elem,
    pub beta2: Elem,
    pub adam_eps: Elem,
    pub sort_by_length: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: ScheduleConfig::default(),
            max_tokens: 1024,
            accum: 1,
            epochs: 1,
            max_steps: 0,
            clip_norm: 1.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            sort_by_length: true,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: Elem,
    pub lr: Elem,
    pub tokens_per_sec: Elem,
}

/// Owns the model and optimizer state for one training run.
pub struct Trainer {
    pub store: ParamStore,
    pub params: ModelParams,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    adam: AdamState,
    rng: ChaCha12Rng,
    /// Framed pairs: source with EOS appended, target as BOS .. EOS.
    corpus: Vec<(Vec<usize>, Vec<usize>)>,
    plan: BatchPlan,
    cursor: usize,
    pub step: usize,
    pub epochs_done: usize,
    pub metrics: Vec<StepMetrics>,
}

/// Wrap raw token ids into model frames: `src ++ EOS`, `BOS ++ tgt ++ EOS`.
pub fn frame_pair(src: &[usize], tgt: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut s = Vec::with_capacity(src.len() + 1);
    s.extend_from_slice(src);
    s.push(EOS);
    let mut t = Vec::with_capacity(tgt.len() + 2);
    t.push(BOS);
    t.extend_from_slice(tgt);
    t.push(EOS);
    (s, t)
}

impl Trainer {
    /// `corpus` holds raw (unframed) id pairs.
    pub fn new(
        store: ParamStore,
        params: ModelParams,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        corpus: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.schedule.validate()?;
        if train_cfg.accum == 0 {
            return Err(MuseError::Config("accum must be at least 1".into()));
        }
        if corpus.is_empty() {
            return Err(MuseError::Usage("training corpus is empty".into()));
        }
        let framed: Vec<(Vec<usize>, Vec<usize>)> =
            corpus.iter().map(|(s, t)| frame_pair(s, t)).collect();
        for (s, t) in &framed {
            if s.len() > model_cfg.max_len || t.len() > model_cfg.max_len {
                return Err(MuseError::Config(format!(
                    "a framed sequence of length {} exceeds max_len {}",
                    s.len().max(t.len()),
                    model_cfg.max_len
                )));
            }
        }
        let lengths: Vec<usize> =
            framed.iter().map(|(s, t)| s.len().max(t.len())).collect();
        let plan = plan_token_batches(&lengths, train_cfg.max_tokens, train_cfg.sort_by_length)?;
        let mut adam = AdamState::new(&store);
        adam.beta1 = train_cfg.beta1;
        adam.beta2 = train_cfg.beta2;
        adam.eps = train_cfg.adam_eps;
        adam.weight_decay = train_cfg.weight_decay;
        let rng = ChaCha12Rng::seed_from_u64(train_cfg.seed);
        Ok(Trainer {
            store,
            params,
            model_cfg,
            train_cfg,
            adam,
            rng,
            corpus: framed,
            plan,
            cursor: 0,
            step: 0,
            epochs_done: 0,
            metrics: Vec::new(),
        })
    }

    fn next_micro_batch(&mut self) -> (Vec<(Vec<usize>, Vec<usize>)>, bool) {
        let batch = &self.plan.batches[self.cursor];
        let pairs: Vec<(Vec<usize>, Vec<usize>)> =
            batch.iter().map(|&i| self.corpus[i].clone()).collect();
        self.cursor += 1;
        let wrapped = self.cursor == self.plan.batches.len();
        if wrapped {
            self.cursor = 0;
        }
        (pairs, wrapped)
    }

    /// One optimizer step (accumulating `accum` micro-batches). Returns the
    /// metrics and whether an epoch boundary was crossed.
    pub fn step_once(&mut self) -> Result<(StepMetrics, bool)> {
        let started = Instant::now();
        let mut acc = GradAccumulator::new(&self.store);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        let mut epoch_end = false;

        for _ in 0..self.train_cfg.accum {
            let (pairs, wrapped) = self.next_micro_batch();
            epoch_end |= wrapped;
            let mut tape = Tape::new();
            let binding = self.store.bind(&mut tape);
            let mut dropout = if self.model_cfg.dropout > 0.0 {
                Dropout::On { rate: self.model_cfg.dropout, rng: &mut self.rng }
            } else {
                Dropout::Off
            };
            let step_ctx = self.step + 1;
            let (loss, batch_tokens) = model::forward_train(
                &mut tape,
                &binding,
                &self.params,
                &self.model_cfg,
                &pairs,
                &mut dropout,
            )
            .map_err(|e| match e {
                MuseError::Numeric(msg) => {
                    MuseError::Numeric(format!("{msg} (optimizer step {step_ctx})"))
                }
                other => other,
            })?;
            let loss_value = tape.data(loss)[0];
            if !loss_value.is_finite() {
                return Err(MuseError::Numeric(format!(
                    "non-finite loss at optimizer step {}",
                    self.step + 1
                )));
            }
            loss_sum += loss_value;
            tokens += batch_tokens;
            let grads = tape.backward(loss)?;
            self.store.absorb_grads(&binding, &grads);
            acc.add_from(&mut self.store);
        }

        acc.flush_mean_into(&mut self.store)?;
        if self.train_cfg.clip_norm > 0.0 {
            clip_global_norm(&mut self.store, self.train_cfg.clip_norm);
        }
        self.step += 1;
        let lr = self.train_cfg.schedule.lr_at(self.step);
        adam_step(&mut self.store, &mut self.adam, lr)?;
        self.store.zero_grads();

        let elapsed = started.elapsed().as_secs_f64() as Elem;
        let metrics = StepMetrics {
            step: self.step,
            loss: loss_sum / self.train_cfg.accum as Elem,
            lr,
            tokens_per_sec: if elapsed > 0.0 { tokens as Elem / elapsed } else { 0.0 },
        };
        self.metrics.push(metrics.clone());
        if epoch_end {
            self.epochs_done += 1;
        }
        Ok((metrics, epoch_end))
    }

    /// Train exactly `n` optimizer steps (unless the epoch/step limits hit).
    pub fn train_steps(&mut self, n: usize) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.done() {
                break;
            }
            let (m, _) = self.step_once()?;
            out.push(m);
        }
        Ok(out)
    }

    pub fn done(&self) -> bool {
        (self.train_cfg.max_steps > 0 && self.step >= self.train_cfg.max_steps)
            || self.epochs_done >= self.train_cfg.epochs
    }

    /// Run to completion, saving one checkpoint per epoch into `out_dir` and
    /// the metrics log next to them. Returns the checkpoint paths.
    pub fn run(&mut self, out_dir: &Path) -> Result<Vec<PathBuf>> {
        self.run_with_progress(out_dir, |_| {})
    }

    /// [`Trainer::run`] with a per-step observer.
    pub fn run_with_progress(
        &mut self,
        out_dir: &Path,
        mut progress: impl FnMut(&StepMetrics),
    ) -> Result<Vec<PathBuf>> {
        let ckpt_dir = out_dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)?;
        let mut saved = Vec::new();
        let fingerprint = self.model_cfg.fingerprint();
        let mut steps_at_last_save = 0;
        while !self.done() {
            let (metrics, epoch_end) = self.step_once()?;
            progress(&metrics);
            if epoch_end {
                let path = ckpt_dir.join(format!("epoch_{:04}.ckpt", self.epochs_done));
                Checkpoint::from_store(&self.store, self.step as u64, fingerprint.clone())
                    .save(&path)?;
                saved.push(path);
                steps_at_last_save = self.step;
            }
        }
        if self.step > steps_at_last_save {
            // the step cap fired mid-epoch; snapshot the partial epoch
            let path = ckpt_dir.join(format!("epoch_{:04}.ckpt", self.epochs_done + 1));
            Checkpoint::from_store(&self.store, self.step as u64, fingerprint).save(&path)?;
            saved.push(path);
        }
        self.write_metrics_csv(&out_dir.join("metrics.csv"))?;
        Ok(saved)
    }

    /// Metrics CSV with header `step,loss,lr,tokens_per_sec`.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,loss,lr,tokens_per_sec\n");
        for m in &self.metrics {
            out.push_str(&format!(
                "{},{:.8},{:.10},{:.1}\n",
                m.step, m.loss, m.lr, m.tokens_per_sec
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }
}
