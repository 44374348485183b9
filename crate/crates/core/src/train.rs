//! Training loop: batches -> encode -> select -> hierarchical loss and
//! gradients -> decoder projection -> Adam -> renormalization.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codes::{batchtopk_select, make_schedule, topk_rows, IndexSchedule, SparseCode};
use crate::dataio::{read_activations, BatchIter};
use crate::error::{Error, Result};
use crate::evalkit::{almost_dead_count, fvu};
use crate::hloss::{loss_fused_into, Grads};
use crate::linalg::{Matrix, Rng};
use crate::model::{save, CheckpointMeta, SaeParams};
use crate::optim::{project_decoder_grads, renormalize_decoder, AdamConfig, AdamState};
use crate::scalar::Scalar;

/// How latents are sparsified during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    TopK,
    BatchTopK,
    Hierarchical,
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationKind::TopK => "topk",
            ActivationKind::BatchTopK => "batchtopk",
            ActivationKind::Hierarchical => "hierarchical",
        })
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(ActivationKind::TopK),
            "batchtopk" => Ok(ActivationKind::BatchTopK),
            "hierarchical" => Ok(ActivationKind::Hierarchical),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub activation: ActivationKind,
    /// budget `K`: the largest supervised level and the selector's k
    pub k: usize,
    /// schedule stride for hierarchical training
    pub stride: usize,
    pub dict_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub decoder_norm: bool,
    /// rows reserved at the start of the data for held-out FVU
    pub holdout_rows: usize,
    pub log_every: u64,
    /// 0 disables intermediate checkpoints
    pub checkpoint_every: u64,
    pub freq_window: u64,
    pub dead_threshold: f64,
    pub data_path: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            activation: ActivationKind::Hierarchical,
            k: 128,
            stride: 1,
            dict_size: 65_536,
            lr: 0.0008,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            // recorded as published; 8192 was probably intended
            batch_size: 8096,
            steps: 10_000,
            init_seed: 0,
            data_seed: 0,
            decoder_norm: true,
            holdout_rows: 4096,
            log_every: 100,
            checkpoint_every: 0,
            freq_window: 100_000,
            dead_threshold: 1e-5,
            data_path: None,
            out: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 1 || self.k > self.dict_size {
            return bad(format!(
                "k = {} must be in [1, D = {}]",
                self.k, self.dict_size
            ));
        }
        if self.stride < 1 {
            return bad("stride must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1".into());
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)".into());
        }
        if self.freq_window < 1 {
            return bad("frequency window must be >= 1".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<IndexSchedule> {
        match self.activation {
            ActivationKind::Hierarchical => make_schedule(self.stride, self.k),
            _ => Ok(IndexSchedule::singleton(self.k)),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Fully resolved configuration as `key=value` lines.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or(String::new(), |p| p.display().to_string())
        };
        let schedule = self
            .schedule()
            .map_or_else(|e| e.to_string(), |s| s.to_string());
        vec![
            ("activation", self.activation.to_string()),
            ("k", self.k.to_string()),
            ("stride", self.stride.to_string()),
            ("schedule", schedule),
            ("dict-size", self.dict_size.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("batch", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.init_seed.to_string()),
            ("data-seed", self.data_seed.to_string()),
            ("decoder-norm", self.decoder_norm.to_string()),
            ("holdout", self.holdout_rows.to_string()),
            ("log-every", self.log_every.to_string()),
            ("checkpoint-every", self.checkpoint_every.to_string()),
            ("freq-window", self.freq_window.to_string()),
            ("dead-threshold", self.dead_threshold.to_string()),
            ("data", path(&self.data_path)),
            ("out", path(&self.out)),
            ("log", path(&self.log_path)),
        ]
    }

    /// Digest of the settings that affect the trained parameters.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_kv() {
            if matches!(k, "data" | "out" | "log" | "log-every" | "checkpoint-every") {
                continue;
            }
            h.update(format!("{k}={v}\n"));
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Windowed per-feature activation frequency.
///
/// Counters grow within a window of `window` tokens; when a window completes
/// its frequencies become the reported estimate and the counters restart.
/// Before the first window completes the running partial estimate is used.
#[derive(Debug, Clone)]
pub struct FreqTracker {
    window: u64,
    counts: Vec<u64>,
    tokens: u64,
    completed: Option<Vec<f64>>,
}

impl FreqTracker {
    pub fn new(dict_size: usize, window: u64) -> Self {
        Self {
            window: window.max(1),
            counts: vec![0; dict_size],
            tokens: 0,
            completed: None,
        }
    }

    pub fn track_indices(&mut self, indices: &[u32]) {
        for &i in indices {
            self.counts[i as usize] += 1;
        }
        self.tokens += 1;
        if self.tokens == self.window {
            let w = self.window as f64;
            self.completed = Some(self.counts.iter().map(|&c| c as f64 / w).collect());
            self.counts.iter_mut().for_each(|c| *c = 0);
            self.tokens = 0;
        }
    }

    pub fn track<T: Scalar>(&mut self, codes: &[SparseCode<T>]) {
        for c in codes {
            self.track_indices(&c.indices);
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        if let Some(f) = &self.completed {
            return f.clone();
        }
        if self.tokens == 0 {
            return vec![0.0; self.counts.len()];
        }
        let n = self.tokens as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn tokens_in_window(&self) -> u64 {
        self.tokens
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub per_level: Vec<(usize, f64)>,
    pub heldout_fvu: Option<f64>,
    pub live: usize,
    pub zero_decoder_rows: usize,
}

impl fmt::Display for TrainRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} loss={}", self.step, self.loss)?;
        if let Some(v) = self.heldout_fvu {
            write!(f, " fvu={v}")?;
        }
        write!(f, " live={}", self.live)?;
        if self.zero_decoder_rows > 0 {
            write!(f, " zero_rows={}", self.zero_decoder_rows)?;
        }
        if self.per_level.len() > 1 {
            for (j, v) in &self.per_level {
                write!(f, " level_{j}={v}")?;
            }
        }
        Ok(())
    }
}

impl TrainRecord {
    /// Parses a log line back into named metrics.
    pub fn parse_metrics(line: &str) -> Result<Vec<(String, f64)>> {
        line.split_whitespace()
            .map(|tok| {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| Error::Domain(format!("bad log token {tok:?}")))?;
                let v = v
                    .parse::<f64>()
                    .map_err(|e| Error::Domain(format!("bad value in {tok:?}: {e}")))?;
                Ok((k.to_string(), v))
            })
            .collect()
    }
}

pub struct TrainOutcome<T> {
    pub params: SaeParams<T>,
    pub meta: CheckpointMeta,
    pub log: Vec<TrainRecord>,
}

/// Owns the parameters and optimizer state for one run.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub params: SaeParams<T>,
    schedule: IndexSchedule,
    adam: AdamState<T>,
    grads: Grads<T>,
    freq: FreqTracker,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, hidden: usize) -> Result<Self> {
        config.validate()?;
        if hidden < 1 {
            return Err(Error::Config("hidden dimension must be >= 1".into()));
        }
        let schedule = config.schedule()?;
        let mut rng = Rng::new(config.init_seed);
        let params = SaeParams::init(config.dict_size, hidden, &mut rng);
        let adam = AdamState::for_params(config.adam(), &params);
        Ok(Self {
            grads: Grads::for_params(&params),
            freq: FreqTracker::new(config.dict_size, config.freq_window),
            schedule,
            adam,
            params,
            config,
            step: 0,
        })
    }

    pub fn schedule(&self) -> &IndexSchedule {
        &self.schedule
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn select(&self, preacts: &Matrix<T>) -> Result<Vec<SparseCode<T>>> {
        match self.config.activation {
            ActivationKind::BatchTopK => batchtopk_select(preacts, self.config.k),
            _ => topk_rows(preacts, self.config.k),
        }
    }

    /// One optimization step; returns the batch loss before the update.
    pub fn step(&mut self, batch: &Matrix<T>) -> Result<(crate::hloss::LossValue, usize)> {
        let pre = self.params.encode_batch(batch)?;
        let codes = self.select(&pre)?;
        let loss = loss_fused_into(
            &self.params,
            &codes,
            batch,
            &self.schedule,
            Some(&mut self.grads),
        )?;
        self.step += 1;
        if !loss.total.is_finite() || !self.grads.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("loss = {}, per level = {:?}", loss.total, loss.per_level),
            });
        }
        let mut zero_rows = 0;
        if self.config.decoder_norm {
            zero_rows = project_decoder_grads(&self.params, &mut self.grads);
        }
        self.adam.step(&mut self.params, &self.grads)?;
        if self.config.decoder_norm {
            zero_rows = zero_rows.max(renormalize_decoder(&mut self.params));
        }
        self.freq.track(&codes);
        Ok((loss, zero_rows))
    }

    pub fn live_features(&self) -> usize {
        self.config.dict_size
            - almost_dead_count(&self.freq.frequencies(), self.config.dead_threshold)
    }

    /// FVU on `rows` using the training selector at `K`.
    pub fn heldout_fvu(&self, rows: &Matrix<T>) -> Result<f64> {
        let codes = self.select(&self.params.encode_batch(rows)?)?;
        fvu(rows, &self.params.decode_batch(&codes))
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            dict_size: self.params.dict_size(),
            hidden: self.params.hidden(),
            k: self.config.k,
            activation: self.config.activation.to_string(),
            schedule: self.schedule.to_string(),
            config_digest: self.config.digest(),
            step: self.step,
            seed: self.config.init_seed,
        }
    }

    /// Runs the configured number of steps over `data`; the first
    /// `holdout_rows` rows are never trained on.
    pub fn fit(
        mut self,
        data: &Matrix<T>,
        mut sink: impl FnMut(&TrainRecord) -> Result<()>,
    ) -> Result<TrainOutcome<T>> {
        let cfg = self.config.clone();
        if data.cols() != self.params.hidden() {
            return Err(Error::Config(format!(
                "data dim {} does not match hidden {}",
                data.cols(),
                self.params.hidden()
            )));
        }
        if cfg.holdout_rows >= data.rows() {
            return Err(Error::Config(format!(
                "holdout of {} rows leaves nothing to train on ({} rows)",
                cfg.holdout_rows,
                data.rows()
            )));
        }
        let heldout = (cfg.holdout_rows >= 2).then(|| data.slice_rows(0, cfg.holdout_rows));
        let batches = BatchIter::over_range(
            data,
            cfg.holdout_rows,
            cfg.batch_size,
            cfg.data_seed,
            usize::MAX,
        )
        .map_err(|e| Error::Config(e.to_string()))?;

        let mut log = Vec::new();
        for batch in batches.take(cfg.steps as usize) {
            let (loss, zero_rows) = self.step(&batch.data)?;
            let s = self.step;
            let due =
                s == 1 || s == cfg.steps || (cfg.log_every > 0 && s.is_multiple_of(cfg.log_every));
            if due {
                let rec = TrainRecord {
                    step: s,
                    loss: loss.total,
                    per_level: loss.per_level,
                    heldout_fvu: heldout.as_ref().map(|h| self.heldout_fvu(h)).transpose()?,
                    live: self.live_features(),
                    zero_decoder_rows: zero_rows,
                };
                if zero_rows > 0 {
                    log::warn!("step {s}: {zero_rows} zero-norm decoder rows left unnormalized");
                }
                sink(&rec)?;
                log.push(rec);
            }
            if cfg.checkpoint_every > 0 && s.is_multiple_of(cfg.checkpoint_every) && s != cfg.steps
            {
                if let Some(out) = &cfg.out {
                    save(&self.params, &self.meta(), &step_path(out, s))?;
                }
            }
        }
        Ok(TrainOutcome {
            meta: self.meta(),
            params: self.params,
            log,
        })
    }
}

fn step_path(out: &Path, step: u64) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".step{step}"));
    out.with_file_name(name)
}

/// File-driven training: reads `data_path`, writes the log to `log_path` and
/// the final checkpoint to `out` when set.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome<f32>> {
    config.validate()?;
    let path = config
        .data_path
        .as_ref()
        .ok_or_else(|| Error::Config("no data path given".into()))?;
    let data: Matrix<f32> = read_activations(path)?;
    let trainer = Trainer::new(config.clone(), data.cols())?;
    let mut log_file = match &config.log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let outcome = trainer.fit(&data, |rec| {
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{rec}")?;
            f.flush()?;
        }
        Ok(())
    })?;
    if let Some(out) = &config.out {
        save(&outcome.params, &outcome.meta, out)?;
    }
    Ok(outcome)
}
