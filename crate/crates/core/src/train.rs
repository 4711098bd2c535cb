//! Adam optimizer, the training loop (full model and deterministic-autoencoder
//! ablation), checkpoint/resume plumbing, and the empirical latent prior.
//!
//! Determinism contract: every stochastic quantity of step `k` comes from a
//! generator seeded as `seed XOR domain XOR k`, so a resumed run replays the
//! exact step sequence of an uninterrupted one, and single-threaded runs are
//! bit-reproducible. With more workers the batch is split into fixed
//! contiguous chunks; batch-norm then normalizes per chunk (ghost batches),
//! so only `threads = 1` guarantees bit-identical results across machines.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::network::{Mode, Model, NetConfig};
use crate::ops::norm::BnBatchStats;
use crate::rng::{domains, Rng};
use crate::shapes::Dataset;
use crate::tape::Tape;
use crate::tensor::{num, Element, Tensor};
use crate::util::{chunk_ranges, parallel_map};

/// Exponential-moving-average factor for batch-norm running statistics.
const BN_MOMENTUM: f64 = 0.9;
/// Log-variance stored in the prior for the AE ablation: the sampling layer
/// is removed, so prior draws collapse to the stored means.
const AE_PRIOR_LOG_VAR: f32 = -30.0;

// ---------------------------------------------------------------------------
// Adam

/// Adam with bias correction (β1 = 0.9, β2 = 0.999, ε = 1e-8).
pub struct Adam<E> {
    pub learning_rate: f64,
    t: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(learning_rate: f64, sizes: &[usize]) -> Self {
        Adam {
            learning_rate,
            t: 0,
            m: sizes.iter().map(|&n| vec![E::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![E::zero(); n]).collect(),
        }
    }

    pub fn slots(&self) -> usize {
        self.m.len()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Starts one optimizer step (advances the bias-correction counter);
    /// follow with one [`Adam::apply`] per parameter.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one parameter in place. A non-finite gradient aborts with a
    /// diagnostic naming the parameter.
    pub fn apply(&mut self, slot: usize, name: &str, param: &mut [E], grad: &[E]) -> Result<()> {
        assert_eq!(param.len(), grad.len(), "{name}: gradient length mismatch");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in {name} at optimizer step {}",
                self.t
            )));
        }
        let beta1 = num::<E>(0.9);
        let beta2 = num::<E>(0.999);
        let eps = num::<E>(1e-8);
        let one = E::one();
        let bc1 = num::<E>(1.0 - 0.9f64.powi(self.t as i32));
        let bc2 = num::<E>(1.0 - 0.999f64.powi(self.t as i32));
        let lr = num::<E>(self.learning_rate);
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (one - beta1) * g;
            v[i] = beta2 * v[i] + (one - beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] = param[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }

    fn moments(&self, slot: usize) -> (&[E], &[E]) {
        (&self.m[slot], &self.v[slot])
    }

    fn restore(&mut self, t: u64, slot: usize, m: Vec<E>, v: Vec<E>) {
        self.t = t;
        self.m[slot] = m;
        self.v[slot] = v;
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Ablation {
    /// The conditional VAE: reparameterized sampling plus annealed KL term.
    Full,
    /// Deterministic autoencoder: z = posterior mean, no KL, no sampling.
    Ae,
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "ae" => Ok(Ablation::Ae),
            other => Err(Error::Config(format!("ablation must be full or ae, got {other:?}"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::Ae => "ae",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Linear KL weight warm-up: β ramps 0 → 1 over this many steps.
    pub kl_anneal_steps: u64,
    pub ablation: Ablation,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 4000,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_every: 1000,
            kl_anneal_steps: 1000,
            ablation: Ablation::Full,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 (batch norm), got {}",
                self.batch_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Empirical prior

/// Posterior statistics of every training pair, rows aligned with dataset
/// order; the test-time sampling distribution.
pub struct EmpiricalPrior {
    /// `[N, D]` posterior means.
    pub mu: Tensor<f32>,
    /// `[N, D]` posterior log-variances.
    pub log_var: Tensor<f32>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PriorMode {
    Empirical,
    Standard,
}

impl FromStr for PriorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(PriorMode::Empirical),
            "standard" => Ok(PriorMode::Standard),
            other => {
                Err(Error::Config(format!("prior must be empirical or standard, got {other:?}")))
            }
        }
    }
}

impl EmpiricalPrior {
    pub fn len(&self) -> usize {
        self.mu.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.dim(1)
    }
}

/// Draws one latent vector. Empirical mode picks a training row uniformly
/// and samples `N(mu_row, diag(exp(log_var_row)))`; standard mode ignores
/// the prior and samples `N(0, I)`.
pub fn sample_prior(
    prior: Option<&EmpiricalPrior>,
    latent_dim: usize,
    rng: &mut Rng,
    mode: PriorMode,
) -> Result<Vec<f32>> {
    match mode {
        PriorMode::Standard => Ok((0..latent_dim).map(|_| rng.normal() as f32).collect()),
        PriorMode::Empirical => {
            let prior = prior.filter(|p| !p.is_empty()).ok_or_else(|| Error::InvalidArgument {
                op: "sample_prior",
                detail: "empirical mode needs a non-empty prior (train first)".into(),
            })?;
            if prior.latent_dim() != latent_dim {
                return Err(Error::InvalidArgument {
                    op: "sample_prior",
                    detail: format!(
                        "prior has D={}, model expects D={latent_dim}",
                        prior.latent_dim()
                    ),
                });
            }
            let row = rng.below(prior.len());
            let d = latent_dim;
            let mu = &prior.mu.data()[row * d..(row + 1) * d];
            let lv = &prior.log_var.data()[row * d..(row + 1) * d];
            Ok((0..d)
                .map(|i| mu[i] + (0.5 * lv[i]).exp() * rng.normal() as f32)
                .collect())
        }
    }
}

/// One posterior-encoding pass over the whole training set.
pub fn compute_prior(model: &Model<f32>, dataset: &Dataset, threads: usize) -> Result<EmpiricalPrior> {
    let n = dataset.len();
    let d = model.latent_dim();
    let ranges = chunk_ranges(n, threads.max(1));
    let parts: Vec<Result<(Vec<f32>, Vec<f32>)>> = parallel_map(ranges.len(), threads, |ci| {
        let (lo, hi) = (ranges[ci].start, ranges[ci].end);
        let mut mu = Vec::with_capacity((hi - lo) * d);
        let mut lv = Vec::with_capacity((hi - lo) * d);
        let mut at = lo;
        while at < hi {
            let end = (at + 64).min(hi);
            let idx: Vec<usize> = (at..end).collect();
            let (a, b) = dataset.gather(&idx);
            let (m, l) = model.encode_stats(&a, &b)?;
            mu.extend_from_slice(m.data());
            lv.extend_from_slice(l.data());
            at = end;
        }
        Ok((mu, lv))
    });
    let mut mu = Vec::with_capacity(n * d);
    let mut lv = Vec::with_capacity(n * d);
    for part in parts {
        let (m, l) = part?;
        mu.extend_from_slice(&m);
        lv.extend_from_slice(&l);
    }
    Ok(EmpiricalPrior { mu: Tensor::new(vec![n, d], mu)?, log_var: Tensor::new(vec![n, d], lv)? })
}

// ---------------------------------------------------------------------------
// Checkpoint assembly

const STEP_RECORD: &str = "__train.step";
const ADAM_T_RECORD: &str = "__train.adam_t";

fn build_checkpoint(
    model: &Model<f32>,
    adam: &Adam<f32>,
    step: u64,
    prior: Option<&EmpiricalPrior>,
) -> Checkpoint {
    let mut records: Vec<(String, Tensor<f32>)> = model
        .params
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.tensor.clone()))
        .collect();
    records.push((STEP_RECORD.to_string(), Tensor::scalar(step as f32)));
    records.push((ADAM_T_RECORD.to_string(), Tensor::scalar(adam.step_count() as f32)));
    for (slot, entry) in model.params.entries().iter().filter(|e| e.kind.trainable()).enumerate() {
        let (m, v) = adam.moments(slot);
        let shape = entry.tensor.shape().to_vec();
        records.push((
            format!("__train.adam_m.{}", entry.name),
            Tensor::new(shape.clone(), m.to_vec()).expect("moment shape"),
        ));
        records.push((
            format!("__train.adam_v.{}", entry.name),
            Tensor::new(shape, v.to_vec()).expect("moment shape"),
        ));
    }
    let prior_records = match prior {
        Some(p) => vec![
            ("mu".to_string(), p.mu.clone()),
            ("log_var".to_string(), p.log_var.clone()),
        ],
        None => vec![],
    };
    Checkpoint { config: model.config.clone(), records, prior: prior_records }
}

/// Splits checkpoint records into the model and, when present, optimizer
/// state. Returns `(model, resume_step, adam_t, moments_by_name)`.
type MomentMap = BTreeMap<String, (Tensor<f32>, Tensor<f32>)>;

fn split_checkpoint(ck: Checkpoint) -> Result<(Model<f32>, Option<(u64, u64, MomentMap)>)> {
    let mut params = BTreeMap::new();
    let mut step = None;
    let mut adam_t = None;
    let mut m_records: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut v_records: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, tensor) in ck.records {
        if name == STEP_RECORD {
            step = Some(tensor.item() as u64);
        } else if name == ADAM_T_RECORD {
            adam_t = Some(tensor.item() as u64);
        } else if let Some(p) = name.strip_prefix("__train.adam_m.") {
            m_records.insert(p.to_string(), tensor);
        } else if let Some(p) = name.strip_prefix("__train.adam_v.") {
            v_records.insert(p.to_string(), tensor);
        } else if name.starts_with("__train.") {
            return Err(Error::Config(format!("unknown training record {name}")));
        } else {
            params.insert(name, tensor);
        }
    }
    let model = Model::from_tensors(ck.config, params)?;
    let state = match (step, adam_t) {
        (Some(s), Some(t)) => {
            let mut moments = BTreeMap::new();
            for (name, m) in m_records {
                let v = v_records.remove(&name).ok_or_else(|| {
                    Error::Config(format!("optimizer state for {name} is missing its variance"))
                })?;
                moments.insert(name, (m, v));
            }
            Some((s, t, moments))
        }
        _ => None,
    };
    Ok((model, state))
}

/// Reads the model (and prior, if present) back from a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model<f32>, Option<EmpiricalPrior>)> {
    let ck = Checkpoint::load(path)?;
    let prior = load_prior(&ck)?;
    let (model, _) = split_checkpoint(ck)?;
    Ok((model, prior))
}

fn load_prior(ck: &Checkpoint) -> Result<Option<EmpiricalPrior>> {
    if ck.prior.is_empty() {
        return Ok(None);
    }
    let mut mu = None;
    let mut log_var = None;
    for (name, tensor) in &ck.prior {
        match name.as_str() {
            "mu" => mu = Some(tensor.clone()),
            "log_var" => log_var = Some(tensor.clone()),
            other => return Err(Error::Config(format!("unknown prior record {other}"))),
        }
    }
    match (mu, log_var) {
        (Some(mu), Some(log_var)) if mu.shape() == log_var.shape() && mu.rank() == 2 => {
            Ok(Some(EmpiricalPrior { mu, log_var }))
        }
        _ => Err(Error::Config("prior section needs matching [N,D] mu and log_var".into())),
    }
}

// ---------------------------------------------------------------------------
// Training loop

/// One line of the JSONL training log. `recon` and `kl` are the two weighted
/// components that sum to `loss` (so `kl` reflects the annealing schedule;
/// it is exactly 0 in the AE ablation).
#[derive(Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub steps_run: u64,
    pub final_loss: f64,
    /// Path of the final checkpoint (model + optimizer state + prior).
    pub checkpoint_path: std::path::PathBuf,
}

struct ChunkOut {
    loss: f64,
    recon: f64,
    kl: f64,
    count: usize,
    grads: Vec<Option<Vec<f32>>>,
    updates: Vec<crate::network::BnUpdate<f32>>,
}

/// Merges per-chunk batch statistics (law of total variance) and applies the
/// momentum update to the model's running statistics.
fn update_running_stats(model: &mut Model<f32>, merged: BTreeMap<String, Vec<BnBatchStats<f32>>>) {
    for (bn_name, stats) in merged {
        let total: usize = stats.iter().map(|s| s.count).sum();
        if total < 2 {
            continue;
        }
        let channels = stats[0].mean.len();
        let mut mean = vec![0.0f64; channels];
        let mut e_x2 = vec![0.0f64; channels];
        for s in &stats {
            let w = s.count as f64 / total as f64;
            for c in 0..channels {
                let m = s.mean[c] as f64;
                // Convert the chunk's unbiased variance back to E[x^2].
                let biased = s.var[c] as f64 * (s.count - 1) as f64 / s.count as f64;
                mean[c] += w * m;
                e_x2[c] += w * (biased + m * m);
            }
        }
        let unbias = total as f64 / (total - 1) as f64;
        let rm = model
            .params
            .get_mut(&format!("{bn_name}.running_mean"))
            .expect("running mean exists");
        for c in 0..channels {
            let old = rm.data()[c] as f64;
            rm.data_mut()[c] = (BN_MOMENTUM * old + (1.0 - BN_MOMENTUM) * mean[c]) as f32;
        }
        let rv = model
            .params
            .get_mut(&format!("{bn_name}.running_var"))
            .expect("running var exists");
        for c in 0..channels {
            let var = (e_x2[c] - mean[c] * mean[c]).max(0.0) * unbias;
            let old = rv.data()[c] as f64;
            rv.data_mut()[c] = (BN_MOMENTUM * old + (1.0 - BN_MOMENTUM) * var) as f32;
        }
    }
}

/// Runs the optimization loop and writes `checkpoint.vdck` (final, with
/// empirical prior), periodic `checkpoint_step*.vdck` files, and `log.jsonl`
/// under `out_dir`. `resume` continues from a previous final or periodic
/// checkpoint; the step counter and optimizer state carry over, and the
/// remaining steps replay exactly as an uninterrupted run would.
pub fn train(
    dataset: &Dataset,
    net_config: NetConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    net_config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train",
            detail: "dataset has no pairs".into(),
        });
    }
    if dataset.resolution != net_config.input_resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match network input_resolution {}",
            dataset.resolution, net_config.input_resolution
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut model: Model<f32>;
    let trainable_sizes: Vec<usize>;
    let mut adam: Adam<f32>;
    let mut start_step: u64 = 0;
    match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (m, state) = split_checkpoint(ck)?;
            model = m;
            if model.config != net_config {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different network config".into(),
                ));
            }
            trainable_sizes = model.trainable_tensors().iter().map(|t| t.numel()).collect();
            adam = Adam::new(cfg.learning_rate, &trainable_sizes);
            let (step, adam_t, mut moments) = state.ok_or_else(|| {
                Error::Config(format!("{} has no optimizer state to resume from", path.display()))
            })?;
            start_step = step;
            for (slot, entry) in
                model.params.entries().iter().filter(|e| e.kind.trainable()).enumerate()
            {
                let (m, v) = moments.remove(&entry.name).ok_or_else(|| {
                    Error::Config(format!("optimizer state missing for {}", entry.name))
                })?;
                adam.restore(adam_t, slot, m.into_data(), v.into_data());
            }
        }
        None => {
            model = Model::init(net_config.clone(), cfg.seed ^ domains::INIT)?;
            trainable_sizes = model.trainable_tensors().iter().map(|t| t.numel()).collect();
            adam = Adam::new(cfg.learning_rate, &trainable_sizes);
        }
    }
    if start_step >= cfg.steps {
        return Err(Error::Config(format!(
            "nothing to do: resumed at step {start_step}, target is {} steps",
            cfg.steps
        )));
    }

    let log_path = out_dir.join("log.jsonl");
    let log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    let b = cfg.batch_size;
    let d = model.latent_dim();
    let n_trainable = trainable_sizes.len();
    let mut final_loss = f64::NAN;

    for step in start_step..cfg.steps {
        let t0 = Instant::now();

        // Per-step derived generators: the batch and the latent noise are
        // functions of (seed, step) alone.
        let mut batch_rng = Rng::new(cfg.seed ^ domains::BATCH ^ step);
        let indices: Vec<usize> = (0..b).map(|_| batch_rng.below(dataset.len())).collect();
        let noise: Vec<Vec<f32>> = match cfg.ablation {
            Ablation::Full => {
                let mut noise_rng = Rng::new(cfg.seed ^ domains::NOISE ^ step);
                (0..net_config.mc_samples)
                    .map(|_| {
                        let mut eps = vec![0.0f32; b * d];
                        noise_rng.fill_normal(&mut eps);
                        eps
                    })
                    .collect()
            }
            Ablation::Ae => vec![],
        };

        let beta = match cfg.ablation {
            Ablation::Ae => 0.0,
            Ablation::Full if cfg.kl_anneal_steps == 0 => 1.0,
            Ablation::Full => (step as f64 / cfg.kl_anneal_steps as f64).min(1.0),
        };

        let ranges = chunk_ranges(b, cfg.threads);
        let model_ref = &model;
        let dataset_ref = dataset;
        let indices_ref = &indices;
        let noise_ref = &noise;
        let chunk_results: Vec<Result<ChunkOut>> =
            parallel_map(ranges.len(), cfg.threads, |ci| {
                let (lo, hi) = (ranges[ci].start, ranges[ci].end);
                let nc = hi - lo;
                let (imgs, nexts) = dataset_ref.gather(&indices_ref[lo..hi]);
                let diff = crate::network::pointwise_sub(&nexts, &imgs)?;
                let chunk_noise: Vec<Vec<f32>> = noise_ref
                    .iter()
                    .map(|eps| eps[lo * d..hi * d].to_vec())
                    .collect();
                let mut tape = Tape::new();
                tape.check_finite = true;
                let bound = model_ref.bind(&mut tape, true);
                let mut updates = Vec::new();
                let graph = model_ref.build_graph(
                    &mut tape,
                    &bound,
                    &imgs,
                    &diff,
                    if chunk_noise.is_empty() { None } else { Some(&chunk_noise) },
                    Mode::Train,
                    &mut updates,
                )?;
                let sigma2 = net_config.sigma * net_config.sigma;
                let recon = tape.scale(graph.recon, 1.0 / sigma2)?;
                let loss = if beta > 0.0 {
                    let klm = tape.mean_all(graph.kl_rows)?;
                    let klw = tape.scale(klm, beta)?;
                    tape.add(recon, klw)?
                } else {
                    recon
                };
                tape.backward(loss)?;
                let loss_v = tape.val(loss).item() as f64;
                let recon_v = tape.val(recon).item() as f64;
                let grads = (0..n_trainable)
                    .map(|i| tape.take_grad(crate::tape::TensorId(i)))
                    .collect();
                Ok(ChunkOut {
                    loss: loss_v,
                    recon: recon_v,
                    kl: loss_v - recon_v,
                    count: nc,
                    grads,
                    updates,
                })
            });

        let mut grad_acc: Vec<Vec<f32>> =
            trainable_sizes.iter().map(|&n| vec![0.0f32; n]).collect();
        let mut bn_stats: BTreeMap<String, Vec<BnBatchStats<f32>>> = BTreeMap::new();
        let (mut loss_v, mut recon_v, mut kl_v) = (0.0f64, 0.0f64, 0.0f64);
        for res in chunk_results {
            let chunk = res.map_err(|e| match e {
                Error::NonFinite { op } => Error::Numerical(format!(
                    "training diverged at step {step}: non-finite values in {op} \
                     (last periodic checkpoint is intact)"
                )),
                other => other,
            })?;
            let w = chunk.count as f64 / b as f64;
            loss_v += w * chunk.loss;
            recon_v += w * chunk.recon;
            kl_v += w * chunk.kl;
            for (acc, g) in grad_acc.iter_mut().zip(chunk.grads) {
                if let Some(g) = g {
                    let wf = w as f32;
                    for (a, gv) in acc.iter_mut().zip(g) {
                        *a += wf * gv;
                    }
                }
            }
            for u in chunk.updates {
                bn_stats.entry(u.name).or_default().push(u.stats);
            }
        }
        if !loss_v.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at step {step}: loss is not finite \
                 (last periodic checkpoint is intact)"
            )));
        }
        final_loss = loss_v;

        update_running_stats(&mut model, bn_stats);
        adam.begin_step();
        let mut slot = 0;
        for i in 0..model.params.entries().len() {
            if !model.params.entries()[i].kind.trainable() {
                continue;
            }
            let name = model.params.entries()[i].name.clone();
            let tensor = model
                .params
                .get_mut(&name)
                .expect("entry exists");
            adam.apply(slot, &name, tensor.data_mut(), &grad_acc[slot])?;
            slot += 1;
        }

        let line = StepLog {
            step,
            loss: loss_v,
            recon: recon_v,
            kl: kl_v,
            lr: cfg.learning_rate,
            wallclock_ms: t0.elapsed().as_millis() as u64,
        };
        serde_json::to_writer(&mut log, &line)
            .map_err(|e| Error::Numerical(format!("log serialization failed: {e}")))?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;

        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let path = out_dir.join(format!("checkpoint_step{done}.vdck"));
            build_checkpoint(&model, &adam, done, None).save(&path)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let mut prior = compute_prior(&model, dataset, cfg.threads)?;
    if cfg.ablation == Ablation::Ae {
        // The ablation removes the sampling layer; its prior rows are the
        // bare posterior means.
        for v in prior.log_var.data_mut() {
            *v = AE_PRIOR_LOG_VAR;
        }
    }
    let checkpoint_path = out_dir.join("checkpoint.vdck");
    build_checkpoint(&model, &adam, cfg.steps, Some(&prior)).save(&checkpoint_path)?;

    Ok(TrainResult { steps_run: cfg.steps - start_step, final_loss, checkpoint_path })
}
