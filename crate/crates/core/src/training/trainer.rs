use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loss::{distribution_loss, instance_loss, one_hot, DistTerm, PseudoBatch};
use super::model::{argmax, EncoderModel, ModelDims};
use crate::augment::{
    draw_noise, mixup_var, resample_count, resample_var, sample_gamma, sample_pairs, soft_label, universum_mix_var,
    Universum,
};
use crate::autodiff::{AdamState, Tape, Tensor, Var};
use crate::data::{DomainDataset, SplitPlan};
use crate::error::{Error, Result};
use crate::kernel::{median_heuristic, KernelConfig};
use crate::rng::TrainStreams;
use crate::stats::{aggregate_by_cell, per_instance_stats, StatsBank};

/// Labelled instances; `domains` holds source indices `0..n_sources`.
#[derive(Clone, Debug, PartialEq)]
pub struct Instances {
    pub dim: usize,
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Instances {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Every instance of one dataset domain, tagged with source index `tag`.
    pub fn from_domain(ds: &DomainDataset, id: usize, tag: usize) -> Result<Self> {
        let d = ds.domain(id)?;
        Ok(Instances { dim: ds.input_dim, x: d.x.clone(), labels: d.labels.clone(), domains: vec![tag; d.len()] })
    }

    fn push_from(&mut self, ds: &DomainDataset, id: usize, idx: &[usize], tag: usize) -> Result<()> {
        let d = ds.domain(id)?;
        for &i in idx {
            self.x.extend_from_slice(d.row(i, ds.input_dim));
            self.labels.push(d.labels[i]);
            self.domains.push(tag);
        }
        Ok(())
    }
}

/// Training and validation instances of the source domains of a split.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub n_classes: usize,
    pub n_sources: usize,
    pub train: Instances,
    pub val: Instances,
    /// Training-instance indices per bank slot `source * n_classes + class`.
    cells: Vec<Vec<usize>>,
}

impl TrainData {
    pub fn from_split(ds: &DomainDataset, plan: &SplitPlan) -> Result<Self> {
        ds.validate()?;
        let empty = || Instances { dim: ds.input_dim, x: Vec::new(), labels: Vec::new(), domains: Vec::new() };
        let (mut train, mut val) = (empty(), empty());
        for (tag, s) in plan.sources.iter().enumerate() {
            train.push_from(ds, s.domain, &s.train, tag)?;
            val.push_from(ds, s.domain, &s.val, tag)?;
        }
        Self::new(ds.n_classes, plan.sources.len(), train, val)
    }

    pub fn new(n_classes: usize, n_sources: usize, train: Instances, val: Instances) -> Result<Self> {
        if n_sources < 2 {
            return Err(Error::Dataset(format!("need at least two source domains, have {n_sources}")));
        }
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut cells = vec![Vec::new(); n_sources * n_classes];
        for (i, (&k, &d)) in train.labels.iter().zip(&train.domains).enumerate() {
            if k >= n_classes || d >= n_sources {
                return Err(Error::Dataset(format!(
                    "instance {i} has cell ({d}, {k}) outside {n_sources}x{n_classes}"
                )));
            }
            cells[d * n_classes + k].push(i);
        }
        Ok(TrainData { n_classes, n_sources, train, val, cells })
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.train.len().div_ceil(batch_size)
    }

    /// A batch with equal counts per non-empty (domain, class) cell, drawn
    /// with replacement; the remainder goes one extra draw per cell in a
    /// rotation that advances every step.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, step: usize, rng: &mut R) -> Vec<usize> {
        let live: Vec<&Vec<usize>> = self.cells.iter().filter(|c| !c.is_empty()).collect();
        let n = live.len();
        let (base, extra) = (batch_size / n, batch_size % n);
        let start = (step * extra) % n;
        let mut out = Vec::with_capacity(batch_size);
        for (j, members) in live.iter().enumerate() {
            let bonus = usize::from((j + n - start) % n < extra);
            for _ in 0..base + bonus {
                out.push(members[rng.random_range(0..members.len())]);
            }
        }
        out
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub l_ins: f64,
    pub l_dis: f64,
    pub l_total: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Wall time of the step; excluded from equality-sensitive outputs.
    pub wall_ms: f64,
}

/// Everything needed to resume or reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: EncoderModel,
    pub bank: StatsBank,
    /// `None` until the bandwidths are frozen.
    pub bandwidths: Option<KernelConfig>,
    pub adam: AdamState,
    pub streams: TrainStreams,
    /// Completed training steps.
    pub step: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    trainer: Trainer,
}

const CHECKPOINT_FORMAT: &str = "con2em-checkpoint";

/// Cell statistics fed to the distribution terms and the resampler.
struct Generated {
    labels: Vec<usize>,
    mu: Var,
    sigma: Var,
}

impl Trainer {
    pub fn new(config: TrainConfig, input_dim: usize, n_classes: usize, n_sources: usize) -> Result<Self> {
        config.validate()?;
        let dims = ModelDims {
            input_dim,
            hidden_dim: config.hidden_dim,
            latent_dim: config.latent_dim,
            stats_dim: config.stats_dim,
            n_classes,
            n_sources,
        };
        Ok(Trainer {
            model: EncoderModel::init(dims, config.seed)?,
            bank: StatsBank::new(n_sources, n_classes, config.stats_dim, config.rho)?,
            bandwidths: None,
            adam: AdamState::new(config.lr),
            streams: TrainStreams::new(config.seed),
            step: 0,
            config,
        })
    }

    pub fn for_data(config: TrainConfig, data: &TrainData) -> Result<Self> {
        Self::new(config, data.train.dim, data.n_classes, data.n_sources)
    }

    /// Runs one iteration on a freshly sampled batch.
    pub fn train_step(&mut self, data: &TrainData) -> Result<TrainRecord> {
        let started = Instant::now();
        let cfg = self.config.clone();
        let idx = data.sample_batch(cfg.batch_size, self.step, &mut self.streams.batch);
        let b = idx.len();
        let dim = data.train.dim;
        let n_classes = data.n_classes;
        let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
        let domains: Vec<usize> = idx.iter().map(|&i| data.train.domains[i]).collect();
        let mut x: Vec<f64> = idx.iter().flat_map(|&i| data.train.row(i).iter().copied()).collect();
        let mut targets = one_hot(&labels, n_classes)?;
        if cfg.input_mixup {
            (x, targets) = self.input_mixup(&x, &labels, dim, n_classes)?;
        }

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let xv = tape.constant(Tensor::matrix(b, dim, x)?);
        let z = bound.encode(&mut tape, xv)?;
        let logits = bound.classify(&mut tape, z)?;
        let train_acc = accuracy(tape.value(logits), &labels);

        let mut l_dis: Option<Var> = None;
        let mut pseudo: Option<(Var, Vec<usize>)> = None;
        if cfg.uses_stats() {
            let (mu, sigma) = per_instance_stats(&mut tape, z, &bound.heads)?;
            let fresh = aggregate_by_cell(&mut tape, mu, sigma, &labels, &domains)?;
            self.bank.momentum_update(&fresh.to_gaussians(&tape))?;
            self.maybe_freeze_bandwidths(data)?;

            let generated = self.source_cells(&mut tape, &fresh.cells, fresh.mu, fresh.sigma)?;
            let universum = self.universum_of(&tape, &generated);
            let (aug_mu, aug_sigma) =
                universum_mix_var(&mut tape, &universum, generated.mu, generated.sigma, cfg.lambda_mix)?;

            let dist_active = cfg.use_dist_loss && cfg.beta > 0.0 && self.bandwidths.is_some();
            if dist_active {
                let kernel = self.bandwidths.clone().expect("checked above");
                let observed_labels: Vec<usize> = fresh.cells.iter().map(|&(_, k)| k).collect();
                let observed =
                    DistTerm { mu: fresh.mu, sigma: fresh.sigma, targets: one_hot(&observed_labels, n_classes)? };
                let universum_term =
                    DistTerm { mu: aug_mu, sigma: aug_sigma, targets: one_hot(&generated.labels, n_classes)? };
                let mixup_term =
                    if cfg.use_dist_mixup { Some(self.mixup_term(&mut tape, &generated, n_classes)?) } else { None };
                l_dis = Some(distribution_loss(
                    &mut tape,
                    &observed,
                    &universum_term,
                    mixup_term.as_ref(),
                    &self.bank,
                    &kernel,
                    &bound.projection,
                )?);
            }

            if cfg.use_resample {
                let m = resample_count(cfg.batch_size, self.bank.n_cells());
                let rows = generated.labels.len();
                let noise = draw_noise(&mut self.streams.resample, rows * m, cfg.stats_dim);
                let samples = resample_var(&mut tape, aug_mu, aug_sigma, m, &noise)?;
                let plogits = bound.classify_pseudo(&mut tape, samples)?;
                let plabels = generated.labels.iter().flat_map(|&k| std::iter::repeat_n(k, m)).collect();
                pseudo = Some((plogits, plabels));
            }
        }

        let pseudo_batch = pseudo.as_ref().map(|(l, y)| PseudoBatch { logits: *l, labels: y });
        let l_ins = instance_loss(&mut tape, logits, &targets, pseudo_batch)?;
        let total = match l_dis {
            Some(d) => {
                let weighted = tape.scale(d, cfg.beta);
                tape.add(l_ins, weighted)?
            }
            None => l_ins,
        };
        tape.backward(total)?;

        self.model.zero_grads();
        self.model.collect_grads(&tape, &bound)?;
        let mut params = self.model.params_mut();
        if params.iter().any(|p| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
            return Err(Error::Validation(format!("non-finite gradient at step {}", self.step)));
        }
        self.adam.step_tensors(&mut params)?;
        self.model.zero_grads();
        self.step += 1;

        Ok(TrainRecord {
            iter: self.step,
            l_ins: tape.value(l_ins).item(),
            l_dis: l_dis.map_or(0.0, |d| tape.value(d).item()),
            l_total: tape.value(total).item(),
            train_acc,
            val_acc: None,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn input_mixup(&mut self, x: &[f64], labels: &[usize], dim: usize, n_classes: usize) -> Result<(Vec<f64>, Tensor)> {
        let b = labels.len();
        let mut partner: Vec<usize> = (0..b).collect();
        partner.shuffle(&mut self.streams.input_mixup);
        let mut out = Vec::with_capacity(x.len());
        let mut soft = Vec::with_capacity(b * n_classes);
        for (i, &j) in partner.iter().enumerate() {
            let g = sample_gamma(&mut self.streams.input_mixup, self.config.alpha)?;
            out.extend((0..dim).map(|c| g * x[i * dim + c] + (1.0 - g) * x[j * dim + c]));
            soft.extend(soft_label(labels[i], labels[j], g, n_classes));
        }
        Ok((out, Tensor::matrix(b, n_classes, soft)?))
    }

    fn maybe_freeze_bandwidths(&mut self, data: &TrainData) -> Result<()> {
        if self.bandwidths.is_some() || self.bank.n_initialized() < 2 {
            return Ok(());
        }
        let epoch_done = self.step + 1 >= data.steps_per_epoch(self.config.batch_size);
        if !self.config.warmup || (epoch_done && self.bank.is_full()) {
            self.bandwidths = Some(KernelConfig::ladder(median_heuristic(&self.bank)?)?);
        }
        Ok(())
    }

    /// One row per bank slot that is either present in the batch (fresh,
    /// differentiable) or already initialized in the bank (constant), in slot
    /// order.
    fn source_cells(&self, tape: &mut Tape, present: &[(usize, usize)], mu: Var, sigma: Var) -> Result<Generated> {
        let n_classes = self.bank.n_classes();
        let slots: Vec<usize> = present.iter().map(|&(d, k)| self.bank.slot(d, k)).collect();
        let mut rows: Vec<(usize, Option<usize>)> = Vec::new();
        for s in 0..self.bank.n_cells() {
            match slots.iter().position(|&p| p == s) {
                Some(j) => rows.push((s, Some(j))),
                None if self.bank.slots()[s].is_some() => rows.push((s, None)),
                None => {}
            }
        }
        let labels = rows.iter().map(|&(s, _)| s % n_classes).collect();
        if rows.len() == present.len() {
            return Ok(Generated { labels, mu, sigma });
        }
        let (r, f, dim) = (rows.len(), present.len(), self.bank.stats_dim());
        let mut select = vec![0.0; r * f];
        let (mut fixed_mu, mut fixed_sigma) = (vec![0.0; r * dim], vec![0.0; r * dim]);
        for (i, &(s, fresh)) in rows.iter().enumerate() {
            match fresh {
                Some(j) => select[i * f + j] = 1.0,
                None => {
                    let g = self.bank.slots()[s].as_ref().expect("initialized");
                    fixed_mu[i * dim..(i + 1) * dim].copy_from_slice(&g.mu);
                    fixed_sigma[i * dim..(i + 1) * dim].copy_from_slice(&g.sigma);
                }
            }
        }
        let select = tape.constant(Tensor::matrix(r, f, select)?);
        let mut out = [mu, sigma];
        for (v, fixed) in out.iter_mut().zip([fixed_mu, fixed_sigma]) {
            let picked = tape.matmul(select, *v)?;
            let fixed = tape.constant(Tensor::matrix(r, dim, fixed)?);
            *v = tape.add(picked, fixed)?;
        }
        Ok(Generated { labels, mu: out[0], sigma: out[1] })
    }

    /// Mean of the source cells, detached from the graph.
    fn universum_of(&self, tape: &Tape, g: &Generated) -> Universum {
        let (mu, sigma) = (tape.value(g.mu), tape.value(g.sigma));
        let (n, dim) = (mu.rows(), mu.cols());
        let mean = |t: &Tensor| -> Vec<f64> {
            let mut acc = vec![0.0; dim];
            for r in 0..n {
                acc.iter_mut().zip(t.row(r)).for_each(|(a, v)| *a += v);
            }
            acc.into_iter().map(|a| a / n as f64).collect()
        };
        Universum { mu: mean(mu), sigma: mean(sigma) }
    }

    fn mixup_term(&mut self, tape: &mut Tape, g: &Generated, n_classes: usize) -> Result<DistTerm> {
        let n = g.labels.len();
        let count = self.bank.n_cells();
        let pairs = sample_pairs(&mut self.streams.dist_mixup, n, count)?;
        let gammas = (0..count)
            .map(|_| sample_gamma(&mut self.streams.dist_mixup, self.config.alpha))
            .collect::<Result<Vec<_>>>()?;
        let (mu, sigma) = mixup_var(tape, g.mu, g.sigma, &pairs, &gammas)?;
        let soft: Vec<f64> = pairs
            .iter()
            .zip(&gammas)
            .flat_map(|(&(a, b), &gm)| soft_label(g.labels[a], g.labels[b], gm, n_classes))
            .collect();
        Ok(DistTerm { mu, sigma, targets: Tensor::matrix(count, n_classes, soft)? })
    }

    pub fn to_json(&self) -> Result<String> {
        let file =
            CheckpointFile { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, trainer: self.clone() };
        serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format {:?})", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        Ok(file.trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels.iter().enumerate().filter(|&(i, &y)| argmax(logits.row(i)) == y).count();
    hits as f64 / labels.len() as f64
}

/// Fraction of instances whose argmax instance logit matches the label;
/// ties go to the lowest class index.
pub fn evaluate(model: &EncoderModel, instances: &Instances) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(accuracy(&model.logits(&instances.x)?, &instances.labels))
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitResult {
    /// State at the evaluation step with the highest validation accuracy
    /// (earliest on ties); the initial state when nothing was evaluated.
    pub best: Trainer,
    pub best_val: Option<f64>,
    pub last: Trainer,
    pub log: Vec<TrainRecord>,
}

/// Trains for `max_iters` steps, evaluating on the source validation split
/// every `eval_every` steps and after the last one.
pub fn fit(data: &TrainData, config: TrainConfig) -> Result<FitResult> {
    let mut trainer = Trainer::for_data(config, data)?;
    let mut best = trainer.clone();
    let mut best_val: Option<f64> = None;
    let mut log = Vec::new();
    let total = trainer.config.max_iters;
    while trainer.step < total {
        let mut rec = trainer.train_step(data)?;
        if rec.iter % trainer.config.eval_every == 0 || rec.iter == total {
            let acc = if data.val.is_empty() { rec.train_acc } else { evaluate(&trainer.model, &data.val)? };
            rec.val_acc = Some(acc);
            if best_val.is_none_or(|b| acc > b) {
                best_val = Some(acc);
                best = trainer.clone();
            }
            log.push(rec);
        }
    }
    Ok(FitResult { best, best_val, last: trainer, log })
}

/// Convenience wrapper building [`TrainData`] from a dataset and split.
pub fn fit_split(ds: &DomainDataset, plan: &SplitPlan, config: TrainConfig) -> Result<FitResult> {
    fit(&TrainData::from_split(ds, plan)?, config)
}
