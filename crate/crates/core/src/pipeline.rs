//! Source pretraining, ESH pretraining, per-target adaptation and evaluation.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adabn::{BnMode, DEFAULT_MOMENTUM};
use crate::data::{sha256_hex, AdapterCheckpoint, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, surface_dice, volumetric_dice, BinaryMask, DEFAULT_TOLERANCE};
use crate::tensor::{Adam, LabelMap, Tensor};
use crate::unet::{InjectionSelector, Part, Phase, UNet};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainSpec {
    /// ESH pretraining defaults: 20 epochs, otherwise as source pretraining.
    pub fn esh_default() -> Self {
        Self {
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptSpec {
    pub epochs: usize,
    pub lr: f64,
    pub rank: usize,
    pub target_samples: usize,
    /// Textual selector, resolved against the model depth.
    pub selector: String,
    pub adabn: bool,
    pub momentum: f64,
    /// Replace the EMA by one exact sweep over the chosen target samples.
    pub full_pass: bool,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptSpec {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-4,
            rank: 2,
            target_samples: 10,
            selector: "all".into(),
            adabn: true,
            momentum: DEFAULT_MOMENTUM,
            full_pass: false,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl AdaptSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_samples == 0 {
            return Err(Error::InvalidArgument("target_samples must be >= 1".into()));
        }
        if self.rank == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("rank, batch_size and lr must be positive".into()));
        }
        if self.adabn && self.batch_size < 2 {
            return Err(Error::InvalidArgument("AdaBN needs batches of at least 2 samples".into()));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::InvalidArgument(format!("momentum {} outside (0, 1]", self.momentum)));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub phase: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "phase={} epoch={} step={} loss={:.6} lr={}",
            self.phase, self.epoch, self.step, self.loss, self.lr
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// Mean loss of each epoch, in order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((e, s, n)) if *e == r.epoch => {
                    *s += r.loss;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.loss, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }
}

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.records {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

fn batches(indices: &[usize], batch_size: usize, min_batch: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = indices.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_batch) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn check_loss(loss: f32, phase: &str, epoch: usize, step: usize) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Diverged(format!(
            "{phase}: loss became {loss} at epoch {epoch}, step {step}"
        )));
    }
    Ok(loss as f64)
}

fn supervised(
    model: &mut UNet<f32>,
    data: &Dataset,
    spec: &PretrainSpec,
    phase: Phase,
    name: &'static str,
) -> Result<TrainLog> {
    spec.validate()?;
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no training samples", data.domain_id())));
    }
    model.apply_freeze_policy(phase);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = Adam::new(spec.lr);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        for batch in batches(&order, spec.batch_size, 2) {
            let picked: Vec<&Sample> = batch.iter().map(|&i| train[i]).collect();
            let x = data.images(&picked)?;
            let y = data.labels(&picked)?;
            let (loss, grads) = match phase {
                Phase::Pretrain => model.full_loss_and_grads(&x, &y)?,
                _ => model.esh_loss_and_grads(&x, &y, false)?,
            };
            let loss = check_loss(loss, name, epoch, step)?;
            model.apply_grads(&grads, &mut opt)?;
            log.records.push(LogRecord {
                phase: name,
                epoch,
                step,
                loss,
                lr: spec.lr,
            });
            step += 1;
        }
    }
    model.freeze_all();
    model.set_eval();
    model.snapshot_source_stats();
    Ok(log)
}

/// Trains encoder, decoder and final head on labelled source data and
/// stores the resulting BN statistics as the source snapshot.
pub fn pretrain_source(model: &mut UNet<f32>, source: &Dataset, spec: &PretrainSpec) -> Result<TrainLog> {
    supervised(model, source, spec, Phase::Pretrain, "pretrain")
}

/// Trains only the ESH on source ground truth; the rest stays bit-identical.
pub fn train_esh(model: &mut UNet<f32>, source: &Dataset, spec: &PretrainSpec) -> Result<TrainLog> {
    supervised(model, source, spec, Phase::Esh, "esh")
}

/// Hard argmax labels of the full path with every BN layer in `Eval`.
/// Leaves the model in `Eval` mode.
pub fn make_pseudo_labels(model: &mut UNet<f32>, images: &Tensor<f32>) -> Result<LabelMap> {
    model.set_eval();
    let logits = model.forward_full(images)?;
    LabelMap::argmax(&logits)
}

/// SHA-256 over the names and bytes of every non-adapter parameter tensor.
/// Adapter injection leaves it unchanged.
pub fn frozen_digest(model: &UNet<f32>) -> String {
    let mut h = Sha256::new();
    model.visit(&mut |name, p| {
        if name.ends_with(".lora_x") || name.ends_with(".lora_y") {
            return;
        }
        h.update(name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

/// Seeded choice of `count` training samples (all of them if fewer).
pub fn choose_target_samples<'a>(data: &'a Dataset, count: usize, seed: u64) -> Vec<&'a Sample> {
    let train = data.split(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5A4D);
    let mut idx = rand::seq::index::sample(&mut rng, train.len(), count.min(train.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| train[i]).collect()
}

/// Result of adapting the base model to one target domain.
pub struct Adapted {
    pub checkpoint: AdapterCheckpoint,
    pub model: UNet<f32>,
    pub log: TrainLog,
}

/// Self-training on one target domain: per batch, pseudo-labels from the
/// full path, ESH cross-entropy against them, an Adam step on the adapter
/// factors only. With AdaBN every BN layer re-estimates its statistics on
/// the target batches.
pub fn adapt_target(base: &UNet<f32>, base_checksum: &str, target: &Dataset, spec: &AdaptSpec) -> Result<Adapted> {
    spec.validate()?;
    let chosen = choose_target_samples(target, spec.target_samples, spec.seed);
    if chosen.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no training samples", target.domain_id())));
    }
    if spec.adabn && chosen.len() < 2 {
        return Err(Error::InvalidArgument("AdaBN needs at least 2 target samples".into()));
    }
    let selector = InjectionSelector::parse(&spec.selector, base.config().depth)?;
    let base_digest = frozen_digest(base);

    let mut model = base.clone();
    model.reset_bn_stats()?;
    model.set_bn_momentum(spec.momentum)?;
    model.inject_convlora(&selector, spec.rank, spec.seed)?;
    model.apply_freeze_policy(Phase::Adapt);
    let stats_mode = if spec.adabn && !spec.full_pass {
        BnMode::Adapt
    } else {
        BnMode::Eval
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = Adam::new(spec.lr);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..chosen.len()).collect();
    let min_batch = if spec.adabn { 2 } else { 1 };

    if spec.adabn && spec.full_pass && spec.epochs > 0 {
        model.set_bn_mode(Part::All, BnMode::Accumulate);
        for batch in batches(&order, spec.batch_size, min_batch) {
            let picked: Vec<&Sample> = batch.iter().map(|&i| chosen[i]).collect();
            model.forward_both(&target.images(&picked)?)?;
        }
        model.set_eval();
    }

    let mut step = 0;
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        for batch in batches(&order, spec.batch_size, min_batch) {
            let picked: Vec<&Sample> = batch.iter().map(|&i| chosen[i]).collect();
            let x = target.images(&picked)?;
            let pseudo = make_pseudo_labels(&mut model, &x)?;
            model.set_bn_mode(Part::All, stats_mode);
            let (loss, grads) = model.esh_loss_and_grads(&x, &pseudo, stats_mode == BnMode::Adapt)?;
            let loss = check_loss(loss, "adapt", epoch, step)?;
            model.apply_grads(&grads, &mut opt)?;
            log.records.push(LogRecord {
                phase: "adapt",
                epoch,
                step,
                loss,
                lr: spec.lr,
            });
            step += 1;
        }
    }
    model.freeze_all();
    model.set_eval();
    if frozen_digest(&model) != base_digest {
        return Err(Error::InvalidArgument("a frozen tensor changed during adaptation".into()));
    }
    let checkpoint = AdapterCheckpoint::capture(
        &model,
        base_checksum,
        target.domain_id(),
        &selector,
        spec.rank,
        spec.seed,
        spec.adabn,
    );
    Ok(Adapted { checkpoint, model, log })
}

/// Runs `jobs` on up to `threads` scoped worker threads; results keep job order.
pub fn run_parallel<J, R, F>(jobs: Vec<J>, threads: usize, f: F) -> Vec<R>
where
    J: Send,
    R: Send,
    F: Fn(J) -> R + Sync,
{
    let threads = threads.max(1).min(jobs.len().max(1));
    if threads == 1 {
        return jobs.into_iter().map(f).collect();
    }
    let n = jobs.len();
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results = std::sync::Mutex::new((0..n).map(|_| None).collect::<Vec<Option<R>>>());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop();
                let Some((i, j)) = job else { break };
                let r = f(j);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Adapts the base checkpoint at `base_path` to every target independently,
/// each starting from the source statistics, and verifies the base file is
/// byte-identical afterwards.
pub fn adapt_all_targets(
    base_path: &Path,
    targets: &[Dataset],
    spec: &AdaptSpec,
    threads: usize,
) -> Result<Vec<Adapted>> {
    let before = std::fs::read(base_path)?;
    let (base, _, checksum) = crate::data::base_from_bytes(&before)?;
    let out: Vec<Result<Adapted>> = run_parallel(targets.iter().collect(), threads, |t| {
        adapt_target(&base, &checksum, t, spec)
    });
    let out = out.into_iter().collect::<Result<Vec<_>>>()?;
    let after = std::fs::read(base_path)?;
    if sha256_hex(&after) != checksum {
        return Err(Error::Checksum("base checkpoint changed during adaptation".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub domain_id: String,
    pub sample_id: String,
    pub sds: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<ImageScore>,
    pub tolerance: f64,
}

impl EvalReport {
    pub fn sds_mean_std(&self) -> (f64, f64) {
        mean_std(&self.scores.iter().map(|s| s.sds).collect::<Vec<_>>())
    }

    pub fn dice_mean_std(&self) -> (f64, f64) {
        mean_std(&self.scores.iter().map(|s| s.dice).collect::<Vec<_>>())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.scores {
            writeln!(
                f,
                "image domain={} id={} sds={:.6} dice={:.6}",
                s.domain_id, s.sample_id, s.sds, s.dice
            )?;
        }
        let (sm, ss) = self.sds_mean_std();
        let (dm, ds) = self.dice_mean_std();
        writeln!(f, "summary n={} tolerance={} sds_mean={sm:.6} sds_std={ss:.6}", self.scores.len(), self.tolerance)?;
        write!(f, "summary dice_mean={dm:.6} dice_std={ds:.6}")
    }
}

/// Per-image score of a predicted label map against ground truth; every
/// non-zero class counts as foreground.
pub fn score_image(pred: &[u32], truth: &[u32], size: usize, tolerance: f64) -> Result<(f64, f64)> {
    let p = BinaryMask::new(size, size, pred.iter().map(|&v| v != 0).collect())?;
    let t = BinaryMask::new(size, size, truth.iter().map(|&v| v != 0).collect())?;
    Ok((surface_dice(&p, &t, tolerance)?, volumetric_dice(&p, &t)?))
}

/// Full-path predictions with BN in `Eval` mode, scored per image.
pub fn evaluate(model: &mut UNet<f32>, data: &Dataset, split: Split, tolerance: f64) -> Result<EvalReport> {
    model.set_eval();
    let samples = data.split(split);
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let pred = LabelMap::argmax(&model.forward_full(&data.images(chunk)?)?)?;
        for (i, s) in chunk.iter().enumerate() {
            let (sds, dice) = score_image(pred.image(i), &s.mask, data.size, tolerance)?;
            scores.push(ImageScore {
                domain_id: data.domain_id().to_string(),
                sample_id: s.id.clone(),
                sds,
                dice,
            });
        }
    }
    Ok(EvalReport { scores, tolerance })
}

/// One column of the placement ablation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub selector: String,
    pub adabn: bool,
}

impl Placement {
    pub fn label(&self) -> String {
        let base = match self.selector.as_str() {
            "all" => "full".to_string(),
            s => format!("enc{s}"),
        };
        if self.adabn {
            format!("{base}+adabn")
        } else {
            base
        }
    }

    /// Blocks 1, 1-2, 1-3 and the full encoder without AdaBN, then the full
    /// encoder with AdaBN.
    pub fn grid() -> Vec<Self> {
        let p = |s: &str, a| Self {
            selector: s.into(),
            adabn: a,
        };
        vec![p("1", false), p("1-2", false), p("1-3", false), p("all", false), p("all", true)]
    }
}

/// Mean-over-seeds SDS for every (domain, column).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixReport {
    pub domains: Vec<String>,
    pub columns: Vec<String>,
    /// `cells[d][c]` = per-seed mean test SDS.
    pub cells: Vec<Vec<Vec<f64>>>,
    pub source: Vec<f64>,
}

impl MatrixReport {
    pub fn mean(&self, d: usize, c: usize) -> f64 {
        mean_std(&self.cells[d][c]).0
    }

    pub fn column_mean(&self, c: usize) -> f64 {
        (0..self.domains.len()).map(|d| self.mean(d, c)).sum::<f64>() / self.domains.len() as f64
    }

    pub fn best_column(&self) -> usize {
        (0..self.columns.len())
            .max_by(|&a, &b| self.column_mean(a).total_cmp(&self.column_mean(b)))
            .expect("at least one column")
    }
}

impl fmt::Display for MatrixReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<14} {:>15}", "domain", "source")?;
        for c in &self.columns {
            write!(f, " {c:>15}")?;
        }
        writeln!(f)?;
        for (d, name) in self.domains.iter().enumerate() {
            write!(f, "{name:<14} {:>15.4}", self.source[d])?;
            for c in 0..self.columns.len() {
                let (m, s) = mean_std(&self.cells[d][c]);
                write!(f, " {:>15}", format!("{m:.4}±{s:.4}"))?;
            }
            writeln!(f)?;
        }
        write!(f, "{:<14} {:>15.4}", "mean", self.source.iter().sum::<f64>() / self.source.len() as f64)?;
        for c in 0..self.columns.len() {
            write!(f, " {:>15.4}", self.column_mean(c))?;
        }
        Ok(())
    }
}

/// Adapts to every target for every column and seed, scoring the test split.
pub fn run_matrix(
    base: &UNet<f32>,
    base_checksum: &str,
    targets: &[Dataset],
    columns: &[Placement],
    seeds: &[u64],
    spec: &AdaptSpec,
    tolerance: f64,
    threads: usize,
) -> Result<MatrixReport> {
    let mut source = Vec::with_capacity(targets.len());
    for t in targets {
        let mut m = base.clone();
        m.reset_bn_stats()?;
        source.push(evaluate(&mut m, t, Split::Test, tolerance)?.sds_mean_std().0);
    }
    let mut jobs = Vec::new();
    for (d, _) in targets.iter().enumerate() {
        for (c, _) in columns.iter().enumerate() {
            for &seed in seeds {
                jobs.push((d, c, seed));
            }
        }
    }
    let results = run_parallel(jobs.clone(), threads, |(d, c, seed)| -> Result<f64> {
        let spec = AdaptSpec {
            selector: columns[c].selector.clone(),
            adabn: columns[c].adabn,
            seed,
            ..spec.clone()
        };
        let mut a = adapt_target(base, base_checksum, &targets[d], &spec)?;
        Ok(evaluate(&mut a.model, &targets[d], Split::Test, tolerance)?.sds_mean_std().0)
    });
    let mut cells = vec![vec![Vec::new(); columns.len()]; targets.len()];
    for ((d, c, _), r) in jobs.into_iter().zip(results) {
        cells[d][c].push(r?);
    }
    Ok(MatrixReport {
        domains: targets.iter().map(|t| t.domain_id().to_string()).collect(),
        columns: columns.iter().map(Placement::label).collect(),
        cells,
        source,
    })
}

/// Default SDS tolerance re-exported for callers that only need the pipeline.
pub const TOLERANCE: f64 = DEFAULT_TOLERANCE;
