//! Training loop, evaluation and the experiment drivers built on them
//! (task matrix, hop-count sweep, trade-off grid, feature export).

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{domain_adversarial_loss, GrlConfig};
use crate::derive_seed;
use crate::diff::{adam_step, AdamState, DiffArray, ParamGroup, Scalar};
use crate::error::{Error, Result};
use crate::layers::one_hot;
use crate::losses::{coral, lmmd, mkmmd, mmd_biased, pseudo_labels, soft_labels, KernelConfig, WeightMode};
use crate::model::{build_model, windows_to_array, ArchSpec, ForwardMode, Model, ThirdLoss, VariantId};
use crate::signal::{BatchPairer, Sample, Split, SplitSpec};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: VariantId,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the adversarial loss.
    pub mu: f64,
    /// Weight of the third (discrepancy) loss.
    pub beta: f64,
    /// TAGCN hop count K.
    pub hops: usize,
    /// Neighbours per node; `None` uses `max(2, ceil(nodes / 10))`.
    pub topk: Option<usize>,
    /// Kernel of the LMMD term.
    pub kernel: KernelConfig,
    pub pseudo_labels: WeightMode,
    pub grl: GrlConfig,
    pub seed: u64,
    pub repetitions: usize,
    pub split: SplitSpec,
    /// Evaluate on the target test split after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: VariantId::Dsagcn,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 100,
            mu: 1.0,
            beta: 0.5,
            hops: 2,
            topk: None,
            kernel: KernelConfig::median(),
            pseudo_labels: WeightMode::OneHot,
            grl: GrlConfig::default(),
            seed: 0,
            repetitions: 10,
            split: SplitSpec::standard(0),
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("train_config", msg.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if !(self.mu >= 0.0 && self.beta >= 0.0) {
            return bad("mu and beta must be non-negative");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        self.kernel.validate()
    }

    pub fn arch(&self, classes: usize) -> ArchSpec {
        let mut arch = ArchSpec::standard(classes).with_hops(self.hops);
        arch.topk = self.topk;
        arch
    }
}

/// "X→Y": labelled source condition X, unlabelled target condition Y.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferTask {
    pub source: String,
    pub target: String,
}

impl TransferTask {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Result<Self> {
        let (source, target) = (source.into(), target.into());
        if source == target {
            return Err(Error::invalid("transfer_task", format!("source and target are both `{source}`")));
        }
        Ok(Self { source, target })
    }

    /// All ordered pairs of distinct conditions.
    pub fn all_pairs(conditions: &[String]) -> Vec<Self> {
        let mut out = Vec::new();
        for s in conditions {
            for t in conditions {
                if s != t {
                    out.push(Self {
                        source: s.clone(),
                        target: t.clone(),
                    });
                }
            }
        }
        out
    }
}

/// One row of the loss trace. Terms a variant lacks are reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_d")]
    pub l_d: f64,
    #[serde(rename = "L_third")]
    pub l_third: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    /// Target test accuracy, filled on the last step of an evaluated epoch.
    pub target_acc: Option<f64>,
}

/// `L_c + μ·L_d + β·L_third`.
pub fn total_loss<T: Scalar>(
    l_c: &DiffArray<T>,
    l_d: Option<&DiffArray<T>>,
    l_third: Option<&DiffArray<T>>,
    mu: f64,
    beta: f64,
) -> Result<DiffArray<T>> {
    let mut total = l_c.clone();
    if let Some(d) = l_d {
        total = total.add(&d.scale(T::lit(mu))?)?;
    }
    if let Some(t) = l_third {
        total = total.add(&t.scale(T::lit(beta))?)?;
    }
    Ok(total)
}

/// Mean cross-entropy of `[n, C]` logits against class indices.
pub fn classification_loss<T: Scalar>(logits: &DiffArray<T>, labels: &[usize]) -> Result<DiffArray<T>> {
    let (n, c) = match *logits.shape() {
        [n, c] if n == labels.len() && n > 0 => (n, c),
        _ => return Err(Error::shape("classification_loss", logits.shape(), &[labels.len()])),
    };
    let target = one_hot::<T>(labels, c)?;
    logits
        .log_softmax()?
        .mul(&target)?
        .sum()?
        .scale(T::lit(-1.0 / n as f64))
}

/// Percentage of rows whose argmax matches the label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid("accuracy", "prediction and label counts differ"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

fn argmax_rows<T: Scalar>(logits: &DiffArray<T>) -> Result<Vec<usize>> {
    crate::losses::pseudo_label_indices(logits)
}

/// Predicted class indices for `samples`, in eval mode, `batch` at a time;
/// each batch gets its own graph.
pub fn predict<T: Scalar>(model: &mut Model<T>, samples: &[Sample], batch: usize) -> Result<Vec<usize>> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(samples.len());
    crate::diff::no_grad(|| -> Result<()> {
        for chunk in samples.chunks(batch.max(1)) {
            let windows: Vec<Vec<f32>> = chunk.iter().map(|s| s.window.clone()).collect();
            let taps = model.forward(&windows_to_array(&windows)?, ForwardMode::eval(), &mut rng)?;
            out.extend(argmax_rows(&taps.logits)?);
        }
        Ok(())
    })?;
    Ok(out)
}

/// Target accuracy in percent over a labelled split.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, samples: &[Sample], batch: usize) -> Result<f64> {
    let labels = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::invalid("evaluate", "unlabelled evaluation sample")))
        .collect::<Result<Vec<_>>>()?;
    let preds = predict(model, samples, batch)?;
    accuracy(&preds, &labels)
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_c: f64,
    pub l_d: f64,
    pub l_third: f64,
    pub l_total: f64,
}

/// Optimizer state for every parameter group of a model.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub config: TrainConfig,
    groups: Vec<ParamGroup<T>>,
    states: Vec<AdamState<T>>,
    dropout_rng: ChaCha8Rng,
    pub steps: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let groups = model.param_groups()?;
        let states = groups.iter().map(|g| AdamState::new(g, config.learning_rate)).collect();
        let dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dropout"));
        Ok(Self {
            model,
            config,
            groups,
            states,
            dropout_rng,
            steps: 0,
        })
    }

    /// Computes the losses of one mini-batch pair without updating anything
    /// other than batch-norm running statistics. Returns the differentiable
    /// total and the component values.
    pub fn losses(
        &mut self,
        source: &[Vec<f32>],
        labels: &[usize],
        target: &[Vec<f32>],
        progress: f64,
    ) -> Result<(DiffArray<T>, StepLosses)> {
        let wiring = self.model.wiring();
        let n = source.len();
        if n == 0 || labels.len() != n {
            return Err(Error::Empty("source batch"));
        }
        let use_target = wiring.uses_target();
        if use_target && target.is_empty() {
            return Err(Error::Empty("target batch"));
        }
        let windows: Vec<Vec<f32>> = if use_target {
            source.iter().chain(target).cloned().collect()
        } else {
            source.to_vec()
        };
        let rows = windows.len();
        let input = windows_to_array::<T>(&windows)?;
        let mode = ForwardMode::train(self.config.grl, progress);
        let taps = self.model.forward(&input, mode, &mut self.dropout_rng)?;

        let l_c = classification_loss(&taps.logits.slice_rows(0, n)?, labels)?;
        let mut l_d = None;
        let mut l_third = None;
        if use_target {
            if let Some(p) = &taps.domain_probs {
                let p = p.reshape(&[rows, 1])?;
                l_d = Some(domain_adversarial_loss(&p.slice_rows(0, n)?, &p.slice_rows(n, rows)?)?);
            }
            let hs = taps.embedding.slice_rows(0, n)?;
            let ht = taps.embedding.slice_rows(n, rows)?;
            l_third = match wiring.third {
                ThirdLoss::None => None,
                ThirdLoss::Lmmd => {
                    let classes = self.model.arch.classes;
                    let ys: Vec<f64> = one_hot::<f64>(labels, classes)?.to_vec();
                    let target_logits = taps.logits.slice_rows(n, rows)?;
                    let yt = match self.config.pseudo_labels {
                        WeightMode::OneHot => pseudo_labels(&target_logits)?,
                        WeightMode::Soft => soft_labels(&target_logits)?,
                    };
                    let out = lmmd(&hs, &ht, &ys, &yt, classes, self.config.pseudo_labels, &self.config.kernel)?;
                    Some(out.loss)
                }
                ThirdLoss::Mmd => Some(mmd_biased(&hs, &ht, &KernelConfig::median_single())?),
                ThirdLoss::Mkmmd => Some(mkmmd(&hs, &ht)?),
                ThirdLoss::Coral => Some(coral(&hs, &ht)?),
            };
        }
        let total = total_loss(&l_c, l_d.as_ref(), l_third.as_ref(), self.config.mu, self.config.beta)?;
        let value = |a: &Option<DiffArray<T>>| a.as_ref().map_or(0.0, |x| x.item().to_f64().unwrap());
        let report = StepLosses {
            l_c: l_c.item().to_f64().unwrap(),
            l_d: value(&l_d),
            l_third: value(&l_third),
            l_total: total.item().to_f64().unwrap(),
        };
        Ok((total, report))
    }

    /// Forward pass, one backward through the total loss, then one Adam
    /// step per parameter group.
    pub fn step(&mut self, source: &[Vec<f32>], labels: &[usize], target: &[Vec<f32>], progress: f64) -> Result<StepLosses> {
        let step = self.steps;
        let (total, report) = self.losses(source, labels, target, progress)?;
        if !report.l_total.is_finite() {
            return Err(Error::Diverged { step });
        }
        for g in &self.groups {
            g.zero_grad();
        }
        total.backward()?;
        for (g, s) in self.groups.iter().zip(self.states.iter_mut()) {
            adam_step(g, s)?;
        }
        self.steps += 1;
        Ok(report)
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }
}

/// Trained model plus its loss trace and final target test accuracy.
pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub trace: Vec<LossReport>,
    pub accuracy: f64,
    pub wall_time_s: f64,
}

fn split_of<'a>(data: &'a BTreeMap<String, Split>, condition: &str) -> Result<&'a Split> {
    data.get(condition).ok_or_else(|| {
        Error::invalid(
            "train",
            format!(
                "no split for condition `{condition}`; available: {}",
                data.keys().cloned().collect::<Vec<_>>().join(", ")
            ),
        )
    })
}

fn class_count(data: &BTreeMap<String, Split>) -> usize {
    data.values()
        .flat_map(|s| s.train.iter().chain(&s.test))
        .filter_map(|s| s.label)
        .max()
        .map_or(0, |m| m + 1)
}

/// Trains `config.variant` on `task` and evaluates on the target test split.
/// Target training windows are used without their labels.
pub fn train<T: Scalar>(
    task: &TransferTask,
    config: &TrainConfig,
    data: &BTreeMap<String, Split>,
    classes: usize,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let started = Instant::now();
    let source = split_of(data, &task.source)?;
    let target = split_of(data, &task.target)?.as_target();
    let classes = classes.max(class_count(data));
    let model = build_model::<T>(config.variant, &config.arch(classes), config.seed)?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut pairer = BatchPairer::new(&source.train, &target.train, config.batch_size, config.seed)?;
    let total_steps = (pairer.steps_per_epoch() * config.epochs).max(1);
    let eval_batch = 2 * config.batch_size;
    let mut trace = Vec::with_capacity(total_steps);
    for epoch in 0..config.epochs {
        let batches = pairer.next_epoch();
        let last = batches.len() - 1;
        for (i, (s, t)) in batches.into_iter().enumerate() {
            let progress = trainer.steps as f64 / total_steps as f64;
            let step = trainer.steps;
            let l = trainer.step(&s.windows, &s.labels, &t.windows, progress)?;
            let target_acc = if i == last && (config.eval_each_epoch || epoch + 1 == config.epochs) {
                Some(evaluate(&mut trainer.model, &target.test, eval_batch)?)
            } else {
                None
            };
            trace.push(LossReport {
                step,
                epoch,
                l_c: l.l_c,
                l_d: l.l_d,
                l_third: l.l_third,
                l_total: l.l_total,
                target_acc,
            });
        }
        log::debug!("epoch {epoch}: L_total {:.4}", trace.last().map_or(f64::NAN, |r| r.l_total));
    }
    let accuracy = trace.last().and_then(|r| r.target_acc).expect("final epoch is evaluated");
    Ok(TrainOutcome {
        model: trainer.model,
        trace,
        accuracy,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// One repetition of one task in the transfer matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub source: String,
    pub target: String,
    pub repetition: usize,
    /// Empty when the run failed.
    pub accuracy: Option<f64>,
    pub seed: u64,
}

/// Mean and sample standard deviation of one task's repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub source: String,
    pub target: String,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixResult {
    pub rows: Vec<MatrixRow>,
    pub summaries: Vec<TaskSummary>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every ordered condition pair `repetitions` times with seeds
/// `seed + r`. A failed run is logged and recorded with an empty accuracy;
/// the matrix continues.
pub fn run_task_matrix<T: Scalar>(
    data: &BTreeMap<String, Split>,
    conditions: &[String],
    config: &TrainConfig,
    classes: usize,
) -> Result<MatrixResult> {
    config.validate()?;
    if conditions.len() < 2 {
        return Err(Error::invalid("run_task_matrix", "need at least 2 conditions"));
    }
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for task in TransferTask::all_pairs(conditions) {
        let mut accs = Vec::new();
        let mut failures = Vec::new();
        for r in 0..config.repetitions {
            let seed = config.seed.wrapping_add(r as u64);
            let cfg = TrainConfig {
                seed,
                split: SplitSpec { seed, ..config.split },
                ..config.clone()
            };
            let accuracy = match train::<T>(&task, &cfg, data, classes) {
                Ok(out) => {
                    accs.push(out.accuracy);
                    Some(out.accuracy)
                }
                Err(e) => {
                    log::error!("{}→{} repetition {r} failed: {e}", task.source, task.target);
                    failures.push(format!("repetition {r}: {e}"));
                    None
                }
            };
            rows.push(MatrixRow {
                source: task.source.clone(),
                target: task.target.clone(),
                repetition: r,
                accuracy,
                seed,
            });
        }
        let (mean, std) = mean_std(&accs);
        summaries.push(TaskSummary {
            source: task.source,
            target: task.target,
            mean,
            std,
            accuracies: accs,
            failures,
        });
    }
    Ok(MatrixResult { rows, summaries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepKRow {
    pub k: usize,
    pub accuracy: f64,
    pub wall_time_s: f64,
}

/// Trains once per TAGCN hop count.
pub fn sweep_k<T: Scalar>(
    task: &TransferTask,
    config: &TrainConfig,
    data: &BTreeMap<String, Split>,
    classes: usize,
    ks: &[usize],
) -> Result<Vec<SweepKRow>> {
    ks.iter()
        .map(|&k| {
            let cfg = TrainConfig { hops: k, ..config.clone() };
            let out = train::<T>(task, &cfg, data, classes)?;
            Ok(SweepKRow {
                k,
                accuracy: out.accuracy,
                wall_time_s: out.wall_time_s,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub beta: f64,
    pub mu: f64,
    pub accuracy: f64,
    pub wall_time_s: f64,
}

/// Full (β, μ) grid. The (0, 0) cell trains the BASELINE variant, which is
/// what the objective reduces to without alignment terms.
pub fn sweep_tradeoffs<T: Scalar>(
    task: &TransferTask,
    config: &TrainConfig,
    data: &BTreeMap<String, Split>,
    classes: usize,
    betas: &[f64],
    mus: &[f64],
) -> Result<Vec<TradeoffRow>> {
    let mut rows = Vec::with_capacity(betas.len() * mus.len());
    for &beta in betas {
        for &mu in mus {
            let mut cfg = TrainConfig { beta, mu, ..config.clone() };
            if beta == 0.0 && mu == 0.0 {
                cfg.variant = VariantId::Baseline;
            }
            let out = train::<T>(task, &cfg, data, classes)?;
            rows.push(TradeoffRow {
                beta,
                mu,
                accuracy: out.accuracy,
                wall_time_s: out.wall_time_s,
            });
        }
    }
    Ok(rows)
}

/// Paper-grid trade-off values `{0, 0.01, 0.05, 0.1, 0.5, 1}`.
pub const TRADEOFF_VALUES: [f64; 6] = [0.0, 0.01, 0.05, 0.1, 0.5, 1.0];

/// Hop counts of the polynomial-degree study.
pub const HOP_VALUES: [usize; 8] = [1, 2, 4, 5, 10, 25, 50, 100];

/// Per-tap feature matrices: one row per sample.
#[derive(Debug, Clone)]
pub struct FeatureExport {
    pub tap: String,
    pub width: usize,
    pub rows: Vec<(Vec<f64>, Option<usize>, crate::signal::Domain)>,
}

impl FeatureExport {
    /// Columns `f0..f{w-1}, label, domain`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.width).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        header.push("domain".into());
        w.write_record(&header).map_err(csv_err)?;
        for (features, label, domain) in &self.rows {
            let mut rec: Vec<String> = features.iter().map(|v| v.to_string()).collect();
            rec.push(label.map_or(String::new(), |l| l.to_string()));
            rec.push(
                match domain {
                    crate::signal::Domain::Source => "source",
                    crate::signal::Domain::Target => "target",
                }
                .into(),
            );
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::invalid("csv", e.to_string()))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::invalid("csv", e.to_string())
}

/// Runs `samples` through the model in eval mode (`batch` per graph) and
/// collects the requested taps. Unknown tap names are rejected before any
/// computation; taps a variant lacks are rejected too.
pub fn export_features<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    taps: &[&str],
    batch: usize,
) -> Result<Vec<FeatureExport>> {
    if samples.is_empty() {
        return Err(Error::Empty("feature export input"));
    }
    for &name in taps {
        if !crate::model::TAP_NAMES.contains(&name) {
            return Err(Error::UnknownTap {
                name: name.to_string(),
                valid: crate::model::TAP_NAMES.join(", "),
            });
        }
    }
    let mut out: Vec<FeatureExport> = taps
        .iter()
        .map(|t| FeatureExport {
            tap: t.to_string(),
            width: 0,
            rows: Vec::new(),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    crate::diff::no_grad(|| -> Result<()> {
        for chunk in samples.chunks(batch.max(1)) {
            let windows: Vec<Vec<f32>> = chunk.iter().map(|s| s.window.clone()).collect();
            let t = model.forward(&windows_to_array(&windows)?, ForwardMode::eval(), &mut rng)?;
            for export in out.iter_mut() {
                let arr = t.get(&export.tap)?.ok_or_else(|| {
                    Error::invalid(
                        "export_features",
                        format!("tap `{}` does not exist in variant {}", export.tap, model.variant),
                    )
                })?;
                let width = arr.len() / chunk.len();
                export.width = width;
                let data = arr.to_vec();
                for (row, s) in data.chunks(width).zip(chunk) {
                    export
                        .rows
                        .push((row.iter().map(|v| v.to_f64().unwrap()).collect(), s.label, s.domain));
                }
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Serializes rows with a header line via serde.
pub fn write_rows<R: Serialize>(out: impl Write, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid("csv", e.to_string()))
}

/// Parses rows written by [`write_rows`].
pub fn read_rows<R: for<'de> Deserialize<'de>>(input: impl std::io::Read) -> Result<Vec<R>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}
