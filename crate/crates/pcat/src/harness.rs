//! Training loop, optimizers, schedule, evaluation, and scaling benchmarks.
//!
//! Per-sample gradients are computed on independent graphs (optionally in
//! parallel across a batch) and reduced in sample order, so a run is
//! bit-reproducible for a given seed regardless of thread count.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{metrics, Dataset, MetricsReport, ShapeGrouping};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::network::{Model, ModelConfig, ParamStore, Task};
use crate::spatial::PointCloud;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Lamb,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "lamb" => Ok(OptimizerKind::Lamb),
            other => Err(Error::invalid(format!(
                "unknown optimizer `{other}` (expected adam|lamb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::invalid(format!(
                "unknown schedule `{other}` (expected cosine|constant)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: T,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub seed: u64,
    /// Where the best (lowest train loss) checkpoint is written.
    pub checkpoint: Option<PathBuf>,
    /// Stop once the train accuracy reaches this fraction.
    pub stop_at_train_acc: Option<f64>,
    /// Worker threads for batch-parallel gradients (1 = sequential).
    pub threads: usize,
}

impl<T: Float> TrainConfig<T> {
    pub fn new(epochs: usize, batch_size: usize, base_lr: T) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            base_lr,
            optimizer: OptimizerKind::Lamb,
            schedule: Schedule::Cosine,
            seed: 0,
            checkpoint: None,
            stop_at_train_acc: None,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if self.base_lr <= T::zero() || self.base_lr.is_nan() {
            return Err(Error::invalid("base_lr must be > 0"));
        }
        if self.threads == 0 {
            return Err(Error::invalid("threads must be >= 1"));
        }
        Ok(())
    }
}

/// Cosine annealing without restarts:
/// `lr = base · 0.5 · (1 + cos(π · step / total))`.
pub fn cosine_lr<T: Float>(step: usize, total_steps: usize, base_lr: T) -> T {
    let frac = if total_steps == 0 {
        1.0
    } else {
        step as f64 / total_steps as f64
    };
    base_lr * T::of(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const LAMB_TRUST_MAX: f64 = 10.0;

/// First/second moment estimates per parameter, plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<T> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    step: u64,
}

impl<T: Float> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer update. Parameters without a gradient entry are left
/// untouched. Adam uses bias-corrected moments (β = 0.9/0.999, ε = 1e-8);
/// Lamb rescales the Adam update per tensor by the trust ratio
/// ‖w‖/‖update‖ clamped to [0, 10] (ratio 1 when either norm is zero).
pub fn optimizer_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: T,
    kind: OptimizerKind,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NanGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of(ADAM_BETA1);
    let b2 = T::of(ADAM_BETA2);
    let eps = T::of(ADAM_EPS);
    let corr1 = T::one() - b1.powi(t);
    let corr2 = T::one() - b2.powi(t);

    for (name, w) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let mut update = Tensor::zeros(g.shape());
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / corr1;
            let v_hat = vi / corr2;
            update.data_mut()[i] = m_hat / (v_hat.sqrt() + eps);
        }
        let scale = match kind {
            OptimizerKind::Adam => lr,
            OptimizerKind::Lamb => {
                let wn = w.l2_norm();
                let un = update.l2_norm();
                let trust = if wn > T::zero() && un > T::zero() {
                    (wn / un).min(T::of(LAMB_TRUST_MAX))
                } else {
                    T::one()
                };
                lr * trust
            }
        };
        w.axpy(&update, -scale);
    }
    Ok(())
}

/// One structured log record per epoch.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub oa: f64,
    pub macc: f64,
}

impl EpochRecord {
    pub fn to_kv_line(&self) -> String {
        format!(
            "epoch={} lr={} loss={} oa={} macc={}",
            self.epoch, self.lr, self.loss, self.oa, self.macc
        )
    }
}

enum SamplePreds {
    Cls(u32),
    Seg(Vec<u32>),
}

struct SamplePass<T> {
    loss: f64,
    grads: BTreeMap<String, Tensor<T>>,
    preds: SamplePreds,
}

fn argmax<T: Float>(row: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_pass<T: Float>(model: &Model<T>, cloud: &PointCloud<T>, label: u32) -> Result<SamplePass<T>> {
    match model.cfg.task {
        Task::Classification => {
            let (loss, probs, bound) = model.cls_loss_graph(cloud, label)?;
            loss.backward()?;
            Ok(SamplePass {
                loss: loss.value().item().as_f64(),
                grads: bound.grads(),
                preds: SamplePreds::Cls(argmax(&probs)),
            })
        }
        Task::Segmentation => {
            let (loss, probs, bound) = model.seg_loss_graph(cloud)?;
            loss.backward()?;
            let preds = (0..probs.shape()[0]).map(|i| argmax(probs.row(i))).collect();
            Ok(SamplePass {
                loss: loss.value().item().as_f64(),
                grads: bound.grads(),
                preds: SamplePreds::Seg(preds),
            })
        }
    }
}

/// Run `f` over the items, in order, split across up to `threads` workers.
/// Outputs are concatenated in input order.
fn parallel_map<R, F>(items: &[usize], threads: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(|&i| f(i)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(|&i| f(i)).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

/// Train a fresh model on the dataset's train split. Returns the trained
/// model and the per-epoch log; the best-loss checkpoint is written along
/// the way when a path is configured.
pub fn train<T: Float>(
    dataset: &Dataset<T>,
    model_cfg: &ModelConfig<T>,
    cfg: &TrainConfig<T>,
) -> Result<(Model<T>, Vec<EpochRecord>)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::invalid("dataset has no training samples"));
    }
    let mut model = Model::new(model_cfg.clone())?;
    let mut state = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = dataset.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut step = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_loss = f64::INFINITY;

    for epoch in 1..=cfg.epochs {
        let mut order = dataset.train.clone();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut epoch_preds: Vec<u32> = Vec::new();
        let mut epoch_labels: Vec<u32> = Vec::new();
        let mut epoch_lr = cfg.base_lr.as_f64();

        for batch in order.chunks(cfg.batch_size) {
            let lr = match cfg.schedule {
                Schedule::Cosine => cosine_lr(step, total_steps, cfg.base_lr),
                Schedule::Constant => cfg.base_lr,
            };
            epoch_lr = lr.as_f64();
            let passes = parallel_map(batch, cfg.threads, |i| {
                sample_pass(&model, &dataset.samples[i], dataset.sample_labels[i])
            })?;
            let mut avg: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            let inv = T::one() / T::of_usize(batch.len());
            for pass in &passes {
                if !pass.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}"
                    )));
                }
                loss_sum += pass.loss;
                for (name, g) in &pass.grads {
                    match avg.get_mut(name) {
                        Some(acc) => acc.axpy(g, inv),
                        None => {
                            let mut t = Tensor::zeros(g.shape());
                            t.axpy(g, inv);
                            avg.insert(name.clone(), t);
                        }
                    }
                }
            }
            for (&i, pass) in batch.iter().zip(&passes) {
                match &pass.preds {
                    SamplePreds::Cls(p) => {
                        epoch_preds.push(*p);
                        epoch_labels.push(dataset.sample_labels[i]);
                    }
                    SamplePreds::Seg(p) => {
                        epoch_preds.extend_from_slice(p);
                        epoch_labels
                            .extend_from_slice(dataset.samples[i].labels().expect("seg labels"));
                    }
                }
            }
            optimizer_step(&mut model.params, &avg, &mut state, lr, cfg.optimizer)?;
            step += 1;
        }

        let n_classes = model.cfg.num_classes;
        let report = metrics(&epoch_preds, &epoch_labels, n_classes, None)?;
        let mean_loss = loss_sum / dataset.train.len() as f64;
        log.push(EpochRecord {
            epoch,
            lr: epoch_lr,
            loss: mean_loss,
            oa: report.oa,
            macc: report.macc,
        });
        if mean_loss < best_loss {
            best_loss = mean_loss;
            if let Some(path) = &cfg.checkpoint {
                model.save(path)?;
            }
        }
        if let Some(target) = cfg.stop_at_train_acc {
            if report.oa >= target {
                break;
            }
        }
    }
    Ok((model, log))
}

/// Evaluate on the given sample indices (classification: per-sample labels;
/// segmentation: per-point labels with one shape per sample).
pub fn evaluate<T: Float>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    indices: &[usize],
    threads: usize,
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::invalid("evaluate: no samples selected"));
    }
    match model.cfg.task {
        Task::Classification => {
            let preds = parallel_map(indices, threads.max(1), |i| {
                Ok(argmax(&model.classify(&dataset.samples[i])?))
            })?;
            let labels: Vec<u32> = indices.iter().map(|&i| dataset.sample_labels[i]).collect();
            metrics(&preds, &labels, model.cfg.num_classes, None)
        }
        Task::Segmentation => {
            let per_sample = parallel_map(indices, threads.max(1), |i| {
                let probs = model.segment(&dataset.samples[i])?;
                let preds: Vec<u32> =
                    (0..probs.shape()[0]).map(|r| argmax(probs.row(r))).collect();
                Ok(preds)
            })?;
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            let mut sizes = Vec::new();
            let mut cats = Vec::new();
            for (&i, p) in indices.iter().zip(&per_sample) {
                let l = dataset.samples[i]
                    .labels()
                    .ok_or_else(|| Error::invalid("segmentation eval needs labels"))?;
                sizes.push(p.len());
                cats.push(dataset.sample_labels[i]);
                preds.extend_from_slice(p);
                labels.extend_from_slice(l);
            }
            let n_cats = cats.iter().map(|&c| c as usize + 1).max().unwrap_or(1);
            let grouping = ShapeGrouping {
                shape_sizes: sizes,
                shape_categories: cats,
                category_parts: vec![
                    (0..model.cfg.num_classes as u32).collect();
                    n_cats
                ],
            };
            metrics(&preds, &labels, model.cfg.num_classes, Some(&grouping))
        }
    }
}

// ── scaling benchmark ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub count: usize,
    pub median_secs: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of log(time) against log(count).
    pub slope: f64,
}

impl ScalingReport {
    pub fn to_table(&self) -> String {
        let mut out = String::from("count median_ms\n");
        for r in &self.rows {
            out.push_str(&format!("{} {:.3}\n", r.count, r.median_secs * 1e3));
        }
        if self.slope.is_finite() {
            out.push_str(&format!("loglog_slope={:.4}\n", self.slope));
        } else {
            out.push_str("loglog_slope=n/a\n");
        }
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn fit_loglog_slope(rows: &[ScalingRow]) -> f64 {
    if rows.len() < 2 {
        return f64::NAN;
    }
    let n = rows.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for r in rows {
        let x = (r.count as f64).ln();
        let y = r.median_secs.max(1e-12).ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn random_cloud<T: Float>(n: usize, seed: u64) -> PointCloud<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            [
                T::of(rng.gen_range(-1.0..1.0)),
                T::of(rng.gen_range(-1.0..1.0)),
                T::of(rng.gen_range(-1.0..1.0)),
            ]
        })
        .collect();
    PointCloud::new(pts, None, None).expect("nonempty cloud")
}

/// Median encoder-forward latency at each point count (token counts fixed
/// by the config) and the fitted log-log slope.
pub fn bench_scaling<T: Float>(
    model_cfg: &ModelConfig<T>,
    point_counts: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<ScalingReport> {
    if repeats == 0 || point_counts.is_empty() {
        return Err(Error::invalid("bench needs repeats >= 1 and some point counts"));
    }
    let model = Model::new(model_cfg.clone())?;
    let mut rows = Vec::with_capacity(point_counts.len());
    for &n in point_counts {
        let cloud = random_cloud::<T>(n, seed.wrapping_add(n as u64));
        model.encode(&cloud)?; // warmup
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let _ = model.encode(&cloud)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        rows.push(ScalingRow {
            count: n,
            median_secs: median(times),
        });
    }
    let slope = fit_loglog_slope(&rows);
    Ok(ScalingReport { rows, slope })
}

/// Median local-attention latency at each token count with K fixed.
pub fn bench_lau_scaling<T: Float>(
    token_counts: &[usize],
    cfg: &crate::attention::AttentionConfig,
    repeats: usize,
    seed: u64,
) -> Result<ScalingReport> {
    if repeats == 0 || token_counts.is_empty() {
        return Err(Error::invalid("bench needs repeats >= 1 and some token counts"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = crate::attention::MhaParams::<T>::init(cfg, &mut rng);
    let mut rows = Vec::with_capacity(token_counts.len());
    for &m in token_counts {
        let cloud = random_cloud::<T>(m, seed.wrapping_add(m as u64));
        let feats = crate::tokenizer::xavier(m, cfg.d_model, &mut rng);
        let tokens = crate::tokenizer::TokenSet::new(feats, cloud.coords().to_vec())?;
        crate::attention::lau_forward(&tokens, &params, cfg)?; // warmup
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let _ = crate::attention::lau_forward(&tokens, &params, cfg)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        rows.push(ScalingRow {
            count: m,
            median_secs: median(times),
        });
    }
    let slope = fit_loglog_slope(&rows);
    Ok(ScalingReport { rows, slope })
}
