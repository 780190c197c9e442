//! Losses, AdamW, the OneCycle schedule, and the train/eval loops.

use std::io::Write as IoWrite;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::models::{Mode, Model, Task};
use crate::signals::{baseline_subtract, Dataset, Example};
use crate::{Graph, Tensor};

/// Diffraction-limit constant λ_A0, mm.
pub const LAMBDA_A0: f64 = 6.70;
/// Contact-load face side, mm.
pub const FACE_MM: f64 = 40.0;

/// How the square-overlap area A is normalized in the localization loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OverlapNorm {
    /// Intersection over single-face area (the default reading).
    #[default]
    Face,
    /// Intersection over union; differs from `Face` by a monotone map.
    Union,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LocateLossCfg {
    pub lambda_a0: f64,
    pub face_mm: f64,
    pub norm: OverlapNorm,
}

impl Default for LocateLossCfg {
    fn default() -> Self {
        Self {
            lambda_a0: LAMBDA_A0,
            face_mm: FACE_MM,
            norm: OverlapNorm::Face,
        }
    }
}

/// Record the localization loss E(x̂, x) = max(|x̂−x|², (λ/2)²)·(1 − A) on
/// the graph. `pred` is a `[2]` node; the target enters as a constant.
pub fn locate_loss(
    g: &mut Graph,
    pred: NodeId,
    target: [f64; 2],
    cfg: &LocateLossCfg,
) -> Result<NodeId> {
    if g.shape(pred) != [2] {
        return Err(Error::Shape(format!(
            "locate_loss: prediction must be [2], got {:?}",
            g.shape(pred)
        )));
    }
    let t = g.constant(Tensor::from_slice(&[2], &target)?);
    let neg_t = g.scale(t, -1.0);
    let diff = g.add(pred, neg_t)?;
    let sq = g.mul(diff, diff)?;
    let dist2 = g.sum_all(sq);
    let clamped = g.max_const(dist2, (cfg.lambda_a0 / 2.0).powi(2));

    // per-axis overlap (face − |d|)+ of the two axis-aligned squares
    let absd = g.abs(diff);
    let neg = g.scale(absd, -1.0);
    let shifted = g.add_const(neg, cfg.face_mm);
    let pos = g.relu(shifted);
    let inter = g.prod_all(pos);
    let face_area = cfg.face_mm * cfg.face_mm;
    let a = match cfg.norm {
        OverlapNorm::Face => g.scale(inter, 1.0 / face_area),
        OverlapNorm::Union => {
            // union = 2·face² − intersection, bounded below by face² > 0
            let neg_inter = g.scale(inter, -1.0);
            let union = g.add_const(neg_inter, 2.0 * face_area);
            let inv = g.recip(union);
            g.mul(inter, inv)?
        }
    };
    let neg_a = g.scale(a, -1.0);
    let one_minus = g.add_const(neg_a, 1.0);
    g.mul(clamped, one_minus)
}

/// Plain-number evaluation of the same loss, used as an independent oracle
/// and for metric reporting.
pub fn locate_loss_value(pred: [f64; 2], target: [f64; 2], cfg: &LocateLossCfg) -> f64 {
    let dx = pred[0] - target[0];
    let dy = pred[1] - target[1];
    let dist2 = (dx * dx + dy * dy).max((cfg.lambda_a0 / 2.0).powi(2));
    let inter = (cfg.face_mm - dx.abs()).max(0.0) * (cfg.face_mm - dy.abs()).max(0.0);
    let face_area = cfg.face_mm * cfg.face_mm;
    let a = match cfg.norm {
        OverlapNorm::Face => inter / face_area,
        OverlapNorm::Union => inter / (2.0 * face_area - inter),
    };
    dist2 * (1.0 - a)
}

/// Numerically stable binary cross-entropy on a `[1]` logit node.
pub fn detect_loss(g: &mut Graph, logit: NodeId, label: f64) -> Result<NodeId> {
    g.bce_with_logit(logit, label)
}

// ---------------------------------------------------------------------------
// Schedule and optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCycleSchedule {
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    /// Fraction of the epoch budget spent ramping up (200 of 1000).
    pub ramp_frac: f64,
}

impl Default for OneCycleSchedule {
    fn default() -> Self {
        Self {
            lr_init: 1e-5,
            lr_peak: 2.5e-3,
            lr_final: 1e-3,
            ramp_frac: 0.2,
        }
    }
}

impl OneCycleSchedule {
    pub fn for_task(task: Task) -> Self {
        Self {
            lr_final: match task {
                Task::Locate => 1e-3,
                Task::Detect => 1e-7,
            },
            ..Self::default()
        }
    }

    /// Learning rate at `epoch` of a `total`-epoch run: linear ramp to the
    /// peak, then cosine descent to the final rate.
    pub fn lr_at(&self, epoch: usize, total: usize) -> Result<f64> {
        if epoch >= total {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside schedule of {total}"
            )));
        }
        let ramp = ((total as f64 * self.ramp_frac).round() as usize).clamp(1, total);
        if epoch < ramp {
            Ok(self.lr_init + (self.lr_peak - self.lr_init) * epoch as f64 / ramp as f64)
        } else if total == ramp {
            Ok(self.lr_peak)
        } else {
            let u = (epoch - ramp) as f64 / (total - ramp) as f64;
            Ok(self.lr_final
                + (self.lr_peak - self.lr_final) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos()))
        }
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(model: &Model, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            t: 0,
        }
    }

    /// One update from per-parameter gradient tensors.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Shape("optimizer/gradient arity mismatch".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                // decoupled decay, then the Adam step
                *w -= lr * self.weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Train / eval loops
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: OneCycleSchedule,
    pub weight_decay: f64,
    pub loss: LocateLossCfg,
    /// Detection test averaging: average logits instead of probabilities.
    pub average_logits: bool,
    /// Where to stream the per-epoch history (JSON lines), if anywhere.
    pub history_path: Option<PathBuf>,
    /// Zero the input outside this sample window, if set.
    pub window: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 32,
            seed: 0,
            schedule: OneCycleSchedule::default(),
            weight_decay: 1e-6,
            loss: LocateLossCfg::default(),
            average_logits: false,
            history_path: None,
            window: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_mde: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

/// One example, baseline-subtracted and in model-input layout.
pub struct Prepared {
    /// Residual against the mean baseline (training input).
    pub input: Tensor,
    /// Residuals against each stored baseline (test-time averaging).
    pub variants: Vec<Tensor>,
    pub target: Option<[f64; 2]>,
}

/// Zero samples outside `[lo, hi)` on the trailing time axis.
fn apply_window(mut t: Tensor, window: Option<(usize, usize)>) -> Tensor {
    let Some((lo, hi)) = window else { return t };
    let t_len = *t.shape().last().expect("non-scalar input");
    let rows = t.len() / t_len;
    for r in 0..rows {
        for i in 0..t_len {
            if i < lo || i >= hi {
                t.data_mut()[r * t_len + i] = 0.0;
            }
        }
    }
    t
}

/// Baseline-subtract and lay out every example of `ds` for `model`.
pub fn prepare(model: &Model, ds: &Dataset, window: Option<(usize, usize)>) -> Result<Vec<Prepared>> {
    let mean = ds.mean_baseline()?;
    let mut out = Vec::with_capacity(ds.examples.len());
    for e in &ds.examples {
        let input = model.prepare_input(&apply_window(baseline_subtract(&e.adjacency, &mean)?, window))?;
        let variants = ds
            .baselines
            .iter()
            .map(|b| {
                model.prepare_input(&apply_window(baseline_subtract(&e.adjacency, b)?, window))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Prepared {
            input,
            variants,
            target: e.position,
        });
    }
    Ok(out)
}

fn example_loss(
    g: &mut Graph,
    model: &Model,
    output: NodeId,
    target: Option<[f64; 2]>,
    cfg: &TrainConfig,
) -> Result<NodeId> {
    match model.spec().task {
        Task::Locate => {
            let t = target.ok_or_else(|| {
                Error::Data("locate training example without a position".into())
            })?;
            locate_loss(g, output, t, &cfg.loss)
        }
        Task::Detect => detect_loss(g, output, if target.is_some() { 1.0 } else { 0.0 }),
    }
}

/// Train `model` in place; returns the per-epoch history. Identical seeds
/// and data produce identical history bytes.
pub fn train(
    model: &mut Model,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRecord>> {
    let train_set = prepare(model, train_ds, cfg.window)?;
    let test_set = prepare(model, test_ds, cfg.window)?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut opt = AdamW::new(model, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut writer = match &cfg.history_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch, cfg.epochs)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Tensor> = model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
            let inv = 1.0 / batch.len() as f64;
            for &idx in batch {
                let ex = &train_set[idx];
                let mut g = Graph::new();
                let pass = model.forward(&mut g, &ex.input, Mode::Train, &mut rng)?;
                let loss = example_loss(&mut g, model, pass.output, ex.target, cfg)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss {value} at epoch {epoch}"
                    )));
                }
                epoch_loss += value;
                g.backward(loss)?;
                for (acc, &node) in grads.iter_mut().zip(&pass.param_nodes) {
                    if let Some(grad) = g.grad(node) {
                        let a = acc.data_mut();
                        for (slot, &d) in a.iter_mut().zip(grad.data()) {
                            *slot += inv * d;
                        }
                    }
                }
            }
            opt.step(model, &grads, lr)?;
        }
        epoch_loss /= train_set.len() as f64;

        let record = match model.spec().task {
            Task::Locate => {
                let m = evaluate_prepared_locator(model, &test_set, &cfg.loss)?;
                HistoryRecord {
                    epoch,
                    lr,
                    train_loss: epoch_loss,
                    test_loss: m.rmse * m.rmse,
                    test_mde: Some(m.mde),
                    test_accuracy: None,
                }
            }
            Task::Detect => {
                let m = evaluate_prepared_detector(model, &test_set, cfg.average_logits)?;
                HistoryRecord {
                    epoch,
                    lr,
                    train_loss: epoch_loss,
                    test_loss: m.bce,
                    test_mde: None,
                    test_accuracy: Some(m.accuracy),
                }
            }
        };
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record)?)?;
        }
        history.push(record);
    }
    Ok(history)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocateMetrics {
    /// Mean distance error, mm.
    pub mde: f64,
    /// Variance of the distance errors, mm²; std reported alongside.
    pub var: f64,
    pub std: f64,
    /// Root of the mean optimization loss, mm.
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectMetrics {
    pub accuracy: f64,
    pub bce: f64,
    pub perplexity: f64,
}

fn predict_averaged(model: &Model, ex: &Prepared) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.spec().output_dim()];
    for v in &ex.variants {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = model.forward(&mut g, v, Mode::Eval, &mut rng)?;
        for (a, &o) in acc.iter_mut().zip(g.value(pass.output).data()) {
            *a += o;
        }
    }
    for a in acc.iter_mut() {
        *a /= ex.variants.len() as f64;
    }
    Ok(acc)
}

/// Locator metrics with six-baseline prediction averaging.
pub fn evaluate_prepared_locator(
    model: &Model,
    set: &[Prepared],
    loss: &LocateLossCfg,
) -> Result<LocateMetrics> {
    if set.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let preds = set
        .iter()
        .map(|ex| predict_averaged(model, ex).map(|p| [p[0], p[1]]))
        .collect::<Result<Vec<_>>>()?;
    evaluate_locator_from(set, &preds, loss)
}

/// Metrics from externally supplied predictions (also the test oracle path).
pub fn evaluate_locator_from(
    set: &[Prepared],
    preds: &[[f64; 2]],
    loss: &LocateLossCfg,
) -> Result<LocateMetrics> {
    let mut dists = Vec::with_capacity(set.len());
    let mut mean_loss = 0.0;
    for (ex, &pred) in set.iter().zip(preds) {
        let target = ex
            .target
            .ok_or_else(|| Error::Data("locate evaluation example without a position".into()))?;
        let d = ((pred[0] - target[0]).powi(2) + (pred[1] - target[1]).powi(2)).sqrt();
        dists.push(d);
        mean_loss += locate_loss_value(pred, target, loss);
    }
    mean_loss /= set.len() as f64;
    let mde = dists.iter().sum::<f64>() / dists.len() as f64;
    let var = dists.iter().map(|d| (d - mde) * (d - mde)).sum::<f64>() / dists.len() as f64;
    Ok(LocateMetrics {
        mde,
        var,
        std: var.sqrt(),
        rmse: mean_loss.sqrt(),
    })
}

/// Detector metrics with six-baseline averaging of post-sigmoid
/// probabilities (or logits when `average_logits` is set).
pub fn evaluate_prepared_detector(
    model: &Model,
    set: &[Prepared],
    average_logits: bool,
) -> Result<DetectMetrics> {
    if set.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    let mut bce = 0.0;
    for ex in set {
        let label = ex.target.is_some();
        let prob = if average_logits {
            let logit = predict_averaged(model, ex)?[0];
            1.0 / (1.0 + (-logit).exp())
        } else {
            let mut p = 0.0;
            for v in &ex.variants {
                let mut g = Graph::new();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let pass = model.forward(&mut g, v, Mode::Eval, &mut rng)?;
                let logit = g.value(pass.output).item();
                p += 1.0 / (1.0 + (-logit).exp());
            }
            p / ex.variants.len() as f64
        };
        if (prob >= 0.5) == label {
            correct += 1;
        }
        let p = prob.clamp(1e-12, 1.0 - 1e-12);
        bce -= if label { p.ln() } else { (1.0 - p).ln() };
    }
    bce /= set.len() as f64;
    Ok(DetectMetrics {
        accuracy: correct as f64 / set.len() as f64,
        bce,
        perplexity: bce.exp(),
    })
}

/// Convenience wrappers taking datasets.
pub fn evaluate_locator(model: &Model, ds: &Dataset, loss: &LocateLossCfg) -> Result<LocateMetrics> {
    evaluate_prepared_locator(model, &prepare(model, ds, None)?, loss)
}

pub fn evaluate_detector(model: &Model, ds: &Dataset, average_logits: bool) -> Result<DetectMetrics> {
    evaluate_prepared_detector(model, &prepare(model, ds, None)?, average_logits)
}

// ---------------------------------------------------------------------------
// Time-window ablation
// ---------------------------------------------------------------------------

/// The four ingestion windows of the ablation study, ms.
pub const ABLATION_WINDOWS_MS: [(f64, f64); 4] =
    [(0.07, 0.40), (0.16, 0.40), (0.07, 0.24), (0.16, 0.24)];

/// Map a time window in ms to sample indices of the trimmed 158-sequence.
pub fn window_to_samples(
    t0_ms: f64,
    t1_ms: f64,
    window_ms: f64,
    trim: usize,
    len: usize,
) -> Result<(usize, usize)> {
    if !(t0_ms < t1_ms) || t0_ms < 0.0 || t1_ms > window_ms + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "window {t0_ms}:{t1_ms} ms outside the {window_ms} ms record"
        )));
    }
    let to_idx = |t: f64| (t / window_ms * crate::signals::RECON_LEN as f64).floor() as i64 - trim as i64;
    let lo = to_idx(t0_ms).clamp(0, len as i64) as usize;
    let hi = to_idx(t1_ms).clamp(0, len as i64) as usize;
    Ok((lo, hi))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub t0_ms: f64,
    pub t1_ms: f64,
    pub samples: (usize, usize),
    pub mde: f64,
    pub rmse: f64,
}

/// Retrain one model per ingestion window and report test MDE.
pub fn ablate_windows(
    spec: &crate::models::ModelSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    windows: &[(f64, f64)],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(windows.len());
    for &(t0, t1) in windows {
        let samples = window_to_samples(
            t0,
            t1,
            train_ds.plate.window_ms,
            train_ds.plate.trim,
            train_ds.plate.compressed_len(),
        )?;
        let mut model = Model::build(spec.clone())?;
        let mut wcfg = cfg.clone();
        wcfg.window = Some(samples);
        wcfg.history_path = None;
        train(&mut model, train_ds, test_ds, &wcfg)?;
        let m = evaluate_prepared_locator(&model, &prepare(&model, test_ds, Some(samples))?, &cfg.loss)?;
        rows.push(AblationRow {
            t0_ms: t0,
            t1_ms: t1,
            samples,
            mde: m.mde,
            rmse: m.rmse,
        });
    }
    Ok(rows)
}

/// Label helper shared with the CLI.
pub fn label_of(e: &Example) -> f64 {
    if e.is_damaged() {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dihedral::GroupElement;
    use crate::models::{ModelSpec, Variant};
    use crate::signals::{CurationLog, PlateConfig, SymmetryBreakSpec};

    fn graph_loss(pred: [f64; 2], target: [f64; 2], cfg: &LocateLossCfg) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_slice(&[2], &pred).unwrap());
        let l = locate_loss(&mut g, p, target, cfg).unwrap();
        g.value(l).item()
    }

    /// Rectangle-intersection oracle written independently of the loss code.
    fn oracle_loss(pred: [f64; 2], target: [f64; 2]) -> f64 {
        let half = 20.0;
        let ix = (pred[0] + half).min(target[0] + half) - (pred[0] - half).max(target[0] - half);
        let iy = (pred[1] + half).min(target[1] + half) - (pred[1] - half).max(target[1] - half);
        let inter = ix.max(0.0) * iy.max(0.0);
        let d2 = (pred[0] - target[0]).powi(2) + (pred[1] - target[1]).powi(2);
        d2.max(3.35 * 3.35) * (1.0 - inter / 1600.0)
    }

    #[test]
    fn locate_loss_frozen_examples() {
        let cfg = LocateLossCfg::default();
        assert_eq!(graph_loss([12.0, -7.0], [12.0, -7.0], &cfg), 0.0);
        assert_eq!(graph_loss([100.0, 0.0], [0.0, 0.0], &cfg), 10000.0);
        let e = graph_loss([2.0, 0.0], [0.0, 0.0], &cfg);
        assert!((e - 0.561125).abs() < 1e-6, "E = {}", e);
    }

    #[test]
    fn locate_loss_matches_rectangle_oracle() {
        let cfg = LocateLossCfg::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = [rng.gen_range(-120.0..120.0), rng.gen_range(-120.0..120.0)];
            let t = [rng.gen_range(-120.0..120.0), rng.gen_range(-120.0..120.0)];
            let a = graph_loss(p, t, &cfg);
            let b = oracle_loss(p, t);
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{} vs {}", a, b);
            assert!((locate_loss_value(p, t, &cfg) - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn locate_loss_union_norm_is_monotone_variant() {
        let cfg = LocateLossCfg {
            norm: OverlapNorm::Union,
            ..LocateLossCfg::default()
        };
        // perfect overlap still zero; IoU shrinks A, so loss grows elsewhere
        assert_eq!(graph_loss([5.0, 5.0], [5.0, 5.0], &cfg), 0.0);
        let face = LocateLossCfg::default();
        let e_union = graph_loss([2.0, 0.0], [0.0, 0.0], &cfg);
        let e_face = graph_loss([2.0, 0.0], [0.0, 0.0], &face);
        assert!(e_union > e_face);
    }

    #[test]
    fn locate_loss_is_d4_co_invariant() {
        let cfg = LocateLossCfg::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let p = [rng.gen_range(-120.0..120.0), rng.gen_range(-120.0..120.0)];
            let t = [rng.gen_range(-120.0..120.0), rng.gen_range(-120.0..120.0)];
            let base = graph_loss(p, t, &cfg);
            for g in GroupElement::all() {
                let moved = graph_loss(g.apply_vector(p), g.apply_vector(t), &cfg);
                assert!((moved - base).abs() <= 1e-12 * base.max(1.0), "{}", g);
            }
        }
    }

    #[test]
    fn locate_loss_gradient_matches_finite_differences() {
        let cfg = LocateLossCfg::default();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut checked = 0;
        while checked < 20 {
            let p: [f64; 2] = [rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0)];
            let t: [f64; 2] = [rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0)];
            // skip clamp and square-edge contact neighborhoods
            let d = ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt();
            if (d - 3.35).abs() < 0.5
                || ((p[0] - t[0]).abs() - 40.0).abs() < 0.5
                || ((p[1] - t[1]).abs() - 40.0).abs() < 0.5
            {
                continue;
            }
            checked += 1;
            let forward = |data: &[f64]| locate_loss_value([data[0], data[1]], t, &cfg);
            let numeric = crate::check::finite_diff_grad(forward, &p, 1e-5);
            let mut g = Graph::new();
            let pn = g.param(Tensor::from_slice(&[2], &p).unwrap());
            let l = locate_loss(&mut g, pn, t, &cfg).unwrap();
            g.backward(l).unwrap();
            let analytic = g.grad(pn).unwrap().data().to_vec();
            let err = crate::check::max_rel_err(&analytic, &numeric, 1e-4);
            assert!(err < 1e-4, "at {:?}/{:?}: {}", p, t, err);
        }
    }

    #[test]
    fn detect_loss_values_and_perplexity() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::scalar(0.0));
        for label in [0.0, 1.0] {
            let l = detect_loss(&mut g, zero, label).unwrap();
            assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let big = g.constant(Tensor::scalar(20.0));
        let l = detect_loss(&mut g, big, 1.0).unwrap();
        assert!(g.value(l).item() < 1e-8);
        assert!((std::f64::consts::LN_2.exp() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints() {
        let s = OneCycleSchedule::for_task(Task::Locate);
        assert_eq!(s.lr_at(0, 1000).unwrap(), 1e-5);
        assert!((s.lr_at(200, 1000).unwrap() - 2.5e-3).abs() < 1e-15);
        let last = s.lr_at(999, 1000).unwrap();
        let step = (s.lr_peak - s.lr_final) / 800.0;
        assert!((last - s.lr_final).abs() < 2.0 * step, "last {}", last);
        assert!(s.lr_at(1000, 1000).is_err());
        // piecewise monotone: up to the peak at epoch 200, then down
        let mut prev = 0.0;
        for e in 0..=200 {
            let lr = s.lr_at(e, 1000).unwrap();
            assert!(lr >= prev);
            prev = lr;
        }
        for e in 201..1000 {
            let lr = s.lr_at(e, 1000).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn adam_step_matches_scalar_reference() {
        // hand-stepped Adam on f(x) = x²/2, grad = x, no decay
        let spec = ModelSpec {
            variant: Variant::Ordinary,
            task: Task::Locate,
            channel_widths: [1, 1, 1, 1, 1, 1],
            input_length: 32,
            dropout: 0.0,
            use_bias: false,
            include_diagonal: false,
            seed: 0,
        };
        let mut model = Model::build(spec).unwrap();
        let x0 = model.params()[0].value.data()[0];
        let mut opt = AdamW::new(&model, 0.0);
        let lr = 0.01;
        let (mut m, mut v, mut x_ref) = (0.0f64, 0.0f64, x0);
        for t in 1..=3 {
            // drive only the first coordinate; leave other grads zero
            let mut grads: Vec<Tensor> = model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
            grads[0].data_mut()[0] = x_ref;
            opt.step(&mut model, &grads, lr).unwrap();
            m = 0.9 * m + 0.1 * x_ref;
            v = 0.999 * v + 0.001 * x_ref * x_ref;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            x_ref -= lr * m_hat / (v_hat.sqrt() + 1e-8);
            let got = model.params()[0].value.data()[0];
            assert!((got - x_ref).abs() < 1e-15, "step {t}: {got} vs {x_ref}");
        }
    }

    #[test]
    fn zero_gradient_parameter_decays_exactly() {
        let mut model =
            Model::build(ModelSpec::desk_scale(Variant::Ordinary, Task::Locate, 4)).unwrap();
        let wd = 0.01;
        let lr = 0.1;
        let before = model.params()[0].value.data()[0];
        let mut opt = AdamW::new(&model, wd);
        let grads: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        opt.step(&mut model, &grads, lr).unwrap();
        let after = model.params()[0].value.data()[0];
        assert_eq!(after, before * (1.0 - lr * wd));
    }

    fn micro_dataset(n: usize, seed: u64) -> Dataset {
        let plate = PlateConfig {
            grid_n: 3,
            noise: 0.0,
            ..PlateConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = || {
            let data: Vec<f64> = (0..16 * 158).map(|_| rng.gen_range(-0.1..0.1)).collect();
            Tensor::new(vec![4, 4, 158], data).unwrap()
        };
        let baselines: Vec<Tensor> = (0..6).map(|_| mk()).collect();
        let examples = (0..n)
            .map(|i| crate::signals::Example {
                position: Some([((i % 3) as f64 - 1.0) * 50.0, ((i / 3) as f64 - 1.0) * 50.0]),
                adjacency: mk(),
                excitation_spectrum: vec![0.0; 96],
            })
            .collect();
        Dataset {
            plate,
            sym: SymmetryBreakSpec::default(),
            seed,
            baselines,
            examples,
            curation: CurationLog::default(),
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let ds = micro_dataset(4, 8);
        let mut model = Model::build(ModelSpec {
            dropout: 0.0,
            ..ModelSpec::desk_scale(Variant::Exact, Task::Locate, 2)
        })
        .unwrap();
        let before: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        let cfg = TrainConfig {
            epochs: 1,
            schedule: OneCycleSchedule {
                lr_init: 0.0,
                lr_peak: 0.0,
                lr_final: 0.0,
                ramp_frac: 0.2,
            },
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        train(&mut model, &ds, &ds, &cfg).unwrap();
        for (a, b) in model.params().iter().zip(&before) {
            assert_eq!(&a.value, b);
        }
    }

    #[test]
    fn training_reduces_loss_on_a_micro_problem() {
        let ds = micro_dataset(9, 21);
        let mut model =
            Model::build(ModelSpec::desk_scale(Variant::Ordinary, Task::Locate, 5)).unwrap();
        let cfg = TrainConfig {
            epochs: 12,
            seed: 3,
            schedule: OneCycleSchedule {
                lr_final: 1e-4,
                ..OneCycleSchedule::default()
            },
            ..TrainConfig::default()
        };
        let history = train(&mut model, &ds, &ds, &cfg).unwrap();
        assert_eq!(history.len(), 12);
        let first = history.first().unwrap().train_loss;
        let last = history.last().unwrap().train_loss;
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn evaluation_metrics_on_synthetic_predictions() {
        let ds = micro_dataset(9, 31);
        let model = Model::build(ModelSpec::desk_scale(Variant::Exact, Task::Locate, 1)).unwrap();
        let set = prepare(&model, &ds, None).unwrap();
        let perfect: Vec<[f64; 2]> = set.iter().map(|e| e.target.unwrap()).collect();
        let cfg = LocateLossCfg::default();
        let m = evaluate_locator_from(&set, &perfect, &cfg).unwrap();
        assert_eq!((m.mde, m.var, m.rmse), (0.0, 0.0, 0.0));
        let offset: Vec<[f64; 2]> = set
            .iter()
            .map(|e| {
                let t = e.target.unwrap();
                [t[0] + 2.0, t[1]]
            })
            .collect();
        let m = evaluate_locator_from(&set, &offset, &cfg).unwrap();
        assert!((m.mde - 2.0).abs() < 1e-12);
        assert!((m.var - 0.0).abs() < 1e-12);
        assert!((m.rmse - 0.561125f64.sqrt()).abs() < 1e-9, "rmse {}", m.rmse);
    }

    #[test]
    fn window_index_arithmetic() {
        assert_eq!(window_to_samples(0.16, 0.24, 0.4, 34, 158).unwrap(), (42, 81));
        // the full window leaves the 158-sequence untouched
        assert_eq!(window_to_samples(0.07, 0.40, 0.4, 34, 158).unwrap(), (0, 158));
        assert!(window_to_samples(0.3, 0.2, 0.4, 34, 158).is_err());
        assert!(window_to_samples(0.1, 0.5, 0.4, 34, 158).is_err());
        let t = Tensor::full(&[4, 4, 158], 1.0);
        let masked = apply_window(t.clone(), Some((0, 158)));
        assert_eq!(masked, t);
        let masked = apply_window(t, Some((42, 81)));
        let row = &masked.data()[..158];
        assert_eq!(row[41], 0.0);
        assert_eq!(row[42], 1.0);
        assert_eq!(row[80], 1.0);
        assert_eq!(row[81], 0.0);
    }

    #[test]
    fn history_is_deterministic_for_identical_seeds() {
        let ds = micro_dataset(6, 40);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model =
                Model::build(ModelSpec::desk_scale(Variant::Exact, Task::Locate, 7)).unwrap();
            let h = train(&mut model, &ds, &ds, &cfg).unwrap();
            h.iter()
                .map(|r| serde_json::to_string(r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
