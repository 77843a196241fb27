//! Fine-tuning loop, box loss and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::frozen_checksum;
use crate::data::{join, tokenize, AnnotationRecord, PredictionRecord};
use crate::error::{Error, Result};
use crate::metrics::{report, BBox, MetricsReport};
use crate::model::{GroundingModel, NormBox};
use crate::peft::{param_report, ParamReport};
use crate::tensor::Tensor;

/// Transition point of the smooth-L1 term, in normalized coordinates.
pub const SMOOTH_L1_BETA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub lambda_reg: f64,
    pub lambda_iou: f64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Train every parameter of a model without PEFT structure.
    pub full_finetune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            optimizer: Optimizer::adam(),
            lambda_reg: 1.0,
            lambda_iou: 1.0,
            seed: 0,
            eval_every: 0,
            full_finetune: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &'static str, reason: &str| Err(Error::Config { field, reason: reason.into() });
        if self.steps == 0 {
            return cfg("steps", "must be at least 1");
        }
        if self.batch_size == 0 {
            return cfg("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return cfg("lr", "must be positive and finite");
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_iou >= 0.0) {
            return cfg("lambda_reg", "loss weights must be non-negative");
        }
        if self.lambda_reg == 0.0 && self.lambda_iou == 0.0 {
            return cfg("lambda_iou", "loss weights must not both be zero");
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return cfg("optimizer", "adam needs betas in [0,1) and eps > 0");
            }
        }
        Ok(())
    }
}

/// Records `λ_reg · mean smooth-L1(pred − gt) + λ_iou · (1 − IoU)` for a
/// `[1×4]` center/size prediction. Disjoint boxes give the IoU term a zero
/// gradient.
pub fn box_loss(tape: &mut Tape, pred: Var, gt: &NormBox, lambda_reg: f64, lambda_iou: f64) -> Result<Var> {
    let g = tape.constant(Tensor::new(&[1, 4], gt.to_array().to_vec())?);
    let diff = tape.sub(pred, g)?;
    let reg = tape.smooth_l1(diff, SMOOTH_L1_BETA)?;
    let reg = tape.mean(reg)?;
    let reg = tape.scale(reg, lambda_reg)?;

    let col = |tape: &mut Tape, v: Var, i: usize| tape.slice_cols(v, i, 1);
    let (cx, cy, w, h) = (col(tape, pred, 0)?, col(tape, pred, 1)?, col(tape, pred, 2)?, col(tape, pred, 3)?);
    let half_w = tape.scale(w, 0.5)?;
    let half_h = tape.scale(h, 0.5)?;
    let x1 = tape.sub(cx, half_w)?;
    let x2 = tape.add(cx, half_w)?;
    let y1 = tape.sub(cy, half_h)?;
    let y2 = tape.add(cy, half_h)?;
    let c = |tape: &mut Tape, v: f64| tape.constant(Tensor::full(&[1, 1], v));
    let (gx1, gx2) = (c(tape, gt.cx - gt.w / 2.0), c(tape, gt.cx + gt.w / 2.0));
    let (gy1, gy2) = (c(tape, gt.cy - gt.h / 2.0), c(tape, gt.cy + gt.h / 2.0));

    let right = tape.minimum(x2, gx2)?;
    let left = tape.maximum(x1, gx1)?;
    let iw = tape.sub(right, left)?;
    let iw = tape.relu(iw)?;
    let bottom = tape.minimum(y2, gy2)?;
    let top = tape.maximum(y1, gy1)?;
    let ih = tape.sub(bottom, top)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let area = tape.mul(w, h)?;
    let union = tape.add_scalar(area, gt.w * gt.h)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;
    let iou = tape.sum(iou)?;
    let iou_term = tape.scale(iou, -lambda_iou)?;
    let iou_term = tape.add_scalar(iou_term, lambda_iou)?;
    tape.add(reg, iou_term)
}

/// Anything that maps an annotation to a normalized box.
pub trait BoxPredictor {
    fn predict(&self, record: &AnnotationRecord) -> Result<NormBox>;
}

impl BoxPredictor for GroundingModel {
    fn predict(&self, record: &AnnotationRecord) -> Result<NormBox> {
        let patches = record.patch_tensor()?;
        self.predict_box(&patches, &tokenize(&record.query, self.config().vocab_size))
    }
}

/// Predicted pixel boxes, one per record.
pub fn predict_all(model: &impl BoxPredictor, data: &[AnnotationRecord]) -> Result<Vec<PredictionRecord>> {
    data.iter()
        .map(|r| {
            let b = model.predict(r)?;
            let bbox = BBox::from_center(b.cx, b.cy, b.w, b.h, r.width as f64, r.height as f64)?;
            Ok(PredictionRecord { pair_id: r.pair_id.clone(), bbox })
        })
        .collect()
}

pub fn evaluate(model: &impl BoxPredictor, data: &[AnnotationRecord]) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    report(&join(data, &predict_all(model, data)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub param_report: ParamReport,
    pub frozen_sha256: String,
    pub wall_time_secs: f64,
}

impl TrainLog {
    /// Plain-text summary of the loss curve and evaluations.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let n = self.losses.len();
        let window = (n / 10).max(1);
        let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let _ = writeln!(s, "steps: {n}");
        if n > 0 {
            let _ = writeln!(s, "loss (first {window} steps): {:.6}", avg(&self.losses[..window]));
            let _ = writeln!(s, "loss (last {window} steps):  {:.6}", avg(&self.losses[n - window..]));
        }
        for e in &self.evals {
            let _ = writeln!(
                s,
                "step {:>6}: Pr@0.5 {:.2}  meanIoU {:.2}  cumIoU {:.2}",
                e.step,
                e.report.pr(0.5).unwrap_or(f64::NAN),
                e.report.mean_iou,
                e.report.cum_iou
            );
        }
        let _ = writeln!(s, "trainable parameters: {} / {}", self.param_report.trainable, self.param_report.total);
        let _ = writeln!(s, "efficiency: {}", self.param_report.efficiency_str());
        s
    }
}

struct Sample {
    patches: Tensor,
    tokens: Vec<usize>,
    gt: NormBox,
}

fn prepare(model: &GroundingModel, data: &[AnnotationRecord]) -> Result<Vec<Sample>> {
    data.iter()
        .map(|r| {
            Ok(Sample {
                patches: r.patch_tensor()?,
                tokens: tokenize(&r.query, model.config().vocab_size),
                gt: r.norm_box(),
            })
        })
        .collect()
}

/// Mean loss over `data` without touching the model.
pub fn dataset_loss(model: &GroundingModel, data: &[AnnotationRecord], cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let mut total = 0.0;
    for s in prepare(model, data)? {
        let mut tape = Tape::new();
        let vars = tape.bind(model.params());
        let pred = model.forward_box(&mut tape, &vars, &s.patches, &s.tokens)?;
        let loss = box_loss(&mut tape, pred, &s.gt, cfg.lambda_reg, cfg.lambda_iou)?;
        total += tape.data(loss)[0];
    }
    Ok(total / data.len() as f64)
}

pub fn train(model: &mut GroundingModel, data: &[AnnotationRecord], cfg: &TrainConfig) -> Result<TrainLog> {
    train_with_eval(model, data, None, cfg)
}

/// Trains the trainable parameters of `model` on `data`. Periodic
/// evaluation runs on `eval` when given, otherwise on `data`.
pub fn train_with_eval(
    model: &mut GroundingModel,
    data: &[AnnotationRecord],
    eval: Option<&[AnnotationRecord]>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if cfg.full_finetune {
        if model.peft_spec().is_some() {
            return Err(Error::State("full fine-tuning requires a model without PEFT structure".into()));
        }
        model.set_all_trainable(true);
    } else if model.peft_spec().is_none() {
        return Err(Error::State(
            "model has no PEFT structure; inject one or enable full fine-tuning".into(),
        ));
    }

    let started = Instant::now();
    let samples = prepare(model, data)?;
    let frozen_before = frozen_checksum(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut optim = OptimState::new(model, &cfg.optimizer);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let inv_batch = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.steps {
        model.params_mut().clear_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &samples[order[cursor]];
            cursor += 1;
            let mut tape = Tape::new();
            let vars = tape.bind(model.params());
            let pred = model.forward_box(&mut tape, &vars, &s.patches, &s.tokens)?;
            let loss = box_loss(&mut tape, pred, &s.gt, cfg.lambda_reg, cfg.lambda_iou)?;
            let loss = tape.scale(loss, inv_batch)?;
            batch_loss += tape.data(loss)[0];
            tape.backward(loss, model.params_mut())?;
        }
        if !batch_loss.is_finite() {
            return Err(Error::Diverged { step, loss: batch_loss });
        }
        losses.push(batch_loss);
        optim.update(model, cfg.lr);

        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            evals.push(EvalPoint { step: step + 1, report: evaluate(model, eval.unwrap_or(data))? });
        }
    }
    model.params_mut().clear_grads();

    let frozen_after = frozen_checksum(model.params());
    if frozen_before != frozen_after {
        return Err(Error::State("frozen parameters changed during training".into()));
    }
    Ok(TrainLog {
        losses,
        evals,
        param_report: param_report(model),
        frozen_sha256: frozen_after,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

struct OptimState {
    kind: Optimizer,
    t: i32,
    /// First and second moments per parameter id (empty when frozen).
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    fn new(model: &GroundingModel, kind: &Optimizer) -> Self {
        let zeros = || -> Vec<Vec<f64>> {
            model.params().iter().map(|p| if p.trainable { vec![0.0; p.numel()] } else { Vec::new() }).collect()
        };
        Self { kind: kind.clone(), t: 0, m: zeros(), v: zeros() }
    }

    fn update(&mut self, model: &mut GroundingModel, lr: f64) {
        self.t += 1;
        for (id, p) in model.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else { continue };
            let w = p.tensor.data_mut();
            match self.kind {
                Optimizer::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(&g) {
                        *wi -= lr * gi;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    let (m, v) = (&mut self.m[id], &mut self.v[id]);
                    for i in 0..w.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{ModelConfig, ModuleTag};
    use crate::peft::{inject, PeftSpec};

    fn loss_of(pred: [f64; 4], gt: NormBox, lr: f64, li: f64) -> f64 {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(&[1, 4], pred.to_vec()).unwrap());
        let l = box_loss(&mut tape, p, &gt, lr, li).unwrap();
        tape.data(l)[0]
    }

    #[test]
    fn loss_examples() {
        let gt = NormBox { cx: 0.3, cy: 0.6, w: 0.2, h: 0.1 };
        assert!(loss_of(gt.to_array(), gt, 1.0, 1.0).abs() < 1e-12);
        assert_eq!(loss_of([0.8, 0.2, 0.1, 0.1], gt, 0.0, 1.0), 1.0);
    }

    #[test]
    fn iou_term_matches_metric() {
        let gt = NormBox { cx: 0.5, cy: 0.5, w: 0.4, h: 0.2 };
        let pred = [0.55, 0.45, 0.3, 0.3];
        let a = BBox::from_center(pred[0], pred[1], pred[2], pred[3], 1.0, 1.0).unwrap();
        let b = BBox::from_center(gt.cx, gt.cy, gt.w, gt.h, 1.0, 1.0).unwrap();
        let want = 1.0 - crate::metrics::iou(&a, &b).unwrap();
        assert!((loss_of(pred, gt, 0.0, 1.0) - want).abs() < 1e-12);
    }

    fn tiny_setup(spec: Option<PeftSpec>) -> (GroundingModel, Vec<AnnotationRecord>) {
        let mut model = GroundingModel::build(&ModelConfig::default()).unwrap();
        if let Some(spec) = spec {
            inject(&mut model, &spec).unwrap();
        }
        let data = generate_synthetic(&SyntheticSpec { n_samples: 16, ..Default::default() }).unwrap();
        (model, data)
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { steps: 0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { lambda_reg: 0.0, lambda_iou: 0.0, ..Default::default() },
            TrainConfig { lambda_reg: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config { .. })), "{c:?}");
        }
    }

    #[test]
    fn requires_peft_or_fft_flag() {
        let (mut model, data) = tiny_setup(None);
        let cfg = TrainConfig { steps: 1, ..Default::default() };
        assert!(matches!(train(&mut model, &data, &cfg), Err(Error::State(_))));
        assert!(matches!(train(&mut model, &[], &cfg), Err(Error::Input(_)) | Err(Error::State(_))));
        let fft = TrainConfig { full_finetune: true, ..cfg };
        let log = train(&mut model, &data, &fft).unwrap();
        assert_eq!(log.param_report.efficiency_str(), "0.00");
    }

    #[test]
    fn nan_loss_reports_divergence() {
        let (mut model, mut data) = tiny_setup(Some(PeftSpec::lora(2, ModuleTag::ALL)));
        let id = model.params().id_of("decoder.box_head.out.weight").unwrap();
        model.params_mut().get_mut(id).tensor.data_mut()[0] = f64::NAN;
        data.truncate(1);
        match train(&mut model, &data, &TrainConfig { steps: 3, ..Default::default() }) {
            Err(Error::Diverged { step, loss }) => {
                assert_eq!(step, 0);
                assert!(loss.is_nan());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fully_frozen_model_does_not_move() {
        let (mut model, data) = tiny_setup(Some(PeftSpec::bitfit([ModuleTag::TextEncoder])));
        model.set_all_trainable(false);
        let before = model.params().clone();
        let log = train(&mut model, &data, &TrainConfig { steps: 5, batch_size: 16, ..Default::default() }).unwrap();
        for (a, b) in before.iter().zip(model.params().iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        // the batch covers the whole set; only summation order differs
        assert!(log.losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn deterministic_and_logs_every_step() {
        let run = || {
            let (mut model, data) = tiny_setup(Some(PeftSpec::adapter(4, ModuleTag::ALL)));
            let cfg = TrainConfig { steps: 6, batch_size: 4, eval_every: 3, ..Default::default() };
            let log = train(&mut model, &data, &cfg).unwrap();
            (log.losses, log.evals, log.frozen_sha256)
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 6);
        assert_eq!(a.1.len(), 2);
    }

    struct Oracle;
    impl BoxPredictor for Oracle {
        fn predict(&self, r: &AnnotationRecord) -> Result<NormBox> {
            Ok(r.norm_box())
        }
    }

    #[test]
    fn oracle_predictor_scores_100() {
        let (model, data) = tiny_setup(None);
        let rep = evaluate(&Oracle, &data).unwrap();
        assert_eq!(rep.pr(0.5), Some(100.0));
        assert_eq!(rep.pr(0.9), Some(100.0));
        assert!((rep.mean_iou - 100.0).abs() < 1e-9);
        assert!((rep.cum_iou - 100.0).abs() < 1e-9);
        assert_eq!(evaluate(&model, &data).unwrap(), evaluate(&model, &data).unwrap());
        assert!(evaluate(&model, &[]).is_err());
    }
}
