use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{metrics, weighted_bce, AdamW, Dataset, EvalReport, TrainConfig};
use crate::autodiff::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,train_loss,val_loss,val_acc,val_auc`; an undefined AUC is
    /// written as `nan`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc,val_auc\n");
        for e in &self.epochs {
            let auc = e.val_auc.map_or("nan".to_string(), |a| format!("{a:.9}"));
            let _ = writeln!(s, "{},{:.9},{:.9},{:.9},{}", e.epoch, e.train_loss, e.val_loss, e.val_acc, auc);
        }
        s
    }
}

/// Tracks the best validation accuracy; later ties do not count as
/// improvements.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: usize,
    pub best: f64,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_epoch: 0,
            best: f64::NEG_INFINITY,
        }
    }

    /// Returns `(improved, stop)` after observing `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, val_acc: f64) -> (bool, bool) {
        let improved = val_acc > self.best;
        if improved {
            self.best = val_acc;
            self.best_epoch = epoch;
        }
        (improved, epoch - self.best_epoch >= self.patience)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: History,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Validation report of the restored best weights.
    pub best_report: EvalReport,
    pub class_weights: [f64; 2],
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Eval-mode probabilities for every clip, in fixed-size batches.
pub fn predict(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    no_grad(|| {
        let mut out = Vec::with_capacity(data.len());
        for chunk in idx.chunks(batch_size.max(1)) {
            let (img, wav, _) = data.batch(chunk)?;
            let p = model.forward(&img, &wav, &mut ForwardCtx::eval())?;
            out.extend(p.data().iter().map(|&v| v as f64));
        }
        Ok(out)
    })
}

/// Probabilities, loss and metrics on `data`.
pub fn evaluate(model: &Model<f32>, data: &Dataset, batch_size: usize, weights: [f64; 2]) -> Result<(Vec<f64>, f64, EvalReport)> {
    if data.is_empty() {
        return Err(Error::EmptySplit("evaluation set is empty".into()));
    }
    let probs = predict(model, data, batch_size)?;
    let p = Tensor::<f64>::new(probs.clone(), &[probs.len()])?;
    let loss = weighted_bce(&p, &data.labels, weights)?.item();
    let report = metrics(&probs, &data.labels, 0.5)?;
    Ok((probs, loss, report))
}

/// Epoch loop with early stopping on validation accuracy. The model ends up
/// holding the weights of the best epoch.
pub fn train(
    model: &Model<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit("validation split is empty".into()));
    }
    let weights = cfg.resolve_weights(&train_set.labels)?;
    let mut opt = AdamW::new(&model.params, cfg.adamw());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = History::default();
    let mut best_state: Vec<Vec<f32>> = model.params.iter().map(|p| p.tensor.to_vec()).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (img, wav, labels) = train_set.batch(chunk)?;
            let mut ctx = ForwardCtx::train(mix(cfg.seed, epoch as u64, b as u64));
            let probs = model.forward(&img, &wav, &mut ctx)?;
            let loss = weighted_bce(&probs, &labels, weights)?;
            let lv = loss.item() as f64;
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            model.params.zero_grad();
            loss.backward()?;
            opt.step(&model.params);
            loss_sum += lv * chunk.len() as f64;
        }
        let (_, val_loss, report) = evaluate(model, val_set, cfg.eval_batch_size, weights)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_acc: report.accuracy,
            val_auc: report.roc_auc,
        };
        on_epoch(&rec);
        history.epochs.push(rec);
        let (improved, stop) = stopper.observe(epoch, report.accuracy);
        if improved {
            for (slot, p) in best_state.iter_mut().zip(model.params.iter()) {
                slot.copy_from_slice(&p.tensor.data());
            }
        }
        let reached = cfg.target_val_acc.is_some_and(|t| report.accuracy >= t);
        if stop || reached {
            break;
        }
    }
    for (saved, p) in best_state.iter().zip(model.params.iter()) {
        p.tensor.data_mut().copy_from_slice(saved);
    }
    model.params.zero_grad();
    let (_, _, best_report) = evaluate(model, val_set, cfg.eval_batch_size, weights)?;
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_val_acc: stopper.best,
        best_report,
        class_weights: weights,
    })
}
