//! Training loop, evaluation and seed sweeps.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::reasoning::{sample_seed, HierModel, Prediction};

use super::checkpoint::Checkpoint;
use super::config::{Config, Splits};
use super::metrics::{MetricSummary, Metrics};
use super::optim::AdamW;

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_task_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the validation-best epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Mean total loss with the evaluation `beta`.
    pub loss: f64,
    pub predictions: Vec<Prediction>,
}

fn divergence(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Mean total loss and gradients of one batch.
fn batch_gradients(model: &HierModel, data: &Dataset, batch: &[usize], beta: f64, seed: u64) -> Result<(f64, f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let mut totals = Vec::with_capacity(batch.len());
    let mut task_sum = 0.0;
    for &i in batch {
        let s = &data.samples()[i];
        let f = model.forward(&mut tape, &bound, &s.sequence, data.labels(), sample_seed(seed, &s.id))?;
        let l = model.loss(&mut tape, &f, s.label, beta)?;
        task_sum += tape.value(l.task).item();
        totals.push(l.total);
    }
    let stacked = tape.concat_rows(&totals)?;
    let loss = tape.mean(stacked)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let g = model
        .store
        .ids()
        .map(|id| {
            let [r, c] = model.store.get(id).shape();
            grads.take(bound.get(id), r, c)
        })
        .collect();
    Ok((value, task_sum / batch.len() as f64, g))
}

/// Predictions, metrics and mean loss over `data`, parallel across samples.
pub fn evaluate(model: &HierModel, data: &Dataset, seed: u64, beta: f64) -> Result<Evaluation> {
    if data.labels().len() != model.config.n_labels {
        return Err(Error::invalid(format!(
            "dataset has {} labels, model {}",
            data.labels().len(),
            model.config.n_labels
        )));
    }
    let per_sample: Vec<(Prediction, f64)> = data
        .samples()
        .par_iter()
        .map(|s| {
            let cs = sample_seed(seed, &s.id);
            let mut tape = Tape::new();
            let bound = model.store.bind_constant(&mut tape);
            let f = model.forward(&mut tape, &bound, &s.sequence, data.labels(), cs)?;
            let total = model.loss(&mut tape, &f, s.label, beta)?.total;
            let loss = tape.value(total).item();
            Ok((HierModel::prediction(&tape, f), loss))
        })
        .collect::<Result<_>>()?;
    let predicted: Vec<usize> = per_sample.iter().map(|(p, _)| p.label).collect();
    let gold: Vec<usize> = data.samples().iter().map(|s| s.label).collect();
    let loss = per_sample.iter().map(|(_, l)| l).sum::<f64>() / per_sample.len().max(1) as f64;
    Ok(Evaluation {
        metrics: Metrics::from_predictions(&predicted, &gold, model.config.n_labels)?,
        loss,
        predictions: per_sample.into_iter().map(|(p, _)| p).collect(),
    })
}

/// Trains on `splits.train`, selecting the epoch with the best validation
/// accuracy (ties: lower validation loss).
pub fn train(config: &Config, splits: &Splits) -> Result<TrainOutcome> {
    config.validate()?;
    let train = &splits.train;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train.dim() != config.d {
        return Err(Error::Config(format!("config d = {}, data d = {}", config.d, train.dim())));
    }
    let labels = train.labels();
    let mut model = HierModel::new(config.model_config(labels.len()), config.seed)?;
    let mut opt = AdamW::new(config.optimizer(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, f64, usize, HierModel)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut task_sum) = (0.0, 0.0);
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let (loss, task, grads) =
                batch_gradients(&model, train, batch, config.beta, config.seed).map_err(|e| divergence(e, epoch, step))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            opt.step(&mut model.store, &grads)?;
            loss_sum += loss * batch.len() as f64;
            task_sum += task * batch.len() as f64;
        }
        let val = evaluate(&model, &splits.validation, config.seed, config.beta).map_err(|e| divergence(e, epoch, 0))?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_task_loss: task_sum / train.len() as f64,
            val_loss: val.loss,
            val_acc: val.metrics.acc,
            val_macro_f1: val.metrics.macro_f1,
            alpha: model.alpha(),
        });
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => val.metrics.acc > *acc || (val.metrics.acc == *acc && val.loss < *loss),
        };
        if better {
            best = Some((val.metrics.acc, val.loss, epoch, model.clone()));
        }
    }
    let (_, _, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(best_model, labels.names().to_vec(), config.seed),
        history,
        best_epoch,
    })
}

/// Writes records as JSON Lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub test: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub runs: Vec<SeedRun>,
    pub summary: MetricSummary,
}

/// Trains once per seed on the same splits and summarizes test metrics.
pub fn run_seed_sweep(config: &Config, splits: &Splits, seeds: &[u64]) -> Result<SweepResult> {
    if seeds.len() < 2 {
        return Err(Error::invalid("a sweep needs at least 2 seeds"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = Config { seed, ..config.clone() };
        let out = train(&cfg, splits)?;
        let test = evaluate(&out.checkpoint.model, &splits.test, seed, cfg.beta)?;
        runs.push(SeedRun {
            seed,
            best_epoch: out.best_epoch,
            test: test.metrics,
        });
    }
    let metrics: Vec<Metrics> = runs.iter().map(|r| r.test.clone()).collect();
    Ok(SweepResult {
        summary: MetricSummary::from_runs(&metrics)?,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoning::Ablation;

    fn small_config() -> Config {
        let mut cfg = Config {
            d: 8,
            k: 3,
            l: 2,
            epochs: 2,
            ..Config::default()
        };
        cfg.data.n_classes = 3;
        cfg.data.samples_per_class = 2;
        cfg.data.val_per_class = 2;
        cfg.data.test_per_class = 2;
        cfg.data.tokens_per_sample = 5;
        cfg
    }

    fn splits(cfg: &Config) -> Splits {
        cfg.data.load(cfg.d, Path::new(".")).unwrap()
    }

    #[test]
    fn smoke_one_epoch() {
        let mut cfg = small_config();
        cfg.epochs = 1;
        cfg.data.samples_per_class = 1;
        cfg.data.n_classes = 4;
        let s = splits(&cfg);
        assert_eq!(s.train.len(), 4);
        let out = train(&cfg, &s).unwrap();
        assert_eq!(out.history.len(), 1);
        let h = &out.history[0];
        assert!(h.train_loss.is_finite() && h.val_loss.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_config();
        let s = splits(&cfg);
        let a = train(&cfg, &s).unwrap();
        let b = train(&cfg, &s).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn checkpoint_round_trip_preserves_metrics() {
        let cfg = small_config();
        let s = splits(&cfg);
        let out = train(&cfg, &s).unwrap();
        let back = Checkpoint::from_bytes(&out.checkpoint.to_bytes().unwrap()).unwrap();
        let m1 = evaluate(&out.checkpoint.model, &s.test, cfg.seed, cfg.beta).unwrap();
        let m2 = evaluate(&back.model, &s.test, back.seed, cfg.beta).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn loss_non_increasing_with_all_ablations() {
        let mut cfg = small_config();
        cfg.beta = 0.0;
        cfg.epochs = 6;
        cfg.ablation = Ablation::all();
        cfg.data.noise_std = 0.0;
        cfg.data.distractor_fraction = 0.0;
        let out = train(&cfg, &splits(&cfg)).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    }

    #[test]
    fn sweep_needs_two_seeds_and_summarizes() {
        let cfg = small_config();
        let s = splits(&cfg);
        assert!(run_seed_sweep(&cfg, &s, &[0]).is_err());
        let r = run_seed_sweep(&cfg, &s, &[0, 1]).unwrap();
        assert_eq!(r.runs.len(), 2);
        let accs = [r.runs[0].test.acc, r.runs[1].test.acc];
        assert!((r.summary.mean.acc - (accs[0] + accs[1]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn label_set_mismatch_is_rejected() {
        let cfg = small_config();
        let s = splits(&cfg);
        let out = train(&cfg, &s).unwrap();
        let mut other = cfg.clone();
        other.data.n_classes = 4;
        let o = splits(&other);
        assert!(evaluate(&out.checkpoint.model, &o.test, 0, 0.01).is_err());
    }

    #[test]
    fn history_as_jsonl() {
        let mut cfg = small_config();
        cfg.epochs = 1;
        let out = train(&cfg, &splits(&cfg)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.jsonl");
        write_jsonl(&p, &out.history).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let back: EpochRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, out.history[0]);
    }
}
