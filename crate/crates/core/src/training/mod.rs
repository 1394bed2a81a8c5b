//! ADAM, the epoch loop and patience-based early stopping with rollback.

mod checkpoint;

use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{batches, sequential_batches, Batch, PaddedPair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::tensor::{clip_global_norm, ParameterSet, Real};

pub use checkpoint::{vocab_hash, Checkpoint, MAGIC, VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub clip: f64,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 128,
            clip: 5.0,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 1,
            max_epochs: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be a non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("clip threshold must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("ADAM betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("ADAM epsilon must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        Ok(())
    }
}

/// One bias-corrected ADAM update using the gradients stored in `params`,
/// which are zeroed afterwards. `t` is the 1-based step counter.
pub fn adam_step<T: Real>(params: &mut ParameterSet<T>, config: &TrainConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidStep(t));
    }
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - config.beta1), T::lit(1.0 - config.beta2));
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let corr1 = T::lit(1.0 - config.beta1.powi(exp));
    let corr2 = T::lit(1.0 - config.beta2.powi(exp));
    let (lr, eps) = (T::lit(config.lr), T::lit(config.epsilon));
    for p in params.iter_mut() {
        let grads = p.grad.data_mut();
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        let theta = p.value.data_mut();
        for i in 0..theta.len() {
            let g = grads[i];
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            grads[i] = T::zero();
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Token-weighted mean training NLL.
    pub mean_loss: f64,
    pub tokens: usize,
    /// Largest gradient norm seen after clipping.
    pub max_clipped_norm: f64,
}

/// Forward, backward, clip and update for every batch. `step` is the global
/// optimizer counter and is advanced once per batch.
pub fn run_epoch<T: Real>(
    model: &mut Seq2Seq<T>,
    train_batches: &[Batch],
    config: &TrainConfig,
    rng: &mut dyn RngCore,
    step: &mut u64,
) -> Result<EpochStats> {
    let mut total = 0.0;
    let mut tokens = 0;
    let mut max_clipped_norm: f64 = 0.0;
    for (i, batch) in train_batches.iter().enumerate() {
        if batch.is_empty() {
            continue;
        }
        let loss = model.batch_loss_and_grads(batch, Some(&mut *rng))?;
        if !loss.nll_sum.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: i,
                loss: loss.nll_sum,
            });
        }
        total += loss.nll_sum;
        tokens += loss.tokens;
        let params = model.params_mut();
        params.set_grads(loss.grads);
        clip_global_norm(params, config.clip, batch.len());
        max_clipped_norm = max_clipped_norm.max(params.grad_norm());
        *step += 1;
        adam_step(params, config, *step)?;
    }
    Ok(EpochStats {
        mean_loss: if tokens == 0 { 0.0 } else { total / tokens as f64 },
        tokens,
        max_clipped_norm,
    })
}

/// Token-averaged NLL over `batches` in inference mode.
pub fn dev_nll<T: Real>(model: &Seq2Seq<T>, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for b in batches {
        let (s, n) = model.nll_sum(b)?;
        total += s;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Config("development set has no target tokens".into()));
    }
    Ok(total / tokens as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_nll: f64,
    pub wall_secs: f64,
    /// Whether `dev_nll` is the best seen so far.
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_nll: Option<f64>,
}

/// Anything that can be trained epoch by epoch and rolled back.
pub trait EpochTrainer {
    type Snapshot;

    /// Trains one epoch (1-based) and returns the mean training loss.
    fn train_epoch(&mut self, epoch: usize) -> Result<f64>;
    fn dev_nll(&mut self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);

    /// Called right after a new best snapshot was taken.
    fn on_improvement(&mut self, _epoch: usize) -> Result<()> {
        Ok(())
    }
}

/// Trains until the development NLL has not improved for `patience`
/// consecutive epochs (or `max_epochs` is reached), then restores the best
/// snapshot.
pub fn fit_with_patience<M: EpochTrainer>(trainer: &mut M, patience: usize, max_epochs: usize) -> Result<TrainLog> {
    if patience == 0 {
        return Err(Error::Config("patience must be at least 1".into()));
    }
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    let mut best_snapshot = None;
    let mut stale = 0;
    for epoch in 1..=max_epochs {
        let started = Instant::now();
        let train_loss = trainer.train_epoch(epoch)?;
        let dev = trainer.dev_nll()?;
        let improved = dev < best;
        if improved {
            best = dev;
            stale = 0;
            best_snapshot = Some(trainer.snapshot());
            log.best_epoch = Some(epoch);
            log.best_dev_nll = Some(dev);
            trainer.on_improvement(epoch)?;
        } else {
            stale += 1;
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_nll: dev,
            wall_secs: started.elapsed().as_secs_f64(),
            best: improved,
        });
        info!(
            "epoch {epoch}: train {train_loss:.4}, dev {dev:.4}{}",
            if improved { " (best)" } else { "" }
        );
        if stale >= patience {
            info!(
                "no improvement for {patience} epochs; rolling back to epoch {:?}",
                log.best_epoch
            );
            break;
        }
    }
    if let Some(snap) = best_snapshot {
        trainer.restore(snap);
    }
    Ok(log)
}

/// Where the best model is mirrored on disk during training.
#[derive(Clone, Debug)]
pub struct SnapshotMirror {
    pub path: PathBuf,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
}

/// [`EpochTrainer`] for a real model and corpus.
pub struct Seq2SeqTrainer<'a> {
    pub model: Seq2Seq<f32>,
    train: &'a [PaddedPair],
    dev: Vec<Batch>,
    config: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
    mirror: Option<SnapshotMirror>,
}

impl<'a> Seq2SeqTrainer<'a> {
    pub fn new(model: Seq2Seq<f32>, train: &'a [PaddedPair], dev: &[PaddedPair], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if dev.is_empty() {
            return Err(Error::Config("development set is empty".into()));
        }
        Ok(Seq2SeqTrainer {
            model,
            train,
            dev: sequential_batches(dev, config.batch_size),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            step: 0,
            mirror: None,
        })
    }

    pub fn with_mirror(mut self, mirror: SnapshotMirror) -> Self {
        self.mirror = Some(mirror);
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Runs [`fit_with_patience`] with the configured patience and cap.
    pub fn fit(mut self) -> Result<(Seq2Seq<f32>, TrainLog)> {
        let (patience, max_epochs) = (self.config.patience, self.config.max_epochs);
        let log = fit_with_patience(&mut self, patience, max_epochs)?;
        Ok((self.model, log))
    }
}

impl EpochTrainer for Seq2SeqTrainer<'_> {
    type Snapshot = ParameterSet<f32>;

    fn train_epoch(&mut self, _epoch: usize) -> Result<f64> {
        let shuffle_seed = self.rng.next_u64();
        let epoch_batches = batches(self.train, self.config.batch_size, shuffle_seed);
        let stats = run_epoch(
            &mut self.model,
            &epoch_batches,
            &self.config,
            &mut self.rng,
            &mut self.step,
        )?;
        Ok(stats.mean_loss)
    }

    fn dev_nll(&mut self) -> Result<f64> {
        dev_nll(&self.model, &self.dev)
    }

    fn snapshot(&self) -> Self::Snapshot {
        self.model.params().clone()
    }

    fn restore(&mut self, snapshot: Self::Snapshot) {
        *self.model.params_mut() = snapshot;
    }

    fn on_improvement(&mut self, epoch: usize) -> Result<()> {
        if let Some(m) = &self.mirror {
            let ck = Checkpoint::new(self.model.clone(), m.source_vocab.clone(), m.target_vocab.clone())?;
            ck.save(&m.path)?;
            info!("epoch {epoch}: saved best model to {}", m.path.display());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ScoreKind;
    use crate::corpus::{filter_and_pad, PadMode, SentencePair, EOS};
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: f64) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        let id = ps.add("theta", Tensor::scalar(value)).unwrap();
        ps.get_mut(id).grad = Tensor::scalar(grad);
        ps
    }

    #[test]
    fn adam_first_step() {
        let cfg = TrainConfig::default();
        let mut ps = single(0.0, 1.0);
        adam_step(&mut ps, &cfg, 1).unwrap();
        let theta = ps.iter().next().unwrap().value.item();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε).
        assert!((theta + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(ps.iter().next().unwrap().grad.item(), 0.0);

        let mut ps = single(0.7, 0.0);
        adam_step(&mut ps, &cfg, 1).unwrap();
        assert_eq!(ps.iter().next().unwrap().value.item(), 0.7);

        assert!(matches!(adam_step(&mut ps, &cfg, 0), Err(Error::InvalidStep(0))));
    }

    #[test]
    fn adam_is_symmetric() {
        let mut ps = ParameterSet::<f64>::new();
        let a = ps.add("a", Tensor::from_vec(vec![0.2, -0.1])).unwrap();
        let b = ps.add("b", Tensor::from_vec(vec![0.2, -0.1])).unwrap();
        let cfg = TrainConfig::default();
        for t in 1..=5 {
            ps.get_mut(a).grad = Tensor::from_vec(vec![0.3 * t as f64, -2.0]);
            ps.get_mut(b).grad = Tensor::from_vec(vec![0.3 * t as f64, -2.0]);
            adam_step(&mut ps, &cfg, t).unwrap();
        }
        assert_eq!(ps.value(a), ps.value(b));
    }

    struct Scripted {
        losses: Vec<f64>,
        state: usize,
    }

    impl EpochTrainer for Scripted {
        type Snapshot = usize;
        fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
            self.state = epoch;
            Ok(0.0)
        }
        fn dev_nll(&mut self) -> Result<f64> {
            Ok(self.losses[self.state - 1])
        }
        fn snapshot(&self) -> usize {
            self.state
        }
        fn restore(&mut self, s: usize) {
            self.state = s;
        }
    }

    #[test]
    fn patience_traces() {
        let mut s = Scripted {
            losses: vec![3.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            state: 0,
        };
        let log = fit_with_patience(&mut s, 5, 100).unwrap();
        assert_eq!(log.epochs.len(), 8);
        assert_eq!(s.state, 3);

        let mut s = Scripted {
            losses: vec![4.0, 5.0, 6.0],
            state: 0,
        };
        let log = fit_with_patience(&mut s, 1, 100).unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert_eq!(s.state, 1);

        let mut s = Scripted {
            losses: vec![5.0, 4.0, 3.0, 2.0],
            state: 0,
        };
        let log = fit_with_patience(&mut s, 2, 3).unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert_eq!(log.best_epoch, Some(3));
        let flags: Vec<bool> = log.epochs.iter().map(|e| e.best).collect();
        assert_eq!(flags, [true, true, true]);
    }

    fn toy_pairs() -> Vec<PaddedPair> {
        let raw: [(&[usize], &[usize]); 3] = [(&[4, 5], &[6, 7]), (&[5, 6], &[7, 4]), (&[6], &[5])];
        let pairs: Vec<SentencePair> = raw
            .iter()
            .map(|(s, t)| SentencePair {
                source_ids: s.to_vec(),
                target_ids: t.iter().copied().chain([EOS]).collect(),
            })
            .collect();
        filter_and_pad(&pairs, 6, PadMode::Training)
    }

    fn toy_model(seed: u64) -> Seq2Seq<f32> {
        let cfg = ModelConfig::tiny(8, 6, 1, ScoreKind::Dot);
        Seq2Seq::new_with_range(cfg, -0.1, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let pairs = toy_pairs();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut model = toy_model(1);
        let before = model.params().clone();
        let b = batches(&pairs, 2, 0);
        run_epoch(&mut model, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(0), &mut 0).unwrap();
        for (x, y) in before.iter().zip(model.params().iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.value), bits(&y.value));
        }
    }

    #[test]
    fn epochs_reduce_loss_and_repeat_exactly() {
        let pairs = toy_pairs();
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = toy_model(2);
            let b = batches(&pairs, 3, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut step = 0;
            let losses: Vec<f64> = (0..15)
                .map(|_| run_epoch(&mut model, &b, &cfg, &mut rng, &mut step).unwrap().mean_loss)
                .collect();
            losses
        };
        let a = run();
        assert!(a[14] < a[0], "{a:?}");
        assert_eq!(a, run());
    }

    #[test]
    fn post_clip_norm_is_bounded() {
        let pairs = toy_pairs();
        let cfg = TrainConfig {
            lr: 1e-3,
            clip: 1e-3,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let mut model = toy_model(3);
        let b = batches(&pairs, 1, 0);
        let stats = run_epoch(&mut model, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(0), &mut 0).unwrap();
        assert!(stats.max_clipped_norm <= 1e-3 + 1e-9);
    }

    #[test]
    fn fit_restores_best_and_mirrors_it() {
        let pairs = toy_pairs();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.anmt");
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"].map(String::from)).unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 3,
            patience: 2,
            max_epochs: 6,
            ..TrainConfig::default()
        };
        let trainer = Seq2SeqTrainer::new(toy_model(4), &pairs, &pairs, cfg)
            .unwrap()
            .with_mirror(SnapshotMirror {
                path: path.clone(),
                source_vocab: vocab.clone(),
                target_vocab: vocab.clone(),
            });
        let (model, log) = trainer.fit().unwrap();
        let best = log.best_dev_nll.unwrap();
        assert!(log.epochs.iter().all(|e| e.dev_nll >= best));
        let dev = sequential_batches(&pairs, 3);
        assert_eq!(dev_nll(&model, &dev).unwrap(), best);
        let on_disk = Checkpoint::load(&path).unwrap();
        assert_eq!(dev_nll(&on_disk.model, &dev).unwrap(), best);
    }
}
