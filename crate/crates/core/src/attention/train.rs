//! Mini-batch Adam with early stopping on validation MSE.
//!
//! Randomness comes from ChaCha streams keyed by the config seed: stream
//! `2^32 + epoch` shuffles each epoch, stream `2^33 + step` draws the dropout
//! masks for each optimizer step. Training runs on one thread, so a seed
//! fixes the whole parameter trajectory bit for bit.

use std::fmt::Write as _;

use faer::Mat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::{loss_and_gradient, loss_on_set, DropoutMasks, Mode};
use super::{AttentionConfig, AttentionParams, WindowSet};
use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "epoch,train_mse,val_mse";

const SHUFFLE_STREAM: u64 = 1 << 32;
const DROPOUT_STREAM: u64 = 1 << 33;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Eval-mode MSE over the whole training set after the epoch.
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn best_val_mse(&self) -> Option<f64> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch).map(|e| e.val_mse)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.16e},{:.16e}", e.epoch, e.train_mse, e.val_mse);
        }
        s
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn check_set(cfg: &AttentionConfig, w: &WindowSet, what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Dataset(format!("{what} set is empty")));
    }
    let t = w
        .targets()
        .ok_or_else(|| Error::Dataset(format!("{what} set has no targets")))?;
    if w.window_len() != cfg.window_len || w.dims() != cfg.input_dims || t.ncols() != cfg.n_parcels {
        return Err(Error::Shape(format!("{what} set does not match the attention config")));
    }
    Ok(())
}

/// Trains from the seeded initialization.
pub fn train(cfg: &AttentionConfig, train: &WindowSet, val: &WindowSet) -> Result<(AttentionParams, TrainingLog)> {
    train_from(cfg, AttentionParams::init(cfg)?, train, val)
}

/// Trains from explicit starting parameters. Stops after `max_epochs`, or
/// once more than `patience` consecutive epochs fail to lower the best
/// validation MSE; returns the parameters of the best epoch.
pub fn train_from(
    cfg: &AttentionConfig,
    init: AttentionParams,
    train: &WindowSet,
    val: &WindowSet,
) -> Result<(AttentionParams, TrainingLog)> {
    cfg.validate()?;
    init.check_shapes(cfg)?;
    check_set(cfg, train, "training")?;
    check_set(cfg, val, "validation")?;

    let mut params = init;
    let mut m1 = AttentionParams::zeros(cfg);
    let mut m2 = AttentionParams::zeros(cfg);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut log = TrainingLog::default();
    let mut stale = 0;
    let mut step: u64 = 0;
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng(cfg.seed, SHUFFLE_STREAM + epoch as u64));
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let (x, y) = train.gather(chunk);
            let y = y.expect("checked above");
            let masks = DropoutMasks::sample(
                cfg.dropout_rate,
                chunk.len(),
                cfg.head_hidden_dims,
                &mut rng(cfg.seed, DROPOUT_STREAM + step),
            );
            let (loss, grad) = loss_and_gradient(&params, cfg, &x, &y, Mode::Train(&masks)).map_err(|e| {
                Error::Divergence {
                    epoch,
                    batch: bi,
                    detail: e.to_string(),
                }
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    detail: format!("loss is {loss}"),
                });
            }
            adam_step(cfg, step, &mut params, &grad, &mut m1, &mut m2);
        }

        let n_batches = n.div_ceil(cfg.batch_size);
        let eval = |w: &WindowSet| {
            loss_on_set(&params, cfg, w).map_err(|e| Error::Divergence {
                epoch,
                batch: n_batches,
                detail: e.to_string(),
            })
        };
        let train_mse = eval(train)?;
        let val_mse = eval(val)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < best_val {
            best_val = val_mse;
            best = params.clone();
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

fn adam_step(
    cfg: &AttentionConfig,
    step: u64,
    params: &mut AttentionParams,
    grad: &AttentionParams,
    m1: &mut AttentionParams,
    m2: &mut AttentionParams,
) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let grads = grad.tensors();
    for (((p, (_, g)), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(m1.tensors_mut())
        .zip(m2.tensors_mut())
    {
        update(p, g, m, v, b1, b2, c1, c2, cfg.learning_rate, cfg.adam_eps);
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    p: &mut Mat<f64>,
    g: &Mat<f64>,
    m: &mut Mat<f64>,
    v: &mut Mat<f64>,
    b1: f64,
    b2: f64,
    c1: f64,
    c2: f64,
    lr: f64,
    eps: f64,
) {
    for j in 0..p.ncols() {
        for i in 0..p.nrows() {
            let gi = g[(i, j)];
            let mi = b1 * m[(i, j)] + (1.0 - b1) * gi;
            let vi = b2 * v[(i, j)] + (1.0 - b2) * gi * gi;
            m[(i, j)] = mi;
            v[(i, j)] = vi;
            p[(i, j)] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> AttentionConfig {
        let mut c = AttentionConfig::new(2, vec![3, 2], 3);
        c.n_heads = 2;
        c.d_model = 4;
        c.head_hidden_dims = (8, 6);
        c.dropout_rate = 0.1;
        c.learning_rate = 1e-2;
        c.batch_size = 8;
        c.max_epochs = 15;
        c
    }

    fn set(c: &AttentionConfig, n: usize, seed: u64) -> WindowSet {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let inputs = c
            .input_dims
            .iter()
            .map(|&d| Mat::from_fn(n * c.window_len, d, |_, _| r.random_range(-1.0..1.0)))
            .collect();
        let y = Mat::from_fn(n, c.n_parcels, |_, _| r.random_range(-1.0..1.0));
        WindowSet::new(inputs, Some(y), c.window_len).unwrap()
    }

    #[test]
    fn equal_seeds_give_identical_runs() {
        let c = cfg();
        let (tr, va) = (set(&c, 20, 1), set(&c, 6, 2));
        let a = train(&c, &tr, &va).unwrap();
        let b = train(&c, &tr, &va).unwrap();
        assert_eq!(a, b);
        let mut c2 = c.clone();
        c2.seed = 3;
        assert_ne!(train(&c2, &tr, &va).unwrap().0, a.0);
    }

    #[test]
    fn returns_best_epoch_parameters() {
        let c = cfg();
        let (tr, va) = (set(&c, 20, 4), set(&c, 6, 5));
        let (p, log) = train(&c, &tr, &va).unwrap();
        let best = log.best_val_mse().unwrap();
        assert!(log.epochs.iter().all(|e| e.val_mse >= best));
        assert_eq!(loss_on_set(&p, &c, &va).unwrap(), best);
    }

    #[test]
    fn zero_patience_stops_one_epoch_after_best() {
        let mut c = cfg();
        c.patience = 0;
        c.max_epochs = 500;
        c.learning_rate = 5e-2;
        let (tr, va) = (set(&c, 20, 6), set(&c, 6, 7));
        let (_, log) = train(&c, &tr, &va).unwrap();
        let last = log.epochs.last().unwrap();
        assert!(log.epochs.len() < 500);
        assert_eq!(last.epoch, log.best_epoch + 1);
        let prev_best = log.epochs[..log.epochs.len() - 1].iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        assert!(last.val_mse >= prev_best);
    }

    #[test]
    fn log_csv_layout() {
        let c = cfg();
        let (_, log) = train(&c, &set(&c, 10, 8), &set(&c, 4, 9)).unwrap();
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(LOG_HEADER));
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[0], (i + 1).to_string());
            assert_eq!(f[2].parse::<f64>().unwrap(), log.epochs[i].val_mse);
        }
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let mut c = cfg();
        c.learning_rate = 1e300;
        c.dropout_rate = 0.0;
        let err = train(&c, &set(&c, 20, 10), &set(&c, 4, 11)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn mismatched_sets_rejected() {
        let c = cfg();
        let mut other = c.clone();
        other.input_dims = vec![3, 3];
        assert!(train(&c, &set(&other, 5, 1), &set(&c, 4, 2)).is_err());
        let no_targets = WindowSet::new(set(&c, 4, 3).inputs().to_vec(), None, 2).unwrap();
        assert!(train(&c, &set(&c, 5, 1), &no_targets).is_err());
    }
}
