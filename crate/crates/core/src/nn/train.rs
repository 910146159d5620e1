use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::optim::{Adam, AdamConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 32, adam: AdamConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// What a training run optimizes. Implementations run forward and backward
/// passes themselves so they can shape targets and conditioning freely.
pub trait Objective {
    fn train_len(&self) -> usize;

    fn validation_len(&self) -> usize;

    /// Forward and backward on the given training examples, accumulating
    /// gradients into `net`. Returns the mean batch loss.
    fn train_batch(&mut self, net: &mut Network, indices: &[usize], rng: &mut ChaCha8Rng) -> Result<f64>;

    /// Mean loss over the validation split in inference mode.
    fn validation_loss(&mut self, net: &Network) -> Result<f64>;
}

/// Mini-batch Adam training with a fresh shuffle every epoch. On return `net`
/// holds the weights from the epoch with the lowest validation loss.
pub fn train<O: Objective + ?Sized>(
    net: &mut Network,
    objective: &mut O,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if objective.train_len() == 0 {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    if objective.validation_len() == 0 {
        return Err(Error::EmptyDataset("validation split is empty".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
    }
    let mut adam = Adam::new(config.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..objective.train_len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Network)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            net.zero_grad();
            let loss = objective.train_batch(net, batch, &mut rng)?;
            adam.step(&mut net.params_mut())?;
            total += loss * batch.len() as f64;
        }
        net.clear_cache();
        let train_loss = total / order.len() as f64;
        let val_loss = objective.validation_loss(net)?;
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        log.push(EpochLog { epoch, train_loss, val_loss });
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, net.clone()));
        }
    }

    let (best_epoch, best_val_loss, weights) = best.expect("at least one epoch ran");
    *net = weights;
    Ok(TrainOutcome { log, best_epoch, best_val_loss })
}

/// Writes `epoch<TAB>train_loss<TAB>val_loss` lines.
pub fn write_log<W: Write>(log: &[EpochLog], mut w: W) -> Result<()> {
    writeln!(w, "epoch\ttrain_loss\tval_loss")?;
    for e in log {
        writeln!(w, "{}\t{:.8}\t{:.8}", e.epoch, e.train_loss, e.val_loss)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{softmax_cross_entropy, LayerSpec, Tensor};

    /// Scripted validation losses; records the single weight at each check.
    struct Scripted {
        losses: Vec<f64>,
        seen: Vec<f64>,
    }

    impl Objective for Scripted {
        fn train_len(&self) -> usize {
            4
        }

        fn validation_len(&self) -> usize {
            1
        }

        fn train_batch(&mut self, net: &mut Network, _: &[usize], _: &mut ChaCha8Rng) -> Result<f64> {
            for p in net.params_mut() {
                p.grad.iter_mut().for_each(|g| *g = 1.0);
            }
            Ok(1.0)
        }

        fn validation_loss(&mut self, net: &Network) -> Result<f64> {
            self.seen.push(net.params()[0].value[0]);
            Ok(self.losses[self.seen.len() - 1])
        }
    }

    #[test]
    fn keeps_the_lowest_validation_epoch() {
        let mut net = Network::new(vec![1], &[LayerSpec::Dense { inputs: 1, outputs: 1 }], 0).unwrap();
        let mut obj = Scripted { losses: vec![0.9, 0.4, 0.7], seen: Vec::new() };
        let cfg = TrainConfig { epochs: 3, batch_size: 2, ..TrainConfig::default() };
        let out = train(&mut net, &mut obj, &cfg).unwrap();
        assert_eq!(out.best_epoch, 2);
        assert_eq!(out.best_val_loss, 0.4);
        assert_eq!(net.params()[0].value[0], obj.seen[1]);
        assert_ne!(obj.seen[1], obj.seen[2]);
        assert!(out.best_val_loss <= out.log[0].val_loss);
    }

    #[test]
    fn empty_split_is_rejected() {
        let mut net = Network::new(vec![1], &[LayerSpec::Relu], 0).unwrap();
        struct Empty;
        impl Objective for Empty {
            fn train_len(&self) -> usize {
                0
            }
            fn validation_len(&self) -> usize {
                1
            }
            fn train_batch(&mut self, _: &mut Network, _: &[usize], _: &mut ChaCha8Rng) -> Result<f64> {
                unreachable!()
            }
            fn validation_loss(&mut self, _: &Network) -> Result<f64> {
                unreachable!()
            }
        }
        assert!(matches!(train(&mut net, &mut Empty, &TrainConfig::default()), Err(Error::EmptyDataset(_))));
    }

    /// Two Gaussian blobs in the plane, labels by side of x + y = 0.
    struct Blobs {
        train: (Tensor, Vec<usize>),
        val: (Tensor, Vec<usize>),
    }

    fn blobs(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -2.0 } else { 2.0 };
            x.push(centre + noise.sample(&mut rng));
            x.push(centre + noise.sample(&mut rng));
            y.push(c);
        }
        (Tensor::new(vec![n, 2], x).unwrap(), y)
    }

    fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
        let data = idx.iter().flat_map(|&i| t.example(i).to_vec()).collect();
        Tensor::new(vec![idx.len(), t.example_len()], data).unwrap()
    }

    impl Objective for Blobs {
        fn train_len(&self) -> usize {
            self.train.1.len()
        }
        fn validation_len(&self) -> usize {
            self.val.1.len()
        }
        fn train_batch(&mut self, net: &mut Network, idx: &[usize], _: &mut ChaCha8Rng) -> Result<f64> {
            let x = rows(&self.train.0, idx);
            let y: Vec<usize> = idx.iter().map(|&i| self.train.1[i]).collect();
            let logits = net.forward(&x, None)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            net.backward(&grad)?;
            Ok(loss)
        }
        fn validation_loss(&mut self, net: &Network) -> Result<f64> {
            let logits = net.infer(&self.val.0, None)?;
            Ok(softmax_cross_entropy(&logits, &self.val.1)?.0)
        }
    }

    /// Logistic regression fitted by plain gradient descent on the training
    /// blobs, scored on the validation blobs.
    fn logistic_reference(x: &Tensor, y: &[usize], vx: &Tensor, vy: &[usize]) -> f64 {
        let (mut w0, mut w1, mut b) = (0.0f64, 0.0f64, 0.0f64);
        let n = y.len() as f64;
        for _ in 0..20_000 {
            let (mut g0, mut g1, mut gb) = (0.0, 0.0, 0.0);
            for (r, &t) in x.data().chunks_exact(2).zip(y) {
                let p = 1.0 / (1.0 + (-(w0 * r[0] + w1 * r[1] + b)).exp());
                let e = p - t as f64;
                g0 += e * r[0];
                g1 += e * r[1];
                gb += e;
            }
            w0 -= 0.5 * g0 / n;
            w1 -= 0.5 * g1 / n;
            b -= 0.5 * gb / n;
        }
        vx.data()
            .chunks_exact(2)
            .zip(vy)
            .map(|(r, &t)| {
                let z = w0 * r[0] + w1 * r[1] + b;
                let p = 1.0 / (1.0 + (-z).exp());
                -(if t == 1 { p } else { 1.0 - p }).ln()
            })
            .sum::<f64>()
            / vy.len() as f64
    }

    fn run_blobs(seed: u64) -> (TrainOutcome, Blobs) {
        let mut obj = Blobs { train: blobs(64, 1), val: blobs(32, 2) };
        let mut net = Network::new(vec![2], &[LayerSpec::Dense { inputs: 2, outputs: 2 }], seed).unwrap();
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 8,
            adam: AdamConfig { learning_rate: 0.05, ..AdamConfig::default() },
            seed,
        };
        let out = train(&mut net, &mut obj, &cfg).unwrap();
        (out, obj)
    }

    #[test]
    fn separable_toy_problem_is_learned() {
        let (out, obj) = run_blobs(7);
        let reference = logistic_reference(&obj.train.0, &obj.train.1, &obj.val.0, &obj.val.1);
        assert!(reference < 0.1, "reference {reference}");
        assert!(out.best_val_loss < 0.1, "val loss {}", out.best_val_loss);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let a = run_blobs(11).0;
        let b = run_blobs(11).0;
        assert_eq!(a, b);
    }

    #[test]
    fn log_format() {
        let mut buf = Vec::new();
        write_log(&[EpochLog { epoch: 1, train_loss: 0.5, val_loss: 0.25 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch\ttrain_loss\tval_loss\n1\t0.50000000\t0.25000000\n");
    }
}
