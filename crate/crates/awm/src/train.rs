//! Training loop: step-decayed SGD schedule plus the alternating freeze
//! schedule that switches optimization between the backbone and the
//! mapping units in blocks of `t` epochs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::awm::AwmMode;
use crate::autodiff::ParamGroup;
use crate::data::{make_batch, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::ops::{correct_count, softmax_cross_entropy};
use crate::optim::SgdNesterov;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_factor: f64,
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Alternation period t; 0 trains everything jointly.
    pub alternation: usize,
    pub seed: u64,
    pub augment: bool,
    /// Evaluate at most this many test images per epoch (evenly strided);
    /// 0 means the whole test set.
    pub eval_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 350,
            batch_size: 128,
            lr0: 0.1,
            lr_factor: 0.1,
            lr_milestones: vec![150, 250],
            momentum: 0.9,
            weight_decay: 1e-4,
            alternation: 3,
            seed: 0,
            augment: true,
            eval_limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.lr0 <= 0.0 || self.lr_factor <= 0.0 {
            return Err(Error::invalid("learning rate and decay factor must be positive"));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("lr milestones must be strictly increasing"));
        }
        Ok(())
    }
}

/// Who trains this epoch, and what the mapping units output meanwhile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// t = 0: single set of updates for backbone and mapping weights.
    Joint,
    /// Warm-up: backbone trains against fixed equal weights.
    BackboneFixedEqual,
    /// Mapping weights train; backbone frozen.
    Awm,
    /// Backbone trains; mapping weights frozen at their last values.
    Backbone,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Joint => "joint",
            Phase::BackboneFixedEqual => "backbone_fixed_equal",
            Phase::Awm => "awm",
            Phase::Backbone => "backbone",
        }
    }

    pub fn parse(s: &str) -> Result<Phase> {
        match s {
            "joint" => Ok(Phase::Joint),
            "backbone_fixed_equal" => Ok(Phase::BackboneFixedEqual),
            "awm" => Ok(Phase::Awm),
            "backbone" => Ok(Phase::Backbone),
            other => Err(Error::invalid(format!("unknown phase '{other}'"))),
        }
    }

    pub fn awm_mode(self) -> AwmMode {
        match self {
            Phase::Joint | Phase::Awm => AwmMode::Active,
            Phase::BackboneFixedEqual => AwmMode::FixedEqual,
            Phase::Backbone => AwmMode::Frozen,
        }
    }

    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            Phase::Joint => true,
            Phase::Awm => group == ParamGroup::Awm,
            Phase::Backbone | Phase::BackboneFixedEqual => group == ParamGroup::Backbone,
        }
    }
}

pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.lr0 * cfg.lr_factor.powi(passed as i32)
}

pub fn phase_at_epoch(t: usize, epoch: usize) -> Phase {
    if t == 0 {
        Phase::Joint
    } else if epoch < t {
        Phase::BackboneFixedEqual
    } else if (epoch / t - 1) % 2 == 0 {
        Phase::Awm
    } else {
        Phase::Backbone
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_err: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,phase,lr,train_loss,train_acc,test_err";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.phase.as_str(),
            self.lr,
            self.train_loss,
            self.train_acc,
            self.test_err
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<EpochRecord> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::invalid(format!("history line has {} fields, expected 6", parts.len())));
        }
        let bad = |what: &str| Error::invalid(format!("history line: bad {what} '{line}'"));
        Ok(EpochRecord {
            epoch: parts[0].parse().map_err(|_| bad("epoch"))?,
            phase: Phase::parse(parts[1])?,
            lr: parts[2].parse().map_err(|_| bad("lr"))?,
            train_loss: parts[3].parse().map_err(|_| bad("train_loss"))?,
            train_acc: parts[4].parse().map_err(|_| bad("train_acc"))?,
            test_err: parts[5].parse().map_err(|_| bad("test_err"))?,
        })
    }
}

pub trait TrainObserver {
    fn on_epoch_start(&mut self, _net: &Network, _epoch: usize, _phase: Phase) {}
    fn on_epoch_end(&mut self, _net: &Network, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

pub struct DataBundle<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub norm: NormStats,
}

/// Owns everything that evolves across epochs, so a checkpoint of
/// (network, optimizer velocities, epoch, RNG states) resumes bit-exactly.
pub struct Trainer {
    pub net: Network,
    pub cfg: TrainConfig,
    pub optimizer: SgdNesterov,
    pub epoch: usize,
    pub data_rng: ChaCha8Rng,
    pub augment_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let optimizer = SgdNesterov::new(net.params(), cfg.momentum, cfg.weight_decay);
        // independent streams so e.g. toggling augmentation does not shift
        // the shuffle order
        let data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(2).wrapping_add(1));
        let augment_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(2).wrapping_add(2));
        Ok(Trainer { net, cfg, optimizer, epoch: 0, data_rng, augment_rng })
    }

    /// One pass over the training split followed by a test-error
    /// measurement; advances the epoch counter.
    pub fn run_epoch(&mut self, data: &DataBundle) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let phase = phase_at_epoch(self.cfg.alternation, epoch);
        let lr = lr_at_epoch(&self.cfg, epoch);
        self.net.set_awm_mode(phase.awm_mode());

        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut self.data_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let aug = if self.cfg.augment { Some(&mut self.augment_rng) } else { None };
            let (batch, labels) = make_batch(data.train, chunk, &data.norm, aug);
            let out = self.net.forward(&batch, true, false)?;
            let loss = softmax_cross_entropy(&out.logits, &labels)?;
            let loss_val = loss.value().item();
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {loss_val} at epoch {epoch}, batch starting at sample {seen} \
                     (phase {}, lr {lr})",
                    phase.as_str()
                )));
            }
            loss.backward()?;
            self.optimizer.step(lr, |g| phase.trains(g))?;
            loss_sum += loss_val * chunk.len() as f64;
            correct += correct_count(out.logits.value(), &labels);
            seen += chunk.len();
        }

        let test_err = evaluate(&self.net, data.test, &data.norm, self.cfg.eval_limit)?;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            phase,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_err,
        })
    }

    /// Run from the current epoch to `cfg.epochs`, collecting history.
    pub fn train(&mut self, data: &DataBundle, observer: &mut dyn TrainObserver) -> Result<Vec<EpochRecord>> {
        let mut history = Vec::new();
        while self.epoch < self.cfg.epochs {
            let phase = phase_at_epoch(self.cfg.alternation, self.epoch);
            observer.on_epoch_start(&self.net, self.epoch, phase);
            let rec = self.run_epoch(data)?;
            observer.on_epoch_end(&self.net, &rec);
            history.push(rec);
        }
        Ok(history)
    }
}

/// Top-1 error rate on (an evenly strided subset of) a dataset, in eval
/// mode with no augmentation.
pub fn evaluate(net: &Network, ds: &Dataset, norm: &NormStats, limit: usize) -> Result<f64> {
    let n = ds.len();
    let take = if limit == 0 || limit >= n { n } else { limit };
    let stride = n / take;
    let indices: Vec<usize> = (0..take).map(|i| i * stride).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let (batch, labels) = make_batch(ds, chunk, norm, None);
        let out = net.forward(&batch, false, false)?;
        correct += correct_count(out.logits.value(), &labels);
    }
    Ok(1.0 - correct as f64 / take as f64)
}
