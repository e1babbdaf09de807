//! Minibatch training in the two compared modes: plain behavioral cloning
//! and imitation plus the safety barrier.

use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datapipe::ExperienceTuple;
use crate::error::{Error, Result};
use crate::losses::{barrier, imitation_loss, BarrierArguments, BarrierConfig};
use crate::policy::{adam_step, AdamState, Normalization, PolicyNetwork, N_PARAMS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Bc,
    Safe,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Bc => "bc",
            Mode::Safe => "safe",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bc" => Ok(Mode::Bc),
            "safe" => Ok(Mode::Safe),
            _ => Err(format!("unknown mode `{s}` (expected bc or safe)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Used in `Safe` mode only.
    pub barrier: BarrierConfig,
}

impl TrainConfig {
    pub fn new(mode: Mode, horizon_s: f64, seed: u64) -> Self {
        Self {
            mode,
            epochs: 500,
            batch_size: 32,
            learning_rate: 1e-3,
            seed,
            barrier: BarrierConfig::new(horizon_s),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidScenario(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidScenario(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch means over all training tuples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub imitation: f64,
    pub barrier: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: PolicyNetwork,
    pub history: Vec<EpochStats>,
}

/// Minimizes the mean loss over `tuples` with Adam. Normalization constants
/// come from `tuples` alone.
pub fn train(tuples: &[ExperienceTuple], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if tuples.is_empty() {
        return Err(Error::Empty("training tuples"));
    }
    let barrier_cfg = (cfg.mode == Mode::Safe).then_some(&cfg.barrier);
    let mut net = PolicyNetwork::init(cfg.seed);
    net.set_normalization(Normalization::fit(
        tuples.iter().map(|t| (&t.features, &t.target)),
    ));
    let mut adam = AdamState::new(N_PARAMS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut grads = vec![0.0; N_PARAMS];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_imit, mut sum_bar) = (0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let tp = &tuples[i];
                let a = net.forward(&tp.features)?;
                let imit = imitation_loss(&a, &tp.target);
                let (value, dl) = match barrier_cfg {
                    Some(bc) => {
                        let bar = barrier(&tp.features, &a, bc);
                        sum_bar += bar.value;
                        let total = imit + bar;
                        (total.value, total.grad)
                    }
                    None => (imit.value, imit.grad),
                };
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        msg: format!("loss {value} on tuple {i}"),
                    });
                }
                sum_imit += imit.value;
                let g = net.backward(&tp.features, &dl)?;
                for (acc, gi) in grads.iter_mut().zip(&g.params) {
                    *acc += gi * inv;
                }
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    msg: "non-finite gradient".into(),
                });
            }
            adam_step(&mut net, &grads, &mut adam, cfg.learning_rate);
        }
        let n = tuples.len() as f64;
        history.push(EpochStats {
            epoch,
            loss: (sum_imit + sum_bar) / n,
            imitation: sum_imit / n,
            barrier: sum_bar / n,
        });
    }
    Ok(TrainOutcome { net, history })
}

/// Checkpoint `meta` entries describing how a network was trained. Barrier
/// settings are recorded for `Safe` only.
pub fn checkpoint_meta(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    let mut meta = vec![
        ("mode", cfg.mode.to_string()),
        ("horizon_s", cfg.barrier.horizon_s.to_string()),
        ("seed", cfg.seed.to_string()),
        ("epochs", cfg.epochs.to_string()),
    ];
    if cfg.mode == Mode::Safe {
        meta.push(("barrier.k", cfg.barrier.k.to_string()));
        meta.push(("barrier.track_width", cfg.barrier.track_width.to_string()));
    }
    meta
}

/// Looks up a `meta` entry read back from a checkpoint.
pub fn meta_value<'a>(meta: &'a [(String, String)], key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub const HISTORY_HEADER: &str = "epoch,loss,imitation,barrier";

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for e in history {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.loss, e.imitation, e.barrier);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfflineMetrics {
    pub mean_imitation: f64,
    /// Fraction of tuples whose three control points all satisfy both lane
    /// bounds.
    pub bound_satisfaction: f64,
    pub count: usize,
}

pub fn evaluate_offline(
    net: &PolicyNetwork,
    tuples: &[ExperienceTuple],
    barrier_cfg: &BarrierConfig,
) -> Result<OfflineMetrics> {
    if tuples.is_empty() {
        return Err(Error::Empty("evaluation tuples"));
    }
    let mut imit = 0.0;
    let mut inside = 0usize;
    for tp in tuples {
        let a = net.forward(&tp.features)?;
        imit += imitation_loss(&a, &tp.target).value;
        if BarrierArguments::new(&tp.features, &a, barrier_cfg).lane_satisfied() {
            inside += 1;
        }
    }
    let n = tuples.len() as f64;
    Ok(OfflineMetrics {
        mean_imitation: imit / n,
        bound_satisfaction: inside as f64 / n,
        count: tuples.len(),
    })
}
