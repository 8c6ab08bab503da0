//! Experiment configuration: a flat set of named hyperparameters read from
//! `key = value` text. Unknown keys and ill-typed values are rejected.
//!
//! ```text
//! # dataset
//! seed = 2024
//! patients = 60
//! # agents
//! agent_steps = 6000
//! idr = false
//! ```

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::agent::{Sampling, TrainConfig};
use crate::classifier::{ClassifierConfig, ExampleConfig};
use crate::env::RewardConfig;
use crate::error::{Error, Result};
use crate::imaging::PhantomSampler;
use crate::pipeline::C2fParams;
use crate::superpixel::SeedsParams;
use fliplearn_nn::loss::RegressionLoss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Root of every random stream in a run.
    pub seed: u64,

    /// Synthetic patients; all phantoms of one patient share tissue
    /// appearance and land in the same split.
    pub patients: usize,
    pub per_patient: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub canvas: usize,
    pub box_margin: usize,
    pub min_contrast: f64,

    pub cls_epochs: usize,
    pub cls_batch: usize,
    pub cls_lr: f64,
    pub cls_weight_decay: f64,
    pub cls_label_smoothing: f64,
    pub cls_jitter: usize,
    pub cls_mixed: usize,

    pub coarse_superpixels: usize,
    pub fine_superpixels: usize,
    pub seeds_block_levels: usize,
    pub seeds_bins: usize,
    pub seeds_iterations: usize,

    pub theta: f64,
    pub beta: f64,
    pub max_traversals: usize,
    pub penalty: f64,
    pub idr: bool,

    pub gamma: f64,
    pub agent_lr: f64,
    pub agent_batch: usize,
    pub sync_interval: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_frac: f64,
    pub agent_steps: usize,
    pub replay_capacity: usize,
    /// `prioritized` or `uniform`.
    pub sampling: String,
    /// `huber` or `squared`.
    pub td_loss: String,
    pub huber_delta: f64,
    /// Episodes between greedy validation runs.
    pub validate_every: usize,
    /// Validation phantoms used for model selection (0 = all).
    pub validate_limit: usize,

    /// Image width the box-shift bands are quoted for.
    pub shift_reference_width: usize,
}

impl Default for Config {
    fn default() -> Self {
        let cls = ClassifierConfig::default();
        let ex = ExampleConfig::default();
        let reward = RewardConfig::default();
        let agents = TrainConfig::default();
        let sampler = PhantomSampler::default();
        let coarse = SeedsParams::coarse();
        Config {
            seed: 2024,
            patients: 60,
            per_patient: 5,
            val_fraction: 0.1,
            test_fraction: 0.15,
            canvas: sampler.width,
            box_margin: sampler.margin,
            min_contrast: sampler.min_contrast,
            cls_epochs: cls.epochs,
            cls_batch: cls.batch_size,
            cls_lr: cls.lr,
            cls_weight_decay: cls.weight_decay,
            cls_label_smoothing: cls.label_smoothing,
            cls_jitter: ex.jitter,
            cls_mixed: ex.mixed,
            coarse_superpixels: coarse.superpixels,
            fine_superpixels: SeedsParams::fine().superpixels,
            seeds_block_levels: coarse.block_levels,
            seeds_bins: coarse.bins,
            seeds_iterations: coarse.iterations,
            theta: reward.theta,
            beta: reward.beta,
            max_traversals: reward.max_traversals,
            penalty: reward.penalty,
            idr: reward.idr,
            gamma: agents.gamma,
            agent_lr: agents.lr,
            agent_batch: agents.batch_size,
            sync_interval: agents.sync_interval,
            eps_start: agents.eps_start,
            eps_end: agents.eps_end,
            eps_decay_frac: agents.eps_decay_frac,
            agent_steps: agents.steps,
            replay_capacity: agents.capacity,
            sampling: "prioritized".into(),
            td_loss: "huber".into(),
            huber_delta: 1.0,
            validate_every: agents.validate_every,
            validate_limit: 12,
            shift_reference_width: 448,
        }
    }
}

impl Config {
    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        }
    }

    /// Sets one key from its textual value, typed after the current value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut map = self.to_map();
        let slot = map
            .get_mut(key)
            .ok_or_else(|| Error::Usage(format!("unknown config key {key:?}")))?;
        let bad = || Error::Usage(format!("config key {key:?}: cannot parse {raw:?}"));
        *slot = match slot {
            Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
            Value::String(_) => Value::String(raw.to_string()),
            Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
            Value::Number(_) => {
                let v: f64 = raw.parse().map_err(|_| bad())?;
                serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
            }
            _ => return Err(bad()),
        };
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Usage(format!("config key {key:?}: {e}")))?;
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut c = Config::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Snapshot in the same `key = value` format, keys sorted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(Error::Usage(m));
        if self.patients < 3 || self.per_patient == 0 {
            return usage("need at least 3 patients with one phantom each".into());
        }
        for (name, f) in [("val_fraction", self.val_fraction), ("test_fraction", self.test_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return usage(format!("{name} must lie in [0,1)"));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return usage("val_fraction + test_fraction must leave a training split".into());
        }
        if self.coarse_superpixels == 0 || self.fine_superpixels == 0 {
            return usage("superpixel counts must be positive".into());
        }
        if self.shift_reference_width == 0 {
            return usage("shift_reference_width must be positive".into());
        }
        self.sampling()?;
        self.td_loss()?;
        self.reward().validate()?;
        self.train_config(1).validate()?;
        Ok(())
    }

    fn sampling(&self) -> Result<Sampling> {
        match self.sampling.as_str() {
            "prioritized" => Ok(Sampling::Prioritized),
            "uniform" => Ok(Sampling::Uniform),
            other => Err(Error::Usage(format!("sampling must be prioritized or uniform, not {other:?}"))),
        }
    }

    fn td_loss(&self) -> Result<RegressionLoss> {
        match self.td_loss.as_str() {
            "huber" => Ok(RegressionLoss::Huber {
                delta: self.huber_delta,
            }),
            "squared" => Ok(RegressionLoss::Squared),
            other => Err(Error::Usage(format!("td_loss must be huber or squared, not {other:?}"))),
        }
    }

    pub fn sampler(&self) -> PhantomSampler {
        PhantomSampler {
            width: self.canvas,
            height: self.canvas,
            margin: self.box_margin,
            min_contrast: self.min_contrast,
            ..PhantomSampler::default()
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            epochs: self.cls_epochs,
            batch_size: self.cls_batch,
            lr: self.cls_lr,
            weight_decay: self.cls_weight_decay,
            label_smoothing: self.cls_label_smoothing,
            seed: derive_seed(self.seed, "classifier"),
        }
    }

    pub fn examples(&self) -> ExampleConfig {
        ExampleConfig {
            jitter: self.cls_jitter,
            mixed: self.cls_mixed,
        }
    }

    fn seeds(&self, superpixels: usize) -> SeedsParams {
        SeedsParams {
            superpixels,
            block_levels: self.seeds_block_levels,
            bins: self.seeds_bins,
            iterations: self.seeds_iterations,
        }
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            theta: self.theta,
            beta: self.beta,
            max_traversals: self.max_traversals,
            penalty: self.penalty,
            idr: self.idr,
        }
    }

    pub fn c2f(&self) -> C2fParams {
        C2fParams {
            coarse: self.seeds(self.coarse_superpixels),
            fine: self.seeds(self.fine_superpixels),
            reward: self.reward(),
        }
    }

    pub fn train_config(&self, stage: u8) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            lr: self.agent_lr,
            batch_size: self.agent_batch,
            sync_interval: self.sync_interval,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            eps_decay_frac: self.eps_decay_frac,
            steps: self.agent_steps,
            capacity: self.replay_capacity,
            sampling: self.sampling().unwrap_or(Sampling::Prioritized),
            loss: self.td_loss().unwrap_or(RegressionLoss::Huber { delta: 1.0 }),
            validate_every: self.validate_every,
            seed: derive_seed(self.seed, if stage == 1 { "agents-1" } else { "agents-2" }),
        }
    }
}

/// Independent stream seed for a named purpose (FNV-1a over the name,
/// mixed with the root seed).
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ root.rotate_left(17);
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
