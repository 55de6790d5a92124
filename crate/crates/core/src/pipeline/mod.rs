//! Training stages (base classifier, generator, few-shot fine-tuning),
//! evaluation, and the multi-seed experiment and ablation runners.

mod experiment;
mod stages;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{Activation, SgdConfig, DEFAULT_SCALE};
use crate::transport::SinkhornConfig;

pub use experiment::{
    ablation_table, cells_csv, run_ablation_genloss, run_experiment, summarize, AblationRow,
    csv_row, CellResult, DeltaSummary, ExperimentConfig, ExperimentOutcome, PairedDelta,
    RunControl, ShotSummary, Variant, CSV_HEADER, STREAM_BASE, STREAM_FINETUNE, STREAM_GEN,
    STREAM_KSHOT,
};
pub use stages::{
    base_train, evaluate, finetune, generator_step, init_generator, kl_diag_gaussian,
    train_generator, KL_VAR_FLOOR,
    BaseTrainOutcome, EvalReport, FinetuneOutcome, GenLogRecord, GenStep, GenTrainOutcome,
};

/// Distribution-matching term used while training the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenLoss {
    /// Entropic transport between the real batch and centroids of the
    /// clustered synthetic batch.
    Ot,
    /// Mean squared distance of each synthetic feature to its conditioning
    /// real feature.
    L2,
    /// KL divergence between diagonal Gaussian fits of the real and
    /// synthetic batches.
    Kl,
}

impl GenLoss {
    pub const ALL: [GenLoss; 3] = [GenLoss::Ot, GenLoss::L2, GenLoss::Kl];

    pub fn name(self) -> &'static str {
        match self {
            GenLoss::Ot => "ot",
            GenLoss::L2 => "l2",
            GenLoss::Kl => "kl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ot" => Ok(GenLoss::Ot),
            "l2" => Ok(GenLoss::L2),
            "kl" => Ok(GenLoss::Kl),
            other => Err(Error::InvalidConfig(format!(
                "unknown generator loss {other:?} (expected ot, l2 or kl)"
            ))),
        }
    }
}

/// How generator weights start out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorInit {
    /// Uniform fan-in draws.
    FanIn,
    /// Starts as `x + diag(s) z`, with `s` the pooled within-class standard
    /// deviation of the base set, plus `jitter`-scaled fan-in noise.
    NearIdentity { jitter: f64 },
}

/// Every knob of the three training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    /// Weight of the synthetic-feature loss during fine-tuning.
    pub alpha: f64,
    /// Weight of the classifier loss on synthetic features during generator
    /// training.
    pub beta: f64,
    /// Synthetic features per real feature during generator training.
    pub t_gen: usize,
    /// Synthetic features per real feature during fine-tuning.
    pub t_finetune: usize,
    pub k_centroids: usize,
    /// Real features per generator training step.
    pub batch_real: usize,
    pub base_batch: usize,
    /// Real features per fine-tuning step (capped at the K-shot set size).
    pub finetune_batch: usize,
    pub base_iterations: usize,
    pub gen_iterations: usize,
    pub finetune_iterations: usize,
    /// Lloyd iteration cap for the per-step clustering.
    pub kmeans_iterations: usize,
    pub sinkhorn: SinkhornConfig,
    pub base_sgd: SgdConfig,
    pub gen_sgd: SgdConfig,
    pub finetune_sgd: SgdConfig,
    pub gen_loss: GenLoss,
    /// Solve one transport problem per class instead of one per batch.
    pub per_class_ot: bool,
    /// Keep base prototypes fixed while fine-tuning.
    pub freeze_base: bool,
    pub classifier_scale: f64,
    pub generator_hidden: Vec<usize>,
    pub activation: Activation,
    pub generator_init: GeneratorInit,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.1,
            t_gen: 16,
            t_finetune: 512,
            k_centroids: 32,
            batch_real: 64,
            base_batch: 64,
            finetune_batch: 16,
            base_iterations: 300,
            gen_iterations: 1000,
            finetune_iterations: 100,
            kmeans_iterations: 10,
            sinkhorn: SinkhornConfig::default(),
            base_sgd: SgdConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
                schedule: vec![(200, 0.1)],
            },
            gen_sgd: SgdConfig {
                learning_rate: 0.02,
                momentum: 0.9,
                weight_decay: 1e-4,
                schedule: vec![(250, 0.1), (750, 0.1)],
            },
            finetune_sgd: SgdConfig {
                learning_rate: 0.02,
                momentum: 0.9,
                weight_decay: 0.0,
                schedule: vec![],
            },
            gen_loss: GenLoss::Ot,
            per_class_ot: false,
            freeze_base: true,
            classifier_scale: DEFAULT_SCALE,
            generator_hidden: Vec::new(),
            activation: Activation::default(),
            generator_init: GeneratorInit::NearIdentity { jitter: 0.01 },
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("t_gen", self.t_gen),
            ("t_finetune", self.t_finetune),
            ("k_centroids", self.k_centroids),
            ("batch_real", self.batch_real),
            ("base_batch", self.base_batch),
            ("finetune_batch", self.finetune_batch),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.k_centroids > self.batch_real.saturating_mul(self.t_finetune) {
            return bad(format!(
                "k_centroids ({}) exceeds batch_real x t_finetune ({})",
                self.k_centroids,
                self.batch_real.saturating_mul(self.t_finetune)
            ));
        }
        if !(self.classifier_scale > 0.0 && self.classifier_scale.is_finite()) {
            return bad(format!("classifier_scale must be positive, got {}", self.classifier_scale));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !(0.0..1.0).contains(&slope) {
                return bad(format!("activation slope must be in [0, 1), got {slope}"));
            }
        }
        if let GeneratorInit::NearIdentity { jitter } = self.generator_init {
            if !(jitter.is_finite() && jitter >= 0.0) {
                return bad(format!("jitter must be finite and >= 0, got {jitter}"));
            }
        }
        self.sinkhorn.validate()?;
        self.base_sgd.validate()?;
        self.gen_sgd.validate()?;
        self.finetune_sgd.validate()
    }

    /// Hidden widths, falling back to two layers of `2d`.
    pub fn hidden_widths(&self, dim: usize) -> Vec<usize> {
        if self.generator_hidden.is_empty() {
            crate::nnet::default_hidden(dim)
        } else {
            self.generator_hidden.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = StageConfig::default();
        c.validate().unwrap();
        assert_eq!((c.alpha, c.beta, c.t_gen, c.t_finetune, c.k_centroids), (0.01, 0.1, 16, 512, 32));
    }

    #[test]
    fn rejects_bad_counts() {
        for f in [
            |c: &mut StageConfig| c.t_gen = 0,
            |c: &mut StageConfig| c.t_finetune = 0,
            |c: &mut StageConfig| c.k_centroids = 0,
            |c: &mut StageConfig| c.batch_real = 0,
            |c: &mut StageConfig| c.alpha = -1.0,
            |c: &mut StageConfig| {
                c.batch_real = 2;
                c.t_finetune = 3;
                c.k_centroids = 7;
            },
        ] {
            let mut c = StageConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn gen_loss_names() {
        for v in GenLoss::ALL {
            assert_eq!(GenLoss::parse(v.name()).unwrap(), v);
        }
        assert!(GenLoss::parse("wgan").is_err());
    }
}
