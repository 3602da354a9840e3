//! Adaptation operators: behavioral training, weight mutation and
//! fine-tuning, and the snapshot-free rollback heuristic.
//!
//! Behavioral adaptation trains only the module's (down, up) matrices; the
//! core fingerprint before and after the call is identical by construction.
//! Weight adaptation returns a new `CoreParams`, leaving the caller to
//! decide whether the original is kept as a snapshot or dropped.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::BehavioralModule;
use crate::error::{Error, Result};
use crate::model::{CoreParams, Prompt};
use crate::rng;
use crate::train;

/// Shared training objective: (prompt, target symbol) pairs plus budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTask {
    pub objective_prompts: Vec<(Prompt, usize)>,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl AdaptationTask {
    pub fn new(
        objective_prompts: Vec<(Prompt, usize)>,
        steps: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        if objective_prompts.is_empty() {
            return Err(Error::Precondition(
                "adaptation task needs at least one objective prompt".into(),
            ));
        }
        if steps == 0 {
            return Err(Error::Precondition(
                "adaptation task needs at least one step".into(),
            ));
        }
        if !(learning_rate > 0.0) {
            return Err(Error::Precondition(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(AdaptationTask {
            objective_prompts,
            steps,
            learning_rate,
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationMode {
    /// Element-wise Gaussian noise scaled per layer.
    Noise,
    /// Gradient fine-tuning of the core on an [`AdaptationTask`].
    Finetune,
}

/// How to mutate the core parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationSpec {
    /// Mutation intensity. In noise mode, the per-layer noise standard
    /// deviation is `alpha` times the empirical std of that layer's weights.
    pub alpha: f64,
    pub mode: MutationMode,
    pub seed: u64,
}

/// Outcome summary of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationOutcome {
    pub final_loss: f64,
    pub steps: usize,
}

/// Train the behavioral parameters on `task` with the core frozen.
///
/// Only the module's matrices receive gradients; the core fingerprint after
/// the call equals the fingerprint before it.
pub fn adapt_behavioral(
    core: &CoreParams,
    module: &mut BehavioralModule,
    task: &AdaptationTask,
) -> Result<AdaptationOutcome> {
    if !module.is_attached() {
        return Err(Error::Lifecycle(
            "adapt_behavioral requires an attached module".into(),
        ));
    }
    module.check_compat(core)?;
    let final_loss = train::sgd_adapter(
        core,
        module,
        &task.objective_prompts,
        task.steps,
        task.learning_rate,
    )?;
    Ok(AdaptationOutcome {
        final_loss,
        steps: task.steps,
    })
}

/// Apply a weight-space mutation and return the new core.
///
/// Noise mode adds element-wise Gaussian noise with standard deviation
/// `alpha * sigma`, where `sigma` is the empirical std of the parameter
/// buffer being perturbed (each weight matrix, bias vector, and the
/// embedding separately), keeping the intensity scale-free across layer
/// magnitudes. Finetune mode runs SGD on the task over every core
/// parameter.
pub fn adapt_weights(
    core: &CoreParams,
    spec: &MutationSpec,
    task: Option<&AdaptationTask>,
) -> Result<CoreParams> {
    match spec.mode {
        MutationMode::Noise => {
            if spec.alpha == 0.0 {
                return Err(Error::Spec(
                    "noise mutation with alpha = 0 is degenerate".into(),
                ));
            }
            if spec.alpha < 0.0 {
                return Err(Error::Spec(format!(
                    "mutation intensity must be non-negative, got {}",
                    spec.alpha
                )));
            }
            let mut out = core.clone();
            let mut rng = rng::seeded(spec.seed);
            let sigmas: Vec<f64> = LayerStats::of(core)
                .buffers
                .iter()
                .map(|b| b.std)
                .collect();

            let apply = |buf: &mut [f64], sigma: f64, rng: &mut rand_chacha::ChaCha8Rng| {
                let sd = spec.alpha * sigma;
                for v in buf {
                    let n: f64 = StandardNormal.sample(rng);
                    *v += sd * n;
                }
            };
            apply(out.embedding_mut().data_mut(), sigmas[0], &mut rng);
            for (i, layer) in out.layers_mut().iter_mut().enumerate() {
                apply(layer.weight.data_mut(), sigmas[1 + 2 * i], &mut rng);
                apply(&mut layer.bias, sigmas[2 + 2 * i], &mut rng);
            }
            Ok(out)
        }
        MutationMode::Finetune => {
            let task = task.ok_or_else(|| {
                Error::Precondition("finetune mutation requires an adaptation task".into())
            })?;
            let mut out = core.clone();
            train::sgd_core(
                &mut out,
                &task.objective_prompts,
                task.steps,
                task.learning_rate,
            )?;
            Ok(out)
        }
    }
}

/// Per-buffer mean and std of the original core, the only information the
/// rollback heuristic is allowed to keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub buffers: Vec<BufferStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferStats {
    pub mean: f64,
    pub std: f64,
}

impl LayerStats {
    pub fn of(core: &CoreParams) -> Self {
        let buffers = core
            .param_buffers()
            .into_iter()
            .map(|buf| {
                let n = buf.len() as f64;
                let mean = buf.iter().sum::<f64>() / n;
                let var = buf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                BufferStats {
                    mean,
                    std: var.sqrt(),
                }
            })
            .collect();
        LayerStats { buffers }
    }
}

/// Moment-matching rollback: rescale every parameter buffer of the mutated
/// core so its mean and std match the recorded originals.
///
/// This is a snapshot-free heuristic and it is expected to fail to restore
/// behavior; the noise injected by a mutation stays in the parameters, only
/// its first two moments are corrected.
pub fn rollback_heuristic(mutated: &CoreParams, stats: &LayerStats) -> Result<CoreParams> {
    let mut out = mutated.clone();
    let n_buffers = out.param_buffers().len();
    if stats.buffers.len() != n_buffers {
        return Err(Error::Shape(format!(
            "stats cover {} buffers, core has {n_buffers}",
            stats.buffers.len()
        )));
    }
    let current = LayerStats::of(mutated);
    let mut idx = 0;
    let mut offset = 0;
    let total = out.param_count();
    while offset < total {
        let cur = current.buffers[idx];
        let orig = stats.buffers[idx];
        let len = mutated.param_buffers()[idx].len();
        let scale = if cur.std > 0.0 { orig.std / cur.std } else { 1.0 };
        for i in offset..offset + len {
            let v = out.param_mut(i);
            *v = (*v - cur.mean) * scale + orig.mean;
        }
        offset += len;
        idx += 1;
    }
    Ok(out)
}
