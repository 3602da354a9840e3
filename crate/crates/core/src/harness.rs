//! Pretraining, prompt sets, and the three-stage evaluation protocol.
//!
//! Every protocol run evaluates the same frozen prompt set three times:
//! at baseline, after adaptation, and after rollback. All divergences are
//! computed against the baseline. For weight-space scenarios a snapshot of
//! the original core exists only inside the measurement layer; the rollback
//! heuristic sees per-layer summary statistics and nothing else.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    adapt_behavioral, adapt_weights, rollback_heuristic, AdaptationTask, LayerStats, MutationSpec,
};
use crate::adapter::{BehavioralModule, PerturbationSpec};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    divergence_report, ils, recoverability, svar, DivergenceReport, IlsReport,
    RecoverabilityReport, SvarReport,
};
use crate::model::{forward_all, init_core, CoreParams, OutputDistribution, Prompt};
use crate::rng;
use crate::train;

/// Default number of evaluation prompts.
pub const DEFAULT_PROMPT_COUNT: usize = 64;
/// Default held-out subset size.
pub const DEFAULT_HELD_OUT: usize = 16;
/// Default pretraining budget.
pub const DEFAULT_PRETRAIN_STEPS: usize = 200;
/// Synthetic corpus size used by [`pretrain`].
pub const PRETRAIN_CORPUS_SIZE: usize = 256;
/// Pretraining learning rate.
pub const PRETRAIN_LR: f64 = 1.5;
/// Default learning rate for adaptation tasks.
pub const DEFAULT_TASK_LR: f64 = 0.1;
/// Default protocol seeds.
pub const DEFAULT_SEEDS: [u64; 3] = [11, 23, 42];

/// Frozen, seeded evaluation prompt set with a held-out tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
    held_out_start: usize,
    generation_seed: u64,
}

impl PromptSet {
    /// Generate `total` random prompts, the last `held_out` of which are
    /// marked held out. Ids are unique and stable; the set is identical
    /// across all experimental conditions for a given seed.
    pub fn generate(
        config: &ModelConfig,
        generation_seed: u64,
        total: usize,
        held_out: usize,
    ) -> Result<Self> {
        if total == 0 {
            return Err(Error::Precondition("prompt set must be non-empty".into()));
        }
        if held_out == 0 || held_out >= total {
            return Err(Error::Precondition(format!(
                "held-out size must be in 1..{total}, got {held_out}"
            )));
        }
        let mut rng = rng::seeded(generation_seed);
        let prompts = (0..total)
            .map(|i| {
                let tokens = (0..config.context_len)
                    .map(|_| rng.random_range(0..config.vocab_size))
                    .collect();
                Prompt::new(format!("p{i:03}"), tokens)
            })
            .collect();
        Ok(PromptSet {
            prompts,
            held_out_start: total - held_out,
            generation_seed,
        })
    }

    pub fn all(&self) -> &[Prompt] {
        &self.prompts
    }

    /// Prompts available as adaptation objectives.
    pub fn adaptation(&self) -> &[Prompt] {
        &self.prompts[..self.held_out_start]
    }

    pub fn held_out(&self) -> &[Prompt] {
        &self.prompts[self.held_out_start..]
    }

    pub fn is_held_out(&self, index: usize) -> bool {
        index >= self.held_out_start
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn generation_seed(&self) -> u64 {
        self.generation_seed
    }
}

/// Hidden rule behind the synthetic corpus: the target symbol is the token
/// sum modulo the vocabulary size.
pub fn synthetic_target(tokens: &[usize], vocab_size: usize) -> usize {
    tokens.iter().sum::<usize>() % vocab_size
}

/// Seeded synthetic corpus of (prompt, target) pairs following the hidden
/// rule, for pretraining.
pub fn synthetic_corpus(
    config: &ModelConfig,
    corpus_seed: u64,
    size: usize,
) -> Vec<(Prompt, usize)> {
    let mut rng = rng::seeded(corpus_seed);
    (0..size)
        .map(|i| {
            let tokens: Vec<usize> = (0..config.context_len)
                .map(|_| rng.random_range(0..config.vocab_size))
                .collect();
            let target = synthetic_target(&tokens, config.vocab_size);
            (Prompt::new(format!("c{i:04}"), tokens), target)
        })
        .collect()
}

/// Initialize a core and train it on the synthetic corpus so the baseline
/// has non-uniform behavior. `steps == 0` returns the raw initialization.
/// Deterministic per (config, corpus_seed, steps).
pub fn pretrain(config: &ModelConfig, corpus_seed: u64, steps: usize) -> Result<CoreParams> {
    let mut core = init_core(config)?;
    if steps > 0 {
        let corpus = synthetic_corpus(config, corpus_seed, PRETRAIN_CORPUS_SIZE);
        train::sgd_core(&mut core, &corpus, steps, DEFAULT_LEARNING_RATE)?;
    }
    Ok(core)
}

/// Build an adaptation task from the non-held-out prompts: the first
/// `count` prompts get seeded random target symbols.
pub fn objective_task(
    set: &PromptSet,
    config: &ModelConfig,
    count: usize,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<AdaptationTask> {
    if count == 0 || count > set.adaptation().len() {
        return Err(Error::Precondition(format!(
            "objective count must be in 1..={}, got {count}",
            set.adaptation().len()
        )));
    }
    let mut rng = rng::seeded(seed);
    let pairs = set.adaptation()[..count]
        .iter()
        .map(|p| (p.clone(), rng.random_range(0..config.vocab_size)))
        .collect();
    AdaptationTask::new(pairs, steps, learning_rate, seed)
}

/// The adaptation mechanism exercised by a protocol run.
#[derive(Debug, Clone)]
pub enum Scenario {
    /// Attach a fresh module, train it, roll back by unloading.
    Rlae {
        rank: usize,
        adapter_seed: u64,
        task: AdaptationTask,
    },
    /// Mutate the core, roll back with the moment-matching heuristic.
    Mutation(MutationSpec),
    /// Fine-tune the core, roll back with the moment-matching heuristic.
    Finetune(AdaptationTask),
}

impl Scenario {
    pub fn label(&self) -> &'static str {
        match self {
            Scenario::Rlae { .. } => "rlae",
            Scenario::Mutation(_) => "mutation",
            Scenario::Finetune(_) => "finetune",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOptions {
    pub ils_tau: f64,
    /// Perturbation spec for the structural-variance probe; applied to the
    /// adapted module in rlae runs only.
    pub svar: Option<PerturbationSpec>,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            ils_tau: crate::metrics::DEFAULT_ILS_TAU,
            svar: None,
        }
    }
}

/// Everything measured during one three-stage protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub scenario: String,
    pub baseline: Vec<OutputDistribution>,
    pub post_adaptation: Vec<OutputDistribution>,
    pub post_rollback: Vec<OutputDistribution>,
    pub d_adapt: DivergenceReport,
    pub d_rollback: DivergenceReport,
    pub recoverability: RecoverabilityReport,
    pub ils: IlsReport,
    pub svar: Option<SvarReport>,
    /// (stage, core fingerprint) pairs recorded as the run progressed.
    pub fingerprints: Vec<(String, String)>,
}

/// Run the three-stage protocol: baseline eval, adaptation, post-adaptation
/// eval, rollback, post-rollback eval. All divergences are against the
/// stage-1 baseline.
///
/// In an rlae run the core fingerprint must be byte-identical at every
/// stage; any mutation of the core is a hard protocol violation.
pub fn run_protocol(
    core: &CoreParams,
    prompts: &PromptSet,
    scenario: Scenario,
    opts: &ProtocolOptions,
) -> Result<ProtocolRun> {
    if prompts.is_empty() {
        return Err(Error::Precondition("protocol needs a non-empty prompt set".into()));
    }
    let label = scenario.label().to_string();
    let f0 = core.fingerprint();
    let mut fingerprints = vec![("baseline".to_string(), f0.clone())];
    let baseline = forward_all(core, None, prompts.all())?;

    let (post_adaptation, post_rollback, svar_report) = match scenario {
        Scenario::Rlae {
            rank,
            adapter_seed,
            task,
        } => {
            let mut module = BehavioralModule::new(core, rank, None, adapter_seed)?;
            module.attach(core)?;
            adapt_behavioral(core, &mut module, &task)?;
            check_purity(core, &f0, "post_adaptation", &mut fingerprints)?;
            let adapted = forward_all(core, Some(&module), prompts.all())?;
            let svar_report = match &opts.svar {
                Some(spec) => Some(svar(core, &module, prompts.all(), spec)?),
                None => None,
            };
            module.unload();
            check_purity(core, &f0, "post_rollback", &mut fingerprints)?;
            let recovered = forward_all(core, None, prompts.all())?;
            (adapted, recovered, svar_report)
        }
        Scenario::Mutation(spec) => {
            let stats = LayerStats::of(core);
            let mutated = adapt_weights(core, &spec, None)?;
            fingerprints.push(("post_adaptation".to_string(), mutated.fingerprint()));
            let adapted = forward_all(&mutated, None, prompts.all())?;
            let recovered_core = rollback_heuristic(&mutated, &stats)?;
            fingerprints.push(("post_rollback".to_string(), recovered_core.fingerprint()));
            let recovered = forward_all(&recovered_core, None, prompts.all())?;
            (adapted, recovered, None)
        }
        Scenario::Finetune(task) => {
            let stats = LayerStats::of(core);
            let spec = MutationSpec {
                alpha: 0.0,
                mode: crate::adaptation::MutationMode::Finetune,
                seed: task.seed,
            };
            let tuned = adapt_weights(core, &spec, Some(&task))?;
            fingerprints.push(("post_adaptation".to_string(), tuned.fingerprint()));
            let adapted = forward_all(&tuned, None, prompts.all())?;
            let recovered_core = rollback_heuristic(&tuned, &stats)?;
            fingerprints.push(("post_rollback".to_string(), recovered_core.fingerprint()));
            let recovered = forward_all(&recovered_core, None, prompts.all())?;
            (adapted, recovered, None)
        }
    };

    let d_adapt = divergence_report(&baseline, &post_adaptation, "baseline", "adapted")?;
    let d_rollback = divergence_report(&baseline, &post_rollback, "baseline", "recovered")?;
    let recoverability = recoverability(&d_adapt, &d_rollback)?;
    let ils = ils(&baseline, &post_rollback, opts.ils_tau)?;

    Ok(ProtocolRun {
        scenario: label,
        baseline,
        post_adaptation,
        post_rollback,
        d_adapt,
        d_rollback,
        recoverability,
        ils,
        svar: svar_report,
        fingerprints,
    })
}

fn check_purity(
    core: &CoreParams,
    f0: &str,
    stage: &str,
    fingerprints: &mut Vec<(String, String)>,
) -> Result<()> {
    let fp = core.fingerprint();
    if fp != f0 {
        return Err(Error::ProtocolViolation(format!(
            "core parameters changed during an rlae run at stage {stage}"
        )));
    }
    fingerprints.push((stage.to_string(), fp));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PRECISION_FLOOR;

    fn world() -> (ModelConfig, CoreParams, PromptSet) {
        let config = ModelConfig::new(16, 8, vec![32], "S", 7).unwrap();
        let core = pretrain(&config, 1234, 100).unwrap();
        let prompts = PromptSet::generate(&config, 99, 32, 8).unwrap();
        (config, core, prompts)
    }

    #[test]
    fn prompt_set_is_frozen_and_unique() {
        let config = ModelConfig::new(16, 8, vec![32], "S", 7).unwrap();
        let a = PromptSet::generate(&config, 99, 64, 16).unwrap();
        let b = PromptSet::generate(&config, 99, 64, 16).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<&str> = a.all().iter().map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 64);
        assert_eq!(a.held_out().len(), 16);
        assert_eq!(a.adaptation().len(), 48);
    }

    #[test]
    fn prompt_set_needs_held_out() {
        let config = ModelConfig::new(16, 8, vec![32], "S", 7).unwrap();
        assert!(PromptSet::generate(&config, 99, 64, 0).is_err());
        assert!(PromptSet::generate(&config, 99, 8, 8).is_err());
    }

    #[test]
    fn pretrain_zero_steps_is_raw_init() {
        let config = ModelConfig::new(16, 8, vec![32], "S", 7).unwrap();
        let raw = init_core(&config).unwrap();
        let trained = pretrain(&config, 1234, 0).unwrap();
        assert_eq!(raw.fingerprint(), trained.fingerprint());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let config = ModelConfig::new(16, 8, vec![32], "S", 7).unwrap();
        let a = pretrain(&config, 1234, 50).unwrap();
        let b = pretrain(&config, 1234, 50).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn pretrained_baseline_is_non_uniform() {
        let (config, core, prompts) = world();
        let dists = forward_all(&core, None, prompts.all()).unwrap();
        let mean_entropy: f64 =
            dists.iter().map(|d| d.entropy()).sum::<f64>() / dists.len() as f64;
        assert!(mean_entropy < config.max_entropy(), "{mean_entropy}");
    }

    #[test]
    fn rlae_protocol_recovers_bit_exactly() {
        let (config, core, prompts) = world();
        let task = objective_task(&prompts, &config, 6, 150, 0.5, 5).unwrap();
        let run = run_protocol(
            &core,
            &prompts,
            Scenario::Rlae {
                rank: 4,
                adapter_seed: 17,
                task,
            },
            &ProtocolOptions::default(),
        )
        .unwrap();
        assert_eq!(run.baseline, run.post_rollback);
        assert_eq!(run.d_rollback.mean_kl, 0.0);
        assert_eq!(run.recoverability.rf, 1.0);
        // Core fingerprint identical at every stage.
        let first = &run.fingerprints[0].1;
        assert!(run.fingerprints.iter().all(|(_, fp)| fp == first));
    }

    #[test]
    fn mutation_protocol_leaves_residue() {
        let (_, core, prompts) = world();
        let run = run_protocol(
            &core,
            &prompts,
            Scenario::Mutation(MutationSpec {
                alpha: 0.01,
                mode: crate::adaptation::MutationMode::Noise,
                seed: 3,
            }),
            &ProtocolOptions::default(),
        )
        .unwrap();
        assert!(run.d_rollback.mean_kl > PRECISION_FLOOR);
        assert_eq!(run.recoverability.rf, 0.0);
    }

    #[test]
    fn held_out_prompts_also_recover_exactly() {
        let (config, core, prompts) = world();
        let task = objective_task(&prompts, &config, 6, 150, 0.5, 5).unwrap();
        let run = run_protocol(
            &core,
            &prompts,
            Scenario::Rlae {
                rank: 4,
                adapter_seed: 17,
                task,
            },
            &ProtocolOptions::default(),
        )
        .unwrap();
        for p in prompts.held_out() {
            let kl = run.d_rollback.per_prompt[&p.id].kl;
            assert_eq!(kl, 0.0);
        }
    }

    #[test]
    fn empty_prompt_set_rejected_by_generate() {
        let config = ModelConfig::new(16, 8, vec![32], "S", 7).unwrap();
        assert!(matches!(
            PromptSet::generate(&config, 99, 0, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn objective_task_bounds_checked() {
        let (config, _, prompts) = world();
        assert!(objective_task(&prompts, &config, 0, 10, 0.5, 1).is_err());
        assert!(objective_task(&prompts, &config, 1000, 10, 0.5, 1).is_err());
    }
}
