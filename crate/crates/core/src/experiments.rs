//! Config-driven experiments and replayable records.
//!
//! Every experiment is fully described by an [`ExperimentSpec`]; running one
//! produces an [`ExperimentRecord`] that embeds the normalized spec, so any
//! record can be re-derived bit-identically from itself.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{adapt_behavioral, adapt_weights, rollback_heuristic, LayerStats, MutationMode, MutationSpec};
use crate::adapter::{BehavioralModule, PerturbationSpec};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::harness::{
    objective_task, pretrain, run_protocol, PromptSet, ProtocolOptions, Scenario,
};
use crate::json;
use crate::metrics::{
    divergence_report, kl, recoverability, DivergenceReport, IlsReport, RecoverabilityReport,
    RecoveryRegime, SvarReport, PRECISION_FLOOR,
};
use crate::model::{forward_all, CoreParams, OutputDistribution};
use crate::parallel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    EliminationSweep,
    MutationSweep,
    RfComparison,
    BaselineStability,
    ScaleSweep,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExperimentKind::EliminationSweep => "elimination_sweep",
            ExperimentKind::MutationSweep => "mutation_sweep",
            ExperimentKind::RfComparison => "rf_comparison",
            ExperimentKind::BaselineStability => "baseline_stability",
            ExperimentKind::ScaleSweep => "scale_sweep",
        };
        write!(f, "{s}")
    }
}

fn default_seeds() -> Vec<u64> {
    crate::harness::DEFAULT_SEEDS.to_vec()
}
fn default_vocab() -> usize {
    16
}
fn default_context() -> usize {
    8
}
fn default_scale_tag() -> String {
    "S".into()
}
fn default_init_seed() -> u64 {
    7
}
fn default_prompt_count() -> usize {
    crate::harness::DEFAULT_PROMPT_COUNT
}
fn default_held_out() -> usize {
    crate::harness::DEFAULT_HELD_OUT
}
fn default_prompt_seed() -> u64 {
    99
}
fn default_corpus_seed() -> u64 {
    1234
}
fn default_pretrain_steps() -> usize {
    crate::harness::DEFAULT_PRETRAIN_STEPS
}
fn default_rank() -> usize {
    4
}
fn default_objective_count() -> usize {
    8
}
fn default_task_steps() -> usize {
    300
}
fn default_learning_rate() -> f64 {
    crate::harness::DEFAULT_LEARNING_RATE
}
fn default_mutation_alpha() -> f64 {
    0.01
}
fn default_ils_tau() -> f64 {
    crate::metrics::DEFAULT_ILS_TAU
}
fn default_svar_radius() -> f64 {
    0.05
}
fn default_svar_samples() -> usize {
    8
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Elimination rates, mutation intensities, or the sprint count,
    /// depending on `kind`. Kind-specific defaults apply when empty.
    #[serde(default)]
    pub grid: Vec<f64>,
    /// Scale tags swept by mutation and scale experiments.
    #[serde(default)]
    pub scales: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_context")]
    pub context_len: usize,
    #[serde(default = "default_scale_tag")]
    pub scale_tag: String,
    /// Overrides the widths implied by `scale_tag` for single-scale runs.
    #[serde(default)]
    pub hidden_widths: Option<Vec<usize>>,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
    #[serde(default = "default_prompt_count")]
    pub prompt_count: usize,
    #[serde(default = "default_held_out")]
    pub held_out: usize,
    #[serde(default = "default_prompt_seed")]
    pub prompt_seed: u64,
    #[serde(default = "default_corpus_seed")]
    pub corpus_seed: u64,
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_objective_count")]
    pub objective_count: usize,
    #[serde(default = "default_task_steps")]
    pub task_steps: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Noise intensity used by the mutation row of rf and scale sweeps.
    #[serde(default = "default_mutation_alpha")]
    pub mutation_alpha: f64,
    #[serde(default = "default_ils_tau")]
    pub ils_tau: f64,
    #[serde(default = "default_svar_radius")]
    pub svar_radius: f64,
    #[serde(default = "default_svar_samples")]
    pub svar_samples: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Default elimination grid, matching the nine-point sweep layout.
pub const DEFAULT_ELIMINATION_GRID: [f64; 9] =
    [0.0, 0.001, 0.01, 0.05, 0.2, 0.4, 0.6, 0.8, 1.0];
/// Default mutation intensity grid (three decades).
pub const DEFAULT_MUTATION_GRID: [f64; 3] = [0.001, 0.01, 0.05];
/// Default sprint count for baseline stability.
pub const DEFAULT_SPRINTS: usize = 4;

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind) -> Self {
        serde_json::from_value(serde_json::json!({ "kind": kind.to_string() }))
            .expect("defaults are complete")
    }

    /// Fill kind-specific defaults and validate. Runners operate on the
    /// normalized spec, and records embed it.
    pub fn normalized(&self) -> Result<ExperimentSpec> {
        let mut spec = self.clone();
        if spec.seeds.is_empty() {
            return Err(Error::Spec("seeds must be non-empty".into()));
        }
        if spec.rank == 0 {
            return Err(Error::Spec("rank must be positive".into()));
        }
        match spec.kind {
            ExperimentKind::EliminationSweep => {
                if spec.grid.is_empty() {
                    spec.grid = DEFAULT_ELIMINATION_GRID.to_vec();
                }
                if spec.grid.iter().any(|e| !(0.0..=1.0).contains(e)) {
                    return Err(Error::Spec(
                        "elimination grid values must lie in [0, 1]".into(),
                    ));
                }
                if !spec.grid.contains(&0.0) || !spec.grid.contains(&1.0) {
                    return Err(Error::Spec(
                        "elimination grid must include 0.0 and 1.0".into(),
                    ));
                }
                spec.scales = vec![spec.scale_tag.clone()];
            }
            ExperimentKind::MutationSweep => {
                if spec.grid.is_empty() {
                    spec.grid = DEFAULT_MUTATION_GRID.to_vec();
                }
                if spec.grid.iter().any(|a| *a <= 0.0) {
                    return Err(Error::Spec("mutation grid values must be positive".into()));
                }
                if spec.grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Spec(
                        "mutation grid must be strictly ascending".into(),
                    ));
                }
                if spec.scales.is_empty() {
                    spec.scales = vec!["S".into(), "M".into()];
                }
            }
            ExperimentKind::RfComparison => {
                spec.grid = Vec::new();
                spec.scales = vec![spec.scale_tag.clone()];
            }
            ExperimentKind::BaselineStability => {
                if spec.grid.is_empty() {
                    spec.grid = vec![DEFAULT_SPRINTS as f64];
                }
                if spec.grid.len() != 1 || spec.grid[0] < 1.0 || spec.grid[0].fract() != 0.0 {
                    return Err(Error::Spec(
                        "baseline stability grid must be a single positive integer sprint count"
                            .into(),
                    ));
                }
                spec.scales = vec![spec.scale_tag.clone()];
            }
            ExperimentKind::ScaleSweep => {
                spec.grid = Vec::new();
                if spec.scales.is_empty() {
                    spec.scales = vec!["S".into(), "M".into(), "L".into()];
                }
            }
        }
        for tag in &spec.scales {
            spec.model_config(tag)?;
        }
        Ok(spec)
    }

    /// Model config for one scale tag in this spec.
    pub fn model_config(&self, tag: &str) -> Result<ModelConfig> {
        if tag == self.scale_tag {
            if let Some(widths) = &self.hidden_widths {
                return ModelConfig::new(
                    self.vocab_size,
                    self.context_len,
                    widths.clone(),
                    tag,
                    self.init_seed,
                );
            }
        }
        ModelConfig::for_scale(tag, self.vocab_size, self.context_len, self.init_seed)
    }

    pub fn hash(&self) -> Result<String> {
        let bytes = json::to_string(self)?;
        let digest = Sha256::digest(bytes.as_bytes());
        use std::fmt::Write as _;
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        Ok(hex)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mutation,
    Finetune,
    Rlae,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Mutation, Mechanism::Finetune, Mechanism::Rlae];
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mechanism::Mutation => write!(f, "mutation"),
            Mechanism::Finetune => write!(f, "finetune"),
            Mechanism::Rlae => write!(f, "rlae"),
        }
    }
}

/// Baseline model facts for identity auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineInfo {
    pub scale: String,
    pub fingerprint: String,
    pub mean_entropy: f64,
    pub distributions: Vec<OutputDistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationCell {
    pub epsilon: f64,
    pub kl: f64,
    pub js: f64,
    pub regime: RecoveryRegime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationSeedResult {
    pub seed: u64,
    /// Divergence right after adaptation, before any elimination.
    pub adapt_kl: f64,
    pub adapt_js: f64,
    pub cells: Vec<EliminationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationSummaryRow {
    pub epsilon: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub js_mean: f64,
    pub js_std: f64,
    pub regime: RecoveryRegime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationCell {
    pub seed: u64,
    pub scale: String,
    pub alpha: f64,
    pub adapt_kl: f64,
    pub rollback_kl: f64,
    pub rollback_js: f64,
    pub rf: f64,
    pub regime: RecoveryRegime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationSummaryRow {
    pub scale: String,
    pub alpha: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub js_mean: f64,
    pub js_std: f64,
    pub rf_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfCell {
    pub seed: u64,
    pub mechanism: Mechanism,
    pub d_adapt: DivergenceReport,
    pub d_rollback: DivergenceReport,
    pub recoverability: RecoverabilityReport,
    pub ils: IlsReport,
    pub svar: Option<SvarReport>,
    pub fingerprints: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfSummaryRow {
    pub mechanism: Mechanism,
    pub post_reset_divergence: f64,
    pub rf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprintRow {
    pub sprint: usize,
    pub mean_entropy: f64,
    pub std_entropy: f64,
    pub max_entropy: f64,
    /// Mean KL between this sprint's baseline and the first sprint's.
    pub kl_vs_first: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleCell {
    pub seed: u64,
    pub scale: String,
    pub mechanism: Mechanism,
    pub post_reset_kl: f64,
    pub rf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummaryRow {
    pub scale: String,
    pub mechanism: Mechanism,
    pub recoverability_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentResults {
    EliminationSweep {
        per_seed: Vec<EliminationSeedResult>,
        summary: Vec<EliminationSummaryRow>,
        /// Smallest grid rate from which every row is in the exact regime.
        epsilon_desk: Option<f64>,
    },
    MutationSweep {
        cells: Vec<MutationCell>,
        summary: Vec<MutationSummaryRow>,
    },
    RfComparison {
        cells: Vec<RfCell>,
        summary: Vec<RfSummaryRow>,
    },
    BaselineStability {
        sprints: Vec<SprintRow>,
    },
    ScaleSweep {
        cells: Vec<ScaleCell>,
        summary: Vec<ScaleSummaryRow>,
    },
}

/// Seeded, reproducible record of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub spec: ExperimentSpec,
    pub spec_hash: String,
    pub baselines: Vec<BaselineInfo>,
    pub results: ExperimentResults,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

struct World {
    config: ModelConfig,
    core: CoreParams,
    prompts: PromptSet,
    baseline: Vec<OutputDistribution>,
}

impl World {
    fn build(spec: &ExperimentSpec, tag: &str) -> Result<World> {
        let config = spec.model_config(tag)?;
        let core = pretrain(&config, spec.corpus_seed, spec.pretrain_steps)?;
        let prompts =
            PromptSet::generate(&config, spec.prompt_seed, spec.prompt_count, spec.held_out)?;
        let baseline = forward_all(&core, None, prompts.all())?;
        Ok(World {
            config,
            core,
            prompts,
            baseline,
        })
    }

    fn baseline_info(&self) -> BaselineInfo {
        let mean_entropy =
            self.baseline.iter().map(|d| d.entropy()).sum::<f64>() / self.baseline.len() as f64;
        BaselineInfo {
            scale: self.config.scale_tag.clone(),
            fingerprint: self.core.fingerprint(),
            mean_entropy,
            distributions: self.baseline.clone(),
        }
    }
}

/// Run any experiment described by `spec`.
pub fn run(spec: &ExperimentSpec) -> Result<ExperimentRecord> {
    match spec.kind {
        ExperimentKind::EliminationSweep => run_elimination_sweep(spec),
        ExperimentKind::MutationSweep => run_mutation_sweep(spec),
        ExperimentKind::RfComparison => run_rf_comparison(spec),
        ExperimentKind::BaselineStability => run_baseline_stability(spec),
        ExperimentKind::ScaleSweep => run_scale_sweep(spec),
    }
}

fn expect_kind(spec: &ExperimentSpec, kind: ExperimentKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::Spec(format!(
            "expected a {kind} spec, got {}",
            spec.kind
        )));
    }
    Ok(())
}

/// Adapt a module, then zero growing fractions of it and measure what is
/// left of the adaptation.
pub fn run_elimination_sweep(spec: &ExperimentSpec) -> Result<ExperimentRecord> {
    expect_kind(spec, ExperimentKind::EliminationSweep)?;
    let spec = spec.normalized()?;
    let world = World::build(&spec, &spec.scale_tag)?;

    let per_seed: Vec<EliminationSeedResult> = parallel::map_ordered(&spec.seeds, |&seed| {
        elimination_for_seed(&spec, &world, seed)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut summary = Vec::with_capacity(spec.grid.len());
    for (i, &epsilon) in spec.grid.iter().enumerate() {
        let kls: Vec<f64> = per_seed.iter().map(|s| s.cells[i].kl).collect();
        let jss: Vec<f64> = per_seed.iter().map(|s| s.cells[i].js).collect();
        let kl_mean = mean(&kls);
        let js_mean = mean(&jss);
        let regime = if kl_mean < PRECISION_FLOOR && js_mean < PRECISION_FLOOR {
            RecoveryRegime::Exact
        } else {
            RecoveryRegime::Partial
        };
        summary.push(EliminationSummaryRow {
            epsilon,
            kl_mean,
            kl_std: std_dev(&kls),
            js_mean,
            js_std: std_dev(&jss),
            regime,
        });
    }
    // Smallest rate from which the whole tail of the (sorted) grid is exact.
    let mut sorted: Vec<&EliminationSummaryRow> = summary.iter().collect();
    sorted.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    let mut epsilon_desk = None;
    for row in sorted.iter().rev() {
        if row.regime == RecoveryRegime::Exact {
            epsilon_desk = Some(row.epsilon);
        } else {
            break;
        }
    }

    Ok(ExperimentRecord {
        spec_hash: spec.hash()?,
        baselines: vec![world.baseline_info()],
        results: ExperimentResults::EliminationSweep {
            per_seed,
            summary,
            epsilon_desk,
        },
        spec,
    })
}

fn elimination_for_seed(
    spec: &ExperimentSpec,
    world: &World,
    seed: u64,
) -> Result<EliminationSeedResult> {
    let task = objective_task(
        &world.prompts,
        &world.config,
        spec.objective_count,
        spec.task_steps,
        spec.learning_rate,
        rng::derive(seed, "task"),
    )?;
    let mut module = BehavioralModule::new(&world.core, spec.rank, None, rng::derive(seed, "adapter"))?;
    module.attach(&world.core)?;
    adapt_behavioral(&world.core, &mut module, &task)?;
    let adapted = forward_all(&world.core, Some(&module), world.prompts.all())?;
    let d_adapt = divergence_report(&world.baseline, &adapted, "baseline", "adapted")?;

    let cells: Vec<EliminationCell> = parallel::map_indexed(spec.grid.len(), |i| {
        let epsilon = spec.grid[i];
        let mut eliminated = module.clone();
        eliminated.eliminate(epsilon, rng::derive_indexed(seed, "elim", i as u64))?;
        let dists = forward_all(&world.core, Some(&eliminated), world.prompts.all())?;
        let report = divergence_report(&world.baseline, &dists, "baseline", "post_reset")?;
        // Table regimes here are binary: a partial reset either collapses to
        // numerical zero or it does not.
        let regime = if report.mean_kl < PRECISION_FLOOR && report.mean_js < PRECISION_FLOOR {
            RecoveryRegime::Exact
        } else {
            RecoveryRegime::Partial
        };
        Ok(EliminationCell {
            epsilon,
            kl: report.mean_kl,
            js: report.mean_js,
            regime,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    Ok(EliminationSeedResult {
        seed,
        adapt_kl: d_adapt.mean_kl,
        adapt_js: d_adapt.mean_js,
        cells,
    })
}

/// Mutate the core at each intensity, apply the rollback heuristic, and
/// measure the residue, per scale.
pub fn run_mutation_sweep(spec: &ExperimentSpec) -> Result<ExperimentRecord> {
    expect_kind(spec, ExperimentKind::MutationSweep)?;
    let spec = spec.normalized()?;

    let per_scale: Vec<(BaselineInfo, Vec<MutationCell>)> =
        parallel::map_ordered(&spec.scales, |tag| -> Result<(BaselineInfo, Vec<MutationCell>)> {
            let world = World::build(&spec, tag)?;
            let stats = LayerStats::of(&world.core);
            let cells: Vec<Vec<MutationCell>> = parallel::map_ordered(&spec.seeds, |&seed| {
                mutation_cells_for_seed(&spec, &world, &stats, tag, seed)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            Ok((world.baseline_info(), cells.into_iter().flatten().collect()))
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let mut baselines = Vec::new();
    let mut cells = Vec::new();
    for (info, scale_cells) in per_scale {
        baselines.push(info);
        cells.extend(scale_cells);
    }

    let mut summary = Vec::new();
    for tag in &spec.scales {
        for &alpha in &spec.grid {
            let rows: Vec<&MutationCell> = cells
                .iter()
                .filter(|c| &c.scale == tag && c.alpha == alpha)
                .collect();
            let kls: Vec<f64> = rows.iter().map(|c| c.rollback_kl).collect();
            let jss: Vec<f64> = rows.iter().map(|c| c.rollback_js).collect();
            let rfs: Vec<f64> = rows.iter().map(|c| c.rf).collect();
            summary.push(MutationSummaryRow {
                scale: tag.clone(),
                alpha,
                kl_mean: mean(&kls),
                kl_std: std_dev(&kls),
                js_mean: mean(&jss),
                js_std: std_dev(&jss),
                rf_mean: mean(&rfs),
            });
        }
    }

    Ok(ExperimentRecord {
        spec_hash: spec.hash()?,
        baselines,
        results: ExperimentResults::MutationSweep { cells, summary },
        spec,
    })
}

fn mutation_cells_for_seed(
    spec: &ExperimentSpec,
    world: &World,
    stats: &LayerStats,
    tag: &str,
    seed: u64,
) -> Result<Vec<MutationCell>> {
    // One noise stream per seed, shared across the whole alpha grid, so the
    // sweep scales a fixed direction rather than resampling it.
    let noise_seed = rng::derive(seed, "mutation");
    let mut cells = Vec::with_capacity(spec.grid.len());
    for &alpha in &spec.grid {
        let mutated = adapt_weights(
            &world.core,
            &MutationSpec {
                alpha,
                mode: MutationMode::Noise,
                seed: noise_seed,
            },
            None,
        )?;
        let adapted = forward_all(&mutated, None, world.prompts.all())?;
        let d_adapt = divergence_report(&world.baseline, &adapted, "baseline", "adapted")?;
        let recovered = rollback_heuristic(&mutated, stats)?;
        let post = forward_all(&recovered, None, world.prompts.all())?;
        let d_roll = divergence_report(&world.baseline, &post, "baseline", "recovered")?;
        let rec = recoverability(&d_adapt, &d_roll)?;
        cells.push(MutationCell {
            seed,
            scale: tag.to_string(),
            alpha,
            adapt_kl: d_adapt.mean_kl,
            rollback_kl: d_roll.mean_kl,
            rollback_js: d_roll.mean_js,
            rf: rec.rf,
            regime: rec.regime,
        });
    }
    Ok(cells)
}

/// Run all three mechanisms on the same task and compare recoverability.
pub fn run_rf_comparison(spec: &ExperimentSpec) -> Result<ExperimentRecord> {
    expect_kind(spec, ExperimentKind::RfComparison)?;
    let spec = spec.normalized()?;
    let world = World::build(&spec, &spec.scale_tag)?;

    let cells: Vec<Vec<RfCell>> = parallel::map_ordered(&spec.seeds, |&seed| {
        rf_cells_for_seed(&spec, &world, seed, true)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let cells: Vec<RfCell> = cells.into_iter().flatten().collect();

    let summary = rf_summary(&cells);

    Ok(ExperimentRecord {
        spec_hash: spec.hash()?,
        baselines: vec![world.baseline_info()],
        results: ExperimentResults::RfComparison { cells, summary },
        spec,
    })
}

fn rf_summary(cells: &[RfCell]) -> Vec<RfSummaryRow> {
    Mechanism::ALL
        .iter()
        .map(|mech| {
            let rows: Vec<&RfCell> = cells.iter().filter(|c| c.mechanism == *mech).collect();
            let kls: Vec<f64> = rows.iter().map(|c| c.d_rollback.mean_kl).collect();
            let rfs: Vec<f64> = rows.iter().map(|c| c.recoverability.rf).collect();
            RfSummaryRow {
                mechanism: *mech,
                post_reset_divergence: mean(&kls),
                rf: mean(&rfs),
            }
        })
        .collect()
}

fn rf_cells_for_seed(
    spec: &ExperimentSpec,
    world: &World,
    seed: u64,
    with_svar: bool,
) -> Result<Vec<RfCell>> {
    // The same task drives finetune and rlae; mutation ignores it.
    let task = objective_task(
        &world.prompts,
        &world.config,
        spec.objective_count,
        spec.task_steps,
        spec.learning_rate,
        rng::derive(seed, "task"),
    )?;
    let mut cells = Vec::with_capacity(Mechanism::ALL.len());
    for mech in Mechanism::ALL {
        let scenario = match mech {
            Mechanism::Mutation => Scenario::Mutation(MutationSpec {
                alpha: spec.mutation_alpha,
                mode: MutationMode::Noise,
                seed: rng::derive(seed, "mutation"),
            }),
            Mechanism::Finetune => Scenario::Finetune(task.clone()),
            Mechanism::Rlae => Scenario::Rlae {
                rank: spec.rank,
                adapter_seed: rng::derive(seed, "adapter"),
                task: task.clone(),
            },
        };
        let svar = if with_svar && mech == Mechanism::Rlae {
            Some(PerturbationSpec::new(
                spec.svar_radius,
                spec.svar_samples,
                rng::derive(seed, "svar"),
            )?)
        } else {
            None
        };
        let opts = ProtocolOptions {
            ils_tau: spec.ils_tau,
            svar,
        };
        let run = run_protocol(&world.core, &world.prompts, scenario, &opts)?;
        cells.push(RfCell {
            seed,
            mechanism: mech,
            d_adapt: run.d_adapt,
            d_rollback: run.d_rollback,
            recoverability: run.recoverability,
            ils: run.ils,
            svar: run.svar,
            fingerprints: run.fingerprints,
        });
    }
    Ok(cells)
}

/// Re-derive and evaluate the untouched base model across sprints.
pub fn run_baseline_stability(spec: &ExperimentSpec) -> Result<ExperimentRecord> {
    expect_kind(spec, ExperimentKind::BaselineStability)?;
    let spec = spec.normalized()?;
    let n_sprints = spec.grid[0] as usize;

    // Each sprint re-derives the model and prompt set from scratch, standing
    // in for an independent top-level invocation of the same spec.
    let sprint_runs: Vec<(BaselineInfo, Vec<OutputDistribution>)> =
        parallel::map_indexed(n_sprints, |_| -> Result<_> {
            let world = World::build(&spec, &spec.scale_tag)?;
            Ok((world.baseline_info(), world.baseline))
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let mut sprints = Vec::with_capacity(n_sprints);
    for (i, (_, dists)) in sprint_runs.iter().enumerate() {
        let entropies: Vec<f64> = dists.iter().map(|d| d.entropy()).collect();
        let mut kl_sum = 0.0;
        for (a, b) in sprint_runs[0].1.iter().zip(dists) {
            kl_sum += kl(a, b)?;
        }
        sprints.push(SprintRow {
            sprint: i + 1,
            mean_entropy: mean(&entropies),
            std_entropy: std_dev(&entropies),
            max_entropy: entropies.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            kl_vs_first: kl_sum / dists.len() as f64,
        });
    }

    Ok(ExperimentRecord {
        spec_hash: spec.hash()?,
        baselines: vec![sprint_runs[0].0.clone()],
        results: ExperimentResults::BaselineStability { sprints },
        spec,
    })
}

/// Run the rf comparison at every scale and report recoverability
/// percentages.
pub fn run_scale_sweep(spec: &ExperimentSpec) -> Result<ExperimentRecord> {
    expect_kind(spec, ExperimentKind::ScaleSweep)?;
    let spec = spec.normalized()?;

    let per_scale: Vec<(BaselineInfo, Vec<ScaleCell>)> =
        parallel::map_ordered(&spec.scales, |tag| -> Result<(BaselineInfo, Vec<ScaleCell>)> {
            let world = World::build(&spec, tag)?;
            let cells: Vec<Vec<RfCell>> = parallel::map_ordered(&spec.seeds, |&seed| {
                rf_cells_for_seed(&spec, &world, seed, false)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let cells = cells
                .into_iter()
                .flatten()
                .map(|c| ScaleCell {
                    seed: c.seed,
                    scale: tag.clone(),
                    mechanism: c.mechanism,
                    post_reset_kl: c.d_rollback.mean_kl,
                    rf: c.recoverability.rf,
                })
                .collect();
            Ok((world.baseline_info(), cells))
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let mut baselines = Vec::new();
    let mut cells: Vec<ScaleCell> = Vec::new();
    for (info, scale_cells) in per_scale {
        baselines.push(info);
        cells.extend(scale_cells);
    }

    let mut summary = Vec::new();
    for tag in &spec.scales {
        for mech in Mechanism::ALL {
            let rfs: Vec<f64> = cells
                .iter()
                .filter(|c| &c.scale == tag && c.mechanism == mech)
                .map(|c| c.rf)
                .collect();
            summary.push(ScaleSummaryRow {
                scale: tag.clone(),
                mechanism: mech,
                recoverability_pct: 100.0 * mean(&rfs),
            });
        }
    }

    Ok(ExperimentRecord {
        spec_hash: spec.hash()?,
        baselines,
        results: ExperimentResults::ScaleSweep { cells, summary },
        spec,
    })
}

/// Re-run a record's spec and require byte-identical serialization.
pub fn replay(record: &ExperimentRecord) -> Result<()> {
    let rerun = run(&record.spec)?;
    let original = json::to_string(record)?;
    let replayed = json::to_string(&rerun)?;
    if original == replayed {
        return Ok(());
    }
    let pos = original
        .bytes()
        .zip(replayed.bytes())
        .position(|(a, b)| a != b)
        .unwrap_or_else(|| original.len().min(replayed.len()));
    let start = pos.saturating_sub(40);
    Err(Error::ReplayMismatch(format!(
        "records differ at byte {pos}: ...{} vs ...{}",
        &original[start..(pos + 20).min(original.len())],
        &replayed[start..(pos + 20).min(replayed.len())],
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(kind: ExperimentKind) -> ExperimentSpec {
        let mut spec = ExperimentSpec::new(kind);
        spec.prompt_count = 24;
        spec.held_out = 6;
        spec.pretrain_steps = 60;
        spec.task_steps = 80;
        spec.objective_count = 4;
        spec.seeds = vec![11, 23];
        spec
    }

    #[test]
    fn elimination_grid_validation() {
        let mut spec = small_spec(ExperimentKind::EliminationSweep);
        spec.grid = vec![0.0, 0.5];
        assert!(matches!(spec.normalized(), Err(Error::Spec(_))));
        spec.grid = vec![0.0, 0.5, 1.0, 1.5];
        assert!(matches!(spec.normalized(), Err(Error::Spec(_))));
        spec.grid = vec![0.0, 0.5, 1.0];
        assert!(spec.normalized().is_ok());
    }

    #[test]
    fn mutation_grid_must_ascend() {
        let mut spec = small_spec(ExperimentKind::MutationSweep);
        spec.grid = vec![0.01, 0.001];
        assert!(matches!(spec.normalized(), Err(Error::Spec(_))));
        spec.grid = vec![0.001, 0.001];
        assert!(matches!(spec.normalized(), Err(Error::Spec(_))));
    }

    #[test]
    fn scale_sweep_rejects_unknown_tag() {
        let mut spec = small_spec(ExperimentKind::ScaleSweep);
        spec.scales = vec!["S".into(), "XXL".into()];
        assert!(matches!(spec.normalized(), Err(Error::Config(_))));
    }

    #[test]
    fn kind_mismatch_rejected() {
        let spec = small_spec(ExperimentKind::EliminationSweep);
        assert!(matches!(run_mutation_sweep(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn elimination_sweep_endpoints() {
        let mut spec = small_spec(ExperimentKind::EliminationSweep);
        spec.grid = vec![0.0, 0.5, 1.0];
        spec.seeds = vec![11];
        let record = run(&spec).unwrap();
        let ExperimentResults::EliminationSweep {
            per_seed, summary, ..
        } = &record.results
        else {
            panic!("wrong results kind");
        };
        let seed = &per_seed[0];
        // eliminate(0) is the identity: divergence equals post-adaptation
        // divergence exactly.
        assert_eq!(seed.cells[0].kl, seed.adapt_kl);
        // eliminate(1) zeroes the module: bit-exact baseline.
        assert_eq!(seed.cells[2].kl, 0.0);
        assert_eq!(summary.last().unwrap().regime, RecoveryRegime::Exact);
    }

    #[test]
    fn seed_decomposability() {
        let mut spec = small_spec(ExperimentKind::EliminationSweep);
        spec.grid = vec![0.0, 0.5, 1.0];
        spec.seeds = vec![11, 23];
        let record = run(&spec).unwrap();
        let ExperimentResults::EliminationSweep { per_seed, summary, .. } = &record.results else {
            panic!();
        };
        // Per-seed cells from single-seed runs match the multi-seed run.
        for (i, &seed) in [11u64, 23].iter().enumerate() {
            let mut single = spec.clone();
            single.seeds = vec![seed];
            let r = run(&single).unwrap();
            let ExperimentResults::EliminationSweep { per_seed: ps, .. } = &r.results else {
                panic!();
            };
            assert_eq!(ps[0], per_seed[i]);
        }
        // Summary means equal the mean of per-seed values.
        for (i, row) in summary.iter().enumerate() {
            let m = (per_seed[0].cells[i].kl + per_seed[1].cells[i].kl) / 2.0;
            assert!((row.kl_mean - m).abs() < 1e-15);
        }
    }

    #[test]
    fn baseline_stability_sprints_are_bit_identical() {
        let mut spec = small_spec(ExperimentKind::BaselineStability);
        spec.grid = vec![3.0];
        let record = run(&spec).unwrap();
        let ExperimentResults::BaselineStability { sprints } = &record.results else {
            panic!();
        };
        assert_eq!(sprints.len(), 3);
        for row in sprints {
            assert_eq!(row.kl_vs_first, 0.0);
            assert_eq!(row.mean_entropy, sprints[0].mean_entropy);
            assert_eq!(row.std_entropy, sprints[0].std_entropy);
            assert_eq!(row.max_entropy, sprints[0].max_entropy);
        }
    }

    #[test]
    fn replay_reproduces_record() {
        let mut spec = small_spec(ExperimentKind::RfComparison);
        spec.seeds = vec![11];
        spec.svar_samples = 2;
        let record = run(&spec).unwrap();
        replay(&record).unwrap();
    }
}
