//! Calibration pilot: prints the measurements used to pin test constants.

use rlae_core::adaptation::{adapt_behavioral, MutationMode, MutationSpec};
use rlae_core::adapter::{BehavioralModule, PerturbationSpec};
use rlae_core::experiments::{run, ExperimentKind, ExperimentResults, ExperimentSpec};
use rlae_core::harness::{objective_task, pretrain, PromptSet};
use rlae_core::metrics::svar;
use rlae_core::model::{forward, forward_all};
use rlae_core::rng;
use rlae_core::{grad_check, ModelConfig};
use rand::Rng;

fn main() {
    let seeds = [11u64, 23, 42];

    // 1. Baseline entropy per scale.
    for tag in ["S", "M", "L"] {
        let config = ModelConfig::for_scale(tag, 16, 8, 7).unwrap();
        let core = pretrain(&config, 1234, 200).unwrap();
        let prompts = PromptSet::generate(&config, 99, 64, 16).unwrap();
        let dists = forward_all(&core, None, prompts.all()).unwrap();
        let mean: f64 = dists.iter().map(|d| d.entropy()).sum::<f64>() / dists.len() as f64;
        let max = dists.iter().map(|d| d.entropy()).fold(f64::MIN, f64::max);
        println!("[entropy] scale {tag}: mean {mean:.4} max {max:.4} (ln16 = 2.7726)");
    }

    // 2. Adapter convergence at rank 4, 8 objectives.
    let config = ModelConfig::for_scale("S", 16, 8, 7).unwrap();
    let core = pretrain(&config, 1234, 200).unwrap();
    let prompts = PromptSet::generate(&config, 99, 64, 16).unwrap();
    for steps in [100, 200, 300, 500, 800] {
        let mut hits = 0;
        let mut total = 0;
        for &seed in &seeds {
            let task =
                objective_task(&prompts, &config, 8, steps, 0.5, rng::derive(seed, "task")).unwrap();
            let mut module =
                BehavioralModule::new(&core, 4, None, rng::derive(seed, "adapter")).unwrap();
            module.attach(&core).unwrap();
            adapt_behavioral(&core, &mut module, &task).unwrap();
            for (p, t) in &task.objective_prompts {
                total += 1;
                if forward(&core, Some(&module), p).unwrap().argmax() == *t {
                    hits += 1;
                }
            }
        }
        println!("[adapter] steps {steps}: argmax fit {hits}/{total}");
    }

    // 3. Elimination sweep, default grid.
    let mut spec = ExperimentSpec::new(ExperimentKind::EliminationSweep);
    spec.seeds = seeds.to_vec();
    let record = run(&spec).unwrap();
    if let ExperimentResults::EliminationSweep {
        summary,
        epsilon_desk,
        per_seed,
    } = &record.results
    {
        for row in summary {
            println!(
                "[elim] eps {:.3}: kl {:.3e} js {:.3e} {}",
                row.epsilon, row.kl_mean, row.js_mean, row.regime
            );
        }
        println!("[elim] epsilon_desk {epsilon_desk:?}");
        for s in per_seed {
            println!("[elim] seed {} adapt_kl {:.3}", s.seed, s.adapt_kl);
        }
    }

    // 4. Mutation sweep with saturation candidates; raw rf before flooring.
    let mut spec = ExperimentSpec::new(ExperimentKind::MutationSweep);
    spec.seeds = seeds.to_vec();
    spec.grid = vec![0.001, 0.01, 0.05, 0.5, 1.0, 2.0, 5.0];
    let record = run(&spec).unwrap();
    if let ExperimentResults::MutationSweep { cells, summary } = &record.results {
        let mut max_raw_rf_low_alpha = f64::MIN;
        let mut min_kl_smallest_alpha = f64::MAX;
        for c in cells {
            let raw_rf = 1.0 - c.rollback_kl / c.adapt_kl;
            if c.alpha <= 0.05 {
                max_raw_rf_low_alpha = max_raw_rf_low_alpha.max(raw_rf);
            }
            if c.alpha == 0.001 {
                min_kl_smallest_alpha = min_kl_smallest_alpha.min(c.rollback_kl);
            }
            println!(
                "[mut] scale {} seed {} alpha {:.3}: adapt_kl {:.4e} roll_kl {:.4e} roll_js {:.4} raw_rf {:+.4}",
                c.scale, c.seed, c.alpha, c.adapt_kl, c.rollback_kl, c.rollback_js, raw_rf
            );
        }
        println!("[mut] max raw rf (alpha <= 0.05): {max_raw_rf_low_alpha:+.4}");
        println!("[mut] min per-seed rollback kl at alpha 0.001: {min_kl_smallest_alpha:.4e}");
        for row in summary {
            println!(
                "[mut] summary scale {} alpha {:.3}: kl {:.4e} js {:.4}",
                row.scale, row.alpha, row.kl_mean, row.js_mean
            );
        }
    }

    // 5 + 6. Scale sweep raw rf per mechanism.
    let mut spec = ExperimentSpec::new(ExperimentKind::ScaleSweep);
    spec.seeds = seeds.to_vec();
    let record = run(&spec).unwrap();
    if let ExperimentResults::ScaleSweep { cells, summary } = &record.results {
        for c in cells {
            println!(
                "[scale] {} seed {} {}: post_kl {:.4e} rf {:.4}",
                c.scale, c.seed, c.mechanism, c.post_reset_kl, c.rf
            );
        }
        for row in summary {
            println!(
                "[scale] summary {} {}: {:.2}%",
                row.scale, row.mechanism, row.recoverability_pct
            );
        }
    }

    // 7. ILS flags from the rf comparison (includes mutation + heuristic).
    let mut spec = ExperimentSpec::new(ExperimentKind::RfComparison);
    spec.seeds = seeds.to_vec();
    let record = run(&spec).unwrap();
    if let ExperimentResults::RfComparison { cells, .. } = &record.results {
        for c in cells {
            let raw_rf = 1.0 - c.d_rollback.mean_kl / c.d_adapt.mean_kl;
            println!(
                "[rf] seed {} {}: d_adapt {:.4e} d_roll {:.4e} raw_rf {:+.4} ils_flags {} svar {:?}",
                c.seed,
                c.mechanism,
                c.d_adapt.mean_kl,
                c.d_rollback.mean_kl,
                raw_rf,
                c.ils.flags.len(),
                c.svar.as_ref().map(|s| s.mean_divergence)
            );
        }
    }

    // 8. Structural variance ordering across radii.
    let config = ModelConfig::for_scale("S", 16, 8, 7).unwrap();
    let core = pretrain(&config, 1234, 200).unwrap();
    let prompts = PromptSet::generate(&config, 99, 64, 16).unwrap();
    for radius in [0.01, 0.05, 0.1] {
        let mut means = Vec::new();
        for &seed in &seeds {
            let task =
                objective_task(&prompts, &config, 8, 300, 0.5, rng::derive(seed, "task")).unwrap();
            let mut module =
                BehavioralModule::new(&core, 4, None, rng::derive(seed, "adapter")).unwrap();
            module.attach(&core).unwrap();
            adapt_behavioral(&core, &mut module, &task).unwrap();
            let spec = PerturbationSpec::new(radius, 8, rng::derive(seed, "svar")).unwrap();
            means.push(
                svar(&core, &module, prompts.all(), &spec)
                    .unwrap()
                    .mean_divergence,
            );
        }
        let mean: f64 = means.iter().sum::<f64>() / means.len() as f64;
        println!("[svar] radius {radius}: seed-avg {mean:.6e} per-seed {means:?}");
    }

    // 9. Gradient check over 100 seeded instances, with trained modules so
    // the low-rank path carries nonzero weights.
    let config = ModelConfig::new(12, 6, vec![24], "S", 3).unwrap();
    let core = pretrain(&config, 55, 50).unwrap();
    let check_prompts = PromptSet::generate(&config, 77, 16, 4).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut module = BehavioralModule::new(&core, 3, None, seed).unwrap();
        module.attach(&core).unwrap();
        let task = objective_task(&check_prompts, &config, 4, 20, 0.5, seed).unwrap();
        adapt_behavioral(&core, &mut module, &task).unwrap();
        let mut r = rng::seeded(seed + 500);
        let tokens = (0..6).map(|_| r.random_range(0..12)).collect();
        let prompt = rlae_core::Prompt::new(format!("g{seed}"), tokens);
        let target = r.random_range(0..12);
        worst = worst.max(grad_check(&core, &module, &prompt, target).unwrap());
    }
    println!("[grad] max relative error over 100 instances: {worst:.3e}");
}
