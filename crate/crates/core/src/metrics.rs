//! Divergence metrics and derived diagnostics.
//!
//! KL divergence is the primary sensitivity metric:
//!
//!   kl(p, q) = sum_i p_i ln(p_i / q_i)
//!
//! JS divergence is the symmetric, bounded confirmation metric, defined via
//! the mixture m = (p + q) / 2:
//!
//!   js(p, q) = kl(p, m) / 2 + kl(q, m) / 2      with 0 <= js <= ln 2
//!
//! Both operate on clamped, renormalized distributions (every entry at
//! least 1e-12), which keeps every logarithm finite. All logs are natural;
//! results are in nats.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapter::{BehavioralModule, PerturbationSpec};
use crate::error::{Error, Result};
use crate::model::{forward_all, CoreParams, OutputDistribution, Prompt};
use crate::parallel;

/// Divergences below this are treated as numerically exact recovery.
pub const PRECISION_FLOOR: f64 = 1e-6;

/// Upper bound of the JS divergence in nats.
pub const JS_BOUND: f64 = std::f64::consts::LN_2;

/// Normalized recovery smaller than this is within the estimation noise of
/// the protocol and reported as no recovery at all. Mirrors the 1e-6
/// precision floor that defines the exact regime on the other end.
pub const RF_FLOOR: f64 = 0.01;

/// Default threshold for flagging per-prompt identity leakage, in nats.
pub const DEFAULT_ILS_TAU: f64 = 0.01;

fn check_same_len(p: &OutputDistribution, q: &OutputDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distribution sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Kullback-Leibler divergence kl(p || q) in nats. Zero iff p == q.
pub fn kl(p: &OutputDistribution, q: &OutputDistribution) -> Result<f64> {
    check_same_len(p, q)?;
    let mut sum = 0.0;
    for (a, b) in p.probs.iter().zip(&q.probs) {
        sum += a * (a / b).ln();
    }
    Ok(sum)
}

/// Jensen-Shannon divergence in nats; symmetric and bounded by ln 2.
pub fn js(p: &OutputDistribution, q: &OutputDistribution) -> Result<f64> {
    check_same_len(p, q)?;
    let mut kl_pm = 0.0;
    let mut kl_qm = 0.0;
    for (a, b) in p.probs.iter().zip(&q.probs) {
        let m = 0.5 * (a + b);
        kl_pm += a * (a / m).ln();
        kl_qm += b * (b / m).ln();
    }
    Ok(0.5 * kl_pm + 0.5 * kl_qm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptDivergence {
    pub kl: f64,
    pub js: f64,
}

/// Per-prompt and mean KL/JS between two model states over a prompt set.
/// `direction` records (reference label, candidate label); the reference is
/// always the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub per_prompt: BTreeMap<String, PromptDivergence>,
    pub mean_kl: f64,
    pub mean_js: f64,
    pub direction: (String, String),
}

fn paired_by_id<'a>(
    reference: &'a [OutputDistribution],
    candidate: &'a [OutputDistribution],
) -> Result<Vec<(&'a OutputDistribution, &'a OutputDistribution)>> {
    if reference.is_empty() {
        return Err(Error::Protocol("empty reference distribution set".into()));
    }
    let mut ref_map = BTreeMap::new();
    for d in reference {
        if ref_map.insert(d.prompt_id.as_str(), d).is_some() {
            return Err(Error::Protocol(format!(
                "duplicate prompt id {} in reference set",
                d.prompt_id
            )));
        }
    }
    let mut cand_map = BTreeMap::new();
    for d in candidate {
        if cand_map.insert(d.prompt_id.as_str(), d).is_some() {
            return Err(Error::Protocol(format!(
                "duplicate prompt id {} in candidate set",
                d.prompt_id
            )));
        }
    }
    if ref_map.len() != cand_map.len() || !ref_map.keys().eq(cand_map.keys()) {
        return Err(Error::Protocol(
            "reference and candidate prompt sets differ".into(),
        ));
    }
    Ok(ref_map
        .into_values()
        .zip(cand_map.into_values())
        .collect())
}

/// Per-prompt KL/JS plus arithmetic means; prompts are matched by id.
pub fn divergence_report(
    reference: &[OutputDistribution],
    candidate: &[OutputDistribution],
    reference_label: impl Into<String>,
    candidate_label: impl Into<String>,
) -> Result<DivergenceReport> {
    let pairs = paired_by_id(reference, candidate)?;
    let mut per_prompt = BTreeMap::new();
    let mut kl_sum = 0.0;
    let mut js_sum = 0.0;
    for (r, c) in &pairs {
        let d = PromptDivergence {
            kl: kl(r, c)?,
            js: js(r, c)?,
        };
        kl_sum += d.kl;
        js_sum += d.js;
        per_prompt.insert(r.prompt_id.clone(), d);
    }
    let n = pairs.len() as f64;
    Ok(DivergenceReport {
        per_prompt,
        mean_kl: kl_sum / n,
        mean_js: js_sum / n,
        direction: (reference_label.into(), candidate_label.into()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryRegime {
    Exact,
    Partial,
    None,
}

impl std::fmt::Display for RecoveryRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RecoveryRegime::Exact => write!(f, "exact"),
            RecoveryRegime::Partial => write!(f, "partial"),
            RecoveryRegime::None => write!(f, "none"),
        }
    }
}

/// Normalized behavioral recovery: rf = 1 - d_rec / d_adapt, clamped to
/// [0, 1], with floor rules for degenerate denominators and sub-noise
/// recovery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverabilityReport {
    /// Mean KL from baseline to the adapted model.
    pub d_adapt: f64,
    /// Mean KL from baseline to the recovered model.
    pub d_rec: f64,
    pub rf: f64,
    pub regime: RecoveryRegime,
    pub precision_floor: f64,
}

/// Combine baseline->adapted and baseline->recovered reports into a
/// recoverability factor. Both reports must share the baseline as
/// reference and cover the same prompts.
pub fn recoverability(
    adapted: &DivergenceReport,
    recovered: &DivergenceReport,
) -> Result<RecoverabilityReport> {
    if adapted.direction.0 != recovered.direction.0 {
        return Err(Error::Protocol(format!(
            "reports have different references: {} vs {}",
            adapted.direction.0, recovered.direction.0
        )));
    }
    if !adapted.per_prompt.keys().eq(recovered.per_prompt.keys()) {
        return Err(Error::Protocol(
            "recoverability inputs cover different prompt sets".into(),
        ));
    }
    let d_adapt = adapted.mean_kl;
    let d_rec = recovered.mean_kl;
    let raw = if d_adapt < PRECISION_FLOOR {
        if d_rec < PRECISION_FLOOR {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - d_rec / d_adapt
    };
    let mut rf = raw.clamp(0.0, 1.0);
    if rf < RF_FLOOR {
        rf = 0.0;
    }
    let regime = if d_rec < PRECISION_FLOOR && recovered.mean_js < PRECISION_FLOOR {
        RecoveryRegime::Exact
    } else if rf == 0.0 {
        RecoveryRegime::None
    } else {
        RecoveryRegime::Partial
    };
    Ok(RecoverabilityReport {
        d_adapt,
        d_rec,
        rf,
        regime,
        precision_floor: PRECISION_FLOOR,
    })
}

/// Per-prompt identity leakage: KL from the baseline to the post-reset
/// model, with a diagnostic threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlsReport {
    pub per_prompt: BTreeMap<String, f64>,
    #[serde(rename = "ils_avg")]
    pub average: f64,
    pub tau: f64,
    /// Prompts whose leakage exceeds tau.
    pub flags: BTreeSet<String>,
}

/// Identity leakage scores between baseline and post-reset distributions.
pub fn ils(
    baseline: &[OutputDistribution],
    post_reset: &[OutputDistribution],
    tau: f64,
) -> Result<IlsReport> {
    if !(tau > 0.0) {
        return Err(Error::Precondition(format!(
            "ils threshold must be positive, got {tau}"
        )));
    }
    let pairs = paired_by_id(baseline, post_reset)?;
    let mut per_prompt = BTreeMap::new();
    let mut flags = BTreeSet::new();
    let mut sum = 0.0;
    for (b, p) in &pairs {
        let score = kl(b, p)?;
        sum += score;
        if score > tau {
            flags.insert(b.prompt_id.clone());
        }
        per_prompt.insert(b.prompt_id.clone(), score);
    }
    let n = pairs.len() as f64;
    Ok(IlsReport {
        per_prompt,
        average: sum / n,
        tau,
        flags,
    })
}

/// Mean behavioral divergence under bounded random perturbations of the
/// behavioral parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvarReport {
    pub radius: f64,
    pub samples: usize,
    #[serde(rename = "svar_mean")]
    pub mean_divergence: f64,
    pub per_sample: Vec<f64>,
}

/// For each perturbation sample, the mean-over-prompts KL between the
/// adapted model and its perturbed copy; reports the mean over samples.
/// Core parameters are untouched.
pub fn svar(
    core: &CoreParams,
    module: &BehavioralModule,
    prompts: &[Prompt],
    spec: &PerturbationSpec,
) -> Result<SvarReport> {
    spec.validate()?;
    if prompts.is_empty() {
        return Err(Error::Precondition("svar needs a non-empty prompt set".into()));
    }
    let base = forward_all(core, Some(module), prompts)?;
    let perturbed = module.perturb(spec)?;
    let per_sample: Vec<f64> = parallel::map_ordered(&perturbed, |copy| -> Result<f64> {
        let dists = forward_all(core, Some(copy), prompts)?;
        let mut sum = 0.0;
        for (b, d) in base.iter().zip(&dists) {
            sum += kl(b, d)?;
        }
        Ok(sum / prompts.len() as f64)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mean_divergence = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(SvarReport {
        radius: spec.radius,
        samples: spec.samples,
        mean_divergence,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(id: &str, probs: &[f64]) -> OutputDistribution {
        OutputDistribution::new(id, probs.to_vec()).unwrap()
    }

    #[test]
    fn kl_of_identical_is_exactly_zero() {
        let p = dist("p", &[0.3, 0.2, 0.5]);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_frozen_oracle() {
        // Oracle: direct two-term summation at high precision.
        let p = dist("p", &[0.5, 0.5]);
        let q = dist("p", &[0.25, 0.75]);
        assert!((kl(&p, &q).unwrap() - 0.14384103622589046).abs() < 1e-12);
    }

    #[test]
    fn kl_is_asymmetric() {
        let a = dist("p", &[0.9, 0.1]);
        let b = dist("p", &[0.5, 0.5]);
        let ab = kl(&a, &b).unwrap();
        let ba = kl(&b, &a).unwrap();
        assert!((ab - 0.36806420716849707).abs() < 1e-12);
        assert!((ba - 0.51082562376599068).abs() < 1e-12);
        assert_ne!(ab, ba);
    }

    #[test]
    fn js_of_identical_is_exactly_zero() {
        let p = dist("p", &[0.3, 0.2, 0.5]);
        assert_eq!(js(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn js_saturates_on_disjoint_support() {
        let p = dist("p", &[1.0, 0.0]);
        let q = dist("p", &[0.0, 1.0]);
        let v = js(&p, &q).unwrap();
        assert!((v - JS_BOUND).abs() < 1e-6);
        assert!(v <= JS_BOUND + 1e-9);
    }

    #[test]
    fn js_frozen_oracle() {
        // Oracle: direct summation of the two KL-to-mixture terms.
        let p = dist("p", &[1.0, 0.0]);
        let q = dist("p", &[0.5, 0.5]);
        assert!((js(&p, &q).unwrap() - 0.21576155433883570).abs() < 1e-9);
    }

    #[test]
    fn size_mismatch_is_shape_error() {
        let p = dist("p", &[0.5, 0.5]);
        let q = dist("p", &[0.3, 0.3, 0.4]);
        assert!(matches!(kl(&p, &q), Err(Error::Shape(_))));
        assert!(matches!(js(&p, &q), Err(Error::Shape(_))));
    }

    #[test]
    fn report_on_identical_sets_is_zero() {
        let set = vec![dist("a", &[0.5, 0.5]), dist("b", &[0.9, 0.1])];
        let r = divergence_report(&set, &set, "baseline", "candidate").unwrap();
        assert_eq!(r.mean_kl, 0.0);
        assert_eq!(r.mean_js, 0.0);
        assert_eq!(r.direction, ("baseline".to_string(), "candidate".to_string()));
    }

    #[test]
    fn report_mean_is_arithmetic_mean() {
        let reference = vec![dist("a", &[0.5, 0.5]), dist("b", &[0.5, 0.5])];
        let candidate = vec![dist("a", &[0.25, 0.75]), dist("b", &[0.7, 0.3])];
        let r = divergence_report(&reference, &candidate, "baseline", "candidate").unwrap();
        let ka = kl(&reference[0], &candidate[0]).unwrap();
        let kb = kl(&reference[1], &candidate[1]).unwrap();
        assert_eq!(r.mean_kl, (ka + kb) / 2.0);
    }

    #[test]
    fn report_rejects_mismatched_prompt_sets() {
        let reference = vec![dist("a", &[0.5, 0.5])];
        let candidate = vec![dist("b", &[0.5, 0.5])];
        assert!(matches!(
            divergence_report(&reference, &candidate, "x", "y"),
            Err(Error::Protocol(_))
        ));
    }

    fn report_with(mean_kl: f64, mean_js: f64, reference: &str) -> DivergenceReport {
        let mut per_prompt = BTreeMap::new();
        per_prompt.insert(
            "a".to_string(),
            PromptDivergence {
                kl: mean_kl,
                js: mean_js,
            },
        );
        DivergenceReport {
            per_prompt,
            mean_kl,
            mean_js,
            direction: (reference.to_string(), "candidate".to_string()),
        }
    }

    #[test]
    fn recoverability_basic() {
        let r = recoverability(&report_with(2.0, 0.4, "baseline"), &report_with(0.5, 0.1, "baseline"))
            .unwrap();
        assert_eq!(r.rf, 0.75);
        assert_eq!(r.regime, RecoveryRegime::Partial);
    }

    #[test]
    fn recoverability_exact_when_below_floor() {
        let r = recoverability(
            &report_with(2.0, 0.4, "baseline"),
            &report_with(0.0, 0.0, "baseline"),
        )
        .unwrap();
        assert_eq!(r.rf, 1.0);
        assert_eq!(r.regime, RecoveryRegime::Exact);
    }

    #[test]
    fn recoverability_none_when_no_improvement() {
        let r = recoverability(
            &report_with(2.0, 0.4, "baseline"),
            &report_with(2.0, 0.4, "baseline"),
        )
        .unwrap();
        assert_eq!(r.rf, 0.0);
        assert_eq!(r.regime, RecoveryRegime::None);
    }

    #[test]
    fn recoverability_degenerate_denominator() {
        let exact = recoverability(
            &report_with(0.0, 0.0, "baseline"),
            &report_with(0.0, 0.0, "baseline"),
        )
        .unwrap();
        assert_eq!(exact.rf, 1.0);
        assert_eq!(exact.regime, RecoveryRegime::Exact);

        let none = recoverability(
            &report_with(0.0, 0.0, "baseline"),
            &report_with(0.5, 0.2, "baseline"),
        )
        .unwrap();
        assert_eq!(none.rf, 0.0);
        assert_eq!(none.regime, RecoveryRegime::None);
    }

    #[test]
    fn recoverability_clamps_overshoot() {
        let r = recoverability(
            &report_with(0.5, 0.2, "baseline"),
            &report_with(2.0, 0.4, "baseline"),
        )
        .unwrap();
        assert_eq!(r.rf, 0.0);
        assert_eq!(r.regime, RecoveryRegime::None);
    }

    #[test]
    fn recoverability_requires_shared_reference() {
        assert!(matches!(
            recoverability(&report_with(1.0, 0.2, "baseline"), &report_with(1.0, 0.2, "other")),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn ils_identical_sets_have_no_flags() {
        let set = vec![dist("a", &[0.5, 0.5]), dist("b", &[0.9, 0.1])];
        let r = ils(&set, &set, 0.01).unwrap();
        assert_eq!(r.average, 0.0);
        assert!(r.flags.is_empty());
    }

    #[test]
    fn ils_thresholding_flags_exactly_the_large_one() {
        let baseline = vec![dist("a", &[0.5, 0.5]), dist("b", &[0.5, 0.5])];
        let post = vec![dist("a", &[0.2, 0.8]), dist("b", &[0.45, 0.55])];
        let ka = kl(&baseline[0], &post[0]).unwrap();
        let kb = kl(&baseline[1], &post[1]).unwrap();
        assert!(ka > kb);
        let tau = (ka + kb) / 2.0;
        let r = ils(&baseline, &post, tau).unwrap();
        assert_eq!(r.flags.len(), 1);
        assert!(r.flags.contains("a"));
    }

    #[test]
    fn ils_requires_positive_tau() {
        let set = vec![dist("a", &[0.5, 0.5])];
        assert!(matches!(ils(&set, &set, 0.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn ils_average_matches_report_mean_exactly() {
        let reference = vec![
            dist("a", &[0.5, 0.3, 0.2]),
            dist("b", &[0.1, 0.6, 0.3]),
            dist("c", &[0.2, 0.2, 0.6]),
        ];
        let candidate = vec![
            dist("a", &[0.4, 0.4, 0.2]),
            dist("b", &[0.3, 0.3, 0.4]),
            dist("c", &[0.1, 0.45, 0.45]),
        ];
        let report = divergence_report(&reference, &candidate, "baseline", "reset").unwrap();
        let leak = ils(&reference, &candidate, 0.01).unwrap();
        assert_eq!(report.mean_kl, leak.average);
    }

    // Brute-force oracle: independent termwise summation via ln differences.
    fn kl_bruteforce(p: &[f64], q: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += p[i] * (p[i].ln() - q[i].ln());
        }
        s
    }

    fn js_bruteforce(p: &[f64], q: &[f64]) -> f64 {
        let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        0.5 * kl_bruteforce(p, &m) + 0.5 * kl_bruteforce(q, &m)
    }

    proptest! {
        #[test]
        fn kl_non_negative_and_js_bounded(
            raw_p in proptest::collection::vec(1e-6..1.0f64, 2..5),
            raw_q_seed in proptest::collection::vec(1e-6..1.0f64, 2..5),
        ) {
            let n = raw_p.len().min(raw_q_seed.len());
            let p = OutputDistribution::new("x", raw_p[..n].to_vec()).unwrap();
            let q = OutputDistribution::new("x", raw_q_seed[..n].to_vec()).unwrap();
            let kl_pq = kl(&p, &q).unwrap();
            prop_assert!(kl_pq >= 0.0);
            let js_pq = js(&p, &q).unwrap();
            let js_qp = js(&q, &p).unwrap();
            prop_assert!(js_pq >= 0.0);
            prop_assert!(js_pq <= JS_BOUND + 1e-9);
            prop_assert!((js_pq - js_qp).abs() < 1e-12);
        }

        #[test]
        fn matches_bruteforce_oracle(
            raw_p in proptest::collection::vec(1e-9..1.0f64, 4),
            raw_q in proptest::collection::vec(1e-9..1.0f64, 4),
        ) {
            let p = OutputDistribution::new("x", raw_p).unwrap();
            let q = OutputDistribution::new("x", raw_q).unwrap();
            prop_assert!((kl(&p, &q).unwrap() - kl_bruteforce(&p.probs, &q.probs)).abs() < 1e-10);
            prop_assert!((js(&p, &q).unwrap() - js_bruteforce(&p.probs, &q.probs)).abs() < 1e-10);
        }
    }
}
