//! Forward traces, backpropagation, SGD steps, and the gradient check.
//!
//! The loss everywhere is the negative log likelihood of a target symbol.
//! Gradients flow either into the behavioral parameters only (adapter
//! training) or into every core parameter (fine-tuning and pretraining).

use crate::adapter::BehavioralModule;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{softmax, CoreParams, Prompt};

/// Activations recorded during one forward pass.
pub(crate) struct Trace {
    /// Mean token embedding.
    pub h0: Vec<f64>,
    /// Output of each dense layer: tanh for hidden layers, raw logits last.
    pub acts: Vec<Vec<f64>>,
    /// down * h for each adapted core layer index, when a module is present.
    pub mids: Vec<Option<Vec<f64>>>,
    /// Softmax of the final logits (not clamped).
    pub probs: Vec<f64>,
}

pub(crate) fn forward_trace(
    core: &CoreParams,
    module: Option<&BehavioralModule>,
    prompt: &Prompt,
) -> Result<Trace> {
    let config = core.config();
    prompt.validate(config)?;
    if let Some(m) = module {
        m.ensure_active()?;
        m.check_compat(core)?;
    }

    let d = config.embed_dim();
    let mut h0 = vec![0.0; d];
    for &t in &prompt.tokens {
        for (j, h) in h0.iter_mut().enumerate() {
            *h += core.embedding().at(t, j);
        }
    }
    let inv_len = 1.0 / prompt.tokens.len() as f64;
    for h in &mut h0 {
        *h *= inv_len;
    }

    let n_layers = core.layers().len();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut mids: Vec<Option<Vec<f64>>> = vec![None; n_layers];
    let mut h = h0.clone();
    for (i, layer) in core.layers().iter().enumerate() {
        let mut z = layer.weight.matvec(&h);
        for (zv, b) in z.iter_mut().zip(&layer.bias) {
            *zv += b;
        }
        if let Some(m) = module {
            if let Some(al) = m.layer_for(i) {
                let u = al.down.matvec(&h);
                let delta = al.up.matvec(&u);
                for (zv, dv) in z.iter_mut().zip(&delta) {
                    *zv += dv;
                }
                mids[i] = Some(u);
            }
        }
        if i + 1 < n_layers {
            for zv in &mut z {
                *zv = zv.tanh();
            }
        }
        h = z.clone();
        acts.push(z);
    }
    let probs = softmax(&acts[n_layers - 1]);
    Ok(Trace {
        h0,
        acts,
        mids,
        probs,
    })
}

pub(crate) struct CoreGrads {
    pub embedding: Matrix,
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl CoreGrads {
    fn zeros_like(core: &CoreParams) -> Self {
        CoreGrads {
            embedding: Matrix::zeros(core.embedding().rows(), core.embedding().cols()),
            layers: core
                .layers()
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
        }
    }

    fn reset(&mut self) {
        self.embedding.fill(0.0);
        for (w, b) in &mut self.layers {
            w.fill(0.0);
            b.fill(0.0);
        }
    }

    /// Flat lookup matching `CoreParams`'s parameter order.
    pub(crate) fn param(&self, mut idx: usize) -> f64 {
        if idx < self.embedding.len() {
            return self.embedding.data()[idx];
        }
        idx -= self.embedding.len();
        for (w, b) in &self.layers {
            if idx < w.len() {
                return w.data()[idx];
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("gradient index out of range");
    }
}

pub(crate) struct AdapterGrads {
    /// (down, up) gradient per adapted layer, in attach order.
    pub layers: Vec<(Matrix, Matrix)>,
}

impl AdapterGrads {
    fn zeros_like(module: &BehavioralModule) -> Self {
        AdapterGrads {
            layers: module
                .layers()
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.down.rows(), l.down.cols()),
                        Matrix::zeros(l.up.rows(), l.up.cols()),
                    )
                })
                .collect(),
        }
    }

    fn reset(&mut self) {
        for (d, u) in &mut self.layers {
            d.fill(0.0);
            u.fill(0.0);
        }
    }

    pub(crate) fn param(&self, mut idx: usize) -> f64 {
        for (d, u) in &self.layers {
            if idx < d.len() {
                return d.data()[idx];
            }
            idx -= d.len();
            if idx < u.len() {
                return u.data()[idx];
            }
            idx -= u.len();
        }
        panic!("adapter gradient index out of range");
    }
}

/// Accumulate NLL gradients for one (prompt, target) pair into the given
/// gradient buffers. `core_grads` and `adapter_grads` may each be None to
/// skip that side.
pub(crate) fn accumulate_backward(
    core: &CoreParams,
    module: Option<&BehavioralModule>,
    prompt: &Prompt,
    target: usize,
    trace: &Trace,
    core_grads: Option<&mut CoreGrads>,
    adapter_grads: Option<&mut AdapterGrads>,
) {
    let n_layers = core.layers().len();
    // d NLL / d logits = p - onehot(target)
    let mut dz: Vec<f64> = trace.probs.clone();
    dz[target] -= 1.0;

    let mut core_grads = core_grads;
    let mut adapter_grads = adapter_grads;

    for i in (0..n_layers).rev() {
        let h_in: &[f64] = if i == 0 { &trace.h0 } else { &trace.acts[i - 1] };
        let layer = &core.layers()[i];

        if let Some(cg) = core_grads.as_deref_mut() {
            let (gw, gb) = &mut cg.layers[i];
            gw.add_scaled_outer(1.0, &dz, h_in);
            for (g, d) in gb.iter_mut().zip(&dz) {
                *g += d;
            }
        }

        // dh through the dense weight.
        let mut dh = layer.weight.matvec_transpose(&dz);

        if let Some(m) = module {
            if let Some(pos) = m.attach_map().iter().position(|&li| li == i) {
                let al = &m.layers()[pos];
                let u = trace.mids[i].as_ref().expect("mid cached for adapted layer");
                if let Some(ag) = adapter_grads.as_deref_mut() {
                    let (gdown, gup) = &mut ag.layers[pos];
                    gup.add_scaled_outer(1.0, &dz, u);
                    let ut_dz = al.up.matvec_transpose(&dz);
                    gdown.add_scaled_outer(1.0, &ut_dz, h_in);
                }
                // dh through the low-rank delta.
                let ut_dz = al.up.matvec_transpose(&dz);
                let extra = al.down.matvec_transpose(&ut_dz);
                for (a, b) in dh.iter_mut().zip(&extra) {
                    *a += b;
                }
            }
        }

        if i == 0 {
            if let Some(cg) = core_grads.as_deref_mut() {
                let inv_len = 1.0 / prompt.tokens.len() as f64;
                for &t in &prompt.tokens {
                    for (j, g) in dh.iter().enumerate() {
                        *cg.embedding.at_mut(t, j) += g * inv_len;
                    }
                }
            }
        } else {
            // Through the tanh of the previous layer.
            let act = &trace.acts[i - 1];
            dz = dh
                .iter()
                .zip(act)
                .map(|(g, a)| g * (1.0 - a * a))
                .collect();
        }
    }
}

/// NLL of `target` under the raw softmax output.
pub(crate) fn nll(
    core: &CoreParams,
    module: Option<&BehavioralModule>,
    prompt: &Prompt,
    target: usize,
) -> Result<f64> {
    if target >= core.config().vocab_size {
        return Err(Error::Range(format!(
            "target symbol {target} outside vocab of size {}",
            core.config().vocab_size
        )));
    }
    let trace = forward_trace(core, module, prompt)?;
    Ok(-trace.probs[target].max(1e-300).ln())
}

/// Full-batch SGD on the core parameters. Returns the final mean loss.
pub(crate) fn sgd_core(
    core: &mut CoreParams,
    pairs: &[(Prompt, usize)],
    steps: usize,
    learning_rate: f64,
) -> Result<f64> {
    let mut grads = CoreGrads::zeros_like(core);
    let inv_n = 1.0 / pairs.len() as f64;
    let mut mean_loss = f64::NAN;
    for step in 0..steps {
        grads.reset();
        let mut loss_sum = 0.0;
        for (prompt, target) in pairs {
            let trace = forward_trace(core, None, prompt)?;
            loss_sum += -trace.probs[*target].max(1e-300).ln();
            accumulate_backward(core, None, prompt, *target, &trace, Some(&mut grads), None);
        }
        mean_loss = loss_sum * inv_n;
        if !mean_loss.is_finite() {
            return Err(Error::NumericalDivergence(format!(
                "core training loss became non-finite at step {step}"
            )));
        }
        let lr = learning_rate * inv_n;
        core.embedding_mut().add_scaled(-lr, &grads.embedding);
        for (layer, (gw, gb)) in core.layers_mut().iter_mut().zip(&grads.layers) {
            layer.weight.add_scaled(-lr, gw);
            for (b, g) in layer.bias.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
    }
    Ok(mean_loss)
}

/// Full-batch SGD on the behavioral parameters only. Returns the final
/// mean loss. The core is untouched by construction.
pub(crate) fn sgd_adapter(
    core: &CoreParams,
    module: &mut BehavioralModule,
    pairs: &[(Prompt, usize)],
    steps: usize,
    learning_rate: f64,
) -> Result<f64> {
    let mut grads = AdapterGrads::zeros_like(module);
    let inv_n = 1.0 / pairs.len() as f64;
    let mut mean_loss = f64::NAN;
    for step in 0..steps {
        grads.reset();
        let mut loss_sum = 0.0;
        for (prompt, target) in pairs {
            let trace = forward_trace(core, Some(module), prompt)?;
            loss_sum += -trace.probs[*target].max(1e-300).ln();
            accumulate_backward(
                core,
                Some(module),
                prompt,
                *target,
                &trace,
                None,
                Some(&mut grads),
            );
        }
        mean_loss = loss_sum * inv_n;
        if !mean_loss.is_finite() {
            return Err(Error::NumericalDivergence(format!(
                "adapter training loss became non-finite at step {step}"
            )));
        }
        let lr = learning_rate * inv_n;
        for (layer, (gd, gu)) in module.layers_mut().iter_mut().zip(&grads.layers) {
            layer.down.add_scaled(-lr, gd);
            layer.up.add_scaled(-lr, gu);
        }
    }
    Ok(mean_loss)
}

/// Maximum number of parameters probed by [`grad_check`].
const GRAD_CHECK_SAMPLES: usize = 160;

/// Compare analytic gradients against central finite differences with the
/// default step 1e-4. Probes a deterministic stride sample over every core
/// and behavioral parameter and returns the maximum relative error.
pub fn grad_check(
    core: &CoreParams,
    module: &BehavioralModule,
    prompt: &Prompt,
    target: usize,
) -> Result<f64> {
    grad_check_with_step(core, module, prompt, target, 1e-4)
}

/// [`grad_check`] with an explicit finite-difference step.
pub fn grad_check_with_step(
    core: &CoreParams,
    module: &BehavioralModule,
    prompt: &Prompt,
    target: usize,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Precondition(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    module.ensure_active()?;
    let trace = forward_trace(core, Some(module), prompt)?;
    let mut core_grads = CoreGrads::zeros_like(core);
    let mut adapter_grads = AdapterGrads::zeros_like(module);
    accumulate_backward(
        core,
        Some(module),
        prompt,
        target,
        &trace,
        Some(&mut core_grads),
        Some(&mut adapter_grads),
    );

    let n_core = core.param_count();
    let total = n_core + module.param_count();
    let samples = total.min(GRAD_CHECK_SAMPLES);
    let mut max_rel = 0.0f64;
    for s in 0..samples {
        let idx = s * total / samples;
        let analytic = if idx < n_core {
            core_grads.param(idx)
        } else {
            adapter_grads.param(idx - n_core)
        };
        let numeric = {
            let mut core_hi = core.clone();
            let mut core_lo = core.clone();
            let mut mod_hi = module.clone();
            let mut mod_lo = module.clone();
            if idx < n_core {
                *core_hi.param_mut(idx) += step;
                *core_lo.param_mut(idx) -= step;
            } else {
                *mod_hi.param_mut(idx - n_core) += step;
                *mod_lo.param_mut(idx - n_core) -= step;
            }
            let hi = nll(&core_hi, Some(&mod_hi), prompt, target)?;
            let lo = nll(&core_lo, Some(&mod_lo), prompt, target)?;
            (hi - lo) / (2.0 * step)
        };
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_core;
    use crate::rng;
    use crate::ModelConfig;
    use rand::Rng;

    fn random_prompt(config: &ModelConfig, seed: u64) -> Prompt {
        let mut rng = rng::seeded(seed);
        Prompt::new(
            format!("g{seed}"),
            (0..config.context_len)
                .map(|_| rng.random_range(0..config.vocab_size))
                .collect(),
        )
    }

    #[test]
    fn grad_check_passes_on_random_instances() {
        let config = ModelConfig::new(10, 6, vec![16], "S", 3).unwrap();
        let core = init_core(&config).unwrap();
        for seed in 0..5 {
            let mut module = BehavioralModule::new(&core, 3, None, seed).unwrap();
            module.attach(&core).unwrap();
            // Nonzero up matrices so adapter gradients are exercised.
            let mut r = rng::seeded(seed + 100);
            for layer in module.layers_mut() {
                for v in layer.up.data_mut() {
                    *v = r.random_range(-0.2..0.2);
                }
            }
            let prompt = random_prompt(&config, seed);
            let target = (seed as usize) % config.vocab_size;
            let err = grad_check(&core, &module, &prompt, target).unwrap();
            assert!(err < 1e-3, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn zero_gradient_direction_agrees() {
        // An embedding row for a token absent from the prompt has no path
        // to the loss: analytic and numeric gradients are both exactly 0.
        let config = ModelConfig::new(8, 4, vec![8], "S", 5).unwrap();
        let core = init_core(&config).unwrap();
        let mut module = BehavioralModule::new(&core, 2, None, 1).unwrap();
        module.attach(&core).unwrap();
        let prompt = Prompt::new("p", vec![0, 1, 2, 3]);

        let trace = forward_trace(&core, Some(&module), &prompt).unwrap();
        let mut cg = CoreGrads::zeros_like(&core);
        accumulate_backward(&core, Some(&module), &prompt, 0, &trace, Some(&mut cg), None);
        // Token 7 never appears; its embedding row gradient is zero.
        let unused_row = 7 * core.embedding().cols();
        for j in 0..core.embedding().cols() {
            assert_eq!(cg.param(unused_row + j), 0.0);
        }
        let mut hi = core.clone();
        *hi.param_mut(unused_row) += 1e-4;
        let l_hi = nll(&hi, Some(&module), &prompt, 0).unwrap();
        let l = nll(&core, Some(&module), &prompt, 0).unwrap();
        assert_eq!(l_hi, l);
    }

    #[test]
    fn zero_step_rejected() {
        let config = ModelConfig::new(8, 4, vec![8], "S", 5).unwrap();
        let core = init_core(&config).unwrap();
        let mut module = BehavioralModule::new(&core, 2, None, 1).unwrap();
        module.attach(&core).unwrap();
        let prompt = Prompt::new("p", vec![0, 1, 2, 3]);
        assert!(matches!(
            grad_check_with_step(&core, &module, &prompt, 0, 0.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn sgd_core_reduces_loss() {
        let config = ModelConfig::new(8, 4, vec![16], "S", 5).unwrap();
        let mut core = init_core(&config).unwrap();
        let pairs: Vec<(Prompt, usize)> = (0..8)
            .map(|i| (random_prompt(&config, i), (i as usize) % 8))
            .collect();
        let initial: f64 = pairs
            .iter()
            .map(|(p, t)| nll(&core, None, p, *t).unwrap())
            .sum::<f64>()
            / pairs.len() as f64;
        let final_loss = sgd_core(&mut core, &pairs, 50, 0.5).unwrap();
        assert!(final_loss < initial, "{final_loss} vs {initial}");
    }
}
