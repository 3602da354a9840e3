//! Removable low-rank behavioral modules.
//!
//! A module carries one (down, up) matrix pair per adapted core layer. The
//! up matrices start at zero, so a freshly created module is an exact
//! behavioral no-op. Detaching a module removes it from the forward path
//! entirely; the core parameters are never touched by any operation here.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fileio;
use crate::linalg::Matrix;
use crate::model::CoreParams;
use crate::parallel;
use crate::rng;

const MODULE_MAGIC: &[u8; 8] = b"RLAEMOD1";

/// Bounded random perturbation of the behavioral parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Relative L2 radius: each sample satisfies |delta| = radius * |phi|.
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(radius: f64, samples: usize, seed: u64) -> Result<Self> {
        let spec = PerturbationSpec {
            radius,
            samples,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Spec(format!(
                "perturbation radius must be positive, got {}",
                self.radius
            )));
        }
        if self.samples == 0 {
            return Err(Error::Spec("perturbation needs at least 1 sample".into()));
        }
        Ok(())
    }
}

/// Which behavioral entries were zeroed by a partial elimination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationMask {
    pub epsilon: f64,
    /// Per adapted layer: flat indices into the concatenated [down | up]
    /// entries that were set to zero.
    pub zeroed: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleState {
    Detached,
    Attached,
    Eliminated(EliminationMask),
}

/// One adapted layer: `down` is rank x in, `up` is out x rank.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub down: Matrix,
    pub up: Matrix,
}

/// Removable behavioral parameter set phi.
#[derive(Debug, Clone, PartialEq)]
pub struct BehavioralModule {
    rank: usize,
    attach_map: Vec<usize>,
    train_seed: u64,
    state: ModuleState,
    layers: Vec<AdapterLayer>,
    /// (out, in) of each adapted core layer, pinned at creation.
    dims: Vec<(usize, usize)>,
}

impl BehavioralModule {
    /// Create a detached module shaped for `core`. `attach_map` lists the
    /// core dense layers to adapt; `None` adapts all of them. The down
    /// matrices are seeded random, the up matrices are zero, so the module
    /// starts as an exact no-op.
    pub fn new(
        core: &CoreParams,
        rank: usize,
        attach_map: Option<Vec<usize>>,
        train_seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        let layer_dims = core.config().layer_dims();
        let attach_map = match attach_map {
            Some(map) => {
                if map.is_empty() {
                    return Err(Error::Config("attach_map must be non-empty".into()));
                }
                let mut sorted = map.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != map.len() {
                    return Err(Error::Config("attach_map contains duplicates".into()));
                }
                if let Some(&i) = sorted.iter().find(|i| **i >= layer_dims.len()) {
                    return Err(Error::Config(format!(
                        "attach_map index {i} out of range for {} layers",
                        layer_dims.len()
                    )));
                }
                sorted
            }
            None => (0..layer_dims.len()).collect(),
        };
        let mut rng = rng::seeded(train_seed);
        let mut layers = Vec::with_capacity(attach_map.len());
        let mut dims = Vec::with_capacity(attach_map.len());
        for &li in &attach_map {
            let (out, inp) = layer_dims[li];
            let scale = 1.0 / (inp as f64).sqrt();
            let mut down = Matrix::zeros(rank, inp);
            for v in down.data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = n * scale;
            }
            layers.push(AdapterLayer {
                down,
                up: Matrix::zeros(out, rank),
            });
            dims.push((out, inp));
        }
        Ok(BehavioralModule {
            rank,
            attach_map,
            train_seed,
            state: ModuleState::Detached,
            layers,
            dims,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn attach_map(&self) -> &[usize] {
        &self.attach_map
    }

    pub fn train_seed(&self) -> u64 {
        self.train_seed
    }

    pub fn state(&self) -> &ModuleState {
        &self.state
    }

    pub fn layers(&self) -> &[AdapterLayer] {
        &self.layers
    }

    pub fn is_attached(&self) -> bool {
        matches!(self.state, ModuleState::Attached)
    }

    pub fn is_detached(&self) -> bool {
        matches!(self.state, ModuleState::Detached)
    }

    /// Move into the forward path of `core` after a shape check.
    pub fn attach(&mut self, core: &CoreParams) -> Result<()> {
        self.check_compat(core)?;
        self.state = ModuleState::Attached;
        Ok(())
    }

    /// Remove the module from the forward path. Idempotent: unloading a
    /// detached module is a logged no-op.
    pub fn unload(&mut self) -> bool {
        if self.is_detached() {
            log::info!("unload on an already detached module is a no-op");
            return false;
        }
        self.state = ModuleState::Detached;
        true
    }

    /// Zero a seeded uniformly random fraction `epsilon` of the scalar
    /// entries of (down, up) across all adapted layers. `epsilon` of 1
    /// zeroes everything (behaviorally equal to unload, though the module
    /// stays in the forward path); 0 is the identity.
    pub fn eliminate(&mut self, epsilon: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Range(format!(
                "elimination rate must be in [0, 1], got {epsilon}"
            )));
        }
        if !self.is_attached() {
            return Err(Error::Lifecycle(
                "eliminate requires an attached module".into(),
            ));
        }
        let total: usize = self.layers.iter().map(|l| l.down.len() + l.up.len()).sum();
        let k = (epsilon * total as f64).round() as usize;
        if k == 0 {
            return Ok(());
        }
        let mut rng = rng::seeded(seed);
        let mut chosen: Vec<usize> = sample(&mut rng, total, k).into_iter().collect();
        chosen.sort_unstable();

        let mut zeroed: Vec<Vec<u32>> = vec![Vec::new(); self.layers.len()];
        let mut it = chosen.into_iter().peekable();
        let mut offset = 0usize;
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let span = layer.down.len() + layer.up.len();
            while let Some(&g) = it.peek() {
                if g >= offset + span {
                    break;
                }
                let local = g - offset;
                if local < layer.down.len() {
                    layer.down.data_mut()[local] = 0.0;
                } else {
                    layer.up.data_mut()[local - layer.down.len()] = 0.0;
                }
                zeroed[li].push(local as u32);
                it.next();
            }
            offset += span;
        }
        self.state = ModuleState::Eliminated(EliminationMask { epsilon, zeroed });
        Ok(())
    }

    /// Produce `spec.samples` independent perturbed copies. Each delta is
    /// Gaussian, rescaled to L2 norm `radius * |phi|`. Falls back to an
    /// absolute radius when the module's parameters are all zero.
    pub fn perturb(&self, spec: &PerturbationSpec) -> Result<Vec<BehavioralModule>> {
        spec.validate()?;
        self.ensure_active()?;
        let phi_norm = self.phi_norm();
        let target = if phi_norm > 0.0 {
            spec.radius * phi_norm
        } else {
            log::warn!("perturbing a zero-norm module; using absolute radius {}", spec.radius);
            spec.radius
        };
        let samples = parallel::map_indexed(spec.samples, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let mut copy = self.clone();
            let mut delta: Vec<f64> = Vec::with_capacity(copy.param_count());
            for _ in 0..copy.param_count() {
                delta.push(StandardNormal.sample(&mut rng));
            }
            let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            let scale = if norm > 0.0 { target / norm } else { 0.0 };
            let mut k = 0;
            for layer in &mut copy.layers {
                for v in layer.down.data_mut() {
                    *v += scale * delta[k];
                    k += 1;
                }
                for v in layer.up.data_mut() {
                    *v += scale * delta[k];
                    k += 1;
                }
            }
            copy
        });
        Ok(samples)
    }

    /// L2 norm over all behavioral parameters.
    pub fn phi_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.down.sq_l2() + l.up.sq_l2())
            .sum::<f64>()
            .sqrt()
    }

    /// Content hash of the behavioral parameters and attach map.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for &li in &self.attach_map {
            hasher.update((li as u64).to_le_bytes());
        }
        for layer in &self.layers {
            for v in layer.down.data() {
                hasher.update(v.to_le_bytes());
            }
            for v in layer.up.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }

    /// Adapter layer for a core layer index, if that layer is adapted.
    pub fn layer_for(&self, core_layer: usize) -> Option<&AdapterLayer> {
        self.attach_map
            .iter()
            .position(|&li| li == core_layer)
            .map(|i| &self.layers[i])
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [AdapterLayer] {
        &mut self.layers
    }

    /// In the forward path: attached or eliminated.
    pub(crate) fn ensure_active(&self) -> Result<()> {
        if self.is_detached() {
            return Err(Error::Lifecycle(
                "module is detached and not in the forward path".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_compat(&self, core: &CoreParams) -> Result<()> {
        let layer_dims = core.config().layer_dims();
        for (&li, &(out, inp)) in self.attach_map.iter().zip(&self.dims) {
            let found = layer_dims.get(li).copied();
            if found != Some((out, inp)) {
                return Err(Error::Compatibility(format!(
                    "adapter expects layer {li} of shape {out}x{inp}, core has {found:?}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.down.len() + l.up.len()).sum()
    }

    /// Mutable access to a behavioral parameter by flat index (down then up
    /// per layer, in attach order). Used by the gradient check.
    pub(crate) fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for layer in &mut self.layers {
            if idx < layer.down.len() {
                return &mut layer.down.data_mut()[idx];
            }
            idx -= layer.down.len();
            if idx < layer.up.len() {
                return &mut layer.up.data_mut()[idx];
            }
            idx -= layer.up.len();
        }
        panic!("behavioral parameter index out of range");
    }

    /// Write the module to a file: JSON header (rank, attach map, seed,
    /// state, dims), then row-major f64 payload (down then up per layer).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = serde_json::to_vec(&ModuleHeader {
            version: 1,
            rank: self.rank,
            attach_map: self.attach_map.clone(),
            train_seed: self.train_seed,
            state: self.state.clone(),
            dims: self.dims.clone(),
        })?;
        let mut payload = Vec::with_capacity(self.param_count() * 8);
        for layer in &self.layers {
            for v in layer.down.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            for v in layer.up.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        fileio::write_hybrid(path.as_ref(), MODULE_MAGIC, &header, &payload)
    }

    /// Read a module written by [`BehavioralModule::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, payload) = fileio::read_hybrid(path.as_ref(), MODULE_MAGIC)?;
        let header: ModuleHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("bad module header: {e}")))?;
        if header.version != 1 {
            return Err(Error::Format(format!(
                "unsupported module version {}",
                header.version
            )));
        }
        if header.attach_map.len() != header.dims.len() {
            return Err(Error::Format("attach_map and dims length differ".into()));
        }
        let total: usize = header
            .dims
            .iter()
            .map(|(out, inp)| header.rank * inp + out * header.rank)
            .sum();
        if payload.len() != total * 8 {
            return Err(Error::Format(format!(
                "module payload is {} bytes, expected {}",
                payload.len(),
                total * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let mut layers = Vec::with_capacity(header.dims.len());
        for &(out, inp) in &header.dims {
            let mut down = Matrix::zeros(header.rank, inp);
            fileio::fill_from_iter(down.data_mut(), &mut values);
            let mut up = Matrix::zeros(out, header.rank);
            fileio::fill_from_iter(up.data_mut(), &mut values);
            layers.push(AdapterLayer { down, up });
        }
        Ok(BehavioralModule {
            rank: header.rank,
            attach_map: header.attach_map,
            train_seed: header.train_seed,
            state: header.state,
            layers,
            dims: header.dims,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModuleHeader {
    version: u32,
    rank: usize,
    attach_map: Vec<usize>,
    train_seed: u64,
    state: ModuleState,
    dims: Vec<(usize, usize)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_core, Prompt};
    use crate::ModelConfig;

    fn setup() -> (CoreParams, Prompt) {
        let config = ModelConfig::new(16, 8, vec![32], "S", 7).unwrap();
        let core = init_core(&config).unwrap();
        let prompt = Prompt::new("p0", vec![1, 2, 3, 4, 5, 6, 7, 8]);
        (core, prompt)
    }

    #[test]
    fn fresh_module_is_exact_noop() {
        let (core, prompt) = setup();
        let mut module = BehavioralModule::new(&core, 4, None, 11).unwrap();
        module.attach(&core).unwrap();
        let plain = forward(&core, None, &prompt).unwrap();
        let adapted = forward(&core, Some(&module), &prompt).unwrap();
        assert_eq!(plain.probs, adapted.probs);
    }

    #[test]
    fn detached_module_not_in_forward_path() {
        let (core, prompt) = setup();
        let module = BehavioralModule::new(&core, 4, None, 11).unwrap();
        assert!(matches!(
            forward(&core, Some(&module), &prompt),
            Err(Error::Lifecycle(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (core, _) = setup();
        let other = init_core(&ModelConfig::new(16, 8, vec![64, 64], "M", 7).unwrap()).unwrap();
        let mut module = BehavioralModule::new(&other, 4, None, 11).unwrap();
        assert!(matches!(
            module.attach(&core),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn unload_is_idempotent() {
        let (core, _) = setup();
        let mut module = BehavioralModule::new(&core, 4, None, 11).unwrap();
        module.attach(&core).unwrap();
        assert!(module.unload());
        let snapshot = module.clone();
        assert!(!module.unload());
        assert_eq!(module, snapshot);
    }

    #[test]
    fn eliminate_zero_is_identity() {
        let (core, _) = setup();
        let mut module = BehavioralModule::new(&core, 4, None, 11).unwrap();
        module.attach(&core).unwrap();
        let before = module.clone();
        module.eliminate(0.0, 5).unwrap();
        assert_eq!(module, before);
    }

    #[test]
    fn eliminate_full_matches_baseline_bit_exactly() {
        let (core, prompt) = setup();
        let mut module = BehavioralModule::new(&core, 4, None, 11).unwrap();
        module.attach(&core).unwrap();
        // Give the module nonzero behavior first.
        for layer in module.layers_mut() {
            layer.up.fill(0.3);
        }
        module.eliminate(1.0, 5).unwrap();
        let plain = forward(&core, None, &prompt).unwrap();
        let reset = forward(&core, Some(&module), &prompt).unwrap();
        assert_eq!(plain.probs, reset.probs);
        assert!(matches!(module.state(), ModuleState::Eliminated(_)));
    }

    #[test]
    fn eliminate_requires_attached_and_valid_rate() {
        let (core, _) = setup();
        let mut module = BehavioralModule::new(&core, 4, None, 11).unwrap();
        assert!(matches!(
            module.eliminate(0.5, 5),
            Err(Error::Lifecycle(_))
        ));
        module.attach(&core).unwrap();
        assert!(matches!(module.eliminate(1.5, 5), Err(Error::Range(_))));
        assert!(matches!(module.eliminate(-0.1, 5), Err(Error::Range(_))));
    }

    #[test]
    fn eliminate_is_seeded() {
        let (core, _) = setup();
        let mut a = BehavioralModule::new(&core, 4, None, 11).unwrap();
        a.attach(&core).unwrap();
        let mut b = a.clone();
        a.eliminate(0.4, 9).unwrap();
        b.eliminate(0.4, 9).unwrap();
        assert_eq!(a, b);
        let mut c = BehavioralModule::new(&core, 4, None, 11).unwrap();
        c.attach(&core).unwrap();
        c.eliminate(0.4, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn perturb_yields_distinct_copies() {
        let (core, _) = setup();
        let mut module = BehavioralModule::new(&core, 4, None, 11).unwrap();
        module.attach(&core).unwrap();
        let spec = PerturbationSpec::new(0.05, 5, 21).unwrap();
        let fp_core = core.fingerprint();
        let copies = module.perturb(&spec).unwrap();
        assert_eq!(copies.len(), 5);
        // Oracle: byte comparison via content hash.
        let mut fps: Vec<String> = copies.iter().map(|c| c.fingerprint()).collect();
        fps.push(module.fingerprint());
        fps.sort();
        fps.dedup();
        assert_eq!(fps.len(), 6);
        assert_eq!(core.fingerprint(), fp_core);
    }

    #[test]
    fn perturb_is_deterministic() {
        let (core, _) = setup();
        let mut module = BehavioralModule::new(&core, 4, None, 11).unwrap();
        module.attach(&core).unwrap();
        let spec = PerturbationSpec::new(0.05, 3, 21).unwrap();
        let a = module.perturb(&spec).unwrap();
        let b = module.perturb(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_respects_relative_radius() {
        let (core, _) = setup();
        let mut module = BehavioralModule::new(&core, 4, None, 11).unwrap();
        module.attach(&core).unwrap();
        let spec = PerturbationSpec::new(0.1, 2, 3).unwrap();
        let copies = module.perturb(&spec).unwrap();
        let target = 0.1 * module.phi_norm();
        for copy in &copies {
            let mut sq = 0.0;
            for (l0, l1) in module.layers().iter().zip(copy.layers()) {
                for (a, b) in l0.down.data().iter().zip(l1.down.data()) {
                    sq += (a - b) * (a - b);
                }
                for (a, b) in l0.up.data().iter().zip(l1.up.data()) {
                    sq += (a - b) * (a - b);
                }
            }
            assert!((sq.sqrt() - target).abs() < 1e-9 * target.max(1.0));
        }
    }

    #[test]
    fn bad_perturbation_specs_rejected() {
        assert!(PerturbationSpec::new(0.0, 3, 1).is_err());
        assert!(PerturbationSpec::new(0.1, 0, 1).is_err());
    }

    #[test]
    fn module_file_roundtrip_is_bit_exact() {
        let (core, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("module.rlae");
        let mut module = BehavioralModule::new(&core, 4, None, 11).unwrap();
        module.attach(&core).unwrap();
        module.eliminate(0.3, 5).unwrap();
        module.save(&path).unwrap();
        let loaded = BehavioralModule::load(&path).unwrap();
        assert_eq!(module, loaded);
    }

    #[test]
    fn module_load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"definitely not a module file").unwrap();
        assert!(matches!(
            BehavioralModule::load(&path),
            Err(Error::Format(_))
        ));
    }
}
