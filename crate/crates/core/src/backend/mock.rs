//! Deterministic in-memory backend.
//!
//! A mock program is a `(size, throughput, embedding)` triple evolved purely
//! by the action history: action `i` applies the affine effects
//! `size <- round(size * size_mul + size_add)` and
//! `throughput <- throughput * tput_mul + tput_add` from a published
//! per-action table, and the embedding is a hash-seeded function of the
//! program seed plus the history. Replaying an action list therefore
//! reproduces every measurement bit-exactly, which is what the determinism
//! and convergence suites rely on.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::SubSequence;
use crate::reward::Measurement;

use super::{Backend, BackendError, Baseline, Embedding, IrHandle, IrSource, EMBED_DIM};

/// Affine update one action applies to the mock program state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionEffect {
    pub size_mul: f64,
    pub size_add: f64,
    pub tput_mul: f64,
    pub tput_add: f64,
}

impl ActionEffect {
    pub const IDENTITY: ActionEffect =
        ActionEffect { size_mul: 1.0, size_add: 0.0, tput_mul: 1.0, tput_add: 0.0 };

    pub fn scaling(size_mul: f64, tput_mul: f64) -> Self {
        ActionEffect { size_mul, size_add: 0.0, tput_mul, tput_add: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    /// Size/throughput of every program before any optimization.
    pub initial_size: u64,
    pub initial_throughput: f64,
    /// What the full `Oz` pipeline does to the initial measurements; the
    /// defaults shrink, so `Oz` is a meaningful baseline to beat.
    pub oz_size_mul: f64,
    pub oz_tput_mul: f64,
    /// Effect of action id `i`; ids beyond the table wrap around.
    pub effects: Vec<ActionEffect>,
    /// Stirred into every embedding so distinct universes can share seeds.
    pub embed_seed: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            initial_size: 10_000,
            initial_throughput: 2.0,
            oz_size_mul: 0.7,
            oz_tput_mul: 0.9,
            effects: vec![ActionEffect::IDENTITY],
            embed_seed: 0,
        }
    }
}

impl MockConfig {
    /// `n` no-op actions.
    pub fn no_op(n: usize) -> Self {
        MockConfig { effects: vec![ActionEffect::IDENTITY; n], ..MockConfig::default() }
    }

    /// `n` actions where `dominant` shrinks the object by 10% per step and
    /// every other action grows it by 2%; throughput untouched. The dominant
    /// action is strictly better from every reachable state.
    pub fn with_dominant(n: usize, dominant: u32) -> Self {
        let effects = (0..n as u32)
            .map(|i| {
                if i == dominant {
                    ActionEffect::scaling(0.90, 1.0)
                } else {
                    ActionEffect::scaling(1.02, 1.0)
                }
            })
            .collect();
        MockConfig { effects, ..MockConfig::default() }
    }

    pub fn effect(&self, action: u32) -> ActionEffect {
        if self.effects.is_empty() {
            ActionEffect::IDENTITY
        } else {
            self.effects[action as usize % self.effects.len()]
        }
    }
}

pub struct MockBackend {
    cfg: MockConfig,
    invocations: AtomicU64,
    baseline_cache: Mutex<BTreeMap<u64, Baseline>>,
}

impl MockBackend {
    pub fn new(cfg: MockConfig) -> Self {
        MockBackend {
            cfg,
            invocations: AtomicU64::new(0),
            baseline_cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> &MockConfig {
        &self.cfg
    }

    fn mock_parts<'a>(&self, ir: &'a IrHandle) -> Result<(u64, &'a [u32]), BackendError> {
        match &ir.source {
            IrSource::Mock { program_seed, history } => Ok((*program_seed, history)),
            IrSource::File { path } => Err(BackendError::WrongHandle(format!(
                "mock backend cannot process file handle {}",
                path.display()
            ))),
        }
    }

    /// Folds the effect table over the history. Size is re-rounded and
    /// clamped to >= 1 after every step, exactly as `measure` would observe
    /// it mid-episode.
    fn state_after(&self, history: &[u32]) -> (u64, f64) {
        let mut size = self.cfg.initial_size;
        let mut tput = self.cfg.initial_throughput;
        for &action in history {
            let e = self.cfg.effect(action);
            size = (size as f64 * e.size_mul + e.size_add).round().max(1.0) as u64;
            tput = (tput * e.tput_mul + e.tput_add).max(f64::MIN_POSITIVE);
        }
        (size, tput)
    }

    fn bump(&self) {
        self.invocations.fetch_add(1, Ordering::Relaxed);
    }
}

impl Backend for MockBackend {
    fn embed(&self, ir: &IrHandle) -> Result<Embedding, BackendError> {
        let (seed, history) = self.mock_parts(ir)?;
        self.bump();
        let mut hasher = Sha256::new();
        hasher.update(self.cfg.embed_seed.to_le_bytes());
        hasher.update(seed.to_le_bytes());
        for a in history {
            hasher.update(a.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let values = (0..EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Embedding::new(values)
    }

    fn apply_passes(&self, ir: &IrHandle, seq: &SubSequence) -> Result<IrHandle, BackendError> {
        let (seed, history) = self.mock_parts(ir)?;
        self.bump();
        let mut history = history.to_vec();
        history.push(seq.id);
        Ok(IrHandle {
            source: IrSource::Mock { program_seed: seed, history },
            generation: ir.generation + 1,
        })
    }

    fn measure(&self, ir: &IrHandle) -> Result<Measurement, BackendError> {
        let (_, history) = self.mock_parts(ir)?;
        self.bump();
        let (size, tput) = self.state_after(history);
        Ok(Measurement::new(size, tput)?)
    }

    fn baseline(&self, ir: &IrHandle) -> Result<Baseline, BackendError> {
        let (seed, history) = self.mock_parts(ir)?;
        if !history.is_empty() {
            return Err(BackendError::InvalidIr(
                "baseline requires the unoptimized module".into(),
            ));
        }
        if let Some(hit) = self.baseline_cache.lock().unwrap().get(&seed) {
            return Ok(*hit);
        }
        self.bump();
        let unopt = Measurement::new(self.cfg.initial_size, self.cfg.initial_throughput)?;
        let oz_size =
            (self.cfg.initial_size as f64 * self.cfg.oz_size_mul).round().max(1.0) as u64;
        let oz_tput = (self.cfg.initial_throughput * self.cfg.oz_tput_mul).max(f64::MIN_POSITIVE);
        let oz = Measurement::new(oz_size, oz_tput)?;
        let baseline = Baseline { unopt, oz };
        self.baseline_cache.lock().unwrap().insert(seed, baseline);
        Ok(baseline)
    }

    fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::PassId;

    fn subseq(id: u32) -> SubSequence {
        SubSequence::new(id, vec![PassId::parse("simplifycfg").unwrap()])
    }

    #[test]
    fn initial_measurement_is_configured_pair() {
        let be = MockBackend::new(MockConfig::default());
        let m = be.measure(&IrHandle::mock(1)).unwrap();
        assert_eq!(m.bin_size, 10_000);
        assert_eq!(m.throughput, 2.0);
    }

    #[test]
    fn embeddings_are_deterministic_and_history_sensitive() {
        let be = MockBackend::new(MockConfig::no_op(4));
        let p = IrHandle::mock(7);
        assert_eq!(be.embed(&p).unwrap(), be.embed(&p).unwrap());
        assert_eq!(be.embed(&p).unwrap().values().len(), EMBED_DIM);

        let stepped = be.apply_passes(&p, &subseq(2)).unwrap();
        assert_ne!(be.embed(&p).unwrap(), be.embed(&stepped).unwrap());
        assert_ne!(be.embed(&IrHandle::mock(8)).unwrap(), be.embed(&p).unwrap());
    }

    #[test]
    fn apply_passes_tracks_effects_and_generation() {
        let mut cfg = MockConfig::default();
        cfg.initial_size = 1000;
        cfg.effects = vec![ActionEffect::scaling(0.5, 1.0), ActionEffect::IDENTITY];
        let be = MockBackend::new(cfg);
        let p = IrHandle::mock(0);

        let halved = be.apply_passes(&p, &subseq(0)).unwrap();
        assert_eq!(halved.generation, 1);
        assert_eq!(p.generation, 0);
        assert_eq!(be.measure(&halved).unwrap().bin_size, 500);

        let unchanged = be.apply_passes(&p, &subseq(1)).unwrap();
        assert_eq!(unchanged.generation, 1);
        assert_eq!(be.measure(&unchanged).unwrap(), be.measure(&p).unwrap());
    }

    #[test]
    fn replaying_history_reproduces_measurements_exactly() {
        let be = MockBackend::new(MockConfig::with_dominant(5, 2));
        let mut a = IrHandle::mock(3);
        let mut b = IrHandle::mock(3);
        for id in [2u32, 4, 2, 0, 1, 2] {
            a = be.apply_passes(&a, &subseq(id)).unwrap();
            b = be.apply_passes(&b, &subseq(id)).unwrap();
        }
        assert_eq!(be.measure(&a).unwrap(), be.measure(&b).unwrap());
        assert_eq!(be.embed(&a).unwrap(), be.embed(&b).unwrap());
    }

    #[test]
    fn baseline_is_cached_and_oz_shrinks() {
        let be = MockBackend::new(MockConfig::default());
        let p = IrHandle::mock(11);
        let b1 = be.baseline(&p).unwrap();
        let calls_after_first = be.invocations();
        let b2 = be.baseline(&p).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(be.invocations(), calls_after_first, "second call must hit the cache");
        assert!(b1.oz.bin_size <= b1.unopt.bin_size);
        assert_eq!(b1.oz.bin_size, 7000);
    }

    #[test]
    fn baseline_rejects_transformed_handles() {
        let be = MockBackend::new(MockConfig::no_op(2));
        let stepped = be.apply_passes(&IrHandle::mock(0), &subseq(1)).unwrap();
        assert!(matches!(
            be.baseline(&stepped),
            Err(BackendError::InvalidIr(_))
        ));
    }

    #[test]
    fn file_handles_are_rejected() {
        let be = MockBackend::new(MockConfig::default());
        let h = IrHandle::file("/tmp/x.ll");
        assert!(matches!(be.measure(&h), Err(BackendError::WrongHandle(_))));
    }
}
