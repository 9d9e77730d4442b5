//! Named trainable parameters.
//!
//! Every model registers its tensors here in a deterministic order; the
//! optimizer and the checkpoint container both iterate the store by index.
//! Values live in f64 for training and gradient checking, and are rounded to
//! f32 precision when a checkpoint is written so that save/load is exact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    /// Whether weight decay applies; biases are excluded.
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Matrix, decay: bool) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Gaussian-initialized weight matrix (std 0.02, the usual transformer
    /// init scale).
    pub fn register_normal(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| gaussian(rng) * 0.02).collect();
        self.register(name, Matrix::from_vec(rows, cols, data), true)
    }

    pub fn register_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.register(name, Matrix::zeros(rows, cols), false)
    }

    pub fn register_ones(&mut self, name: &str, cols: usize) -> ParamId {
        self.register(name, Matrix::from_vec(1, cols, vec![1.0; cols]), true)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Round every value to the nearest f32. Called before serialization so
    /// the in-memory model and a reloaded checkpoint are bit-identical.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Standard normal via Box-Muller; ChaCha gives identical streams on every
/// platform, which keeps seeded runs reproducible.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_f32_is_idempotent() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = store.register_normal("w", 3, 4, &mut rng);
        store.round_to_f32();
        let first = store.value(id).clone();
        store.round_to_f32();
        assert_eq!(&first, store.value(id));
    }

    #[test]
    fn names_are_unique_and_lookup_works() {
        let mut store = ParamStore::new();
        let id = store.register_zeros("b", 1, 4);
        assert_eq!(store.by_name("b"), Some(id));
        assert_eq!(store.by_name("missing"), None);
    }
}
