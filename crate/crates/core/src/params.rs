//! Named parameter storage and initialization.
//!
//! Parameters live in an insertion-ordered map so that serialization, Adam
//! state, and gradient vectors can all share one canonical ordering. Names
//! are dotted paths (`"icsf.w_q"`, `"bb.l0.gru.w"`).

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Inserts a fresh parameter; duplicate names are a programming error.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Fails with the offending parameter path if any value is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.map {
            if !t.all_finite() {
                return Err(CoreError::numeric(format!(
                    "parameter {name} contains a non-finite value"
                )));
            }
        }
        Ok(())
    }

    /// Registers every parameter on `tape` (in insertion order) and returns
    /// the name → [`Val`] binding used by forward passes.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vals = IndexMap::with_capacity(self.map.len());
        for (name, t) in &self.map {
            vals.insert(name.clone(), tape.param(t.clone()));
        }
        Bound { vals }
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound {
    vals: IndexMap<String, Val>,
}

impl Bound {
    /// Handle for `name`. Missing names are bugs in model wiring, not user
    /// errors, so this panics rather than returning a `Result`.
    pub fn val(&self, name: &str) -> Val {
        *self
            .vals
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered on tape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Val)> {
        self.vals.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Xavier/Glorot uniform initialization for a weight matrix.
pub fn xavier_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data by construction")
}

/// N(0, 0.01) initialization for embedding tables.
pub fn embedding_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let dist = Normal::new(0.0, 0.01).expect("valid stddev");
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn insertion_order_is_preserved() {
        let mut ps = ParamStore::new();
        ps.insert("b", Tensor::zeros(vec![1]));
        ps.insert("a", Tensor::zeros(vec![1]));
        ps.insert("m", Tensor::zeros(vec![1]));
        let names: Vec<&str> = ps.names().collect();
        assert_eq!(names, vec!["b", "a", "m"]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::zeros(vec![1]));
        ps.insert("w", Tensor::zeros(vec![1]));
    }

    #[test]
    fn xavier_respects_limit() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let w = xavier_uniform(&mut rng, 64, 32);
        let limit = (6.0 / 96.0f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        // not degenerate
        assert!(w.abs_max() > 0.0);
    }

    #[test]
    fn check_finite_names_the_parameter() {
        let mut ps = ParamStore::new();
        ps.insert("enc.w", Tensor::zeros(vec![2]));
        ps.get_mut("enc.w").unwrap().data_mut()[1] = f64::NAN;
        let msg = ps.check_finite().unwrap_err().to_string();
        assert!(msg.contains("enc.w"), "got: {msg}");
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let mut r1 = ChaCha12Rng::seed_from_u64(3);
        let mut r2 = ChaCha12Rng::seed_from_u64(3);
        assert_eq!(
            xavier_uniform(&mut r1, 5, 7).data(),
            xavier_uniform(&mut r2, 5, 7).data()
        );
    }
}
