//! Named parameter arrays.
//!
//! Names are stable and derived from the spec: `Wq`, `Wv`, `Wo`, `bo`, and
//! per branch `r` (1-based, declaration order) `M_r`, `N_r`, `phi_r_l_W`,
//! `phi_r_l_b`, `phi_r_out_W`, `phi_r_out_b` and `phi_r_skip_l_W` for skip
//! taps whose width differs from `t_o`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::FusionSpec;
use crate::tensor::{Tensor, TensorError};

/// Parameter tensors kept sorted by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

/// Gradients mirror the parameter store's names and shapes.
pub type GradStore = ParamStore;

/// Shape of every parameter implied by the spec, sorted by name.
pub fn param_shapes(spec: &FusionSpec) -> Vec<(String, Vec<usize>)> {
    let d = spec.dims;
    let mut shapes = vec![
        ("Wq".to_string(), vec![d.t_q, d.d_q]),
        ("Wv".to_string(), vec![d.t_v, d.d_v]),
        ("Wo".to_string(), vec![d.n_classes, d.t_o]),
        ("bo".to_string(), vec![d.n_classes]),
    ];
    for (i, b) in spec.branches.iter().enumerate() {
        let r = i + 1;
        shapes.push((format!("M_{r}"), vec![d.t_o, d.t_q]));
        shapes.push((format!("N_{r}"), vec![d.t_o, d.t_v]));
        let p = &b.post;
        if p.layers == 0 {
            continue;
        }
        for l in 1..=p.layers {
            let fan_in = if l == 1 { d.t_o } else { p.hidden };
            shapes.push((format!("phi_{r}_{l}_W"), vec![p.hidden, fan_in]));
            shapes.push((format!("phi_{r}_{l}_b"), vec![p.hidden]));
        }
        shapes.push((format!("phi_{r}_out_W"), vec![d.t_o, p.hidden]));
        shapes.push((format!("phi_{r}_out_b"), vec![d.t_o]));
        if p.hidden != d.t_o {
            for l in (1..=p.layers).filter(|l| l % p.skip == 0) {
                shapes.push((format!("phi_{r}_skip_{l}_W"), vec![d.t_o, p.hidden]));
            }
        }
    }
    shapes.sort_by(|a, b| a.0.cmp(&b.0));
    shapes
}

fn is_bias(name: &str) -> bool {
    name == "bo" || name.ends_with("_b")
}

/// Glorot-uniform weights, zero biases. Deterministic in `(spec, seed)`.
pub fn init_params(spec: &FusionSpec, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = param_shapes(spec)
        .into_iter()
        .map(|(name, shape)| {
            let t = if is_bias(&name) {
                Tensor::zeros(&shape)
            } else {
                let (fan_out, fan_in) = (shape[0], shape[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
                Tensor::from_parts(shape, data)
            };
            (name, t)
        })
        .collect();
    ParamStore { entries }
}

impl ParamStore {
    /// Build from arbitrary named tensors; sorted by name.
    pub fn from_entries(mut entries: Vec<(String, Tensor)>) -> Self {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Self { entries }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.binary_search_by(|(n, _)| n.as_str().cmp(name)).ok()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let slot = self.get_mut(name).ok_or_else(|| TensorError::InvalidShape {
            shape: value.shape().to_vec(),
            len: value.len(),
        })?;
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub(crate) fn slot(&self, i: usize) -> &[f64] {
        self.entries[i].1.data()
    }

    pub(crate) fn slot_mut(&mut self, i: usize) -> &mut [f64] {
        self.entries[i].1.data_mut()
    }

    /// True when names and shapes agree with `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// `self += other`, elementwise, in name order.
    pub fn add_assign(&mut self, other: &ParamStore) {
        debug_assert!(self.same_layout(other));
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t) in &mut self.entries {
            for x in t.data_mut() {
                *x *= k;
            }
        }
    }

    /// Little-endian bytes of every value in name order; for checksums and
    /// bitwise comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for (_, t) in &self.entries {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }
}
