//! Execution strategy for the data-parallel loops (per-example gradients,
//! oracle seed sweeps, search candidates).
//!
//! Results are always collected in index order, so both strategies produce
//! bitwise-identical output. Without the `parallel` feature,
//! [`Exec::Parallel`] runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// `(0..n).map(f).collect()`, possibly across threads.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if n > 1 => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Map over a slice, preserving order.
    pub fn map_slice<S, T, F>(self, items: &[S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&S) -> T + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }
}
