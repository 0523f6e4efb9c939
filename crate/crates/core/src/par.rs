//! Sequential/parallel execution switch.
//!
//! Every data-parallel loop in the crate goes through [`Exec`]. With the
//! `parallel` feature the `Parallel` variant dispatches to rayon (and honours
//! whatever thread pool is installed); without it, `Parallel` degrades to the
//! sequential path. Results are always returned in input order so reductions
//! downstream are deterministic.

use ndarray::{Array2, ArrayViewMut1, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Applies `f(row_index, row)` to every row of `a` in place.
    pub fn for_each_row<F>(self, a: &mut Array2<f64>, f: F)
    where
        F: Fn(usize, ArrayViewMut1<'_, f64>) + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if a.nrows() > 1 => {
                use rayon::prelude::*;
                a.axis_iter_mut(Axis(0))
                    .into_par_iter()
                    .enumerate()
                    .for_each(|(i, row)| f(i, row));
            }
            _ => {
                for (i, row) in a.axis_iter_mut(Axis(0)).enumerate() {
                    f(i, row);
                }
            }
        }
    }
}

/// Runs `f` inside a pool of `workers` threads. `workers <= 1` runs inline.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if workers > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return pool.install(f);
            }
        }
    }
    let _ = workers;
    f()
}

/// Default executor for a worker count: one worker means strictly sequential.
pub fn exec_for_workers(workers: usize) -> Exec {
    if workers <= 1 {
        Exec::Sequential
    } else {
        Exec::default()
    }
}
