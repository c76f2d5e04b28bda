//! Data-parallel execution policy.
//!
//! Every parallel loop in the crate is a map over independent indices whose
//! per-index work has a fixed summation order, so `Sequential` and `Parallel`
//! produce bit-identical results. Without the `parallel` feature the
//! `Parallel` policy silently runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run data-parallel loops.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    /// Fill `out[i] = f(i)`.
    pub fn fill<F>(self, out: &mut [f64], f: F)
    where
        F: Fn(usize) -> f64 + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => out.par_iter_mut().enumerate().for_each(|(i, v)| *v = f(i)),
            _ => out.iter_mut().enumerate().for_each(|(i, v)| *v = f(i)),
        }
    }

    /// Collect `f(i)` for `i in 0..n`, order preserved.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Run `f(chunk_index, chunk)` over consecutive `chunk_len`-sized pieces of `data`.
    pub fn for_chunks<T, F>(self, data: &mut [T], chunk_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk_len = chunk_len.max(1);
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)),
            _ => data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)),
        }
    }
}
