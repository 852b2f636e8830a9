//! Data-parallel loop helpers.
//!
//! Every kernel writes disjoint output chunks and reduces sequentially inside
//! a chunk, so parallel and sequential execution produce bitwise-identical
//! results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output elements a kernel always runs sequentially.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Parallel,
    Sequential,
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
    #[cfg(feature = "parallel")]
    fn parallel_for(self, len: usize) -> bool {
        self == Exec::Parallel && len >= PAR_THRESHOLD
    }

    /// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `out`.
    pub fn chunks_mut<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if out.is_empty() || chunk == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.parallel_for(out.len()) {
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Evaluates `f` on `0..n`, keeping the results in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}
