//! Data-parallel helpers.
//!
//! Every helper splits work over *output* elements only, and each output
//! element is produced by the same sequential inner loop in both modes, so
//! parallel and sequential execution are bit-identical.

/// Execution strategy for the hot kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

/// Run `f(chunk_index, chunk)` over `chunk_len`-sized pieces of `out`.
pub fn for_each_chunk<F>(exec: Exec, out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk_len == 0 || out.is_empty() {
        return;
    }
    match exec {
        Exec::Sequential => out
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c))
        }
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}
