//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper splits work into independent units (matrix rows, samples,
//! classes) whose results do not depend on how units are grouped, so the
//! parallel and sequential paths produce bitwise-identical output. Building
//! without the `parallel` feature removes rayon entirely.

/// Execution strategy for the data-parallel loops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Parallel when the `parallel` feature is compiled in, otherwise sequential.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Below this many output scalars a parallel split costs more than it saves.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Calls `f(row_index, row)` for each `row_len`-sized chunk of `out`.
pub fn for_each_row<T, F>(exec: Exec, out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel && out.len() >= MIN_PARALLEL_WORK {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Caps the global worker pool. `None` reads `SDGZSL_THREADS`; if that is
/// unset the rayon default (one worker per core) stays in place. Only the
/// first call has an effect.
pub fn init_threads(threads: Option<usize>) {
    let threads = threads.or_else(|| {
        std::env::var("SDGZSL_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
    });
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
