//! Data-parallel helpers used by the batch kernels and the evaluation harness.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool.
//! Without it, or after [`set_mode`]`(Mode::Sequential)`, everything runs on the
//! calling thread. Results are always produced in index order, so reductions
//! over them are bit-identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Selects the execution mode process-wide. `Parallel` is a no-op when the
/// crate was built without the `parallel` feature.
pub fn set_mode(mode: Mode) {
    FORCE_SEQUENTIAL.store(mode == Mode::Sequential, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed) {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(i, chunk_i)` for each `chunk`-sized piece of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let square = |i: usize| (i * i) as u64;
        set_mode(Mode::Sequential);
        let seq = map_indexed(100, square);
        set_mode(Mode::Parallel);
        let par = map_indexed(100, square);
        assert_eq!(seq, par);

        let mut a = vec![0usize; 12];
        for_each_chunk(&mut a, 4, |i, c| c.iter_mut().for_each(|v| *v = i));
        assert_eq!(a, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }
}
