//! Execution strategy for the data-parallel kernels.
//!
//! Every kernel that loops over independent rows or channels takes an
//! [`Exec`]. With the `parallel` feature the default strategy fans work out
//! over the rayon pool; without it (or with [`Exec::Sequential`]) the same
//! closures run in order on the calling thread. Work items never share an
//! accumulator, so both strategies produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar operations per call the parallel strategy runs inline.
const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn go_parallel(self, work: usize) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel && work >= PAR_THRESHOLD
    }

    /// Calls `f(i, chunk)` for every `chunk_len`-sized chunk of `data`.
    /// `work` is a rough scalar-op count used to skip tiny jobs.
    pub fn chunks_mut<T, F>(self, data: &mut [T], chunk_len: usize, work: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk_len == 0 || data.is_empty() {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.go_parallel(work) {
            data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
        let _ = work;
        data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Like [`Exec::chunks_mut`] over two buffers split with their own chunk lengths.
    pub fn chunks2_mut<T, U, F>(self, a: &mut [T], a_len: usize, b: &mut [U], b_len: usize, work: usize, f: F)
    where
        T: Send,
        U: Send,
        F: Fn(usize, &mut [T], &mut [U]) + Sync + Send,
    {
        if a_len == 0 || b_len == 0 || a.is_empty() {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.go_parallel(work) {
            a.par_chunks_mut(a_len)
                .zip(b.par_chunks_mut(b_len))
                .enumerate()
                .for_each(|(i, (x, y))| f(i, x, y));
            return;
        }
        let _ = work;
        a.chunks_mut(a_len)
            .zip(b.chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
    }

    /// Calls `f(i, item)` for every element of `items`.
    pub fn for_each_mut<T, F>(self, items: &mut [T], work: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.go_parallel(work) {
            items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
            return;
        }
        let _ = work;
        items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
    }

    /// Maps `0..n` through `f`, preserving index order in the output.
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

/// Caps the global pool at `threads` workers. A no-op without the `parallel` feature.
pub fn init_thread_pool(threads: usize) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree() {
        let mut a = vec![0.0f64; 1 << 16];
        let mut b = a.clone();
        let fill = |i: usize, c: &mut [f64]| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ((i * 64 + j) as f64).sin();
            }
        };
        Exec::Sequential.chunks_mut(&mut a, 64, usize::MAX, fill);
        Exec::Parallel.chunks_mut(&mut b, 64, usize::MAX, fill);
        assert_eq!(a, b);
        assert_eq!(Exec::Sequential.map(10, |i| i * i), Exec::Parallel.map(10, |i| i * i));
    }
}
