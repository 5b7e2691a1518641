//! Execution policy for the data-parallel kernels.
//!
//! Every parallel loop here partitions *independent outputs* (rows of a
//! product, images of a batch, trials of a sweep). Each output is still
//! reduced in a fixed sequential order, so results are bit-identical
//! between [`Exec::Sequential`] and [`Exec::Parallel`].
//!
//! Without the `parallel` feature, `Exec::Parallel` silently runs
//! sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar multiply-adds a kernel stays on the calling thread.
pub const PAR_MIN_WORK: usize = 1 << 15;

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
    /// Default policy, demoted to sequential for small workloads.
    pub fn for_work(work: usize) -> Self {
        if work < PAR_MIN_WORK {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Calls `f(index, chunk)` for every `chunk`-sized slice of `data`.
    pub fn for_each_chunk<F>(self, data: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if chunk == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }

    /// Evaluates `f(0..n)` and collects the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let v = exec.map(100, |i| i * 2);
            assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn chunks_cover_everything() {
        let mut data = vec![0.0; 10];
        Exec::Parallel.for_each_chunk(&mut data, 3, |i, c| {
            for x in c.iter_mut() {
                *x = i as f64;
            }
        });
        assert_eq!(data, vec![0., 0., 0., 1., 1., 1., 2., 2., 2., 3.]);
    }

    #[test]
    fn small_work_stays_sequential() {
        assert_eq!(Exec::for_work(10), Exec::Sequential);
    }
}
