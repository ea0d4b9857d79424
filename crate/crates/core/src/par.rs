//! Data-parallel helpers with a sequential fallback.
//!
//! Results are always collected in index order, so the parallel and
//! sequential paths produce identical output for pure per-item closures.

/// How an embarrassingly parallel loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses rayon's global pool (or the pool installed by the caller). Falls
    /// back to sequential when the `parallel` feature is disabled.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Maps `f` over `0..n`, preserving index order in the output.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Maps `f` over a slice, preserving order.
    pub fn map_slice<I, T, F>(self, items: &[I], f: F) -> Vec<T>
    where
        I: Sync,
        T: Send,
        F: Fn(&I) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    /// Runs `f` inside a dedicated pool of `jobs` threads. With one job, or
    /// without the `parallel` feature, `f` runs on the current thread with
    /// sequential execution.
    pub fn with_jobs<T, F>(jobs: usize, f: F) -> T
    where
        T: Send,
        F: FnOnce(Execution) -> T + Send,
    {
        #[cfg(feature = "parallel")]
        if jobs > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                return pool.install(|| f(Execution::Parallel));
            }
        }
        let _ = jobs;
        f(Execution::Sequential)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree_and_keep_order() {
        let seq = Execution::Sequential.map_range(100, |i| i * i);
        let par = Execution::Parallel.map_range(100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn with_jobs_runs_closure() {
        let out = Execution::with_jobs(2, |exec| exec.map_slice(&[1, 2, 3], |x| x + 1));
        assert_eq!(out, vec![2, 3, 4]);
    }
}
