//! Run-level fan-out. With the `parallel` feature the closures execute on a
//! rayon pool; without it (or with `jobs = Some(1)`) they run sequentially.
//! Results are returned in input order either way, so callers see identical
//! output regardless of scheduling.

/// How independent work items are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Use a thread pool, optionally capped at `jobs` workers.
    #[cfg(feature = "parallel")]
    Threads { jobs: Option<usize> },
}

impl Default for Parallelism {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Parallelism::Threads { jobs: None }
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Parallelism::Sequential
    }
}

impl Parallelism {
    /// Interpret a CLI-style `--jobs` value.
    pub fn with_jobs(jobs: Option<usize>) -> Self {
        match jobs {
            Some(1) => Parallelism::Sequential,
            #[cfg(feature = "parallel")]
            other => Parallelism::Threads { jobs: other },
            #[cfg(not(feature = "parallel"))]
            _ => Parallelism::Sequential,
        }
    }
}

/// Map `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<U, F>(n: usize, how: Parallelism, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match how {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Threads { jobs } => {
            use rayon::prelude::*;
            match jobs {
                None => (0..n).into_par_iter().map(f).collect(),
                Some(j) => rayon::ThreadPoolBuilder::new()
                    .num_threads(j.max(1))
                    .build()
                    .expect("failed to build thread pool")
                    .install(|| (0..n).into_par_iter().map(f).collect()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_default_agree() {
        let seq = map_indexed(32, Parallelism::Sequential, |i| i * i);
        let par = map_indexed(32, Parallelism::default(), |i| i * i);
        assert_eq!(seq, par);
    }
}
