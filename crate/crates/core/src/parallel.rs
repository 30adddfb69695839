//! Order-preserving data-parallel map with a sequential fallback.
//!
//! Results are always collected in index order and every downstream
//! reduction runs serially over that ordered vector, so sequential and
//! parallel execution produce bit-identical numbers.

/// How independent work items are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Execution {
    /// `DISCO_DETERMINISTIC=1` forces a single worker; otherwise parallel
    /// when the crate was built with the `parallel` feature.
    pub fn from_env() -> Self {
        if deterministic_mode() {
            Execution::Sequential
        } else {
            Self::default()
        }
    }
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

pub fn deterministic_mode() -> bool {
    std::env::var("DISCO_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

/// `(0..n).map(f).collect()`, possibly spread over the rayon pool.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = map_indexed(Execution::Sequential, 1000, f);
        let b = map_indexed(Execution::Parallel, 1000, f);
        assert_eq!(a, b);
    }
}
