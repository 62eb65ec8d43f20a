//! Executors for per-sample and per-frame work.

use lef_core::train::{Executor, SerialExecutor};
use rayon::prelude::*;

pub const DETERMINISTIC_ENV: &str = "LEF_DETERMINISTIC";

/// Maps on the rayon pool. Results are returned in index order.
#[derive(Debug, Clone, Copy, Default)]
pub struct ThreadedExecutor;

impl Executor for ThreadedExecutor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        let f = &f;
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Serial when `LEF_DETERMINISTIC=1`, threaded otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Runtime {
    Serial,
    Threaded,
}

impl Runtime {
    pub fn from_env() -> Self {
        match std::env::var(DETERMINISTIC_ENV) {
            Ok(v) if v == "1" => Runtime::Serial,
            _ => Runtime::Threaded,
        }
    }

    pub fn is_deterministic(self) -> bool {
        self == Runtime::Serial
    }
}

impl Executor for Runtime {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        match self {
            Runtime::Serial => SerialExecutor.map(n, f),
            Runtime::Threaded => ThreadedExecutor.map(n, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threaded_matches_serial_order() {
        let f = |i: usize| (i * 7919) % 101;
        assert_eq!(ThreadedExecutor.map(500, f), SerialExecutor.map(500, f));
        assert_eq!(Runtime::Threaded.map(0, f), Vec::<usize>::new());
    }
}
