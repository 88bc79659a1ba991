use std::num::NonZeroUsize;
use std::thread;

use angleattn_core::Executor;

pub const THREADS_ENV: &str = "ANGLEATTN_THREADS";

/// Scoped worker threads over contiguous index blocks. Output order equals
/// index order, so results are identical to `Sequential`.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    threads: NonZeroUsize,
}

impl Threaded {
    pub fn new(threads: NonZeroUsize) -> Self {
        Self { threads }
    }

    /// `ANGLEATTN_THREADS` if set to a positive integer, otherwise the
    /// available parallelism.
    pub fn from_env() -> Self {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<NonZeroUsize>().ok())
            .or_else(|| thread::available_parallelism().ok())
            .unwrap_or(NonZeroUsize::MIN);
        Self { threads }
    }

    pub fn threads(&self) -> usize {
        self.threads.get()
    }
}

impl Executor for Threaded {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        let workers = self.threads.get().min(n);
        if workers <= 1 {
            return (0..n).map(f).collect();
        }
        let block = n.div_ceil(workers);
        let f = &f;
        thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(block)
                .map(|start| s.spawn(move || (start..(start + block).min(n)).map(f).collect::<Vec<T>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                .collect()
        })
    }
}
