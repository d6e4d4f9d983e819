//! Thread-pool executor.

use multicolumn_core::{Executor, Sequential};
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};

/// Order-preserving executor backed by a private rayon pool. One thread
/// runs everything inline on the caller.
pub struct Pool {
    inner: Option<ThreadPool>,
}

impl Pool {
    pub fn new(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        if threads == 1 {
            return Ok(Self { inner: None });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start thread pool: {e}")))?;
        Ok(Self { inner: Some(pool) })
    }

    pub fn threads(&self) -> usize {
        self.inner.as_ref().map_or(1, |p| p.current_num_threads())
    }
}

impl Executor for Pool {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match &self.inner {
            None => Sequential.map(items, f),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}
