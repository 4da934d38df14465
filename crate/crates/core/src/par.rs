//! Execution strategy for the data-parallel inner loops.
//!
//! Every parallel routine in this crate splits its work into chunks whose
//! boundaries depend only on the problem size, evaluates the chunks (on the
//! rayon pool when [`Exec::Parallel`] is selected) and then combines partial
//! results in chunk order. Serial and parallel runs are therefore bitwise
//! identical, independent of the number of worker threads.
//!
//! Without the `parallel` cargo feature, [`Exec::Parallel`] silently runs the
//! serial fallback.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Exec {
    Serial,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this strategy will actually use worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `(0..n).map(f).collect()`, possibly in parallel. Output order is index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps over a slice, preserving order.
    pub fn map_slice<'a, S, T, F>(self, items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&'a S) -> T + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }

    /// Applies `f` to consecutive `chunk`-sized windows of `out` (the last may be short).
    pub fn for_each_chunk_mut<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Shared cancellation flag, checked cooperatively between iterations.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

type ProgressFn = dyn Fn(f64) + Send + Sync;

/// Knobs for long-running computations: strategy, cancellation, progress.
#[derive(Clone, Default)]
pub struct Control {
    pub exec: Exec,
    pub cancel: Option<CancelToken>,
    progress: Option<Arc<ProgressFn>>,
}

impl std::fmt::Debug for Control {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Control")
            .field("exec", &self.exec)
            .field("cancel", &self.cancel)
            .field("progress", &self.progress.is_some())
            .finish()
    }
}

impl Control {
    pub fn new(exec: Exec) -> Self {
        Self {
            exec,
            ..Self::default()
        }
    }

    pub fn serial() -> Self {
        Self::new(Exec::Serial)
    }

    pub fn with_cancel(mut self, token: CancelToken) -> Self {
        self.cancel = Some(token);
        self
    }

    pub fn with_progress(mut self, f: impl Fn(f64) + Send + Sync + 'static) -> Self {
        self.progress = Some(Arc::new(f));
        self
    }

    pub fn check(&self) -> Result<()> {
        match &self.cancel {
            Some(t) if t.is_cancelled() => Err(Error::Cancelled),
            _ => Ok(()),
        }
    }

    /// Reports a fraction in `[0, 1]`.
    pub fn report(&self, fraction: f64) {
        if let Some(p) = &self.progress {
            p(fraction.clamp(0.0, 1.0));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_keeps_index_order() {
        for exec in [Exec::Serial, Exec::Parallel] {
            let v = exec.map(1000, |i| i * 3);
            assert!(v.iter().enumerate().all(|(i, &x)| x == i * 3));
        }
    }

    #[test]
    fn chunks_cover_everything_once() {
        for exec in [Exec::Serial, Exec::Parallel] {
            let mut out = vec![0usize; 103];
            exec.for_each_chunk_mut(&mut out, 10, |ci, c| {
                for (j, x) in c.iter_mut().enumerate() {
                    *x = ci * 10 + j;
                }
            });
            assert!(out.iter().enumerate().all(|(i, &x)| x == i));
        }
    }

    #[test]
    fn cancelled_control_errors() {
        let tok = CancelToken::new();
        let ctl = Control::serial().with_cancel(tok.clone());
        assert!(ctl.check().is_ok());
        tok.cancel();
        assert!(matches!(ctl.check(), Err(Error::Cancelled)));
    }
}
