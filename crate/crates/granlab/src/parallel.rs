//! Thread-level drivers around the core's serial kernels.
//!
//! The thread count comes from the `GRANLAB_THREADS` environment variable
//! and defaults to 1. Results never depend on scheduling: work is split
//! into fixed shards and reduced in shard order.

use std::thread;

use granlab_core::linalg::Matrix;
use granlab_core::moe::MoeLayer;
use granlab_core::trainer::{check_batch, shard_loss_and_grads, shard_ranges, GradEngine, Gradients, Serial};
use granlab_core::{Error, Result};

pub const THREADS_ENV: &str = "GRANLAB_THREADS";

/// Threads requested through `GRANLAB_THREADS` (at least 1).
pub fn threads() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(1).max(1)
}

/// Applies `f` to every item on up to `threads` workers, returning results
/// in input order.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let workers = threads.min(items.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let done = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        out.push((i, f(i, &items[i])));
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect::<Vec<_>>()
    });
    for (i, r) in done {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every item mapped")).collect()
}

/// Batch gradient sharded over threads, summed in shard order.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    pub threads: usize,
}

impl GradEngine for Threaded {
    fn loss_and_grads(&self, layer: &MoeLayer, xs: &Matrix, ys: &Matrix) -> Result<(f64, Gradients)> {
        if self.threads <= 1 {
            return Serial.loss_and_grads(layer, xs, ys);
        }
        check_batch(layer, xs, ys)?;
        let n = xs.rows();
        let ranges = shard_ranges(n, self.threads);
        let parts = par_map(&ranges, self.threads, |_, r| shard_loss_and_grads(layer, xs, ys, r.clone(), n));
        let mut iter = parts.into_iter();
        let (mut sum, mut grads) = iter.next().expect("at least one shard");
        for (s, g) in iter {
            sum += s;
            grads.add_assign(&g);
        }
        let loss = sum / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok((loss, grads))
    }
}

/// Engine matching the configured thread count.
pub fn engine() -> Threaded {
    Threaded { threads: threads() }
}
