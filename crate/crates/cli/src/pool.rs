//! Bounded worker pool for independent runs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Applies `job` to every item on at most `workers` threads. Results keep
/// the input order, so the output does not depend on scheduling.
pub fn run_ordered<T, R, F>(items: &[T], workers: usize, job: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = job(i, item);
                slots.lock().expect("no worker panicked holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let items: Vec<u64> = (0..37).collect();
        let one = run_ordered(&items, 1, |i, x| (i, x * x));
        let many = run_ordered(&items, 8, |i, x| (i, x * x));
        assert_eq!(one, many);
        assert_eq!(one[5], (5, 25));
    }

    #[test]
    fn empty_input() {
        let out: Vec<u8> = run_ordered(&[] as &[u8], 4, |_, x| *x);
        assert!(out.is_empty());
    }
}
