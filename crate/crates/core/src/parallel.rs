//! Thread fan-out for independent work items (Gibbs chains, AIS runs).
//!
//! Each item owns its random stream, so results are identical for any
//! thread count. `EBMFLOW_THREADS` caps the number of workers.

use std::sync::OnceLock;

/// Below this many items the work stays on the calling thread.
const MIN_ITEMS_PER_THREAD: usize = 64;

pub fn worker_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
        match std::env::var("EBMFLOW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            Some(cap) if cap >= 1 => cap,
            _ => avail,
        }
    })
}

pub fn for_each_mut<T: Send>(items: &mut [T], f: impl Fn(&mut T) + Sync) {
    let threads = worker_threads().min(items.len() / MIN_ITEMS_PER_THREAD).max(1);
    if threads == 1 {
        items.iter_mut().for_each(f);
        return;
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for part in items.chunks_mut(chunk) {
            let f = &f;
            scope.spawn(move || part.iter_mut().for_each(f));
        }
    });
}
