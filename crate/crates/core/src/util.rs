/// Order-preserving parallel map over `0..n` using scoped threads.
///
/// Work is split into `threads` contiguous index ranges; each range is mapped
/// on its own thread and the per-range results are concatenated in range
/// order, so the output is identical to the sequential map regardless of
/// scheduling. With `threads <= 1` no threads are spawned at all, which keeps
/// the single-threaded path trivially deterministic and cheap.
pub fn parallel_map<U, F>(n: usize, threads: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let workers = threads.min(n);
    let chunk = n.div_ceil(workers);
    let mut out = Vec::with_capacity(n);
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(n);
            if lo >= hi {
                break;
            }
            let f = &f;
            handles.push(scope.spawn(move || (lo..hi).map(f).collect::<Vec<U>>()));
        }
        for h in handles {
            out.extend(h.join().expect("worker thread panicked"));
        }
    });
    out
}

/// Splits `0..n` into at most `threads` contiguous ranges of near-equal size.
pub fn chunk_ranges(n: usize, threads: usize) -> Vec<std::ops::Range<usize>> {
    let workers = threads.max(1).min(n.max(1));
    let chunk = n.div_ceil(workers);
    let mut out = Vec::new();
    let mut lo = 0;
    while lo < n {
        let hi = (lo + chunk).min(n);
        out.push(lo..hi);
        lo = hi;
    }
    out
}
