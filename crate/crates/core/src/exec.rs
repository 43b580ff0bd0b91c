use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Runs `f(0..n)` on up to `parallelism` threads and returns results in
/// index order. With `parallelism <= 1` everything runs inline.
pub(crate) fn fan_out<T, F>(n: usize, parallelism: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = parallelism.min(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("fan-out slot lock poisoned")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("fan-out slot lock poisoned")
        .into_iter()
        .map(|s| s.expect("every index is produced exactly once"))
        .collect()
}
