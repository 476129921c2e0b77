//! Order-preserving parallel map over scoped worker threads.
//!
//! Work items are claimed from a shared counter and results land in their
//! input slot, so the output is identical for any worker count — the
//! `--threads` flag can never change what a command produces.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub fn par_map<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<U>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let result = f(i, &items[i]);
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_for_any_thread_count() {
        let items: Vec<u64> = (0..100).collect();
        let expected: Vec<u64> = items.iter().map(|v| v * v).collect();
        for threads in [1, 2, 3, 8, 64] {
            let got = par_map(&items, threads, |_, &v| v * v);
            assert_eq!(got, expected, "threads={threads}");
        }
    }

    #[test]
    fn empty_input() {
        let got: Vec<u32> = par_map(&[] as &[u32], 4, |_, &v| v);
        assert!(got.is_empty());
    }
}
