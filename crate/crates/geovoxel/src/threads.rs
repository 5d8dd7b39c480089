//! Deterministic chunked parallelism: items are split into contiguous index
//! ranges, each range is computed independently, and results are stitched in
//! index order. Outputs are bit-identical for any thread count because no
//! reduction crosses an item boundary.

use std::ops::Range;

/// Maps `f` over contiguous chunks of `0..n` on up to `threads` workers and
/// concatenates the per-chunk outputs in order. `f(range)` must return one
/// output vector whose concatenation over ranges equals the sequential run.
pub fn chunked_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> Vec<T> + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 || n == 0 {
        return f(0..n);
    }
    let ranges = split_ranges(n, threads);
    let mut out: Vec<Vec<T>> = Vec::with_capacity(ranges.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| scope.spawn(|| f(r)))
            .collect();
        for h in handles {
            out.push(h.join().expect("worker panicked"));
        }
    });
    out.into_iter().flatten().collect()
}

fn split_ranges(n: usize, parts: usize) -> Vec<Range<usize>> {
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        if len == 0 {
            continue;
        }
        out.push(start..start + len);
        start += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_all_indices_in_order() {
        for threads in [1, 2, 3, 7, 16] {
            let got = chunked_map(23, threads, |r| r.collect::<Vec<_>>());
            assert_eq!(got, (0..23).collect::<Vec<_>>(), "threads {threads}");
        }
    }

    #[test]
    fn result_independent_of_thread_count() {
        let work = |r: Range<usize>| -> Vec<f64> {
            r.map(|i| (i as f64 * 0.37).sin() * (i as f64).sqrt()).collect()
        };
        let one = chunked_map(100, 1, work);
        for threads in [2, 4, 8] {
            let many = chunked_map(100, threads, work);
            assert_eq!(one.len(), many.len());
            for (a, b) in one.iter().zip(&many) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn empty_input() {
        let got: Vec<usize> = chunked_map(0, 4, |r| r.collect());
        assert!(got.is_empty());
    }
}
