//! Work fan-out for batch gradients and evaluation: a rayon pool when the
//! `parallel` feature is enabled and more than one thread is requested,
//! plain sequential iteration otherwise. Results always come back in input
//! order, so a fixed thread count gives bit-reproducible runs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;
#[cfg(feature = "parallel")]
use crate::error::CoreError;

pub struct Executor {
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    /// `threads == 0` means "all cores"; 1 forces sequential execution.
    pub fn new(threads: usize) -> Result<Executor> {
        #[cfg(feature = "parallel")]
        {
            let requested = if threads == 0 {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            } else {
                threads
            };
            if requested > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(requested)
                    .build()
                    .map_err(|e| CoreError::config(format!("thread pool: {e}")))?;
                return Ok(Executor {
                    threads: requested,
                    pool: Some(pool),
                });
            }
            Ok(Executor {
                threads: 1,
                pool: None,
            })
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Ok(Executor { threads: 1 })
        }
    }

    pub fn sequential() -> Executor {
        Executor::new(1).expect("sequential executor")
    }

    /// Effective worker count.
    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Maps `f` over the items, preserving input order in the output.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().map(|t| f(t)).collect());
        }
        items.iter().map(f).collect()
    }

    /// Like [`map`](Self::map) but short-circuits on the first error by
    /// input order.
    pub fn try_map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }

    /// Splits `0..len` into at most `threads` contiguous index shards of
    /// near-equal size, in order.
    pub fn shards(&self, len: usize) -> Vec<std::ops::Range<usize>> {
        shard_ranges(len, self.threads)
    }
}

/// At most `parts` contiguous ranges covering `0..len`, each within one
/// element of the others.
pub fn shard_ranges(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.max(1).min(len.max(1));
    if len == 0 {
        return vec![];
    }
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let size = base + usize::from(i < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_input_order() {
        for threads in [1usize, 4] {
            let exec = Executor::new(threads).unwrap();
            let items: Vec<u64> = (0..100).collect();
            let out = exec.map(&items, |&x| x * x);
            let expected: Vec<u64> = items.iter().map(|&x| x * x).collect();
            assert_eq!(out, expected, "threads = {threads}");
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let items: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let seq = Executor::sequential().map(&items, |&x| x.sin() + x.cos());
        let par = Executor::new(4).unwrap().map(&items, |&x| x.sin() + x.cos());
        assert_eq!(seq, par);
    }

    #[test]
    fn try_map_reports_first_error_by_input_order() {
        let exec = Executor::new(4).unwrap();
        let items: Vec<i32> = (0..20).collect();
        let err = exec
            .try_map(&items, |&x| {
                if x == 7 || x == 13 {
                    Err(crate::error::CoreError::numeric(format!("bad {x}")))
                } else {
                    Ok(x)
                }
            })
            .unwrap_err();
        assert!(err.to_string().contains("bad 7"), "{err}");
    }

    #[test]
    fn thread_counts_are_reported() {
        assert_eq!(Executor::sequential().threads(), 1);
        if cfg!(feature = "parallel") {
            assert_eq!(Executor::new(4).unwrap().threads(), 4);
            assert!(Executor::new(0).unwrap().threads() >= 1);
        } else {
            assert_eq!(Executor::new(4).unwrap().threads(), 1);
        }
    }

    #[test]
    fn shards_cover_everything_contiguously() {
        for (len, parts) in [(10, 3), (3, 10), (0, 4), (48, 4), (1, 1), (7, 7)] {
            let ranges = shard_ranges(len, parts);
            let covered: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
            let expected: Vec<usize> = (0..len).collect();
            assert_eq!(covered, expected, "len {len}, parts {parts}");
            if len > 0 {
                assert!(ranges.len() <= parts);
                let sizes: Vec<usize> = ranges.iter().map(ExactSizeIterator::len).collect();
                let min = sizes.iter().min().unwrap();
                let max = sizes.iter().max().unwrap();
                assert!(max - min <= 1, "unbalanced: {sizes:?}");
            }
        }
    }
}
