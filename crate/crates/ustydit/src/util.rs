//! Small shared helpers: deterministic hashing and bounded parallel map.

/// FNV-1a 64-bit. Stable across platforms and rustc versions, unlike
/// `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Map `items` with up to `parallelism` worker threads, preserving input
/// order in the output. With the `parallel` feature disabled, or
/// `parallelism <= 1`, runs sequentially.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: Vec<T>, parallelism: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    if parallelism <= 1 {
        return items.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .expect("thread pool");
    pool.install(|| {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    })
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: Vec<T>, _parallelism: usize, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}
