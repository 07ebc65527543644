//! RNG stream derivation and ordered map helpers shared by the
//! data-parallel inner loops. The `parallel` feature switches the public
//! helpers onto rayon; the sequential path stays available for benches
//! and for builds without the feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent RNG stream for sub-task `index` of a run seeded by `seed`.
/// Streams are decorrelated by the ChaCha stream id, so parallel workers
/// never share state and results do not depend on execution order.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sequential ordered map.
pub fn map_ordered_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    items.iter().map(f).collect()
}

/// Parallel ordered map; output order matches input order regardless of
/// scheduling, so reductions over the result are deterministic.
#[cfg(feature = "parallel")]
pub fn map_ordered_par<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_ordered_par(items, f)
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_ordered_seq(items, f)
}

/// Map over indices 0..n, ordered.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map_ordered(&idx, |&i| f(i))
}

/// Configure the rayon thread pool size. A no-op without the feature.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            // Ignore the error if a pool was already built.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
