//! Deterministic parallelism over path indices.
//!
//! Work is always split into fixed-size chunks of paths, independent of the
//! worker count. Per-chunk results are combined strictly in chunk order, so
//! every reduction produces the same floating-point bits whether it runs on
//! one thread or many.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Paths per chunk. Fixed: changing it changes summation order and therefore
/// the exact bits of every Monte Carlo reduction.
pub(crate) const PATH_CHUNK: usize = 1024;

fn chunk_count(n_paths: usize) -> usize {
    n_paths.div_ceil(PATH_CHUNK)
}

/// Maps each chunk of path indices to an accumulator; returns accumulators in
/// chunk order. Callers fold the returned vector sequentially.
pub(crate) fn map_path_chunks<A, F>(n_paths: usize, f: F) -> Vec<A>
where
    A: Send,
    F: Fn(std::ops::Range<usize>) -> A + Sync,
{
    let chunks = chunk_count(n_paths);
    let range = |c: usize| c * PATH_CHUNK..((c + 1) * PATH_CHUNK).min(n_paths);
    #[cfg(feature = "parallel")]
    {
        (0..chunks).into_par_iter().map(|c| f(range(c))).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..chunks).map(|c| f(range(c))).collect()
    }
}

/// Runs `f(first_path, rows)` over disjoint chunks of a row-major buffer
/// (`stride` entries per path). Writes only; no cross-chunk reduction.
pub(crate) fn for_path_chunks_mut<T, F>(buf: &mut [T], stride: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert_eq!(buf.len() % stride.max(1), 0);
    let width = PATH_CHUNK * stride;
    #[cfg(feature = "parallel")]
    {
        buf.par_chunks_mut(width)
            .enumerate()
            .for_each(|(c, rows)| f(c * PATH_CHUNK, rows));
    }
    #[cfg(not(feature = "parallel"))]
    {
        buf.chunks_mut(width)
            .enumerate()
            .for_each(|(c, rows)| f(c * PATH_CHUNK, rows));
    }
}

/// Like [`for_path_chunks_mut`] over two parallel buffers with independent
/// strides, returning one accumulator per chunk in chunk order.
pub(crate) fn map_path_chunks_mut2<T1, T2, A, F>(
    b1: &mut [T1],
    s1: usize,
    b2: &mut [T2],
    s2: usize,
    f: F,
) -> Vec<A>
where
    T1: Send,
    T2: Send,
    A: Send,
    F: Fn(usize, &mut [T1], &mut [T2]) -> A + Sync,
{
    let (w1, w2) = (PATH_CHUNK * s1, PATH_CHUNK * s2);
    #[cfg(feature = "parallel")]
    {
        b1.par_chunks_mut(w1)
            .zip(b2.par_chunks_mut(w2))
            .enumerate()
            .map(|(c, (r1, r2))| f(c * PATH_CHUNK, r1, r2))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        b1.chunks_mut(w1)
            .zip(b2.chunks_mut(w2))
            .enumerate()
            .map(|(c, (r1, r2))| f(c * PATH_CHUNK, r1, r2))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_reduction_matches_serial_sum_bitwise() {
        let data: Vec<f64> = (0..5000).map(|i| (i as f64).sin()).collect();
        let partials = map_path_chunks(data.len(), |r| -> f64 { r.map(|i| data[i]).sum() });
        let chunked: f64 = partials.iter().sum();
        // Reference: same chunk boundaries, fully serial.
        let mut serial = 0.0;
        for c in 0..data.len().div_ceil(PATH_CHUNK) {
            let lo = c * PATH_CHUNK;
            let hi = ((c + 1) * PATH_CHUNK).min(data.len());
            let part: f64 = data[lo..hi].iter().sum();
            serial += part;
        }
        assert_eq!(chunked.to_bits(), serial.to_bits());
    }

    #[test]
    fn disjoint_writes_cover_every_row() {
        let mut buf = vec![0.0_f64; 3 * 2500];
        for_path_chunks_mut(&mut buf, 3, |start, rows| {
            for (i, row) in rows.chunks_mut(3).enumerate() {
                row[0] = (start + i) as f64;
            }
        });
        for p in 0..2500 {
            assert_eq!(buf[3 * p], p as f64);
        }
    }
}
