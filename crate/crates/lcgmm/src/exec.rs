//! Deterministic work splitting.
//!
//! Heavy loops are cut into fixed-size chunks; chunk results are combined in
//! chunk order by the caller. The chunk boundaries do not depend on the
//! thread count, so parallel and serial builds produce bit-identical sums.

use alloc::vec::Vec;
use core::ops::Range;

/// Rows per chunk for point-indexed loops.
pub(crate) const ROW_CHUNK: usize = 256;
/// Edges per chunk for graph-indexed loops.
pub(crate) const EDGE_CHUNK: usize = 1024;

/// Runs `f` once per row of a row-major matrix. Rows are independent, so the
/// result does not depend on scheduling.
pub(crate) fn fill_rows<F>(buf: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(buf.len() % row_len.max(1), 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        buf.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in buf.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}

/// Maps fixed-size index ranges to partial results, returned in range order.
/// The caller folds them serially.
pub(crate) fn chunked<T, F>(len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges: Vec<Range<usize>> = (0..len)
        .step_by(chunk.max(1))
        .map(|start| start..(start + chunk).min(len))
        .collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ranges.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}
