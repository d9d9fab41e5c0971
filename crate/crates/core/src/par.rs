//! Chunked elementwise driver. Uses rayon when the `parallel` feature is on.

pub(crate) const CHUNK: usize = 1 << 16;

/// Calls `f(offset, chunk)` over `CHUNK`-sized pieces of `out`.
///
/// Every element is written by exactly one call and no call observes another
/// chunk, so results do not depend on scheduling.
pub(crate) fn for_each_chunk_mut<F>(out: &mut [f32], f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if out.len() > CHUNK {
            out.par_chunks_mut(CHUNK)
                .enumerate()
                .for_each(|(i, chunk)| f(i * CHUNK, chunk));
            return;
        }
    }
    for (i, chunk) in out.chunks_mut(CHUNK).enumerate() {
        f(i * CHUNK, chunk);
    }
}
