//! Data-parallel batch helpers.
//!
//! With the `parallel` feature the `map_*` helpers run on the rayon global
//! pool; without it they are plain sequential iterators. Output order always
//! matches input order, so results do not depend on the execution mode.

/// Whether batch helpers run in parallel in this build.
pub const PARALLEL: bool = cfg!(feature = "parallel");

/// Maps `f` over `items`, in parallel when available.
#[cfg(feature = "parallel")]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_slice_seq(items, f)
}

/// Maps `f` over `0..n`, in parallel when available.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    map_range_seq(n, f)
}

/// Sequential counterpart of [`map_slice`], always available.
pub fn map_slice_seq<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Sequential counterpart of [`map_range`], always available.
pub fn map_range_seq<U, F: Fn(usize) -> U>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}
