//! Thin fan-out shim: rayon when the `parallel` feature is on, plain
//! iteration otherwise. Callers must pass order-independent work; results
//! come back indexed so merges are deterministic either way.

/// Maps `f` over `items`, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Sequential reference path with the same signature as [`par_map`], kept
/// unconditionally compiled so benches can compare the two.
pub fn seq_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}
