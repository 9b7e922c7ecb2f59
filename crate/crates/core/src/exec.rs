//! Index-ordered parallel map.
//!
//! With the `parallel` feature the work runs on the current rayon pool;
//! without it (or inside [`sequential`]) it runs on the calling thread.
//! Output order always follows the input index.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Run `work` with every [`map_indexed`] call on this thread forced onto the
/// sequential path.
pub fn sequential<R>(work: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|f| f.replace(true));
    let out = work();
    FORCE_SEQUENTIAL.with(|f| f.set(prev));
    out
}

fn forced_sequential() -> bool {
    FORCE_SEQUENTIAL.with(|f| f.get())
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !forced_sequential() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = forced_sequential;
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_indexed`]; returns the lowest-index error.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}
