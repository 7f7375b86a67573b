//! Order-preserving map over a slice, data-parallel when the `parallel`
//! feature is enabled and sequential otherwise. Results always come back in
//! input order, so reductions stay deterministic either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, R: Send, F: Fn(&T) -> R + Send + Sync>(items: &[T], f: F) -> Vec<R> {
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Sync, R: Send, F: Fn(&T) -> R + Send + Sync>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Always-sequential reference path, kept for benchmarking against `par_map`.
pub fn seq_map<T, R, F: Fn(&T) -> R>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let xs: Vec<usize> = (0..1000).collect();
        let ys = par_map(&xs, |&x| x * 2);
        assert_eq!(ys, seq_map(&xs, |&x| x * 2));
    }
}
