//! Deterministic parallel reductions.
//!
//! Work is split into fixed-size chunks whose boundaries depend only on the
//! input length. Each chunk is reduced sequentially, and chunk partials are
//! added in chunk order, so results are bitwise identical for any thread count.

use rayon::prelude::*;

const CHUNK: usize = 64;

/// Sums `dim`-length vector contributions over `items`.
pub fn ordered_vec_sum<T, F>(items: &[T], dim: usize, f: F) -> Vec<f64>
where
    T: Sync,
    F: Fn(&T, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<f64>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; dim];
            for item in chunk {
                f(item, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; dim];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Sums a scalar and a vector contribution per item in one pass.
pub fn ordered_scalar_vec_sum<T, F>(items: &[T], dim: usize, f: F) -> (f64, Vec<f64>)
where
    T: Sync,
    F: Fn(&T, &mut [f64]) -> f64 + Sync,
{
    let partials: Vec<(f64, Vec<f64>)> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; dim];
            let mut s = 0.0;
            for item in chunk {
                s += f(item, &mut acc);
            }
            (s, acc)
        })
        .collect();
    let mut total = vec![0.0; dim];
    let mut scalar = 0.0;
    for (s, p) in partials {
        scalar += s;
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    (scalar, total)
}

/// Order-preserving parallel map.
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    items.par_iter().map(|x| f(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_thread_count_invariant() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin() * 1e3 + 1e-7).collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| ordered_vec_sum(&xs, 2, |x, acc| {
                    acc[0] += x;
                    acc[1] += x * x;
                }))
        };
        let a = run(1);
        let b = run(7);
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
}
