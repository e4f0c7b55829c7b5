use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smooth colour gradients with a few flat rectangles, in `[0.1, 0.9]`.
/// Deterministic in `seed`; used as clean ground truth for toy runs.
pub fn scene<T: Scalar>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.1..0.25),
            ]
        })
        .collect();
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..4)
        .map(|_| {
            let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
            let (rh, rw) = (rng.random_range(1..=h.div_ceil(3)), rng.random_range(1..=w.div_ceil(3)));
            let col = [rng.random(), rng.random(), rng.random()];
            (y, x, rh, rw, col)
        })
        .collect();
    Tensor::from_fn(&[h, w, 3], |i| {
        let (y, x, c) = (i / 3 / w, i / 3 % w, i % 3);
        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
        let [a, b, ph, amp] = waves[c];
        let mut v = 0.5 + amp * (std::f64::consts::TAU * (a * fy + b * fx) + ph).sin();
        for &(ry, rx, rh, rw, col) in &rects {
            if (ry..ry + rh).contains(&y) && (rx..rx + rw).contains(&x) {
                v = 0.5 * v + 0.5 * col[c];
            }
        }
        T::c(v.clamp(0.1, 0.9))
    })
}
