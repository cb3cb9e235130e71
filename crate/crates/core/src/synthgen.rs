//! Synthetic paired data: the unit square folded onto the unit disk.
//!
//! `X` is uniform on `[0,1]^2`. The quartile `q = floor(4 X1)` picks one of
//! four branches. Branch 0 stretches its strip to the unit square `Z`,
//! squeezes `Z1` by 0.2 wherever `Z2 > 0.2`, shifts to `[-1,0]^2` and maps onto
//! the lower-left quarter disk. Branch `q` first turns its local square
//! counter-clockwise by `q * 90` degrees about its centre and turns the output
//! clockwise by the same angle, so the dense arc of every quarter runs
//! clockwise. Both turns preserve area, so each branch keeps its share of mass.
//!
//! Randomness comes from `ChaCha8Rng` seeded with `seed`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::PairedDataset;
use crate::Matrix;

/// Maps one point of the unit square; returns `(y, quadrant)`.
pub fn map_point(x: [f64; 2]) -> ([f64; 2], usize) {
    let q = ((4.0 * x[0]).floor() as usize).min(3);
    let (a, b) = (4.0 * x[0] - q as f64, x[1]);
    let (mut z1, z2) = match q {
        0 => (a, b),
        1 => (1.0 - b, a),
        2 => (1.0 - a, 1.0 - b),
        _ => (b, 1.0 - a),
    };
    if z2 > 0.2 {
        z1 *= 0.2;
    }
    let (z1, z2) = (z1 - 1.0, z2 - 1.0);
    let y1 = z1 * (1.0 - z2 * z2 / 2.0).sqrt();
    let y2 = z2 * (1.0 - z1 * z1 / 2.0).sqrt();
    let y = match q {
        0 => [y1, y2],
        1 => [y2, -y1],
        2 => [-y1, -y2],
        _ => [-y2, y1],
    };
    (y, q)
}

/// Draws `n` pairs; also returns each row's quadrant label in `0..4`.
pub fn generate(n: usize, seed: u64) -> (PairedDataset, Vec<usize>) {
    assert!(n >= 1, "generate needs n >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, 2);
    let mut y = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let p = [rng.random::<f64>(), rng.random::<f64>()];
        let (out, q) = map_point(p);
        x[(i, 0)] = p[0];
        x[(i, 1)] = p[1];
        y[(i, 0)] = out[0];
        y[(i, 1)] = out[1];
        labels.push(q);
    }
    let mut data = PairedDataset::new(x, y).expect("generated data is finite");
    data.x_names = Some(vec!["x1".into(), "x2".into()]);
    data.y_names = Some(vec!["y1".into(), "y2".into()]);
    (data, labels)
}
