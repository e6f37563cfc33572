//! Seeded low-discrepancy points in the unit cube.
//!
//! A Halton sequence with a Cranley–Patterson rotation: each coordinate is
//! shifted by a seed-derived offset modulo 1. The first `n` points of a
//! sequence are always a prefix of the first `2n`, so candidate sets nest.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMES: [u32; 32] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131,
];

fn nth_prime(k: usize) -> u32 {
    if k < PRIMES.len() {
        return PRIMES[k];
    }
    let mut count = PRIMES.len() - 1;
    let mut p = *PRIMES.last().unwrap();
    while count < k {
        p += 2;
        if (3..)
            .step_by(2)
            .take_while(|q| q * q <= p)
            .all(|q| !p.is_multiple_of(q))
        {
            count += 1;
        }
    }
    p
}

/// Radical inverse of `i` in base `b`.
fn radical_inverse(mut i: u64, b: u32) -> f64 {
    let b = b as u64;
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % b) as f64 * f;
        i /= b;
        f *= inv;
    }
    r
}

#[derive(Debug, Clone)]
pub struct Halton {
    dim: usize,
    bases: Vec<u32>,
    shift: Vec<f64>,
}

impl Halton {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Halton {
            dim,
            bases: (0..dim).map(nth_prime).collect(),
            shift: (0..dim).map(|_| rng.random::<f64>()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The `i`-th point (0-based).
    pub fn point(&self, i: u64) -> Vec<f64> {
        self.bases
            .iter()
            .zip(&self.shift)
            .map(|(&b, &s)| {
                // index 0 of the raw sequence is the origin; skip it
                let v = radical_inverse(i + 1, b) + s;
                v - v.floor()
            })
            .collect()
    }

    /// The first `n` points as rows.
    pub fn points(&self, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, self.dim);
        for i in 0..n {
            for (j, v) in self.point(i as u64).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }
}
