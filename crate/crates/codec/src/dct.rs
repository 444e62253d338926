//! Orthonormal 8x8 DCT-II and its inverse.

use std::sync::OnceLock;

pub const N: usize = 8;

pub type Block = [f64; N * N];

/// Zigzag scan order: `ZIGZAG[k]` is the raster index of the k-th coefficient.
pub const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

fn basis() -> &'static [[f64; N]; N] {
    static BASIS: OnceLock<[[f64; N]; N]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; N]; N];
        for (k, row) in c.iter_mut().enumerate() {
            let norm = if k == 0 { (1.0 / N as f64).sqrt() } else { (2.0 / N as f64).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = norm * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * N) as f64).cos();
            }
        }
        c
    })
}

/// `F = C X C^T`.
pub fn forward(block: &Block) -> Block {
    let c = basis();
    let mut tmp = [0.0; N * N];
    for y in 0..N {
        for u in 0..N {
            tmp[y * N + u] = (0..N).map(|x| c[u][x] * block[y * N + x]).sum();
        }
    }
    let mut out = [0.0; N * N];
    for v in 0..N {
        for u in 0..N {
            out[v * N + u] = (0..N).map(|y| c[v][y] * tmp[y * N + u]).sum();
        }
    }
    out
}

/// `X = C^T F C`.
pub fn inverse(coeffs: &Block) -> Block {
    let c = basis();
    let mut tmp = [0.0; N * N];
    for y in 0..N {
        for u in 0..N {
            tmp[y * N + u] = (0..N).map(|v| c[v][y] * coeffs[v * N + u]).sum();
        }
    }
    let mut out = [0.0; N * N];
    for y in 0..N {
        for x in 0..N {
            out[y * N + x] = (0..N).map(|u| c[u][x] * tmp[y * N + u]).sum();
        }
    }
    out
}
