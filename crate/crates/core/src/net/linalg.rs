//! Row-major matrix products and the conv3d patch gather/scatter.

use crate::world::Dims;

/// `c = a(m×k) · b(k×n) + beta·c`
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c(k×n) += a(m×k)ᵀ · b(m×n)`
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    if k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c(m×k) += a(m×n) · b(k×n)ᵀ`
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    if m == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            1.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

pub const NO_NEIGHBOUR: u32 = u32::MAX;

/// For every cell, the flat index of each kernel tap (or [`NO_NEIGHBOUR`]
/// outside the grid, i.e. zero padding).
#[derive(Clone, Debug)]
pub struct NeighbourTable {
    pub taps: usize,
    pub table: Vec<u32>,
}

impl NeighbourTable {
    pub fn new(dims: Dims, kernel: usize) -> Self {
        let r = (kernel / 2) as i32;
        let taps = kernel * kernel * kernel;
        let n = dims.volume();
        let mut table = Vec::with_capacity(n * taps);
        for i in 0..n {
            let c = dims.cell(i);
            for dy in -r..=r {
                for dz in -r..=r {
                    for dx in -r..=r {
                        table.push(match dims.offset(c, dx, dy, dz) {
                            Some(nb) => dims.index(nb) as u32,
                            None => NO_NEIGHBOUR,
                        });
                    }
                }
            }
        }
        NeighbourTable { taps, table }
    }

    /// `cols[c][t*ch + i] = input[nb(c,t)][i]`, zero where padded.
    pub fn gather(&self, input: &[f64], ch: usize, cols: &mut Vec<f64>) {
        let n = self.table.len() / self.taps;
        cols.clear();
        cols.resize(n * self.taps * ch, 0.0);
        for (c, row) in cols.chunks_exact_mut(self.taps * ch).enumerate() {
            let taps = &self.table[c * self.taps..(c + 1) * self.taps];
            for (t, &nb) in taps.iter().enumerate() {
                if nb != NO_NEIGHBOUR {
                    let nb = nb as usize;
                    row[t * ch..(t + 1) * ch].copy_from_slice(&input[nb * ch..(nb + 1) * ch]);
                }
            }
        }
    }

    /// Adjoint of [`gather`](Self::gather): scatter-adds column gradients.
    pub fn scatter_add(&self, dcols: &[f64], ch: usize, dinput: &mut [f64]) {
        for (c, row) in dcols.chunks_exact(self.taps * ch).enumerate() {
            let taps = &self.table[c * self.taps..(c + 1) * self.taps];
            for (t, &nb) in taps.iter().enumerate() {
                if nb != NO_NEIGHBOUR {
                    let nb = nb as usize;
                    let dst = &mut dinput[nb * ch..(nb + 1) * ch];
                    for (d, s) in dst.iter_mut().zip(&row[t * ch..(t + 1) * ch]) {
                        *d += s;
                    }
                }
            }
        }
    }
}
