//! (Semi-)orthogonal weight initialization.

use rand::Rng;
use rand_distr::StandardNormal;

/// A `rows × cols` row-major matrix whose rows (if `rows ≤ cols`) or columns
/// (otherwise) are orthonormal, scaled by `gain`.
///
/// Draws a Gaussian matrix in its tall orientation and orthonormalizes its
/// columns by Gram–Schmidt with one re-orthogonalization pass. That is a QR
/// factorization whose `R` has a positive diagonal, i.e. the usual
/// sign-corrected QR.
pub fn semi_orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (tall, wide) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // Column-major storage of the tall `tall × wide` matrix.
    let mut q: Vec<f64> = (0..tall * wide).map(|_| rng.sample(StandardNormal)).collect();
    for j in 0..wide {
        for _pass in 0..2 {
            for i in 0..j {
                let (done, rest) = q.split_at_mut(j * tall);
                let qi = &done[i * tall..(i + 1) * tall];
                let vj = &mut rest[..tall];
                let dot: f64 = qi.iter().zip(vj.iter()).map(|(a, b)| a * b).sum();
                for (v, a) in vj.iter_mut().zip(qi) {
                    *v -= dot * a;
                }
            }
        }
        let col = &mut q[j * tall..(j + 1) * tall];
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in col.iter_mut() {
            *v /= norm;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for j in 0..wide {
        for i in 0..tall {
            let v = gain * q[j * tall + i];
            if rows >= cols {
                out[i * cols + j] = v;
            } else {
                out[j * cols + i] = v;
            }
        }
    }
    out
}

/// Transpose a row-major `rows × cols` matrix.
pub fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = m[i * cols + j];
        }
    }
    out
}
