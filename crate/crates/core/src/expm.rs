//! Dense matrix exponential by scaling and squaring with Padé approximants.
//!
//! Standard degree-{3,5,7,9,13} diagonal Padé scheme with the usual 1-norm
//! thresholds; the argument is halved until it fits under the degree-13
//! threshold and the result squared back up. Propagator matrices here are
//! small (tens of states), so no norm-estimation refinements are needed.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

const THETA_3: f64 = 1.495_585_217_958_292e-2;
const THETA_5: f64 = 2.539_398_330_063_230e-1;
const THETA_7: f64 = 9.504_178_996_162_932e-1;
const THETA_9: f64 = 2.097_847_961_257_068;
const THETA_13: f64 = 5.371_920_351_148_152;

fn pade_small(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    // b has odd length; even entries multiply even powers (V), odd entries odd powers (U = A * ...)
    let n = a.nrows();
    let id = DMatrix::identity(n, n);
    let a2 = a * a;
    let mut even = &id * b[0];
    let mut odd = &id * b[1];
    let mut power = id; // a2^k
    let degree = b.len() - 1;
    for k in 1..=degree / 2 {
        power = &power * &a2;
        even += &power * b[2 * k];
        if 2 * k + 1 <= degree {
            odd += &power * b[2 * k + 1];
        }
    }
    (a * odd, even) // (U, V)
}

fn pade13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    const B: [f64; 14] = [
        64_764_752_532_480_000.0,
        32_382_376_266_240_000.0,
        7_771_770_303_897_600.0,
        1_187_353_796_428_800.0,
        129_060_195_264_000.0,
        10_559_470_521_600.0,
        670_442_572_800.0,
        33_522_128_640.0,
        1_323_241_920.0,
        40_840_800.0,
        960_960.0,
        16_380.0,
        182.0,
        1.0,
    ];
    let n = a.nrows();
    let id = DMatrix::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * B[13] + &a4 * B[11] + &a2 * B[9];
    let u = a * (&a6 * &u_inner + &a6 * B[7] + &a4 * B[5] + &a2 * B[3] + &id * B[1]);
    let v_inner = &a6 * B[12] + &a4 * B[10] + &a2 * B[8];
    let v = &a6 * &v_inner + &a6 * B[6] + &a4 * B[4] + &a2 * B[2] + &id * B[0];
    (u, v)
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `e^A` for a square matrix.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidInput(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("matrix exponential of non-finite matrix".into()));
    }
    let nrm = norm1(a);

    let (u, v, squarings) = if nrm <= THETA_13 {
        let (u, v) = if nrm <= THETA_3 {
            pade_small(a, &[120.0, 60.0, 12.0, 1.0])
        } else if nrm <= THETA_5 {
            pade_small(a, &[30_240.0, 15_120.0, 3_360.0, 420.0, 30.0, 1.0])
        } else if nrm <= THETA_7 {
            pade_small(
                a,
                &[
                    17_297_280.0,
                    8_648_640.0,
                    1_995_840.0,
                    277_200.0,
                    25_200.0,
                    1_512.0,
                    56.0,
                    1.0,
                ],
            )
        } else if nrm <= THETA_9 {
            pade_small(
                a,
                &[
                    17_643_225_600.0,
                    8_821_612_800.0,
                    2_075_673_600.0,
                    302_702_400.0,
                    30_270_240.0,
                    2_162_160.0,
                    110_880.0,
                    3_960.0,
                    90.0,
                    1.0,
                ],
            )
        } else {
            pade13(a)
        };
        (u, v, 0u32)
    } else {
        let s = ((nrm / THETA_13).log2().ceil() as u32).min(60);
        let scaled = a * (0.5f64).powi(s as i32);
        let (u, v) = pade13(&scaled);
        (u, v, s)
    };

    // r = (V - U)^{-1} (V + U)
    let p = &v + &u;
    let q = &v - &u;
    let lu = q.lu();
    let mut r = lu
        .solve(&p)
        .ok_or_else(|| Error::Numeric("matrix exponential: Padé denominator is singular".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(
            "matrix exponential overflowed (argument too large)".into(),
        ));
    }
    Ok(r)
}

/// `e^{tA}`.
pub fn expm_t(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    expm(&(a * t))
}

/// Repeated action of `e^{dt·A}` on vectors for a sparse `A`, without ever
/// forming the exponential: the argument is split into substeps of 1-norm
/// at most 1/2 and each substep applies a truncated Taylor series using only
/// the nonzero entries. Dense `expm` is cubic to build and quadratic per
/// product; this is linear in the nonzero count, which is what makes
/// propagating single columns through stage-chain blocks with thousands of
/// states practical.
pub struct ExpmAction {
    dim: usize,
    substeps: usize,
    /// Nonzeros of `(dt/substeps)·A` as `(row, col, value)`.
    entries: Vec<(u32, u32, f64)>,
}

impl ExpmAction {
    pub fn new(a: &DMatrix<f64>, dt: f64) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidInput(format!(
                "matrix exponential needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if !dt.is_finite() || a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(
                "matrix exponential of non-finite argument".into(),
            ));
        }
        let nrm = norm1(a) * dt.abs();
        let substeps = ((nrm / 0.5).ceil() as usize).max(1);
        let scale = dt / substeps as f64;
        let mut entries = Vec::new();
        for j in 0..a.ncols() {
            for i in 0..a.nrows() {
                let v = a[(i, j)];
                if v != 0.0 {
                    entries.push((i as u32, j as u32, v * scale));
                }
            }
        }
        Ok(Self {
            dim: a.nrows(),
            substeps,
            entries,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Overwrite `v` with `e^{dt·A} v`.
    pub fn apply(&self, v: &mut [f64]) {
        assert_eq!(v.len(), self.dim, "vector length mismatch");
        let mut term = vec![0.0; self.dim];
        let mut next = vec![0.0; self.dim];
        for _ in 0..self.substeps {
            term.copy_from_slice(v);
            // with the substep norm <= 1/2 the series is down to rounding
            // well before the cap
            for k in 1..=24u32 {
                next.iter_mut().for_each(|x| *x = 0.0);
                for &(i, j, w) in &self.entries {
                    next[i as usize] += w * term[j as usize];
                }
                let inv = 1.0 / k as f64;
                let mut tmax = 0.0f64;
                let mut vmax = 0.0f64;
                for idx in 0..self.dim {
                    term[idx] = next[idx] * inv;
                    v[idx] += term[idx];
                    tmax = tmax.max(term[idx].abs());
                    vmax = vmax.max(v[idx].abs());
                }
                if tmax <= 1e-16 * vmax {
                    break;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: Taylor series on a halved argument, squared back.
    fn expm_taylor(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut s = 0u32;
        let mut nrm = norm1(a);
        while nrm > 0.25 {
            nrm /= 2.0;
            s += 1;
        }
        let scaled = a * (0.5f64).powi(s as i32);
        let mut sum = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..=50 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        let mut r = sum;
        for _ in 0..s {
            r = &r * &r;
        }
        r
    }

    #[test]
    fn zero_matrix_gives_identity() {
        let z = DMatrix::zeros(4, 4);
        let e = expm(&z).unwrap();
        assert_relative_eq!(e, DMatrix::identity(4, 4), epsilon = 1e-15);
    }

    #[test]
    fn lower_triangular_two_state_chain_closed_form() {
        // A = [[-1, 0], [1, -1]]: e^{tA} = [[e^-t, 0], [t e^-t, e^-t]]
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, -1.0]);
        for &t in &[0.1, 1.0, 3.7, 12.0] {
            let e = expm_t(&a, t).unwrap();
            let et = (-t).exp();
            assert_relative_eq!(e[(0, 0)], et, max_relative = 1e-13);
            assert_relative_eq!(e[(0, 1)], 0.0, epsilon = 1e-16);
            assert_relative_eq!(e[(1, 0)], t * et, max_relative = 1e-12);
            assert_relative_eq!(e[(1, 1)], et, max_relative = 1e-13);
        }
    }

    #[test]
    fn matches_taylor_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 2 + trial % 6;
            let scale = [0.05, 1.0, 8.0][trial % 3];
            let a = DMatrix::from_fn(n, n, |_, _| scale * (rng.gen::<f64>() - 0.5));
            let e1 = expm(&a).unwrap();
            let e2 = expm_taylor(&a);
            let dev = norm1(&(&e1 - &e2)) / norm1(&e1).max(1.0);
            assert!(dev < 1e-12, "trial {trial}: dev {dev}");
        }
    }

    #[test]
    fn generator_exponential_has_unit_column_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let mut a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { rng.gen::<f64>() });
        for j in 0..n {
            let col_sum: f64 = (0..n).filter(|&i| i != j).map(|i| a[(i, j)]).sum();
            a[(j, j)] = -col_sum;
        }
        let e = expm_t(&a, 2.5).unwrap();
        for j in 0..n {
            let s: f64 = (0..n).map(|i| e[(i, j)]).sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-13);
        }
        // entries of a stochastic propagator are probabilities
        assert!(e.iter().all(|&x| (-1e-14..=1.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn semigroup_property_under_squaring_path() {
        let a = DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 0.0, 2.0, -3.0, 4.0, 0.0, 2.0, -4.0]);
        let e1 = expm_t(&a, 1.0).unwrap();
        let e2 = expm_t(&a, 2.0).unwrap();
        assert_relative_eq!(&e1 * &e1, e2, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_square_and_non_finite() {
        assert!(expm(&DMatrix::zeros(2, 3)).is_err());
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 0)] = f64::NAN;
        assert!(expm(&a).is_err());
    }

    #[test]
    fn sparse_action_matches_dense_exponential() {
        use nalgebra::DVector;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for &(n, dt) in &[(6usize, 0.08), (40, 0.9), (25, 3.0)] {
            // sparse random generator: directed ring plus a few extra edges
            let mut a = DMatrix::zeros(n, n);
            for j in 0..n {
                a[((j + 1) % n, j)] = 0.3 + rng.gen::<f64>();
            }
            for _ in 0..n {
                let i = rng.gen_range(0..n);
                let j = rng.gen_range(0..n);
                if i != j {
                    a[(i, j)] += rng.gen::<f64>();
                }
            }
            for j in 0..n {
                let col: f64 = (0..n).filter(|&i| i != j).map(|i| a[(i, j)]).sum();
                a[(j, j)] = -col;
            }
            let dense = expm_t(&a, dt).unwrap();
            let action = ExpmAction::new(&a, dt).unwrap();
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let expected = &dense * DVector::from_column_slice(&v);
            action.apply(&mut v);
            for i in 0..n {
                assert_relative_eq!(v[i], expected[i], epsilon = 1e-13, max_relative = 1e-12);
            }
        }
    }
}
