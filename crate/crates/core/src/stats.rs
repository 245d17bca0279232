//! Summation and sample-statistics utilities.

use nalgebra::{DMatrix, DVector};

/// Exact running sum kept as non-overlapping partials; [`ExactSum::value`]
/// is the correctly rounded total, so any summation order gives the same
/// bits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    #[inline]
    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    /// Adds the exact product `x · n` (split with a fused multiply-add).
    #[inline]
    pub fn add_product(&mut self, x: f64, n: usize) {
        if n == 0 {
            return;
        }
        let n = n as f64;
        let p = x * n;
        let e = x.mul_add(n, -p);
        self.add(p);
        if e != 0.0 {
            self.add(e);
        }
    }

    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let Some(mut n) = p.len().checked_sub(1) else {
            return 0.0;
        };
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        // Round half to even across the remaining partials.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

/// Column means of an `R × d` sample matrix (one sample per row).
pub fn mean(samples: &DMatrix<f64>) -> DVector<f64> {
    let r = samples.nrows() as f64;
    DVector::from_iterator(
        samples.ncols(),
        samples.column_iter().map(|c| c.iter().sum::<f64>() / r),
    )
}

/// Unbiased sample covariance of the rows of `samples`.
pub fn covariance(samples: &DMatrix<f64>) -> DMatrix<f64> {
    cross_covariance(samples, samples)
}

/// Unbiased sample cross-covariance `Cov(x, y)` where row `i` of `x` and
/// row `i` of `y` are paired observations.
pub fn cross_covariance(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(x.nrows(), y.nrows());
    let r = x.nrows();
    let mx = mean(x);
    let my = mean(y);
    let cx = DMatrix::from_fn(r, x.ncols(), |i, j| x[(i, j)] - mx[j]);
    let cy = DMatrix::from_fn(r, y.ncols(), |i, j| y[(i, j)] - my[j]);
    cx.transpose() * cy / (r.max(2) - 1) as f64
}

/// Two-sample Kolmogorov-Smirnov statistic `sup_x |F_a(x) - F_b(x)|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut worst = 0.0_f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        worst = worst.max((i as f64 / na - j as f64 / nb).abs());
    }
    worst
}

/// Ordinary least squares `y ≈ slope·x + intercept`; the third value is the
/// root-mean-square residual.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    (slope, intercept, (rss / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exact_sum_is_correctly_rounded() {
        let mut s = ExactSum::default();
        for x in [1e100, 1.0, -1e100, 1e-100] {
            s.add(x);
        }
        assert_eq!(s.value(), 1.0);
        let mut s = ExactSum::default();
        (0..10).for_each(|_| s.add(0.1));
        assert_eq!(s.value(), 1.0);

        // LCG mantissas scaled by 2^e, e in [-60, 60]; the correctly rounded
        // total was computed independently with an exact-summation routine.
        let mut state: u64 = 12345;
        let mut s = ExactSum::default();
        let mut naive = 0.0;
        for _ in 0..2000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = ((state >> 33) as i64 - (1 << 30)) as f64;
            let e = ((state >> 10) % 121) as i64 - 60;
            let x = v * f64::from_bits(((1023 + e) as u64) << 52);
            s.add(x);
            naive += x;
        }
        assert_eq!(s.value(), -7.393178138565856e26);
        assert_eq!(naive, -7.39317813856587e26);
    }

    #[test]
    fn exact_products_match_repeated_addition() {
        let x = 0.1 + 1e-17;
        let mut a = ExactSum::default();
        let mut b = ExactSum::default();
        a.add_product(x, 1000);
        a.add_product(-x / 3.0, 7);
        (0..1000).for_each(|_| b.add(x));
        (0..7).for_each(|_| b.add(-x / 3.0));
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn covariance_of_known_pairs() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0]);
        let c = covariance(&x);
        assert_abs_diff_eq!(c[(0, 0)], 5.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c[(0, 1)], 10.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c[(1, 1)], 20.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn ks_of_identical_and_disjoint_samples() {
        assert_eq!(ks_distance(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), 0.0);
        assert_eq!(ks_distance(&[0.0, 0.1], &[5.0, 6.0]), 1.0);
    }

    #[test]
    fn exact_line_has_zero_residual() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| -0.5 * v + 2.0).collect();
        let (s, i, r) = linear_fit(&x, &y);
        assert_abs_diff_eq!(s, -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(i, 2.0, epsilon = 1e-15);
        assert!(r < 1e-15);
    }
}
