/// Compensated (Neumaier) summation.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Round half up with a floor of one, used for all class sizes.
pub fn round_size(x: f64) -> usize {
    ((x + 0.5).floor().max(1.0)) as usize
}

/// Formats a real with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_of_many_reciprocals() {
        let n = 14_400;
        let total = neumaier_sum(std::iter::repeat(1.0 / n as f64).take(n));
        assert!((total - 1.0).abs() <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_size(0.4), 1);
        assert_eq!(round_size(0.0), 1);
        assert_eq!(round_size(2.5), 3);
        assert_eq!(round_size(2.49), 2);
        assert_eq!(round_size(1800.0), 1800);
    }

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, 0.96f64.powi(12), -1.5e-300, 0.0] {
            let s = fmt17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn slope_of_a_line() {
        let xs = [1.0, 2.0, 3.0];
        let ys = [3.0, 5.0, 7.0];
        assert!((ls_slope(&xs, &ys).unwrap() - 2.0).abs() < 1e-15);
        assert!(ls_slope(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }
}
