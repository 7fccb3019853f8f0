use num_rational::Ratio;
use num_traits::ToPrimitive;

use super::ShapleyError;

/// Exact Shapley weight `s!(n-s-1)!/n!` for a coalition of size `s` that
/// excludes the player, among `n` players.
///
/// Computed through the identity `1 / (n * C(n-1, s))`, which stays inside
/// `u128` for every `n` the enumeration supports.
pub fn shapley_weight(s: usize, n: usize) -> Result<Ratio<u128>, ShapleyError> {
    if n == 0 || s >= n {
        return Err(ShapleyError::InvalidSize { size: s, players: n });
    }
    let denom = (n as u128)
        .checked_mul(binomial(n as u128 - 1, s as u128).ok_or(ShapleyError::Overflow)?)
        .ok_or(ShapleyError::Overflow)?;
    Ok(Ratio::new(1, denom))
}

/// `shapley_weight(s, n)` as `f64` for every size `0..n`.
pub(crate) fn weight_table(n: usize) -> Result<Vec<f64>, ShapleyError> {
    (0..n)
        .map(|s| {
            let w = shapley_weight(s, n)?;
            // numerator is always 1
            Ok(1.0 / w.denom().to_f64().ok_or(ShapleyError::Overflow)?)
        })
        .collect()
}

fn binomial(n: u128, k: u128) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u128) -> u128 {
        (1..=n).product()
    }

    #[test]
    fn small_cases() {
        assert_eq!(shapley_weight(0, 2).unwrap(), Ratio::new(1, 2));
        assert_eq!(shapley_weight(0, 1).unwrap(), Ratio::new(1, 1));
        assert_eq!(shapley_weight(1, 3).unwrap(), Ratio::new(1, 6));
    }

    #[test]
    fn invalid_sizes() {
        assert!(matches!(shapley_weight(2, 2), Err(ShapleyError::InvalidSize { .. })));
        assert!(matches!(shapley_weight(0, 0), Err(ShapleyError::InvalidSize { .. })));
    }

    #[test]
    fn matches_factorial_formula() {
        for n in 1..=20u128 {
            for s in 0..n {
                let expected = Ratio::new(factorial(s) * factorial(n - s - 1), factorial(n));
                assert_eq!(shapley_weight(s as usize, n as usize).unwrap(), expected, "s={s} n={n}");
            }
        }
    }

    #[test]
    fn weights_over_all_subsets_sum_to_one() {
        for n in 1..=12usize {
            let mut total = Ratio::new(0u128, 1);
            for bits in 0..1u64 << (n - 1) {
                total += shapley_weight(bits.count_ones() as usize, n).unwrap();
            }
            assert_eq!(total, Ratio::new(1, 1), "n={n}");
        }
    }

    #[test]
    fn large_n_does_not_overflow() {
        for s in 0..24 {
            shapley_weight(s, 24).unwrap();
        }
    }
}
