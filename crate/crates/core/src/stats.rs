//! Exactly rounded floating-point summation.

use alloc::vec::Vec;

/// Sum of `values` rounded once to the nearest `f64`.
///
/// Uses Shewchuk's non-overlapping partials. Because the result depends only
/// on the exact real sum, summing every value twice gives exactly twice the
/// result.
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                core::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the partials to a single value, handling the half-way case.
    let Some(mut hi) = partials.pop() else { return 0.0 };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cancels_exactly() {
        assert_eq!(exact_sum(&[1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum(&[0.1; 10]), 1.0);
        assert_eq!(exact_sum(&[]), 0.0);
    }

    proptest! {
        #[test]
        fn duplicating_doubles(xs in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let mut twice = xs.clone();
            twice.extend_from_slice(&xs);
            prop_assert_eq!(exact_sum(&twice), 2.0 * exact_sum(&xs));
        }

        #[test]
        fn order_independent(mut xs in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let a = exact_sum(&xs);
            xs.reverse();
            prop_assert_eq!(a, exact_sum(&xs));
        }
    }
}
