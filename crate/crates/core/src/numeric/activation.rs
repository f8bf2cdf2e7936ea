use super::Scalar;

/// Logistic function, evaluated so that neither tail overflows.
#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub fn tanh_act<S: Scalar>(x: S) -> S {
    x.tanh()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert!(!sigmoid(-1000.0f64).is_nan());
        // 1/(1+e^-1), from mpmath at 30 digits: 0.731058578630004879251159241822
        assert!((sigmoid(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((sigmoid(1.0f32) - 0.731_058_6).abs() < 1e-7);
    }

    #[test]
    fn tanh_examples() {
        assert_eq!(tanh_act(0.0f64), 0.0);
        // mpmath: tanh(1) = 0.761594155955764888119458282605
        assert!((tanh_act(1.0f64) - 0.761_594_155_955_764_9).abs() < 1e-15);
        for x in [0.1, 0.7, 3.0, 25.0] {
            assert_eq!(tanh_act(-x), -tanh_act(x));
        }
    }

    proptest::proptest! {
        #[test]
        fn sigmoid_is_symmetric(x in -50.0f64..=50.0) {
            proptest::prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= f64::EPSILON);
            let y = x as f32;
            proptest::prop_assert!((sigmoid(y) + sigmoid(-y) - 1.0).abs() <= f32::EPSILON);
        }

        #[test]
        fn outputs_in_range(x in -1e4f64..1e4) {
            let s = sigmoid(x);
            proptest::prop_assert!((0.0..=1.0).contains(&s));
            proptest::prop_assert!(tanh_act(x).abs() <= 1.0);
        }
    }
}
