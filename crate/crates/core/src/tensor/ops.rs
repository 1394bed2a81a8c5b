//! Forward-only tensor operations.

use rand::Rng;
use rand::RngCore;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Lower bound of the uniform weight initializer.
pub const INIT_LOW: f64 = -0.05;
/// Upper bound of the uniform weight initializer.
pub const INIT_HIGH: f64 = 0.05;

/// `W x`, with `W` of shape `[m, n]` and `x` of length `n`.
pub fn matvec<T: Real>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if !w.is_matrix() || !x.is_vector() || w.cols() != x.len() {
        return Err(Error::shape(
            "matvec",
            format!("W {:?} cannot multiply x {:?}", w.shape(), x.shape()),
        ));
    }
    let xs = x.data();
    let out = (0..w.rows())
        .map(|i| {
            let mut acc = T::zero();
            for (&a, &b) in w.row(i).iter().zip(xs) {
                acc += a * b;
            }
            acc
        })
        .collect();
    Ok(Tensor::from_vec(out))
}

/// `W x + b`.
pub fn affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matvec(w, x)?;
    if b.shape() != y.shape() {
        return Err(Error::shape(
            "affine",
            format!(
                "bias {:?} does not match output {:?} (W {:?}, x {:?})",
                b.shape(),
                y.shape(),
                w.shape(),
                x.shape()
            ),
        ));
    }
    y.add_assign(b);
    Ok(y)
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn activation<T: Real>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Max-subtracted softmax. Masked-out entries (`mask[i] == false`) get exactly 0.
pub fn softmax_stable<T: Real>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let data = x.data();
    if let Some(m) = mask {
        if m.len() != data.len() {
            return Err(Error::shape(
                "softmax",
                format!("mask length {} vs input length {}", m.len(), data.len()),
            ));
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..data.len())
        .filter(|&i| keep(i))
        .map(|i| data[i])
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(Error::EmptyAttention)?;
    let mut out = vec![T::zero(); data.len()];
    let mut total = T::zero();
    for (i, o) in out.iter_mut().enumerate() {
        if keep(i) {
            *o = (data[i] - max).exp();
            total += *o;
        }
    }
    for o in &mut out {
        *o = *o / total;
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Inverted-dropout multipliers: 0 with probability `rate`, `1/(1-rate)` otherwise.
pub fn dropout_mask<T: Real, R: RngCore + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

pub fn dropout_apply<T: Real, R: RngCore + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T, R>(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// I.i.d. uniform values in `[low, high]`.
pub fn uniform_init<T: Real, R: RngCore + ?Sized>(
    shape: &[usize],
    low: f64,
    high: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if low >= high || low.is_nan() || high.is_nan() {
        return Err(Error::Config(format!(
            "uniform_init needs low < high, got [{low}, {high}]"
        )));
    }
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(low..=high))).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Bias initializer: a constant tensor (zero unless a gate needs otherwise).
pub fn constant_init<T: Real>(shape: &[usize], value: f64) -> Tensor<T> {
    Tensor::full(shape, T::lit(value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(x.to_vec())
    }

    #[test]
    fn affine_examples() {
        let eye = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero_b = v(&[0.0, 0.0]);
        assert_eq!(affine(&v(&[1.0, 2.0]), &eye, &zero_b).unwrap().data(), &[1.0, 2.0]);

        let zero_w = Tensor::<f64>::zeros(&[2, 2]);
        assert_eq!(
            affine(&v(&[7.0, -1.0]), &zero_w, &v(&[3.0, 4.0])).unwrap().data(),
            &[3.0, 4.0]
        );

        let w = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(affine(&v(&[1.0, 1.0]), &w, &zero_b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn affine_shape_error_names_shapes() {
        let w = Tensor::<f64>::zeros(&[2, 3]);
        let err = affine(&v(&[1.0, 2.0]), &w, &v(&[0.0, 0.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn activation_examples() {
        assert_eq!(activation(Activation::Tanh, &v(&[0.0])).data(), &[0.0]);
        assert_eq!(activation(Activation::Sigmoid, &v(&[0.0])).data(), &[0.5]);
        assert_eq!(activation(Activation::Tanh, &v(&[1000.0])).data(), &[1.0]);
        let s = activation(Activation::Sigmoid, &v(&[-1000.0, 1000.0]));
        assert!(s.all_finite());
        assert_eq!(s.data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_stable(&v(&[0.0, 0.0, 0.0]), None).unwrap();
        for &p in s.data() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
        let s = softmax_stable(&v(&[2f64.ln(), 0.0]), None).unwrap();
        assert_abs_diff_eq!(s.data()[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 1.0 / 3.0, epsilon = 1e-12);

        // direct evaluation of the masked case
        let e5 = 5f64.exp();
        let e7 = 7f64.exp();
        let s = softmax_stable(&v(&[5.0, 9.0, 7.0]), Some(&[true, false, true])).unwrap();
        assert_abs_diff_eq!(s.data()[0], e5 / (e5 + e7), epsilon = 1e-12);
        assert_eq!(s.data()[1], 0.0);
        assert_abs_diff_eq!(s.data()[2], e7 / (e5 + e7), epsilon = 1e-12);
    }

    #[test]
    fn softmax_all_masked_is_an_error() {
        let err = softmax_stable(&v(&[1.0, 2.0]), Some(&[false, false])).unwrap_err();
        assert_eq!(err.to_string(), "attention over empty set");
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = v(&[1.0, -2.0, 3.0]);
        assert_eq!(dropout_apply(&x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(dropout_apply(&x, 0.0, true, &mut rng).unwrap(), x);
        assert!(dropout_apply(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_seed_deterministic() {
        let x = Tensor::<f64>::full(&[64], 1.0);
        let a = dropout_apply(&x, 0.5, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = dropout_apply(&x, 0.5, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Monte-Carlo mean over many seeds.
        let x = v(&[1.0, -3.0, 0.5, 2.0]);
        let trials = 50_000;
        let mut sums = [0.0; 4];
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = dropout_apply(&x, 0.5, true, &mut rng).unwrap();
            for (s, &v) in sums.iter_mut().zip(y.data()) {
                *s += v;
            }
        }
        for (s, &want) in sums.iter().zip(x.data()) {
            let mean = s / trials as f64;
            assert!((mean - want).abs() <= 0.02 * want.abs(), "mean {mean} vs {want}");
        }
    }

    #[test]
    fn uniform_init_bounds_and_determinism() {
        let a: Tensor<f32> = uniform_init(&[30, 40], INIT_LOW, INIT_HIGH, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(a.data().iter().all(|&v| (-0.05..=0.05).contains(&v)));
        let b: Tensor<f32> = uniform_init(&[30, 40], INIT_LOW, INIT_HIGH, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let bias: Tensor<f32> = constant_init(&[7], 0.0);
        assert!(bias.data().iter().all(|&v| v == 0.0));
        assert!(uniform_init::<f32, _>(&[2], 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }
}
