use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::scalar::Real;

/// Fill pattern for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform on `[low, high)`.
    Uniform { low: f64, high: f64, seed: u64 },
    Gaussian { mean: f64, std: f64, seed: u64 },
}

/// Dense row-major array. Four-dimensional tensors are laid out as
/// `(batch, channel, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        let len = validate_shape(shape)?;
        let data = match init {
            Init::Zeros => vec![T::ZERO; len],
            Init::Constant(c) => {
                if !c.is_finite() {
                    return Err(TensorError::InvalidArgument(format!(
                        "constant fill must be finite, got {c}"
                    )));
                }
                vec![T::from_f64(c); len]
            }
            Init::Uniform { low, high, seed } => {
                if !(low.is_finite() && high.is_finite() && low <= high) {
                    return Err(TensorError::InvalidArgument(format!(
                        "bad uniform bounds [{low}, {high})"
                    )));
                }
                let mut rng = Rng::new(seed);
                (0..len)
                    .map(|_| T::from_f64(rng.uniform_range(low, high)))
                    .collect()
            }
            Init::Gaussian { mean, std, seed } => {
                if !(mean.is_finite() && std.is_finite() && std >= 0.0) {
                    return Err(TensorError::InvalidArgument(format!(
                        "bad gaussian parameters mean={mean} std={std}"
                    )));
                }
                let mut rng = Rng::new(seed);
                (0..len)
                    .map(|_| T::from_f64(mean + std * rng.normal()))
                    .collect()
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Zeros)
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected: len,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Caller guarantees `shape` is valid and matches `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected: len,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let rows = self.shape[0];
        if start >= end || end > rows {
            return Err(TensorError::InvalidArgument(format!(
                "batch slice {start}..{end} out of range for {rows} rows"
            )));
        }
        let stride = self.data.len() / rows;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_parts(
            shape,
            self.data[start * stride..end * stride].to_vec(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_constant() {
        let z = Tensor::<f32>::create(&[2, 2], Init::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::<f32>::create(&[3], Init::Constant(1.5)).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn seeded_uniform_is_reproducible() {
        let init = Init::Uniform {
            low: 0.0,
            high: 1.0,
            seed: 7,
        };
        let a = Tensor::<f32>::create(&[4], init).unwrap();
        let b = Tensor::<f32>::create(&[4], init).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn creation_errors() {
        assert_eq!(
            Tensor::<f32>::create(&[], Init::Zeros),
            Err(TensorError::EmptyShape)
        );
        assert!(matches!(
            Tensor::<f32>::create(&[2, 0], Init::Zeros),
            Err(TensorError::ZeroExtent(_))
        ));
        assert!(Tensor::<f32>::create(&[2], Init::Constant(f64::NAN)).is_err());
        assert!(Tensor::<f32>::create(&[2], Init::Constant(f64::INFINITY)).is_err());
        assert!(matches!(
            Tensor::<f32>::from_vec(&[3], vec![1.0, 2.0]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(Tensor::<f32>::from_vec(&[1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::<f64>::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        let r = t.clone().reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4]).is_err());
    }

    #[test]
    fn batch_slice() {
        let t = Tensor::<f32>::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = t.slice_batch(1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[3., 4., 5., 6.]);
    }
}
