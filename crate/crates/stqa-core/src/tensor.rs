//! N-dimensional tensor value type.
//!
//! A `Tensor` is a row-major `f64` buffer plus shape metadata. It is the unit
//! of parameter storage and the leaf type fed into a [`crate::tape::Tape`];
//! gradients for leaves are written back into the optional `grad` buffer.

use rand::Rng;

use crate::error::{EngineError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from raw row-major data. Fails if the element count
    /// does not match the shape product or any extent is zero.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(EngineError::Dimension {
                op: "tensor",
                msg: format!("zero extent in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(EngineError::Dimension {
                op: "tensor",
                msg: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn uniform_init<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform values in [lo, hi), independent of any fan-in convention.
    pub fn uniform_range<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(EngineError::Contract(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat index of a multi-index under row-major layout.
pub fn flat_index(coords: &[usize], shape: &[usize]) -> usize {
    let mut idx = 0;
    for (c, e) in coords.iter().zip(shape) {
        idx = idx * e + c;
    }
    idx
}

/// Decompose a flat index into coordinates for a shape.
pub fn unflatten(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut coords = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        coords[d] = flat % shape[d];
        flat /= shape[d];
    }
    coords
}

/// Broadcast output shape under numpy rules: shapes align right, extents must
/// match or be 1.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        if da != db && da != 1 && db != 1 {
            return Err(EngineError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_matches_data_len() {
        let t = Tensor::from_vec(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(4.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 4.5);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(flat_index(&[1, 2, 3], &[2, 3, 4]), 23);
        assert_eq!(unflatten(23, &[2, 3, 4]), vec![1, 2, 3]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[4, 1], &[4, 5]).unwrap(), vec![4, 5]);
        assert_eq!(broadcast_shape("t", &[5], &[3, 5]).unwrap(), vec![3, 5]);
        assert_eq!(
            broadcast_shape("t", &[2, 2, 2, 4], &[1, 1, 1, 4]).unwrap(),
            vec![2, 2, 2, 4]
        );
        assert!(broadcast_shape("t", &[3], &[4]).is_err());
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::uniform_init(vec![16, 16], 16, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(t.data().iter().all(|v| v.abs() < bound));
    }
}
