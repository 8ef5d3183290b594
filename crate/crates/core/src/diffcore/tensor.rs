use crate::error::{Error, Result};

/// Dense row-major tensor. Rank 1 and 2 are the only shapes the ops need,
/// but the shape is kept as a vector so scalars ([1]) and matrices ([r, c])
/// share one type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    /// Accumulated gradient, same layout as `values`. `None` until a
    /// backward pass (or `zero_grads`) materializes it.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::Shape {
                op: "from_values",
                detail: format!("shape {:?} wants {} values, got {}", shape, len, values.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Matrix from nested rows; every row must have the same width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("from_rows: need at least one row".into()));
        }
        let cols = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    detail: format!("row {} has width {}, expected {}", i, r.len(), cols),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows of a rank-2 tensor (a rank-1 tensor counts as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            self.shape[0]
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }
}

/// Which learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// The embedding adapter (trained with the smaller rate).
    Embedding,
    /// Everything else: graph layers and the label-propagation baseline.
    Gnn,
}

/// A named, trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Flat registry of all trainable parameters of a model. Ids are dense
/// indices, so optimizer state can live in parallel vectors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, mut tensor: Tensor) -> ParamId {
        tensor.requires_grad = true;
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            group,
            tensor,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Materialize every gradient as zeros.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = Some(vec![0.0; p.tensor.len()]);
        }
    }

    /// Drop all gradients back to `None`.
    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_values_checks_len() {
        assert!(Tensor::from_values(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_values(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn from_rows_rejects_ragged() {
        let ok = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(ok.shape, vec![2, 2]);
        assert_eq!(ok.at(1, 0), 3.0);
        assert!(Tensor::from_rows(&[vec![1.0], vec![2.0, 3.0]]).is_err());
    }

    #[test]
    fn param_set_ids_are_dense() {
        let mut set = ParamSet::new();
        let a = set.add("a", ParamGroup::Gnn, Tensor::zeros(&[2]));
        let b = set.add("b", ParamGroup::Embedding, Tensor::zeros(&[3]));
        assert_eq!(a, ParamId(0));
        assert_eq!(b, ParamId(1));
        assert_eq!(set.find("b"), Some(b));
        assert!(set.get(a).tensor.requires_grad);
        assert_eq!(set.scalar_count(), 5);
    }

    #[test]
    fn zero_and_clear_grads() {
        let mut set = ParamSet::new();
        let a = set.add("a", ParamGroup::Gnn, Tensor::zeros(&[2, 2]));
        set.zero_grads();
        assert_eq!(set.get(a).tensor.grad.as_deref(), Some(&[0.0; 4][..]));
        set.clear_grads();
        assert!(set.get(a).tensor.grad.is_none());
    }
}
