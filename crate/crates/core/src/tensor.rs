//! N-dimensional f64 tensor used by the tape engine.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tape::NodeId;

/// Dense row-major tensor of 64-bit floats. A tensor that came off a tape
/// keeps a handle to the node that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                details: format!("shape {:?} needs {} values, got {}", shape, numel, values.len()),
            });
        }
        Ok(Tensor {
            shape,
            values,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            node: None,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![v; numel],
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            node: None,
        }
    }

    /// [1, H, W] tensor from a grid.
    pub fn from_grid(g: &Grid) -> Self {
        Tensor {
            shape: vec![1, g.height(), g.width()],
            values: g.values().to_vec(),
            node: None,
        }
    }

    /// Interpret a [H, W] or [1, H, W] tensor as a grid.
    pub fn to_grid(&self) -> Result<Grid> {
        let (h, w) = match self.shape.as_slice() {
            [h, w] => (*h, *w),
            [1, h, w] => (*h, *w),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "to_grid",
                    details: format!("expected [H,W] or [1,H,W], got {:?}", other),
                })
            }
        };
        Grid::from_vec(h, w, self.values.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.values[0])
        } else {
            Err(Error::NonScalarLoss(self.shape.clone()))
        }
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }
}
