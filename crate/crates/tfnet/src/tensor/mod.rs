//! Dense-tensor reverse-mode autodiff on a flat tape.
//!
//! Every forward op appends one record; backward walks the records in
//! reverse id order, so replay is deterministic and each record is
//! visited exactly once. Values are f64 throughout.

mod adam;
mod checkpoint;
mod gradcheck;
mod gru;
mod params;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_params, save_params, CheckpointError};
pub use gradcheck::{gradcheck_scalar_fn, run_op_suite, GradcheckReport};
pub use gru::{gru_cell, GruParamIds};
pub use params::{Param, ParamBindings, ParamStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("degenerate input to {0}: vector norm below 1e-12")]
    DegenerateInput(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    /// mul * a + add, elementwise with scalar constants. Only the
    /// multiplier matters to the backward pass.
    AffineScalar {
        a: TensorId,
        mul: f64,
    },
    /// a * s where s is a scalar tensor, broadcast over a.
    MulBroadcastScalar {
        a: TensorId,
        s: TensorId,
    },
    AddRowBroadcast {
        a: TensorId,
        v: TensorId,
    },
    SubRowBroadcast {
        a: TensorId,
        v: TensorId,
    },
    Act {
        a: TensorId,
        kind: Activation,
    },
    MaxPoolRows {
        a: TensorId,
        argmax: Vec<usize>,
    },
    MeanRows {
        a: TensorId,
    },
    ConcatColsBroadcast {
        a: TensorId,
        v: TensorId,
    },
    ConcatVec {
        a: TensorId,
        b: TensorId,
    },
    Slice {
        a: TensorId,
        start: usize,
    },
    GatherRows {
        a: TensorId,
        rows: Vec<usize>,
    },
    Sum {
        a: TensorId,
    },
    Huber {
        pred: TensorId,
        target: TensorId,
        delta: f64,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        label: usize,
    },
    SoftmaxCrossEntropyRows {
        logits: TensorId,
        labels: Vec<usize>,
    },
    CosineDistance {
        a: TensorId,
        b: TensorId,
    },
    /// 8 box corners (24 values, row-major x,y,z) from center (3), size
    /// (h,w,l) and heading about the y axis.
    BoxCorners {
        center: TensorId,
        size: TensorId,
        theta: TensorId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tensor id.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        let g = &self.grads[id.0];
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Corner sign pattern shared with the geometry module: index k maps to
/// (sx, sy, sz) with sx,sz in {-1,+1} over (l, w) and sy in {0,-1} over h.
pub(crate) const CORNER_SIGNS: [(f64, f64, f64); 8] = [
    (1.0, 0.0, 1.0),
    (1.0, 0.0, -1.0),
    (-1.0, 0.0, -1.0),
    (-1.0, 0.0, 1.0),
    (1.0, -1.0, 1.0),
    (1.0, -1.0, -1.0),
    (-1.0, -1.0, -1.0),
    (-1.0, -1.0, 1.0),
];

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].values[0]
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf; never receives gradient.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> TensorId {
        self.push(shape.to_vec(), values, Op::Leaf, false)
    }

    /// Leaf that participates in backward.
    pub fn param(&mut self, shape: &[usize], values: Vec<f64>) -> TensorId {
        self.push(shape.to_vec(), values, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(&[1], vec![v])
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = match sa.as_slice() {
            [m, k] => (*m, *k),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let (k2, n, vec_rhs) = match sb.as_slice() {
            [k2, n] => (*k2, *n, false),
            [k2] => (*k2, 1, true),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += x * bv[p * n + j];
                }
            }
        }
        let shape = if vec_rhs { vec![m] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul { a, b }, rg))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    pub fn affine(&mut self, a: TensorId, mul: f64, add: f64) -> TensorId {
        let out: Vec<f64> = self.values(a).iter().map(|x| mul * x + add).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::AffineScalar { a, mul }, rg)
    }

    pub fn mul_scalar_tensor(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.values(s).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_scalar_tensor",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.scalar_value(s);
        let out: Vec<f64> = self.values(a).iter().map(|x| x * sv).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulBroadcastScalar { a, s }, rg))
    }

    fn row_broadcast_check(
        &self,
        op: &'static str,
        a: TensorId,
        v: TensorId,
    ) -> Result<(usize, usize)> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        match (sa, sv) {
            ([n, c], [c2]) if c == c2 => Ok((*n, *c)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sv.to_vec(),
            }),
        }
    }

    /// (n,c) + (c) broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (n, c) = self.row_broadcast_check("add_row_broadcast", a, v)?;
        let av = self.values(a);
        let vv = self.values(v);
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                out.push(av[i * c + j] + vv[j]);
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(vec![n, c], out, Op::AddRowBroadcast { a, v }, rg))
    }

    /// (n,c) - (c) broadcast over rows.
    pub fn sub_row_broadcast(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (n, c) = self.row_broadcast_check("sub_row_broadcast", a, v)?;
        let av = self.values(a);
        let vv = self.values(v);
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                out.push(av[i * c + j] - vv[j]);
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(vec![n, c], out, Op::SubRowBroadcast { a, v }, rg))
    }

    pub fn activation(&mut self, a: TensorId, kind: Activation) -> TensorId {
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .map(|&x| match kind {
                Activation::Relu => x.max(0.0),
                Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                Activation::Tanh => x.tanh(),
            })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Act { a, kind }, rg)
    }

    /// Column-wise max over the rows of (n,c); ties go to the first row.
    pub fn reduce_max_over_points(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, c) = match self.shape(a) {
            [n, c] => (*n, *c),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "reduce_max_over_points",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if n == 0 {
            return Err(TensorError::EmptyInput("reduce_max_over_points"));
        }
        let av = self.values(a);
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for i in 0..n {
            for j in 0..c {
                let x = av[i * c + j];
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c], out, Op::MaxPoolRows { a, argmax }, rg))
    }

    /// Column-wise mean over the rows of (n,c).
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, c) = match self.shape(a) {
            [n, c] => (*n, *c),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "mean_rows",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if n == 0 {
            return Err(TensorError::EmptyInput("mean_rows"));
        }
        let av = self.values(a);
        let mut out = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c], out, Op::MeanRows { a }, rg))
    }

    /// Append vector v to every row of (n,c), giving (n,c+k).
    pub fn concat_cols_broadcast(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (sa, sv) = (self.shape(a).to_vec(), self.shape(v).to_vec());
        let ((n, c), k) = match (sa.as_slice(), sv.as_slice()) {
            ([n, c], [k]) => ((*n, *c), *k),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols_broadcast",
                    lhs: sa,
                    rhs: sv,
                })
            }
        };
        let av = self.values(a);
        let vv = self.values(v);
        let mut out = Vec::with_capacity(n * (c + k));
        for i in 0..n {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
            out.extend_from_slice(vv);
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(vec![n, c + k], out, Op::ConcatColsBroadcast { a, v }, rg))
    }

    /// Concatenate two 1-D tensors.
    pub fn concat_vec(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a).len() != 1 || self.shape(b).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_vec",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = self.values(a).to_vec();
        out.extend_from_slice(self.values(b));
        let len = out.len();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![len], out, Op::ConcatVec { a, b }, rg))
    }

    /// 1-D slice [start, start+len).
    pub fn slice(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let total = self.values(a).len();
        if self.shape(a).len() != 1 || start + len > total {
            return Err(TensorError::InvalidArgument(format!(
                "slice [{start}, {}) out of bounds for length {total}",
                start + len
            )));
        }
        let out = self.values(a)[start..start + len].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![len], out, Op::Slice { a, start }, rg))
    }

    /// Select rows of (n,c) by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> Result<TensorId> {
        let (n, c) = match self.shape(a) {
            [n, c] => (*n, *c),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_rows",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if rows.iter().any(|&r| r >= n) {
            return Err(TensorError::InvalidArgument(format!(
                "gather_rows index out of bounds (n = {n})"
            )));
        }
        let av = self.values(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&av[r * c..(r + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![rows.len(), c],
            out,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.values(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum { a }, rg)
    }

    /// Mean over elements of 0.5 r^2 for |r| <= delta else delta(|r| - delta/2).
    pub fn huber_loss(&mut self, pred: TensorId, target: TensorId, delta: f64) -> Result<TensorId> {
        self.binary_same_shape("huber_loss", pred, target)?;
        if delta <= 0.0 {
            return Err(TensorError::InvalidArgument(format!(
                "huber delta must be positive, got {delta}"
            )));
        }
        let mut acc = 0.0;
        let len = self.values(pred).len();
        for (p, t) in self.values(pred).iter().zip(self.values(target)) {
            let r = p - t;
            acc += if r.abs() <= delta {
                0.5 * r * r
            } else {
                delta * (r.abs() - 0.5 * delta)
            };
        }
        acc /= len as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(vec![1], vec![acc], Op::Huber { pred, target, delta }, rg))
    }

    /// -log softmax(logits)[label], max-subtracted for stability.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        let k = self.values(logits).len();
        if self.shape(logits).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![],
            });
        }
        if label >= k {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let v = self.values(logits);
        let loss = softmax_ce_value(v, label);
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![loss], Op::SoftmaxCrossEntropy { logits, label }, rg))
    }

    /// Mean per-row cross entropy over (n,k) logits.
    pub fn softmax_cross_entropy_rows(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId> {
        let (n, k) = match self.shape(logits) {
            [n, k] => (*n, *k),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cross_entropy_rows",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if labels.len() != n {
            return Err(TensorError::InvalidArgument(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if n == 0 {
            return Err(TensorError::EmptyInput("softmax_cross_entropy_rows"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let v = self.values(logits);
        let mut acc = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            acc += softmax_ce_value(&v[i * k..(i + 1) * k], label);
        }
        acc /= n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![acc],
            Op::SoftmaxCrossEntropyRows {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// 1 - <a,b> / (|a| |b|). Errors when either norm is below 1e-12.
    pub fn cosine_distance(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("cosine_distance", a, b)?;
        let (av, bv) = (self.values(a), self.values(b));
        let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            return Err(TensorError::DegenerateInput("cosine_distance"));
        }
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        let loss = 1.0 - dot / (na * nb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![loss], Op::CosineDistance { a, b }, rg))
    }

    /// 8 corners (flattened to 24) of a y-down box from center (3), size
    /// (h,w,l) and heading scalar. Corner ordering matches the geometry
    /// module's `box3d_corners`.
    pub fn box_corners(
        &mut self,
        center: TensorId,
        size: TensorId,
        theta: TensorId,
    ) -> Result<TensorId> {
        if self.values(center).len() != 3
            || self.values(size).len() != 3
            || self.values(theta).len() != 1
        {
            return Err(TensorError::ShapeMismatch {
                op: "box_corners",
                lhs: self.shape(center).to_vec(),
                rhs: self.shape(size).to_vec(),
            });
        }
        let c = self.values(center).to_vec();
        let s = self.values(size).to_vec();
        let th = self.scalar_value(theta);
        let (sin, cos) = th.sin_cos();
        let (h, w, l) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(24);
        for &(sx, sy, sz) in &CORNER_SIGNS {
            let x = sx * l / 2.0;
            let z = sz * w / 2.0;
            out.push(c[0] + cos * x + sin * z);
            out.push(c[1] + sy * h);
            out.push(c[2] - sin * x + cos * z);
        }
        let rg = self.rg(center) || self.rg(size) || self.rg(theta);
        Ok(self.push(vec![24], out, Op::BoxCorners { center, size, theta }, rg))
    }

    /// Reverse pass from a scalar root. Deterministic: plain reverse id
    /// order, fixed accumulation order.
    pub fn backward(&self, root: TensorId) -> Result<Gradients> {
        if self.values(root).len() != 1 {
            return Err(TensorError::InvalidArgument(
                "backward root must be scalar".into(),
            ));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[root.0] = vec![1.0];

        for i in (0..=root.0).rev() {
            if grads[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.accumulate(i, &g, &mut grads);
            grads[i] = g;
        }
        Ok(Gradients { grads })
    }

    fn ensure(&self, grads: &mut [Vec<f64>], id: TensorId) {
        if grads[id.0].is_empty() {
            grads[id.0] = vec![0.0; self.values(id).len()];
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn accumulate(&self, i: usize, g: &[f64], grads: &mut Vec<Vec<f64>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = if self.shape(*b).len() == 2 {
                    self.shape(*b)[1]
                } else {
                    1
                };
                let av = self.values(*a);
                let bv = self.values(*b);
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    let ga = &mut grads[a.0];
                    for r in 0..m {
                        for j in 0..n {
                            let gij = g[r * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[r * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    self.ensure(grads, *b);
                    let gb = &mut grads[b.0];
                    for r in 0..m {
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += x * g[r * n + j];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &t in &[*a, *b] {
                    if self.rg(t) {
                        self.ensure(grads, t);
                        for (gt, gi) in grads[t.0].iter_mut().zip(g) {
                            *gt += gi;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    for (gt, gi) in grads[a.0].iter_mut().zip(g) {
                        *gt += gi;
                    }
                }
                if self.rg(*b) {
                    self.ensure(grads, *b);
                    for (gt, gi) in grads[b.0].iter_mut().zip(g) {
                        *gt -= gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    let bv = self.values(*b);
                    for j in 0..g.len() {
                        grads[a.0][j] += g[j] * bv[j];
                    }
                }
                if self.rg(*b) {
                    self.ensure(grads, *b);
                    let av = self.values(*a);
                    for j in 0..g.len() {
                        grads[b.0][j] += g[j] * av[j];
                    }
                }
            }
            Op::AffineScalar { a, mul } => {
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    for (gt, gi) in grads[a.0].iter_mut().zip(g) {
                        *gt += mul * gi;
                    }
                }
            }
            Op::MulBroadcastScalar { a, s } => {
                let sv = self.scalar_value(*s);
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    for (gt, gi) in grads[a.0].iter_mut().zip(g) {
                        *gt += sv * gi;
                    }
                }
                if self.rg(*s) {
                    self.ensure(grads, *s);
                    let av = self.values(*a);
                    let mut acc = 0.0;
                    for j in 0..g.len() {
                        acc += g[j] * av[j];
                    }
                    grads[s.0][0] += acc;
                }
            }
            Op::AddRowBroadcast { a, v } | Op::SubRowBroadcast { a, v } => {
                let sign = if matches!(self.nodes[i].op, Op::SubRowBroadcast { .. }) {
                    -1.0
                } else {
                    1.0
                };
                let c = self.values(*v).len();
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    for (gt, gi) in grads[a.0].iter_mut().zip(g) {
                        *gt += gi;
                    }
                }
                if self.rg(*v) {
                    self.ensure(grads, *v);
                    let gv = &mut grads[v.0];
                    for (j, gi) in g.iter().enumerate() {
                        gv[j % c] += sign * gi;
                    }
                }
            }
            Op::Act { a, kind } => {
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    let xin = self.values(*a);
                    let yout = self.values(TensorId(i));
                    for j in 0..g.len() {
                        let d = match kind {
                            Activation::Relu => {
                                if xin[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Sigmoid => yout[j] * (1.0 - yout[j]),
                            Activation::Tanh => 1.0 - yout[j] * yout[j],
                        };
                        grads[a.0][j] += d * g[j];
                    }
                }
            }
            Op::MaxPoolRows { a, argmax } => {
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    let c = argmax.len();
                    for (j, &row) in argmax.iter().enumerate() {
                        grads[a.0][row * c + j] += g[j];
                    }
                }
            }
            Op::MeanRows { a } => {
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    let c = g.len();
                    let n = self.shape(*a)[0];
                    let inv = 1.0 / n as f64;
                    let ga = &mut grads[a.0];
                    for r in 0..n {
                        for j in 0..c {
                            ga[r * c + j] += inv * g[j];
                        }
                    }
                }
            }
            Op::ConcatColsBroadcast { a, v } => {
                let c = self.shape(*a)[1];
                let k = self.values(*v).len();
                let n = self.shape(*a)[0];
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    let ga = &mut grads[a.0];
                    for r in 0..n {
                        for j in 0..c {
                            ga[r * c + j] += g[r * (c + k) + j];
                        }
                    }
                }
                if self.rg(*v) {
                    self.ensure(grads, *v);
                    let gv = &mut grads[v.0];
                    for r in 0..n {
                        for j in 0..k {
                            gv[j] += g[r * (c + k) + c + j];
                        }
                    }
                }
            }
            Op::ConcatVec { a, b } => {
                let la = self.values(*a).len();
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    for j in 0..la {
                        grads[a.0][j] += g[j];
                    }
                }
                if self.rg(*b) {
                    self.ensure(grads, *b);
                    for j in 0..self.values(*b).len() {
                        grads[b.0][j] += g[la + j];
                    }
                }
            }
            Op::Slice { a, start } => {
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    for (j, gi) in g.iter().enumerate() {
                        grads[a.0][start + j] += gi;
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    let c = self.shape(*a)[1];
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for j in 0..c {
                            grads[a.0][src_r * c + j] += g[out_r * c + j];
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    for gt in grads[a.0].iter_mut() {
                        *gt += g[0];
                    }
                }
            }
            Op::Huber { pred, target, delta } => {
                let len = self.values(*pred).len() as f64;
                let pv = self.values(*pred);
                let tv = self.values(*target);
                let scale = g[0] / len;
                if self.rg(*pred) {
                    self.ensure(grads, *pred);
                    for j in 0..pv.len() {
                        let r = pv[j] - tv[j];
                        grads[pred.0][j] += scale * r.clamp(-*delta, *delta);
                    }
                }
                if self.rg(*target) {
                    self.ensure(grads, *target);
                    for j in 0..pv.len() {
                        let r = pv[j] - tv[j];
                        grads[target.0][j] -= scale * r.clamp(-*delta, *delta);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                if self.rg(*logits) {
                    self.ensure(grads, *logits);
                    let probs = softmax(self.values(*logits));
                    for (j, p) in probs.iter().enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        grads[logits.0][j] += g[0] * (p - onehot);
                    }
                }
            }
            Op::SoftmaxCrossEntropyRows { logits, labels } => {
                if self.rg(*logits) {
                    self.ensure(grads, *logits);
                    let k = self.shape(*logits)[1];
                    let n = labels.len();
                    let v = self.values(*logits);
                    let scale = g[0] / n as f64;
                    for (r, &label) in labels.iter().enumerate() {
                        let probs = softmax(&v[r * k..(r + 1) * k]);
                        for (j, p) in probs.iter().enumerate() {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            grads[logits.0][r * k + j] += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::CosineDistance { a, b } => {
                let av = self.values(*a);
                let bv = self.values(*b);
                let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
                if self.rg(*a) {
                    self.ensure(grads, *a);
                    for j in 0..av.len() {
                        let d = bv[j] / (na * nb) - dot * av[j] / (na * na * na * nb);
                        grads[a.0][j] += g[0] * (-d);
                    }
                }
                if self.rg(*b) {
                    self.ensure(grads, *b);
                    for j in 0..bv.len() {
                        let d = av[j] / (na * nb) - dot * bv[j] / (nb * nb * nb * na);
                        grads[b.0][j] += g[0] * (-d);
                    }
                }
            }
            Op::BoxCorners { center, size, theta } => {
                let s = self.values(*size);
                let th = self.scalar_value(*theta);
                let (sin, cos) = th.sin_cos();
                let (h, w, l) = (s[0], s[1], s[2]);
                let _ = h;
                for (k, &(sx, sy, sz)) in CORNER_SIGNS.iter().enumerate() {
                    let gx = g[3 * k];
                    let gy = g[3 * k + 1];
                    let gz = g[3 * k + 2];
                    if self.rg(*center) {
                        self.ensure(grads, *center);
                        grads[center.0][0] += gx;
                        grads[center.0][1] += gy;
                        grads[center.0][2] += gz;
                    }
                    if self.rg(*size) {
                        self.ensure(grads, *size);
                        // x = cx + cos*sx*l/2 + sin*sz*w/2
                        // z = cz - sin*sx*l/2 + cos*sz*w/2
                        grads[size.0][0] += gy * sy;
                        grads[size.0][1] += gx * sin * sz / 2.0 + gz * cos * sz / 2.0;
                        grads[size.0][2] += gx * cos * sx / 2.0 - gz * sin * sx / 2.0;
                    }
                    if self.rg(*theta) {
                        self.ensure(grads, *theta);
                        let x = sx * l / 2.0;
                        let z = sz * w / 2.0;
                        grads[theta.0][0] += gx * (-sin * x + cos * z) + gz * (-cos * x - sin * z);
                    }
                }
            }
        }
    }
}

/// Max-subtracted softmax over a logit slice.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn softmax_ce_value(v: &[f64], label: usize) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
    -(v[label] - m) + z.ln()
}

#[cfg(test)]
mod tests;
