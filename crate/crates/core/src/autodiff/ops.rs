use std::fmt;

use ndarray::{Array2, Axis, Zip};

use super::{Array, AutodiffError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn of(a: &Array) -> Self {
        Self::new(a.nrows(), a.ncols())
    }

    pub fn len(self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn dims(self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn broadcast_with(self, other: Shape, op: &'static str) -> Result<Shape> {
        let axis = |a: usize, b: usize| -> Option<usize> {
            if a == b {
                Some(a)
            } else if a == 1 {
                Some(b)
            } else if b == 1 {
                Some(a)
            } else {
                None
            }
        };
        match (axis(self.rows, other.rows), axis(self.cols, other.cols)) {
            (Some(rows), Some(cols)) => Ok(Shape::new(rows, cols)),
            _ => Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("cannot broadcast {self} with {other}"),
            }),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Operation kinds. Binary elementwise ops broadcast axes of length 1.
///
/// The mask kinds (`Sign`, `Step`, `InRange`, `GreaterEq`) are piecewise
/// constant; they carry no gradient and exist so that derivative rules of
/// kinked ops stay expressible as graph nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Constant,
    Parameter(String),
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Neg,
    Exp,
    Log,
    Pow(f64),
    Sin,
    Cos,
    /// `acos` of the input clamped to `[-1+eps, 1-eps]`.
    Arccos { eps: f64 },
    Abs,
    Relu,
    Clamp { lo: f64, hi: f64 },
    Maximum,
    Sum,
    Mean,
    /// `n×m -> 1×m`
    SumRows,
    /// `n×m -> n×1`
    SumCols,
    BroadcastTo(Shape),
    L2NormalizeRows,
    DotRows,
    /// `n×c -> n×1`, picking column `index[i]` from row `i`.
    SelectByIndex(Vec<usize>),
    /// `n×1 -> n×cols`, the adjoint of `SelectByIndex`.
    ScatterByIndex { index: Vec<usize>, cols: usize },
    /// `n×d -> m×d` gathering rows (repeats allowed).
    SelectRows(Vec<usize>),
    /// `m×d -> rows×d`, accumulating into rows; adjoint of `SelectRows`.
    ScatterRows { index: Vec<usize>, rows: usize },
    LogSumExpRows,
    Sign,
    Step,
    InRange { lo: f64, hi: f64 },
    GreaterEq,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter(_) => "parameter",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Pow(_) => "power",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Arccos { .. } => "arccos",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::Clamp { .. } => "clamp",
            Op::Maximum => "maximum",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum-rows",
            Op::SumCols => "sum-cols",
            Op::BroadcastTo(_) => "broadcast",
            Op::L2NormalizeRows => "l2-normalize-rows",
            Op::DotRows => "dot-product-rows",
            Op::SelectByIndex(_) => "select-by-index",
            Op::ScatterByIndex { .. } => "scatter-by-index",
            Op::SelectRows(_) => "select-rows",
            Op::ScatterRows { .. } => "scatter-rows",
            Op::LogSumExpRows => "log-sum-exp-rows",
            Op::Sign => "sign",
            Op::Step => "step",
            Op::InRange { .. } => "in-range",
            Op::GreaterEq => "greater-eq",
        }
    }

    /// Parses an attribute-free op kind.
    pub fn from_name(name: &str) -> Result<Op> {
        Ok(match name {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "matmul" => Op::MatMul,
            "transpose" => Op::Transpose,
            "neg" => Op::Neg,
            "exp" => Op::Exp,
            "log" => Op::Log,
            "sin" => Op::Sin,
            "cos" => Op::Cos,
            "arccos" => Op::Arccos { eps: super::ARCCOS_EPS },
            "abs" => Op::Abs,
            "relu" => Op::Relu,
            "maximum" => Op::Maximum,
            "sum" => Op::Sum,
            "mean" => Op::Mean,
            "sum-rows" => Op::SumRows,
            "sum-cols" => Op::SumCols,
            "l2-normalize-rows" => Op::L2NormalizeRows,
            "dot-product-rows" => Op::DotRows,
            "log-sum-exp-rows" => Op::LogSumExpRows,
            "sign" => Op::Sign,
            "step" => Op::Step,
            "greater-eq" => Op::GreaterEq,
            other => return Err(AutodiffError::UnknownOp(other.to_string())),
        })
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Constant | Op::Parameter(_))
    }

    /// Ops whose derivative is identically zero.
    pub fn is_mask(&self) -> bool {
        matches!(self, Op::Sign | Op::Step | Op::InRange { .. } | Op::GreaterEq)
    }

    fn arity(&self) -> usize {
        match self {
            Op::Constant | Op::Parameter(_) => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul | Op::Maximum | Op::DotRows
            | Op::GreaterEq => 2,
            _ => 1,
        }
    }

    pub(crate) fn infer_shape(&self, inputs: &[Shape]) -> Result<Shape> {
        let name = self.name();
        if inputs.len() != self.arity() {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                detail: format!("expected {} inputs, got {}", self.arity(), inputs.len()),
            });
        }
        let mismatch = |detail: String| AutodiffError::ShapeMismatch { op: name, detail };
        let shape = match self {
            Op::Constant | Op::Parameter(_) => unreachable!("leaves are not built"),
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Maximum | Op::GreaterEq => {
                inputs[0].broadcast_with(inputs[1], name)?
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.cols != b.rows {
                    return Err(mismatch(format!("cannot contract {a} with {b}")));
                }
                Shape::new(a.rows, b.cols)
            }
            Op::Transpose => Shape::new(inputs[0].cols, inputs[0].rows),
            Op::Sum | Op::Mean => Shape::SCALAR,
            Op::SumRows => Shape::new(1, inputs[0].cols),
            Op::SumCols | Op::LogSumExpRows => Shape::new(inputs[0].rows, 1),
            Op::BroadcastTo(target) => {
                let s = inputs[0];
                let ok_r = s.rows == target.rows || s.rows == 1;
                let ok_c = s.cols == target.cols || s.cols == 1;
                if !(ok_r && ok_c) {
                    return Err(mismatch(format!("cannot broadcast {s} to {target}")));
                }
                *target
            }
            Op::DotRows => {
                if inputs[0] != inputs[1] {
                    return Err(mismatch(format!("{} vs {}", inputs[0], inputs[1])));
                }
                Shape::new(inputs[0].rows, 1)
            }
            Op::SelectByIndex(index) => {
                let s = inputs[0];
                if index.len() != s.rows {
                    return Err(mismatch(format!("{} indices for {} rows", index.len(), s.rows)));
                }
                if let Some(&bad) = index.iter().find(|&&i| i >= s.cols) {
                    return Err(AutodiffError::IndexOutOfRange { index: bad, len: s.cols });
                }
                Shape::new(s.rows, 1)
            }
            Op::ScatterByIndex { index, cols } => {
                let s = inputs[0];
                if s.cols != 1 || index.len() != s.rows {
                    return Err(mismatch(format!("scatter of {s} with {} indices", index.len())));
                }
                if let Some(&bad) = index.iter().find(|&&i| i >= *cols) {
                    return Err(AutodiffError::IndexOutOfRange { index: bad, len: *cols });
                }
                Shape::new(s.rows, *cols)
            }
            Op::SelectRows(index) => {
                let s = inputs[0];
                if let Some(&bad) = index.iter().find(|&&i| i >= s.rows) {
                    return Err(AutodiffError::IndexOutOfRange { index: bad, len: s.rows });
                }
                Shape::new(index.len(), s.cols)
            }
            Op::ScatterRows { index, rows } => {
                let s = inputs[0];
                if index.len() != s.rows {
                    return Err(mismatch(format!("{} indices for {} rows", index.len(), s.rows)));
                }
                if let Some(&bad) = index.iter().find(|&&i| i >= *rows) {
                    return Err(AutodiffError::IndexOutOfRange { index: bad, len: *rows });
                }
                Shape::new(*rows, s.cols)
            }
            Op::Clamp { lo, hi } | Op::InRange { lo, hi } => {
                if lo > hi {
                    return Err(mismatch(format!("empty interval [{lo}, {hi}]")));
                }
                inputs[0]
            }
            Op::Neg
            | Op::Exp
            | Op::Log
            | Op::Pow(_)
            | Op::Sin
            | Op::Cos
            | Op::Arccos { .. }
            | Op::Abs
            | Op::Relu
            | Op::L2NormalizeRows
            | Op::Sign
            | Op::Step => inputs[0],
        };
        Ok(shape)
    }

    pub(crate) fn forward(&self, args: &[&Array], shape: Shape) -> Array {
        let unary = |f: &dyn Fn(f64) -> f64| args[0].mapv(f);
        let binary = |f: &dyn Fn(f64, f64) -> f64| {
            let dims = shape.dims();
            let a = args[0].broadcast(dims).expect("shape checked at build");
            let b = args[1].broadcast(dims).expect("shape checked at build");
            Zip::from(&a).and(&b).map_collect(|&x, &y| f(x, y))
        };
        match self {
            Op::Constant | Op::Parameter(_) => unreachable!("leaves carry values"),
            Op::Add => binary(&|x, y| x + y),
            Op::Sub => binary(&|x, y| x - y),
            Op::Mul => binary(&|x, y| x * y),
            Op::Div => binary(&|x, y| x / y),
            Op::Maximum => binary(&|x, y| if x >= y { x } else { y }),
            Op::GreaterEq => binary(&|x, y| if x >= y { 1.0 } else { 0.0 }),
            Op::MatMul => args[0].dot(args[1]),
            Op::Transpose => args[0].t().to_owned(),
            Op::Neg => unary(&|x| -x),
            Op::Exp => unary(&f64::exp),
            Op::Log => unary(&f64::ln),
            Op::Pow(p) => {
                let p = *p;
                unary(&move |x| x.powf(p))
            }
            Op::Sin => unary(&f64::sin),
            Op::Cos => unary(&f64::cos),
            Op::Arccos { eps } => {
                let (lo, hi) = (-1.0 + eps, 1.0 - eps);
                unary(&move |x| x.clamp(lo, hi).acos())
            }
            Op::Abs => unary(&f64::abs),
            Op::Relu => unary(&|x| if x > 0.0 { x } else { 0.0 }),
            Op::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                unary(&move |x| x.clamp(lo, hi))
            }
            Op::Sign => unary(&|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Step => unary(&|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::InRange { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                unary(&move |x| if x >= lo && x <= hi { 1.0 } else { 0.0 })
            }
            Op::Sum => Array2::from_elem((1, 1), args[0].sum()),
            Op::Mean => Array2::from_elem((1, 1), args[0].sum() / args[0].len() as f64),
            Op::SumRows => args[0].sum_axis(Axis(0)).insert_axis(Axis(0)),
            Op::SumCols => args[0].sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::BroadcastTo(target) => args[0]
                .broadcast(target.dims())
                .expect("shape checked at build")
                .to_owned(),
            Op::L2NormalizeRows => {
                let mut out = args[0].clone();
                for mut row in out.rows_mut() {
                    let norm = row.dot(&row).sqrt();
                    row.mapv_inplace(|v| v / norm);
                }
                out
            }
            Op::DotRows => {
                let (a, b) = (args[0], args[1]);
                Array2::from_shape_fn((a.nrows(), 1), |(i, _)| a.row(i).dot(&b.row(i)))
            }
            Op::SelectByIndex(index) => {
                Array2::from_shape_fn((index.len(), 1), |(i, _)| args[0][[i, index[i]]])
            }
            Op::ScatterByIndex { index, cols } => {
                let mut out = Array2::zeros((index.len(), *cols));
                for (i, &j) in index.iter().enumerate() {
                    out[[i, j]] = args[0][[i, 0]];
                }
                out
            }
            Op::SelectRows(index) => args[0].select(Axis(0), index),
            Op::ScatterRows { index, rows } => {
                let src = args[0];
                let mut out = Array2::zeros((*rows, src.ncols()));
                for (i, &r) in index.iter().enumerate() {
                    let mut dst = out.row_mut(r);
                    dst += &src.row(i);
                }
                out
            }
            Op::LogSumExpRows => {
                let a = args[0];
                Array2::from_shape_fn((a.nrows(), 1), |(i, _)| {
                    let row = a.row(i);
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
                })
            }
        }
    }
}
