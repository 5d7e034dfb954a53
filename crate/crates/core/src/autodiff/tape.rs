//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every operation appends a node holding its result; `backward` replays the
//! tape in reverse, accumulating adjoints additively so values used by
//! several consumers receive the sum of their downstream gradients. All
//! tensors on the tape are row-major 2-D matrices.

use crate::autodiff::coxpartial;
use crate::autodiff::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::special;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Relu,
    Softplus,
    Tanh,
    Sigmoid,
    Sqrt,
    Abs,
    NormalCdf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary { kind: UnaryKind, a: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: f64 },
    PowConst { a: Var, e: f64 },
    Clamp { a: Var, lo: f64, hi: f64 },
    Binary { kind: BinaryKind, a: Var, b: Var },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    SumAll { a: Var },
    MeanAll { a: Var },
    SumAxis { a: Var, axis: usize },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    MaskedFillNegInf { a: Var, keep: Vec<bool> },
    GatherFlat { a: Var, indices: Vec<usize> },
    CoxNll { a: Var, times: Vec<f64>, events: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_dims(
    (ra, ca): (usize, usize),
    (rb, cb): (usize, usize),
) -> Result<(usize, usize)> {
    let rows = if ra == rb || rb == 1 {
        ra
    } else if ra == 1 {
        rb
    } else {
        return Err(CoreError::Shape(format!(
            "cannot broadcast ({ra}, {ca}) with ({rb}, {cb})"
        )));
    };
    let cols = if ca == cb || cb == 1 {
        ca
    } else if ca == 1 {
        cb
    } else {
        return Err(CoreError::Shape(format!(
            "cannot broadcast ({ra}, {ca}) with ({rb}, {cb})"
        )));
    };
    Ok((rows, cols))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, values: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            values,
            grad: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inherits(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>, needs_grad: bool) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(CoreError::Shape(format!(
                "leaf of shape ({rows}, {cols}) needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(self.push(Op::Leaf, rows, cols, values, needs_grad))
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        self.leaf(r, c, t.values.clone(), false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, 1, 1, vec![v], false)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let needs = self.inherits(&[a]);
        let xs = &self.nodes[a.0].values;
        let values: Vec<f64> = match kind {
            UnaryKind::Neg => xs.iter().map(|x| -x).collect(),
            UnaryKind::Exp => xs.iter().map(|x| x.exp()).collect(),
            UnaryKind::Log => {
                if let Some(bad) = xs.iter().find(|&&x| x <= 0.0) {
                    return Err(CoreError::Domain(format!("log of non-positive value {bad}")));
                }
                xs.iter().map(|x| x.ln()).collect()
            }
            UnaryKind::Relu => xs.iter().map(|x| x.max(0.0)).collect(),
            UnaryKind::Softplus => xs.iter().map(|&x| softplus(x)).collect(),
            UnaryKind::Tanh => xs.iter().map(|x| x.tanh()).collect(),
            UnaryKind::Sigmoid => xs.iter().map(|&x| sigmoid(x)).collect(),
            UnaryKind::Sqrt => {
                if let Some(bad) = xs.iter().find(|&&x| x < 0.0) {
                    return Err(CoreError::Domain(format!("sqrt of negative value {bad}")));
                }
                xs.iter().map(|x| x.sqrt()).collect()
            }
            UnaryKind::Abs => xs.iter().map(|x| x.abs()).collect(),
            UnaryKind::NormalCdf => xs.iter().map(|&x| special::normal_cdf(x)).collect(),
        };
        Ok(self.push(Op::Unary { kind, a }, r, c, values, needs))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }
    /// Elementwise standard normal CDF.
    pub fn normal_cdf(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::NormalCdf, a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let (r, co) = self.shape(a);
        let needs = self.inherits(&[a]);
        let values = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        Ok(self.push(Op::AddScalar { a }, r, co, values, needs))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let (r, co) = self.shape(a);
        let needs = self.inherits(&[a]);
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        Ok(self.push(Op::MulScalar { a, c }, r, co, values, needs))
    }

    /// Elementwise x^e for a fixed exponent. e == 0 is the constant 1 with
    /// zero gradient; fractional exponents require non-negative input.
    pub fn pow_const(&mut self, a: Var, e: f64) -> Result<Var> {
        let (r, co) = self.shape(a);
        let needs = self.inherits(&[a]) && e != 0.0;
        if e.fract() != 0.0 {
            if let Some(bad) = self.nodes[a.0].values.iter().find(|&&x| x < 0.0) {
                return Err(CoreError::Domain(format!(
                    "fractional power {e} of negative value {bad}"
                )));
            }
        }
        let values = self.nodes[a.0].values.iter().map(|x| x.powf(e)).collect();
        Ok(self.push(Op::PowConst { a, e }, r, co, values, needs))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(CoreError::Contract(format!("clamp bounds inverted: {lo} > {hi}")));
        }
        let (r, co) = self.shape(a);
        let needs = self.inherits(&[a]);
        let values = self.nodes[a.0].values.iter().map(|x| x.clamp(lo, hi)).collect();
        Ok(self.push(Op::Clamp { a, lo, hi }, r, co, values, needs))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (rows, cols) = broadcast_dims(sa, sb)?;
        let needs = self.inherits(&[a, b]);
        let mut values = vec![0.0; rows * cols];
        {
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            for i in 0..rows {
                for j in 0..cols {
                    let x = av[(if sa.0 == 1 { 0 } else { i }) * sa.1 + if sa.1 == 1 { 0 } else { j }];
                    let y = bv[(if sb.0 == 1 { 0 } else { i }) * sb.1 + if sb.1 == 1 { 0 } else { j }];
                    values[i * cols + j] = match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                        BinaryKind::Div => {
                            if y == 0.0 {
                                return Err(CoreError::Domain("division by zero".into()));
                            }
                            x / y
                        }
                    };
                }
            }
        }
        Ok(self.push(Op::Binary { kind, a, b }, rows, cols, values, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(CoreError::Shape(format!(
                "matmul inner dimensions differ: ({m}, {ka}) x ({kb}, {n})"
            )));
        }
        let needs = self.inherits(&[a, b]);
        let mut values = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            for i in 0..m {
                for p in 0..ka {
                    let x = av[i * ka + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut values[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        Ok(self.push(Op::MatMul { a, b }, m, n, values, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let needs = self.inherits(&[a]);
        let av = &self.nodes[a.0].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = av[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose { a }, c, r, values, needs))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(CoreError::Shape(format!(
                "reshape ({r}, {c}) -> ({rows}, {cols}) changes element count"
            )));
        }
        let needs = self.inherits(&[a]);
        let values = self.nodes[a.0].values.clone();
        Ok(self.push(Op::Reshape { a }, rows, cols, values, needs))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(CoreError::Shape(format!(
                "row slice {start}..{end} out of bounds for {r} rows"
            )));
        }
        let needs = self.inherits(&[a]);
        let values = self.nodes[a.0].values[start * c..end * c].to_vec();
        Ok(self.push(Op::SliceRows { a, start }, end - start, c, values, needs))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(CoreError::Shape(format!(
                "column slice {start}..{end} out of bounds for {c} columns"
            )));
        }
        let needs = self.inherits(&[a]);
        let av = &self.nodes[a.0].values;
        let w = end - start;
        let mut values = Vec::with_capacity(r * w);
        for i in 0..r {
            values.extend_from_slice(&av[i * c + start..i * c + end]);
        }
        Ok(self.push(Op::SliceCols { a, start }, r, w, values, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| CoreError::Contract("concat of zero parts".into()))?;
        let (_, c) = self.shape(first);
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(CoreError::Shape(format!(
                    "concat parts disagree on columns: {c} vs {pc}"
                )));
            }
            rows += pr;
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        let needs = self.inherits(parts);
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, rows, c, values, needs))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let needs = self.inherits(&[a]);
        let s: f64 = self.nodes[a.0].values.iter().sum();
        Ok(self.push(Op::SumAll { a }, 1, 1, vec![s], needs))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let needs = self.inherits(&[a]);
        let n = self.nodes[a.0].values.len();
        if n == 0 {
            return Err(CoreError::DegenerateSlice("mean of empty tensor".into()));
        }
        let s: f64 = self.nodes[a.0].values.iter().sum();
        Ok(self.push(Op::MeanAll { a }, 1, 1, vec![s / n as f64], needs))
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if axis > 1 {
            return Err(CoreError::Shape(format!("axis {axis} out of range for rank 2")));
        }
        let needs = self.inherits(&[a]);
        let av = &self.nodes[a.0].values;
        let (rows, cols, values) = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += av[i * c + j];
                }
            }
            (1, c, out)
        } else {
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = av[i * c..(i + 1) * c].iter().sum();
            }
            (r, 1, out)
        };
        Ok(self.push(Op::SumAxis { a, axis }, rows, cols, values, needs))
    }

    /// Row-wise softmax. Negative-infinity entries act as masked slots and
    /// produce exact zeros; a row with no finite entry is an error.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let needs = self.inherits(&[a]);
        let av = &self.nodes[a.0].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(CoreError::DegenerateSlice(format!(
                    "softmax row {i} has no finite entry"
                )));
            }
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                values[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                values[i * c + j] /= sum;
            }
        }
        Ok(self.push(Op::Softmax { a }, r, c, values, needs))
    }

    /// Row-wise log-softmax; masked (-inf) entries stay -inf.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let needs = self.inherits(&[a]);
        let av = &self.nodes[a.0].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(CoreError::DegenerateSlice(format!(
                    "log-softmax row {i} has no finite entry"
                )));
            }
            let log_sum = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                values[i * c + j] = row[j] - m - log_sum;
            }
        }
        Ok(self.push(Op::LogSoftmax { a }, r, c, values, needs))
    }

    /// Keep entries where `keep` is true, set the rest to negative infinity.
    pub fn masked_fill_neg_inf(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if keep.len() != r * c {
            return Err(CoreError::Shape(format!(
                "mask of length {} for shape ({r}, {c})",
                keep.len()
            )));
        }
        let needs = self.inherits(&[a]);
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x } else { f64::NEG_INFINITY })
            .collect();
        Ok(self.push(Op::MaskedFillNegInf { a, keep }, r, c, values, needs))
    }

    /// out[p] = a.values[indices[p]]; the gradient scatter-adds back.
    pub fn gather_flat(&mut self, a: Var, indices: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        if indices.len() != rows * cols {
            return Err(CoreError::Shape(format!(
                "gather of {} indices into shape ({rows}, {cols})",
                indices.len()
            )));
        }
        let src = &self.nodes[a.0].values;
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(CoreError::Shape(format!(
                "gather index {bad} out of bounds for {} elements",
                src.len()
            )));
        }
        let needs = self.inherits(&[a]);
        let values = indices.iter().map(|&i| src[i]).collect();
        Ok(self.push(Op::GatherFlat { a, indices }, rows, cols, values, needs))
    }

    /// Scalar Cox partial-likelihood loss over a column of risk scores.
    pub fn cox_nll(&mut self, risks: Var, times: &[f64], events: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(risks);
        if c != 1 {
            return Err(CoreError::Shape(format!(
                "risk scores must be a column vector, got ({r}, {c})"
            )));
        }
        let needs = self.inherits(&[risks]);
        let loss = coxpartial::nll(&self.nodes[risks.0].values, times, events)?;
        Ok(self.push(
            Op::CoxNll {
                a: risks,
                times: times.to_vec(),
                events: events.to_vec(),
            },
            1,
            1,
            vec![loss],
            needs,
        ))
    }

    /// Reverse sweep from a scalar output. Adjoints accumulate additively;
    /// nodes not on a path to `out` keep `grad == None`.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let n = &self.nodes[out.0];
        if n.rows * n.cols != 1 {
            return Err(CoreError::Contract(format!(
                "backward target must be scalar, got ({}, {})",
                n.rows, n.cols
            )));
        }
        self.nodes[out.0].grad = Some(vec![1.0]);

        for id in (0..=out.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            // Take the current adjoint so inputs (always at lower indices)
            // can be borrowed mutably, then put it back.
            let g = self.nodes[id].grad.take().expect("checked above");
            let op = self.nodes[id].op.clone();
            let (rows, cols) = (self.nodes[id].rows, self.nodes[id].cols);
            self.propagate(&op, rows, cols, &g, id)?;
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = node.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
        for (s, c) in slot.iter_mut().zip(contrib) {
            *s += c;
        }
    }

    fn propagate(&mut self, op: &Op, rows: usize, cols: usize, g: &[f64], id: usize) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Unary { kind, a } => {
                let xs = &self.nodes[a.0].values;
                let ys = &self.nodes[id].values;
                let da: Vec<f64> = match kind {
                    UnaryKind::Neg => g.iter().map(|gi| -gi).collect(),
                    UnaryKind::Exp => g.iter().zip(ys).map(|(gi, y)| gi * y).collect(),
                    UnaryKind::Log => g.iter().zip(xs).map(|(gi, x)| gi / x).collect(),
                    UnaryKind::Relu => g
                        .iter()
                        .zip(xs)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                    UnaryKind::Softplus => {
                        g.iter().zip(xs).map(|(gi, &x)| gi * sigmoid(x)).collect()
                    }
                    UnaryKind::Tanh => g.iter().zip(ys).map(|(gi, y)| gi * (1.0 - y * y)).collect(),
                    UnaryKind::Sigmoid => {
                        g.iter().zip(ys).map(|(gi, y)| gi * y * (1.0 - y)).collect()
                    }
                    UnaryKind::Sqrt => g
                        .iter()
                        .zip(ys)
                        .map(|(gi, &y)| if y == 0.0 { 0.0 } else { gi * 0.5 / y })
                        .collect(),
                    UnaryKind::Abs => g
                        .iter()
                        .zip(xs)
                        .map(|(gi, &x)| gi * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                        .collect(),
                    UnaryKind::NormalCdf => g
                        .iter()
                        .zip(xs)
                        .map(|(gi, &x)| gi * special::normal_pdf(x))
                        .collect(),
                };
                self.acc(*a, da);
            }
            Op::AddScalar { a } => self.acc(*a, g.to_vec()),
            Op::MulScalar { a, c } => self.acc(*a, g.iter().map(|gi| gi * c).collect()),
            Op::PowConst { a, e } => {
                if *e != 0.0 {
                    let xs = &self.nodes[a.0].values;
                    let da = g
                        .iter()
                        .zip(xs)
                        .map(|(gi, &x)| {
                            if x == 0.0 && *e < 1.0 {
                                0.0
                            } else {
                                gi * e * x.powf(e - 1.0)
                            }
                        })
                        .collect();
                    self.acc(*a, da);
                }
            }
            Op::Clamp { a, lo, hi } => {
                let xs = &self.nodes[a.0].values;
                let da = g
                    .iter()
                    .zip(xs)
                    .map(|(gi, &x)| if x >= *lo && x <= *hi { *gi } else { 0.0 })
                    .collect();
                self.acc(*a, da);
            }
            Op::Binary { kind, a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let mut da = vec![0.0; sa.0 * sa.1];
                let mut db = vec![0.0; sb.0 * sb.1];
                {
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    for i in 0..rows {
                        for j in 0..cols {
                            let ia = (if sa.0 == 1 { 0 } else { i }) * sa.1
                                + if sa.1 == 1 { 0 } else { j };
                            let ib = (if sb.0 == 1 { 0 } else { i }) * sb.1
                                + if sb.1 == 1 { 0 } else { j };
                            let gi = g[i * cols + j];
                            match kind {
                                BinaryKind::Add => {
                                    da[ia] += gi;
                                    db[ib] += gi;
                                }
                                BinaryKind::Sub => {
                                    da[ia] += gi;
                                    db[ib] -= gi;
                                }
                                BinaryKind::Mul => {
                                    da[ia] += gi * bv[ib];
                                    db[ib] += gi * av[ia];
                                }
                                BinaryKind::Div => {
                                    da[ia] += gi / bv[ib];
                                    db[ib] -= gi * av[ia] / (bv[ib] * bv[ib]);
                                }
                            }
                        }
                    }
                }
                self.acc(*a, da);
                self.acc(*b, db);
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                {
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    // dA = G * B^T
                    for i in 0..m {
                        for j in 0..n {
                            let gi = g[i * n + j];
                            if gi == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gi * bv[p * n + j];
                            }
                        }
                    }
                    // dB = A^T * G
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                }
                self.acc(*a, da);
                self.acc(*b, db);
            }
            Op::Transpose { a } => {
                // Output is (cols_a, rows_a); transpose the adjoint back.
                let (ar, ac) = self.shape(*a);
                let mut da = vec![0.0; ar * ac];
                for i in 0..rows {
                    for j in 0..cols {
                        da[j * ac + i] = g[i * cols + j];
                    }
                }
                self.acc(*a, da);
            }
            Op::Reshape { a } => self.acc(*a, g.to_vec()),
            Op::SliceRows { a, start } => {
                let (_, ac) = self.shape(*a);
                let mut da = vec![0.0; self.nodes[a.0].values.len()];
                da[start * ac..start * ac + g.len()].copy_from_slice(g);
                self.acc(*a, da);
            }
            Op::SliceCols { a, start } => {
                let (_, ac) = self.shape(*a);
                let mut da = vec![0.0; self.nodes[a.0].values.len()];
                for i in 0..rows {
                    for j in 0..cols {
                        da[i * ac + start + j] = g[i * cols + j];
                    }
                }
                self.acc(*a, da);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    let chunk = g[offset..offset + pr * pc].to_vec();
                    offset += pr * pc;
                    self.acc(p, chunk);
                }
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.nodes[a.0].values.len()];
                self.acc(*a, da);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].values.len();
                let da = vec![g[0] / n as f64; n];
                self.acc(*a, da);
            }
            Op::SumAxis { a, axis } => {
                let (ar, ac) = self.shape(*a);
                let mut da = vec![0.0; ar * ac];
                if *axis == 0 {
                    for i in 0..ar {
                        for j in 0..ac {
                            da[i * ac + j] = g[j];
                        }
                    }
                } else {
                    for i in 0..ar {
                        for j in 0..ac {
                            da[i * ac + j] = g[i];
                        }
                    }
                }
                self.acc(*a, da);
            }
            Op::Softmax { a } => {
                let ys = &self.nodes[id].values;
                let mut da = vec![0.0; ys.len()];
                for i in 0..rows {
                    let y = &ys[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..cols {
                        da[i * cols + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.acc(*a, da);
            }
            Op::LogSoftmax { a } => {
                let ys = &self.nodes[id].values;
                let mut da = vec![0.0; ys.len()];
                for i in 0..rows {
                    let y = &ys[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..cols {
                        da[i * cols + j] = gr[j] - y[j].exp() * gsum;
                    }
                }
                self.acc(*a, da);
            }
            Op::MaskedFillNegInf { a, keep } => {
                let da = g
                    .iter()
                    .zip(keep)
                    .map(|(gi, &k)| if k { *gi } else { 0.0 })
                    .collect();
                self.acc(*a, da);
            }
            Op::GatherFlat { a, indices } => {
                let mut da = vec![0.0; self.nodes[a.0].values.len()];
                for (p, &src) in indices.iter().enumerate() {
                    da[src] += g[p];
                }
                self.acc(*a, da);
            }
            Op::CoxNll { a, times, events } => {
                let risks = &self.nodes[a.0].values;
                let mut da = coxpartial::nll_gradient(risks, times, events)?;
                for d in da.iter_mut() {
                    *d *= g[0];
                }
                self.acc(*a, da);
            }
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
