//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! Values are 2-D `f64` arrays; scalars are `1 x 1`. Operations are recorded
//! in evaluation order, so the tape is already topologically sorted and the
//! backward pass is a single reverse sweep.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a + b` where `b` is a single row broadcast over the rows of `a`.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a * c` where `c` is a single column broadcast over the columns of `a`.
    MulCol(Var, Var),
    Scale(Var, f64),
    Swish(Var),
    Sin(Var),
    Cos(Var),
    ConcatCols(Vec<Var>),
    /// Sum of all squared entries, as a `1 x 1` value.
    SumSquares(Var),
    Sum(Var),
    /// A value computed outside the tape; it has no derivative rule.
    Opaque(String),
}

#[derive(Clone, Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Adjoints produced by a backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(Error::Shape(format!("add_row {sa:?} + {sr:?}")));
        }
        let value = self.value(a) + self.value(row);
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(Error::Shape(format!("mul_col {sa:?} * {sc:?}")));
        }
        let value = self.value(a) * self.value(col);
        Ok(self.push(value, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(swish);
        self.push(value, Op::Swish(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sin);
        self.push(value, Op::Sin(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::cos);
        self.push(value, Op::Cos(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|v| v * v).sum::<f64>();
        self.push(Array2::from_elem((1, 1), s), Op::SumSquares(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a), &[a])
    }

    /// Records a value computed by external code. Differentiating through it is an error.
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Array2<f64>) -> Var {
        self.push(value, Op::Opaque(name.to_string()), inputs)
    }

    /// Gradient of a `1 x 1` output with respect to every node that needs one.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        self.backward_seeded(output, Array2::ones((1, 1)))
    }

    /// Vector-Jacobian product: propagates the adjoint `seed` of `output`.
    pub fn backward_seeded(&self, output: Var, seed: Array2<f64>) -> Result<Grads> {
        if seed.dim() != self.shape(output) {
            return Err(Error::Shape(format!(
                "seed {:?} does not match output {:?}",
                seed.dim(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if needs(b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddRow(a, row) => {
                    if needs(row) {
                        accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needs(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if needs(b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if needs(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if needs(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if needs(b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::MulCol(a, col) => {
                    if needs(col) {
                        let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads, *col, gc);
                    }
                    if needs(a) {
                        accumulate(&mut grads, *a, &g * self.value(*col));
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g * *s),
                Op::Swish(a) => {
                    let mut ga = self.value(*a).mapv(swish_grad);
                    ga *= &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sin(a) => {
                    let mut ga = self.value(*a).mapv(f64::cos);
                    ga *= &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Cos(a) => {
                    let mut ga = self.value(*a).mapv(|x| -x.sin());
                    ga *= &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if needs(p) {
                            let slice = g.slice(ndarray::s![.., col..col + w]).to_owned();
                            accumulate(&mut grads, *p, slice);
                        }
                        col += w;
                    }
                }
                Op::SumSquares(a) => {
                    let s = g[[0, 0]];
                    accumulate(&mut grads, *a, self.value(*a) * (2.0 * s));
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    accumulate(&mut grads, *a, Array2::from_elem(self.shape(*a), s));
                }
                Op::Opaque(name) => {
                    if g.iter().any(|&x| x != 0.0) {
                        return Err(Error::UnsupportedOp(name.clone()));
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}
