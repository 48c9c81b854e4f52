//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! tape visits every node after all of its consumers. Only the handful of
//! primitives the training loops need are provided.

use crate::error::{Error, Result};
use crate::nn::loss::{log_softmax_row, softmax_row};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    AddScalar(Var, Var),
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    RowNormalize(Var),
    StackCols(Vec<Var>),
    Column(Var, usize),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
    KlDiv {
        student: Var,
        teacher_probs: Tensor<T>,
        student_probs: Tensor<T>,
        temperature: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn mismatch(context: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        context,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `[n×k] · [k] -> [n]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (am, xv) = (self.value(a), self.value(x));
        if am.cols() != xv.len() {
            return Err(mismatch("matvec", &[am.cols()], xv.shape()));
        }
        let out: Vec<T> = (0..am.rows())
            .map(|i| am.row(i).iter().zip(xv.data()).map(|(&p, &q)| p * q).sum())
            .collect();
        let ng = self.needs(&[a, x]);
        Ok(self.push(Tensor::vector(out), Op::MatVec(a, x), ng))
    }

    /// Adds a length-`m` vector to every row of an `[n×m]` matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bv) = (self.value(a), self.value(b));
        let m = am.cols();
        if bv.len() != m {
            return Err(mismatch("add_row", &[m], bv.shape()));
        }
        let mut out = am.clone();
        for row in out.data_mut().chunks_mut(m.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    /// Multiplies every row of `[n×m]` elementwise by a length-`m` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bv) = (self.value(a), self.value(b));
        let m = am.cols();
        if bv.len() != m {
            return Err(mismatch("mul_row", &[m], bv.shape()));
        }
        let mut out = am.clone();
        for row in out.data_mut().chunks_mut(m.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o *= b;
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MulRow(a, b), ng))
    }

    /// Scales row `i` of `[n×m]` by entry `i` of a length-`n` vector.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (am, sv) = (self.value(a), self.value(s));
        let (n, m) = (am.rows(), am.cols());
        if sv.len() != n {
            return Err(mismatch("mul_col", &[n], sv.shape()));
        }
        let mut out = am.clone();
        for (row, &s) in out.data_mut().chunks_mut(m.max(1)).zip(sv.data()) {
            for o in row {
                *o *= s;
            }
        }
        let ng = self.needs(&[a, s]);
        Ok(self.push(out, Op::MulCol(a, s), ng))
    }

    fn zip_same(&self, a: Var, b: Var, context: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(mismatch(context, at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(at.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Adds a one-element tensor to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self
            .value(s)
            .item()
            .ok_or_else(|| mismatch("add_scalar", &[1], self.shape(s)))?;
        let out = self.value(a).map(|x| x + sv);
        let ng = self.needs(&[a, s]);
        Ok(self.push(out, Op::AddScalar(a, s), ng))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() - x);
        let ng = self.needs(&[a]);
        self.push(out, Op::OneMinus(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.needs(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Divides each row by its sum. Rows must have a positive sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let m = at.cols();
        let mut out = at.clone();
        for row in out.data_mut().chunks_mut(m.max(1)) {
            let s: T = row.iter().copied().sum();
            if !(s > T::zero()) {
                return Err(Error::invalid("row_normalize needs positive row sums"));
            }
            for o in row {
                *o /= s;
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::RowNormalize(a), ng))
    }

    /// Stacks length-`n` vectors as the columns of an `[n×k]` matrix.
    pub fn stack_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let n = cols
            .first()
            .map(|&v| self.value(v).len())
            .ok_or_else(|| Error::invalid("stack_cols needs at least one column"))?;
        let k = cols.len();
        let mut data = vec![T::zero(); n * k];
        for (j, &c) in cols.iter().enumerate() {
            let cv = self.value(c);
            if cv.len() != n {
                return Err(mismatch("stack_cols", &[n], cv.shape()));
            }
            for (i, &x) in cv.data().iter().enumerate() {
                data[i * k + j] = x;
            }
        }
        let ng = self.needs(cols);
        Ok(self.push(Tensor::matrix(n, k, data)?, Op::StackCols(cols.to_vec()), ng))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let at = self.value(a);
        if j >= at.cols() {
            return Err(Error::invalid(format!("column {j} out of range for {:?}", at.shape())));
        }
        let out: Vec<T> = (0..at.rows()).map(|i| at.get(i, j)).collect();
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::vector(out), Op::Column(a, j), ng))
    }

    /// Mean over all entries, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        if at.is_empty() {
            return Err(Error::EmptyDataset("mean over empty tensor"));
        }
        let m = at.data().iter().copied().sum::<T>() / T::lit(at.len() as f64);
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), ng))
    }

    /// Mean softmax cross-entropy of `[n×C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let (n, c) = (lt.rows(), lt.cols());
        if labels.len() != n {
            return Err(mismatch("cross_entropy labels", &[n], &[labels.len()]));
        }
        if n == 0 {
            return Err(Error::EmptyDataset("cross_entropy batch"));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    class_count: c,
                });
            }
            let row = lt.row(i);
            let ls = log_softmax_row(row);
            total -= ls[y];
            probs.extend(ls.iter().map(|&l| l.exp()));
        }
        let loss = total / T::lit(n as f64);
        let op = Op::CrossEntropy {
            logits,
            probs: Tensor::matrix(n, c, probs)?,
            labels: labels.to_vec(),
        };
        let ng = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), op, ng))
    }

    /// Mean over rows of `KL(softmax(teacher/T) ‖ softmax(student/T))`.
    /// The teacher is a constant; gradients reach only `student`.
    pub fn kl_divergence(&mut self, teacher: &Tensor<T>, student: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let st = self.value(student);
        if st.shape() != teacher.shape() {
            return Err(mismatch("kl_divergence", teacher.shape(), st.shape()));
        }
        let (n, c) = (st.rows(), st.cols());
        if n == 0 {
            return Err(Error::EmptyDataset("kl_divergence batch"));
        }
        let mut tp = Vec::with_capacity(n * c);
        let mut sp = Vec::with_capacity(n * c);
        let mut total = T::zero();
        for i in 0..n {
            let t_scaled: Vec<T> = teacher.row(i).iter().map(|&x| x / temperature).collect();
            let s_scaled: Vec<T> = st.row(i).iter().map(|&x| x / temperature).collect();
            let lt = log_softmax_row(&t_scaled);
            let ls = log_softmax_row(&s_scaled);
            for (&a, &b) in lt.iter().zip(&ls) {
                let p = a.exp();
                if p > T::zero() {
                    total += p * (a - b);
                }
                tp.push(p);
                sp.push(b.exp());
            }
        }
        let loss = total / T::lit(n as f64);
        let op = Op::KlDiv {
            student,
            teacher_probs: Tensor::matrix(n, c, tp)?,
            student_probs: Tensor::matrix(n, c, sp)?,
            temperature,
        };
        let ng = self.needs(&[student]);
        Ok(self.push(Tensor::scalar(loss), op, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lshape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(lshape.to_vec()));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lshape.to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul_t(bv)?);
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, av.t_matmul(g)?);
                }
            }
            Op::MatVec(a, x) => {
                let (am, xv) = (self.value(*a), self.value(*x));
                let (n, k) = (am.rows(), am.cols());
                if self.nodes[a.0].needs_grad {
                    let mut d = Vec::with_capacity(n * k);
                    for &gi in g.data() {
                        d.extend(xv.data().iter().map(|&xj| gi * xj));
                    }
                    self.accumulate(grads, *a, Tensor::new(am.shape().to_vec(), d)?);
                }
                if self.nodes[x.0].needs_grad {
                    let mut d = vec![T::zero(); k];
                    for (i, &gi) in g.data().iter().enumerate() {
                        for (dj, &aij) in d.iter_mut().zip(am.row(i)) {
                            *dj += gi * aij;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[b.0].needs_grad {
                    let bv = self.value(*b);
                    let m = bv.len();
                    let mut d = vec![T::zero(); m];
                    for row in g.data().chunks(m.max(1)) {
                        for (dj, &x) in d.iter_mut().zip(row) {
                            *dj += x;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::MulRow(a, b) => {
                let (am, bv) = (self.value(*a), self.value(*b));
                let m = bv.len().max(1);
                if self.nodes[a.0].needs_grad {
                    let mut d = g.clone();
                    for row in d.data_mut().chunks_mut(m) {
                        for (x, &bj) in row.iter_mut().zip(bv.data()) {
                            *x *= bj;
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.nodes[b.0].needs_grad {
                    let mut d = vec![T::zero(); bv.len()];
                    for (grow, arow) in g.data().chunks(m).zip(am.data().chunks(m)) {
                        for ((dj, &gj), &aj) in d.iter_mut().zip(grow).zip(arow) {
                            *dj += gj * aj;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::MulCol(a, s) => {
                let (am, sv) = (self.value(*a), self.value(*s));
                let m = am.cols().max(1);
                if self.nodes[a.0].needs_grad {
                    let mut d = g.clone();
                    for (row, &si) in d.data_mut().chunks_mut(m).zip(sv.data()) {
                        for x in row {
                            *x *= si;
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.nodes[s.0].needs_grad {
                    let d: Vec<T> = g
                        .data()
                        .chunks(m)
                        .zip(am.data().chunks(m))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), d)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a, s) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[s.0].needs_grad {
                    let total: T = g.data().iter().copied().sum();
                    let shape = self.shape(*s).to_vec();
                    self.accumulate(grads, *s, Tensor::new(shape, vec![total])?);
                }
            }
            Op::OneMinus(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Relu(a) => {
                let av = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::RowNormalize(a) => {
                let (av, y) = (self.value(*a), &node.value);
                let m = av.cols().max(1);
                let mut d = Vec::with_capacity(av.len());
                for ((grow, yrow), arow) in g.data().chunks(m).zip(y.data().chunks(m)).zip(av.data().chunks(m)) {
                    let s: T = arow.iter().copied().sum();
                    let dot: T = grow.iter().zip(yrow).map(|(&x, &z)| x * z).sum();
                    d.extend(grow.iter().map(|&gj| (gj - dot) / s));
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::StackCols(cols) => {
                let k = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    if !self.nodes[c.0].needs_grad {
                        continue;
                    }
                    let d: Vec<T> = g.data().chunks(k).map(|row| row[j]).collect();
                    let shape = self.shape(c).to_vec();
                    self.accumulate(grads, c, Tensor::new(shape, d)?);
                }
            }
            Op::Column(a, j) => {
                let av = self.value(*a);
                let m = av.cols();
                let mut d = Tensor::zeros(av.shape().to_vec());
                for (i, &gi) in g.data().iter().enumerate() {
                    d.data_mut()[i * m + j] = gi;
                }
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gi = g.data()[0] / T::lit(av.len() as f64);
                self.accumulate(grads, *a, Tensor::full(av.shape().to_vec(), gi));
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let c = probs.cols();
                let scale = g.data()[0] / T::lit(n as f64);
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d.data_mut()[i * c + y] -= T::one();
                }
                let d = d.map(|x| x * scale);
                self.accumulate(grads, *logits, d);
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
                temperature,
            } => {
                let n = student_probs.rows();
                let scale = g.data()[0] / (T::lit(n as f64) * *temperature);
                let data = student_probs
                    .data()
                    .iter()
                    .zip(teacher_probs.data())
                    .map(|(&q, &p)| (q - p) * scale)
                    .collect();
                let shape = student_probs.shape().to_vec();
                self.accumulate(grads, *student, Tensor::new(shape, data)?);
            }
        }
        Ok(())
    }
}

/// Row-wise softmax of a plain tensor, outside any graph.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.cols().max(1);
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        data.extend(softmax_row(row));
    }
    Tensor::new(logits.shape().to_vec(), data).expect("same length")
}
