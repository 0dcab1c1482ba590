use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::{Gradients, ParamId, ParamStore, Real};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Rows `queries` of the query matrix attend over rows `keys` of the key and
/// value matrices. Query ranges of different blocks must not overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

impl Block {
    pub fn square(rows: Range<usize>) -> Self {
        Self { queries: rows.clone(), keys: rows }
    }
}

enum Value<'p, F> {
    Owned(Array2<F>),
    Shared(&'p Array2<F>),
}

impl<F> Value<'_, F> {
    fn view(&self) -> ArrayView2<'_, F> {
        match self {
            Value::Owned(a) => a.view(),
            Value::Shared(a) => a.view(),
        }
    }
}

enum Op<F> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    SqrtFloor(Var, F),
    LogFloor(Var, F),
    LayerNorm { input: Var, inv_std: Vec<F> },
    SoftmaxRows(Var),
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    Transpose(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, blocks: Vec<Block>, probs: Vec<Array2<F>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Array2<F> },
}

struct Node<'p, F> {
    value: Value<'p, F>,
    op: Op<F>,
}

/// Records a forward computation for later reverse-mode differentiation.
///
/// Parameter values are borrowed from the store, never copied.
pub struct Graph<'p, F: Real> {
    store: &'p ParamStore<F>,
    nodes: Vec<Node<'p, F>>,
}

const GELU_COEF: f64 = 0.044_715;

fn fast_tanh<F: Real>(u: F) -> F {
    let two = F::lit(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

fn gelu_scalar<F: Real>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = F::lit(0.5);
    half * x * (F::one() + fast_tanh(c * (x + F::lit(GELU_COEF) * x * x * x)))
}

fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let (half, k) = (F::lit(0.5), F::lit(GELU_COEF));
    let t = fast_tanh(c * (x + k * x * x * x));
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * k * x * x)
}

/// Numerically stable in-place softmax along each row.
pub(crate) fn softmax_rows_inplace<F: Real>(a: &mut Array2<F>) {
    for mut row in a.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
        let mut total = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.mapv_inplace(|x| x / total);
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, F> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> F {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.value(id);
        self.nodes.push(Node { value: Value::Shared(value), op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) - &self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let out = &self.value(a) + &self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let out = &self.value(a) * &self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor = F::lit(factor);
        let out = self.value(a).mapv(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(F::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(F::zero()));
        self.push(out, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu_scalar);
        self.push(out, Op::Gelu(a))
    }

    /// `sqrt(max(a, floor))`
    pub fn sqrt_floor(&mut self, a: Var, floor: f64) -> Var {
        let floor = F::lit(floor);
        let out = self.value(a).mapv(|x| x.max(floor).sqrt());
        self.push(out, Op::SqrtFloor(a, floor))
    }

    /// `ln(max(a, floor))`
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let floor = F::lit(floor);
        let out = self.value(a).mapv(|x| x.max(floor).ln());
        self.push(out, Op::LogFloor(a, floor))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let eps = F::lit(eps);
        let x = self.value(a);
        let cols = F::lit(x.ncols() as f64);
        let mut out = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / cols;
            let inv = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { input: a, inv_std })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        softmax_rows_inplace(&mut out);
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows { input: a, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { input: a, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Column sums, `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumRows(a))
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    /// `x · w + b` with `b` a `1 x c` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Multi-head scaled dot-product attention over projected queries, keys and
    /// values. Head `h` uses columns `h*dh..(h+1)*dh`; scores are scaled by
    /// `1/sqrt(dh)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, blocks: &[Block]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.ncols();
        assert!(heads > 0 && dim % heads == 0, "width {dim} not divisible by {heads} heads");
        assert_eq!(kv.ncols(), dim);
        assert_eq!(vv.ncols(), dim);
        let dh = dim / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut out = Array2::zeros((qv.nrows(), dim));
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        for b in blocks {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![b.queries.clone(), cols.clone()]);
                let kh = kv.slice(s![b.keys.clone(), cols.clone()]);
                let vh = vv.slice(s![b.keys.clone(), cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|x| x * scale);
                softmax_rows_inplace(&mut scores);
                out.slice_mut(s![b.queries.clone(), cols]).assign(&scores.dot(&vh));
                probs.push(scores);
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, blocks: blocks.to_vec(), probs })
    }

    /// Mean cross-entropy of row `r` of `logits` against class `targets[r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let mut probs = self.value(logits).to_owned();
        assert_eq!(probs.nrows(), targets.len());
        let lv = self.value(logits);
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            total += lse - row[t];
        }
        softmax_rows_inplace(&mut probs);
        let loss = total / F::lit(targets.len() as f64);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Back-propagates from `loss` (any shape; seeded with ones) and adds the
    /// parameter gradients into `out`.
    pub fn backward(&self, loss: Var, out: &mut Gradients<F>) {
        let mut grads: Vec<Option<Array2<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.value(loss).dim()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out_val = node.value.view();
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate_owned(*id, g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.dot(&bv.t());
                    let db = av.t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.dot(&bv);
                    let db = g.t().dot(&av);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.mapv(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.value(*b);
                    let db = &g * &self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, drow);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let drow = (&g * &self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let da = &g * &self.value(*row);
                    accumulate(&mut grads, *row, drow);
                    accumulate(&mut grads, *a, da);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.mapv(|x| x * c));
                }
                Op::Exp(a) => {
                    let da = &g * &out_val;
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let mut da = g;
                    Zip::from(&mut da).and(&self.value(*a)).for_each(|d, &x| {
                        if x <= F::zero() {
                            *d = F::zero();
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let mut da = g;
                    Zip::from(&mut da)
                        .and(&self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad_scalar(x));
                    accumulate(&mut grads, *a, da);
                }
                Op::SqrtFloor(a, floor) => {
                    let floor = *floor;
                    let half = F::lit(0.5);
                    let mut da = g;
                    Zip::from(&mut da).and(&self.value(*a)).and(&out_val).for_each(|d, &x, &y| {
                        *d = if x > floor { *d * half / y } else { F::zero() };
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::LogFloor(a, floor) => {
                    let floor = *floor;
                    let mut da = g;
                    Zip::from(&mut da).and(&self.value(*a)).for_each(|d, &x| {
                        *d = if x > floor { *d / x } else { F::zero() };
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { input, inv_std } => {
                    let cols = F::lit(g.ncols() as f64);
                    let mut da = g;
                    for ((mut drow, yrow), &inv) in
                        da.rows_mut().into_iter().zip(out_val.rows()).zip(inv_std.iter())
                    {
                        let mean_g = drow.sum() / cols;
                        let mean_gy = drow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<F>() / cols;
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &y| *d = inv * (*d - mean_g - y * mean_gy));
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::SoftmaxRows(a) => {
                    let mut da = g;
                    for (mut drow, yrow) in da.rows_mut().into_iter().zip(out_val.rows()) {
                        let dot = drow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<F>();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = y * (*d - dot));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Gather { table, ids } => {
                    let mut dt = Array2::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SliceRows { input, start } => {
                    let mut da = Array2::zeros(self.value(*input).dim());
                    da.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *input, da);
                }
                Op::SliceCols { input, start } => {
                    let mut da = Array2::zeros(self.value(*input).dim());
                    da.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *input, da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        let part = g.slice(s![offset..offset + rows, ..]).to_owned();
                        accumulate(&mut grads, p, part);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        let part = g.slice(s![.., offset..offset + cols]).to_owned();
                        accumulate(&mut grads, p, part);
                        offset += cols;
                    }
                }
                Op::SumRows(a) => {
                    let da = g.broadcast(self.value(*a).dim()).expect("row broadcast").to_owned();
                    accumulate(&mut grads, *a, da);
                }
                Op::SumCols(a) => {
                    let da = g.broadcast(self.value(*a).dim()).expect("column broadcast").to_owned();
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, da);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.t().to_owned());
                }
                Op::Attention { q, k, v, heads, blocks, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dh = qv.ncols() / heads;
                    let scale = F::lit(1.0 / (dh as f64).sqrt());
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (bi, b) in blocks.iter().enumerate() {
                        for h in 0..*heads {
                            let p = &probs[bi * heads + h];
                            let cols = h * dh..(h + 1) * dh;
                            let go = g.slice(s![b.queries.clone(), cols.clone()]);
                            let qh = qv.slice(s![b.queries.clone(), cols.clone()]);
                            let kh = kv.slice(s![b.keys.clone(), cols.clone()]);
                            let vh = vv.slice(s![b.keys.clone(), cols.clone()]);
                            let mut ds = go.dot(&vh.t());
                            {
                                let mut dvh = dv.slice_mut(s![b.keys.clone(), cols.clone()]);
                                dvh += &p.t().dot(&go);
                            }
                            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<F>();
                                Zip::from(&mut drow)
                                    .and(&prow)
                                    .for_each(|d, &pp| *d = pp * (*d - dot) * scale);
                            }
                            {
                                let mut dqh = dq.slice_mut(s![b.queries.clone(), cols.clone()]);
                                dqh += &ds.dot(&kh);
                            }
                            let mut dkh = dk.slice_mut(s![b.keys.clone(), cols]);
                            dkh += &ds.t().dot(&qh);
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let factor = g[[0, 0]] / F::lit(targets.len() as f64);
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[[r, t]] -= F::one();
                    }
                    dl.mapv_inplace(|x| x * factor);
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
    }
}
