//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] borrows a [`ParamSet`] and records every primitive applied to
//! parameters and constants. Values are computed eagerly when an op is
//! recorded; [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints into a [`Gradients`] aligned with the parameter set.
//!
//! All vectors are `1 × n` rows. Affine maps are written `x · Wᵀ` so a weight
//! `W` of shape `out × in` applies to every row of `x` at once.

use super::activation::{softplus, Activation};
use super::{Gradients, Matrix, ParamId, ParamSet};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Constant,
    /// `a · wᵀ`
    MatMulT(Var, Var),
    /// Adds a `1 × m` row to every row.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Act(Activation, Var),
    Scale(Var, f64),
    GatherRows(Var, Vec<usize>),
    /// Row `g` of the output is the sum of the table rows listed in group `g`.
    GatherSum(Var, Vec<Vec<usize>>),
    /// Row `g` of the output is the sum of the listed columns of `w`.
    ColumnSum(Var, Vec<Vec<usize>>),
    /// Sums consecutive runs of rows with the given lengths.
    SegmentSum(Var, Vec<usize>),
    Row(Var, usize),
    StackRows(Vec<Var>),
    SumAll(Var),
    SumSquares(Var),
    /// Σ over rows of the cross-entropy between a sparse target distribution
    /// and `softmax(row)`.
    SoftmaxXent(Var, Vec<Vec<(usize, f64)>>),
    /// Σ of elementwise binary cross-entropy between targets and `sigmoid(x)`.
    SigmoidXent(Var, Matrix),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => &self.nodes[v.0].value,
        }
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Matrix::zeros(0, 0),
        });
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value)
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Var {
        let value = compute(&op, |v| self.value(v));
        self.push(op, value)
    }

    pub fn matmul_t(&mut self, a: Var, w: Var) -> Var {
        assert_eq!(
            self.value(a).cols(),
            self.value(w).cols(),
            "matmul_t inner dimension"
        );
        self.record(Op::MatMulT(a, w))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        assert_eq!(self.value(b).rows(), 1, "bias must be a row");
        assert_eq!(self.value(x).cols(), self.value(b).cols(), "bias width");
        self.record(Op::AddBias(x, b))
    }

    /// `x · Wᵀ + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_t(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        self.record(Op::Mul(a, b))
    }

    pub fn act(&mut self, kind: Activation, x: Var) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        self.record(Op::Act(kind, x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.record(Op::Scale(x, c))
    }

    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let rows = self.value(table).rows();
        assert!(indices.iter().all(|&i| i < rows), "gather index");
        self.record(Op::GatherRows(table, indices))
    }

    pub fn gather_sum(&mut self, table: Var, groups: Vec<Vec<usize>>) -> Var {
        let rows = self.value(table).rows();
        assert!(groups.iter().flatten().all(|&i| i < rows), "gather index");
        self.record(Op::GatherSum(table, groups))
    }

    pub fn column_sum(&mut self, w: Var, groups: Vec<Vec<usize>>) -> Var {
        let cols = self.value(w).cols();
        assert!(groups.iter().flatten().all(|&i| i < cols), "column index");
        self.record(Op::ColumnSum(w, groups))
    }

    pub fn segment_sum(&mut self, x: Var, lengths: Vec<usize>) -> Var {
        assert_eq!(
            lengths.iter().sum::<usize>(),
            self.value(x).rows(),
            "segment lengths"
        );
        self.record(Op::SegmentSum(x, lengths))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        assert!(i < self.value(x).rows(), "row index");
        self.record(Op::Row(x, i))
    }

    pub fn stack_rows(&mut self, rows: Vec<Var>) -> Var {
        assert!(!rows.is_empty());
        let cols = self.value(rows[0]).cols();
        assert!(
            rows.iter().all(|&r| self.value(r).shape() == (1, cols)),
            "stack_rows expects equal-width rows"
        );
        self.record(Op::StackRows(rows))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.record(Op::SumAll(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        self.record(Op::SumSquares(x))
    }

    /// Adds a list of scalars; an empty list yields a zero constant.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter().copied();
        let Some(mut acc) = iter.next() else {
            return self.constant(Matrix::scalar(0.0));
        };
        for t in iter {
            acc = self.add(acc, t);
        }
        acc
    }

    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<Vec<(usize, f64)>>) -> Var {
        let (rows, cols) = self.value(logits).shape();
        assert_eq!(targets.len(), rows, "one target per row");
        assert!(
            targets.iter().flatten().all(|&(k, _)| k < cols),
            "target class index"
        );
        self.record(Op::SoftmaxXent(logits, targets))
    }

    pub fn sigmoid_xent(&mut self, logits: Var, targets: Matrix) -> Var {
        assert_eq!(self.value(logits).shape(), targets.shape(), "target shape");
        self.record(Op::SigmoidXent(logits, targets))
    }

    /// Recomputes every node from its inputs, in order.
    pub fn replay(&self) -> Vec<Matrix> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Param(id) => self.params.get(*id).clone(),
                Op::Constant => node.value.clone(),
                op => compute(op, |v| &values[v.0]),
            };
            values.push(v);
        }
        values
    }

    /// Recorded node values in order; parameters appear as their current value.
    pub fn recorded_values(&self) -> Vec<Matrix> {
        (0..self.nodes.len())
            .map(|i| self.value(Var(i)).clone())
            .collect()
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward needs a scalar"
        );
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(dy) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(_) | Op::Constant => {
                    adj[idx] = Some(dy);
                }
                Op::MatMulT(a, w) => {
                    let av = self.value(*a);
                    let wv = self.value(*w);
                    // dA = dY · W ; dW = dYᵀ · A
                    let da = dy.matmul(wv);
                    let dw = dy.transpose().matmul(av);
                    self.acc(&mut adj, *a, |g| g.add_scaled(&da, 1.0));
                    self.acc(&mut adj, *w, |g| g.add_scaled(&dw, 1.0));
                }
                Op::AddBias(x, b) => {
                    self.acc(&mut adj, *b, |g| {
                        for r in 0..dy.rows() {
                            for (gv, &d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                                *gv += d;
                            }
                        }
                    });
                    self.acc(&mut adj, *x, |g| g.add_scaled(&dy, 1.0));
                }
                Op::Add(a, b) => {
                    self.acc(&mut adj, *a, |g| g.add_scaled(&dy, 1.0));
                    self.acc(&mut adj, *b, |g| g.add_scaled(&dy, 1.0));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut adj, *a, |g| g.add_scaled(&dy, 1.0));
                    self.acc(&mut adj, *b, |g| g.add_scaled(&dy, -1.0));
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(self.value(*b), |d, y| d * y);
                    let db = dy.zip_map(self.value(*a), |d, x| d * x);
                    self.acc(&mut adj, *a, |g| g.add_scaled(&da, 1.0));
                    self.acc(&mut adj, *b, |g| g.add_scaled(&db, 1.0));
                }
                Op::Act(kind, x) => {
                    let dx = dy.zip_map(&node.value, |d, y| d * kind.derivative_from_output(y));
                    self.acc(&mut adj, *x, |g| g.add_scaled(&dx, 1.0));
                }
                Op::Scale(x, c) => {
                    self.acc(&mut adj, *x, |g| g.add_scaled(&dy, *c));
                }
                Op::GatherRows(table, indices) => {
                    self.acc(&mut adj, *table, |g| {
                        for (r, &i) in indices.iter().enumerate() {
                            for (gv, &d) in g.row_mut(i).iter_mut().zip(dy.row(r)) {
                                *gv += d;
                            }
                        }
                    });
                }
                Op::GatherSum(table, groups) => {
                    self.acc(&mut adj, *table, |g| {
                        for (r, group) in groups.iter().enumerate() {
                            for &i in group {
                                for (gv, &d) in g.row_mut(i).iter_mut().zip(dy.row(r)) {
                                    *gv += d;
                                }
                            }
                        }
                    });
                }
                Op::ColumnSum(w, groups) => {
                    self.acc(&mut adj, *w, |g| {
                        for (r, group) in groups.iter().enumerate() {
                            for (i, &d) in dy.row(r).iter().enumerate() {
                                for &c in group {
                                    g[(i, c)] += d;
                                }
                            }
                        }
                    });
                }
                Op::SegmentSum(x, lengths) => {
                    self.acc(&mut adj, *x, |g| {
                        let mut row = 0;
                        for (s, &len) in lengths.iter().enumerate() {
                            for _ in 0..len {
                                for (gv, &d) in g.row_mut(row).iter_mut().zip(dy.row(s)) {
                                    *gv += d;
                                }
                                row += 1;
                            }
                        }
                    });
                }
                Op::Row(x, i) => {
                    self.acc(&mut adj, *x, |g| {
                        for (gv, &d) in g.row_mut(*i).iter_mut().zip(dy.data()) {
                            *gv += d;
                        }
                    });
                }
                Op::StackRows(rows) => {
                    for (r, &x) in rows.iter().enumerate() {
                        self.acc(&mut adj, x, |g| {
                            for (gv, &d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                                *gv += d;
                            }
                        });
                    }
                }
                Op::SumAll(x) => {
                    let d = dy.item();
                    self.acc(&mut adj, *x, |g| {
                        g.data_mut().iter_mut().for_each(|v| *v += d)
                    });
                }
                Op::SumSquares(x) => {
                    let d = dy.item();
                    let xv = self.value(*x);
                    self.acc(&mut adj, *x, |g| g.add_scaled(xv, 2.0 * d));
                }
                Op::SoftmaxXent(logits, targets) => {
                    let d = dy.item();
                    let lv = self.value(*logits);
                    self.acc(&mut adj, *logits, |g| {
                        for (r, target) in targets.iter().enumerate() {
                            let p = super::softmax(lv.row(r));
                            let mass: f64 = target.iter().map(|&(_, t)| t).sum();
                            let grow = g.row_mut(r);
                            for (gv, pk) in grow.iter_mut().zip(&p) {
                                *gv += d * mass * pk;
                            }
                            for &(k, t) in target {
                                grow[k] -= d * t;
                            }
                        }
                    });
                }
                Op::SigmoidXent(logits, targets) => {
                    let d = dy.item();
                    let lv = self.value(*logits);
                    self.acc(&mut adj, *logits, |g| {
                        for ((gv, &l), &t) in
                            g.data_mut().iter_mut().zip(lv.data()).zip(targets.data())
                        {
                            *gv += d * (super::sigmoid(l) - t);
                        }
                    });
                }
            }
        }

        let mut grads = self.params.zeros_like();
        for (pid, slot) in self.param_nodes.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = adj[v.0].take() {
                    *grads.get_mut(ParamId(pid)) = g;
                }
            }
        }
        grads
    }

    fn acc(&self, adj: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        let slot = &mut adj[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Matrix::zeros(r, c));
        }
        f(slot.as_mut().expect("allocated above"));
    }
}

fn compute<'a>(op: &Op, get: impl Fn(Var) -> &'a Matrix) -> Matrix {
    match op {
        Op::Param(_) | Op::Constant => unreachable!("leaves are not recomputed"),
        Op::MatMulT(a, w) => get(*a).matmul_t(get(*w)),
        Op::AddBias(x, b) => {
            let mut out = get(*x).clone();
            let bias = get(*b).data();
            for r in 0..out.rows() {
                for (o, &bv) in out.row_mut(r).iter_mut().zip(bias) {
                    *o += bv;
                }
            }
            out
        }
        Op::Add(a, b) => get(*a).zip_map(get(*b), |x, y| x + y),
        Op::Sub(a, b) => get(*a).zip_map(get(*b), |x, y| x - y),
        Op::Mul(a, b) => get(*a).zip_map(get(*b), |x, y| x * y),
        Op::Act(kind, x) => get(*x).map(|v| kind.apply(v)),
        Op::Scale(x, c) => get(*x).map(|v| v * c),
        Op::GatherRows(table, indices) => {
            let t = get(*table);
            let mut out = Matrix::zeros(indices.len(), t.cols());
            for (r, &i) in indices.iter().enumerate() {
                out.row_mut(r).copy_from_slice(t.row(i));
            }
            out
        }
        Op::GatherSum(table, groups) => {
            let t = get(*table);
            let mut out = Matrix::zeros(groups.len(), t.cols());
            for (r, group) in groups.iter().enumerate() {
                let dst = out.row_mut(r);
                for &i in group {
                    for (o, &s) in dst.iter_mut().zip(t.row(i)) {
                        *o += s;
                    }
                }
            }
            out
        }
        Op::ColumnSum(w, groups) => {
            let wv = get(*w);
            let mut out = Matrix::zeros(groups.len(), wv.rows());
            for (r, group) in groups.iter().enumerate() {
                for i in 0..wv.rows() {
                    let wr = wv.row(i);
                    out[(r, i)] = group.iter().map(|&c| wr[c]).sum();
                }
            }
            out
        }
        Op::SegmentSum(x, lengths) => {
            let xv = get(*x);
            let mut out = Matrix::zeros(lengths.len(), xv.cols());
            let mut row = 0;
            for (s, &len) in lengths.iter().enumerate() {
                let dst = out.row_mut(s);
                for _ in 0..len {
                    for (o, &v) in dst.iter_mut().zip(xv.row(row)) {
                        *o += v;
                    }
                    row += 1;
                }
            }
            out
        }
        Op::Row(x, i) => Matrix::row_vector(get(*x).row(*i).to_vec()),
        Op::StackRows(rows) => {
            let cols = get(rows[0]).cols();
            let mut data = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                data.extend_from_slice(get(r).data());
            }
            Matrix::from_vec(rows.len(), cols, data).expect("equal-width rows")
        }
        Op::SumAll(x) => Matrix::scalar(get(*x).sum()),
        Op::SumSquares(x) => Matrix::scalar(get(*x).sum_squares()),
        Op::SoftmaxXent(logits, targets) => {
            let lv = get(*logits);
            let mut total = 0.0;
            for (r, target) in targets.iter().enumerate() {
                let row = lv.row(r);
                let lse = super::log_sum_exp(row);
                for &(k, t) in target {
                    total += t * (lse - row[k]);
                }
            }
            Matrix::scalar(total)
        }
        Op::SigmoidXent(logits, targets) => {
            let total = get(*logits)
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&l, &t)| softplus(l) - t * l)
                .sum();
            Matrix::scalar(total)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamRole;
    use approx::assert_abs_diff_eq;

    fn params() -> (ParamSet, ParamId, ParamId) {
        let mut ps = ParamSet::new();
        let w = ps.insert(
            "w",
            ParamRole::Weight,
            Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![-0.3, 0.7]]).unwrap(),
        );
        let table = ps.insert(
            "table",
            ParamRole::Embedding,
            Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.1], vec![0.3, 0.3]]).unwrap(),
        );
        (ps, w, table)
    }

    #[test]
    fn matmul_t_backward_matches_hand_derivation() {
        let (ps, w, _) = params();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Matrix::row_vector(vec![1.0, 3.0]));
        let wv = tape.param(w);
        let y = tape.matmul_t(x, wv);
        let loss = tape.sum_all(y);
        assert_abs_diff_eq!(
            tape.value(loss).item(),
            0.5 - 3.0 + 2.0 + 0.75 - 0.3 + 2.1,
            epsilon = 1e-12
        );
        let g = tape.backward(loss);
        // d/dW_ij sum(x Wᵀ) = x_j
        for i in 0..3 {
            assert_eq!(g.get(w).row(i), &[1.0, 3.0]);
        }
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let (ps, _, table) = params();
        let mut tape = Tape::new(&ps);
        let t = tape.param(table);
        let rows = tape.gather_sum(t, vec![vec![0, 0, 2], vec![]]);
        assert_eq!(tape.value(rows).row(0), &[2.3, 4.3]);
        assert_eq!(tape.value(rows).row(1), &[0.0, 0.0]);
        let loss = tape.sum_all(rows);
        let g = tape.backward(loss);
        assert_eq!(g.get(table).row(0), &[2.0, 2.0]);
        assert_eq!(g.get(table).row(1), &[0.0, 0.0]);
        assert_eq!(g.get(table).row(2), &[1.0, 1.0]);
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let (ps, w, table) = params();
        let mut tape = Tape::new(&ps);
        let t = tape.param(table);
        let wv = tape.param(w);
        let x = tape.gather_rows(t, vec![2, 0, 1]);
        let h = tape.matmul_t(x, wv);
        let h = tape.act(Activation::Tanh, h);
        let s = tape.segment_sum(h, vec![2, 1]);
        let l = tape.softmax_xent(s, vec![vec![(0, 1.0)], vec![(1, 0.5), (2, 0.5)]]);
        let _ = tape.backward(l);
        assert_eq!(tape.replay(), tape.recorded_values());
    }

    #[test]
    fn fused_losses_are_stable() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let l = tape.constant(Matrix::row_vector(vec![1000.0, -1000.0]));
        let ce = tape.softmax_xent(l, vec![vec![(1, 1.0)]]);
        assert_abs_diff_eq!(tape.value(ce).item(), 2000.0);
        let bce = tape.sigmoid_xent(l, Matrix::row_vector(vec![0.0, 1.0]));
        assert_abs_diff_eq!(tape.value(bce).item(), 2000.0);
    }
}
