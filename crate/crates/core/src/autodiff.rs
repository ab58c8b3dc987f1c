//! Reverse-mode automatic differentiation over the small, closed set of
//! operations an unrolled dual-FISTA solve is made of.
//!
//! A [`Tape`] records nodes in execution order. Each node keeps its value;
//! backward rules read the values of their inputs straight from the tape,
//! so nothing is copied twice. [`Tape::backward`] seeds the scalar loss with
//! 1 and walks the nodes in strict reverse order, accumulating transpose
//! Jacobian-vector products into per-node adjoints.
//!
//! ```
//! use analysparse::autodiff::Tape;
//! use analysparse::linalg::Tensor;
//!
//! let mut tape = Tape::new();
//! let a = tape.input(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap(), true);
//! let x = tape.input(Tensor::vector(vec![1.0, 1.0]), false);
//! let y = tape.matvec(a, x).unwrap();
//! let loss = tape.sqdist(y, &Tensor::vector(vec![0.0, 0.0])).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! // d/dA ||Ax||^2 = 2 (Ax) x^T
//! assert_eq!(grads.wrt(a).data(), &[2.0, 2.0, 4.0, 4.0]);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{self, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
    requires_grad: bool,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Debug)]
enum Op {
    Input,
    /// `A x`
    MatVec { a: usize, x: usize },
    /// `A^T x`
    MatVecT { a: usize, x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Clamp1 { a: usize },
    SqDist { a: usize, target: Tensor },
    SmoothSign { a: usize, eps: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only operation log.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bytes: usize,
    budget: Option<usize>,
    consumed: bool,
}

/// Entrywise projection onto `[-1, 1]`.
pub fn clamp_unit(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(-1.0, 1.0))
}

/// Entrywise `v / sqrt(v^2 + eps^2)`, the gradient of the smoothed l1 norm.
pub fn smooth_sign(t: &Tensor, eps: f64) -> Tensor {
    let e2 = eps * eps;
    t.map(|v| v / (v * v + e2).sqrt())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that refuses to grow past `bytes` of stored values.
    pub fn with_budget(bytes: usize) -> Self {
        Tape {
            budget: Some(bytes),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values.
    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    /// Pre-projection inputs of every clamp node, in recording order.
    pub fn clamp_inputs(&self) -> impl Iterator<Item = &Tensor> + '_ {
        self.nodes.iter().filter_map(move |n| match n.op {
            Op::Clamp1 { a } => Some(&self.nodes[a].value),
            _ => None,
        })
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        let extra = match &op {
            Op::SqDist { target, .. } => target.len(),
            _ => 0,
        };
        self.bytes += (value.len() + extra) * std::mem::size_of::<f64>();
        if let Some(budget) = self.budget {
            if self.bytes > budget {
                return Err(Error::UnrollBudget { budget });
            }
        }
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var {
            id,
            rows,
            cols,
            requires_grad,
        })
    }

    fn grad_of(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        // leaves always fit: the budget guards unrolled growth, not inputs
        let budget = self.budget.take();
        let v = self.push(Op::Input, t, requires_grad).expect("no budget set");
        self.budget = budget;
        v
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let value = linalg::matvec(self.value(a), self.value(x))?;
        let rg = self.grad_of(&[a.id, x.id]);
        self.push(Op::MatVec { a: a.id, x: x.id }, value, rg)
    }

    /// Records `A^T x`.
    pub fn matvec_t(&mut self, a: Var, x: Var) -> Result<Var> {
        let value = linalg::matvec_t(self.value(a), self.value(x))?;
        let rg = self.grad_of(&[a.id, x.id]);
        self.push(Op::MatVecT { a: a.id, x: x.id }, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.grad_of(&[a.id, b.id]);
        self.push(Op::Add { a: a.id, b: b.id }, value, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.grad_of(&[a.id, b.id]);
        self.push(Op::Sub { a: a.id, b: b.id }, value, rg)
    }

    /// Multiplication by a constant that is not differentiated.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        let rg = self.grad_of(&[a.id]);
        self.push(Op::Scale { a: a.id, c }, value, rg)
    }

    /// Entrywise clamp to `[-1, 1]`. The gradient passes wherever
    /// `|a| <= 1`, boundary included.
    pub fn clamp1(&mut self, a: Var) -> Result<Var> {
        let value = clamp_unit(self.value(a));
        let rg = self.grad_of(&[a.id]);
        self.push(Op::Clamp1 { a: a.id }, value, rg)
    }

    /// Scalar `||a - target||^2`.
    pub fn sqdist(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let diff = self.value(a).sub(target)?;
        let value = Tensor::scalar(diff.sq_norm());
        let rg = self.grad_of(&[a.id]);
        self.push(
            Op::SqDist {
                a: a.id,
                target: target.clone(),
            },
            value,
            rg,
        )
    }

    /// Entrywise `a / sqrt(a^2 + eps^2)`.
    pub fn smooth_sign(&mut self, a: Var, eps: f64) -> Result<Var> {
        let value = smooth_sign(self.value(a), eps);
        let rg = self.grad_of(&[a.id]);
        self.push(Op::SmoothSign { a: a.id, eps }, value, rg)
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.backward_seeded(loss, 1.0)
    }

    /// Backward pass with the loss adjoint seeded to `seed`.
    pub fn backward_seeded(&mut self, loss: Var, seed: f64) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            let (rows, cols) = self.value(loss).shape();
            return Err(Error::NonScalarLoss { rows, cols });
        }
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        self.consumed = true;

        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.id + 1, || None);
        adj[loss.id] = Some(vec![seed]);
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let adj = &mut adj;
            match &node.op {
                Op::Input => {
                    let (r, c) = node.value.shape();
                    leaves.insert(id, Tensor::new(r, c, g).expect("adjoint shape"));
                }
                Op::MatVec { a, x } => {
                    let x_val = nodes[*x].value.data();
                    if let Some(ga) = slot(adj, nodes, *a) {
                        linalg::add_outer(ga, &g, x_val);
                    }
                    let a_val = &nodes[*a].value;
                    if let Some(gx) = slot(adj, nodes, *x) {
                        for (gi, row) in g.iter().zip(a_val.data().chunks_exact(a_val.cols())) {
                            linalg::axpy(*gi, row, gx);
                        }
                    }
                }
                Op::MatVecT { a, x } => {
                    let x_val = nodes[*x].value.data();
                    if let Some(ga) = slot(adj, nodes, *a) {
                        linalg::add_outer(ga, x_val, &g);
                    }
                    let a_val = &nodes[*a].value;
                    if let Some(gx) = slot(adj, nodes, *x) {
                        for (gx_i, row) in gx.iter_mut().zip(a_val.data().chunks_exact(a_val.cols())) {
                            *gx_i += linalg::dot(row, &g);
                        }
                    }
                }
                Op::Add { a, b } => {
                    if let Some(ga) = slot(adj, nodes, *a) {
                        linalg::axpy(1.0, &g, ga);
                    }
                    if let Some(gb) = slot(adj, nodes, *b) {
                        linalg::axpy(1.0, &g, gb);
                    }
                }
                Op::Sub { a, b } => {
                    if let Some(ga) = slot(adj, nodes, *a) {
                        linalg::axpy(1.0, &g, ga);
                    }
                    if let Some(gb) = slot(adj, nodes, *b) {
                        linalg::axpy(-1.0, &g, gb);
                    }
                }
                Op::Scale { a, c } => {
                    if let Some(ga) = slot(adj, nodes, *a) {
                        linalg::axpy(*c, &g, ga);
                    }
                }
                Op::Clamp1 { a } => {
                    let a_val = nodes[*a].value.data();
                    if let Some(ga) = slot(adj, nodes, *a) {
                        for ((gi, yi), ai) in ga.iter_mut().zip(&g).zip(a_val) {
                            if ai.abs() <= 1.0 {
                                *gi += yi;
                            }
                        }
                    }
                }
                Op::SqDist { a, target } => {
                    let a_val = nodes[*a].value.data();
                    let scale = 2.0 * g[0];
                    if let Some(ga) = slot(adj, nodes, *a) {
                        for ((gi, ai), wi) in ga.iter_mut().zip(a_val).zip(target.data()) {
                            *gi += scale * (ai - wi);
                        }
                    }
                }
                Op::SmoothSign { a, eps } => {
                    let a_val = nodes[*a].value.data();
                    let e2 = eps * eps;
                    if let Some(ga) = slot(adj, nodes, *a) {
                        for ((gi, yi), ai) in ga.iter_mut().zip(&g).zip(a_val) {
                            let r = ai * ai + e2;
                            *gi += yi * e2 / (r * r.sqrt());
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], target: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[target].requires_grad {
        return None;
    }
    let len = nodes[target].value.len();
    Some(adj[target].get_or_insert_with(|| vec![0.0; len]))
}

/// Adjoints of the leaves that required a gradient.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.id)
    }

    /// Adjoint of `v`, zero when `v` was unreachable or frozen.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.leaves
            .get(&v.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.rows, v.cols))
    }
}

/// Outcome of comparing an AD gradient with central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates that were compared.
    pub checked: usize,
    /// Coordinates whose stencil touched a clamp kink.
    pub skipped: Vec<usize>,
    pub ad: Tensor,
    pub fd: Tensor,
}

/// Entries smaller than this fraction of the largest gradient entry (or 1)
/// are compared against that floor instead of their own magnitude.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Relative error used by [`grad_check`].
pub fn relative_error(ad: f64, fd: f64, scale: f64) -> f64 {
    let floor = GRAD_CHECK_FLOOR * scale.max(1.0);
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor)
}

/// Compares the gradient of `f` at `x` against central differences with step `h`.
///
/// `f` records a scalar loss as a function of its input var. A coordinate is
/// skipped when its `x +- h e_i` recordings disagree on which clamp entries
/// are active, or put any clamp input within `exclusion_band` of `+-1`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, exclusion_band: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let xv = tape.input(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    let ad = tape.backward(loss)?.wrt(xv);

    let probe = |point: Tensor| -> Result<(f64, Vec<f64>)> {
        let mut t = Tape::new();
        let v = t.input(point, false);
        let l = f(&mut t, v)?;
        let clamps = t.clamp_inputs().flat_map(|c| c.data().iter().copied()).collect();
        Ok((t.value(l).data()[0], clamps))
    };

    let mut fd = Tensor::zeros(x.rows(), x.cols());
    let mut skipped = Vec::new();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, cp) = probe(plus)?;
        let (fm, cm) = probe(minus)?;
        fd.data_mut()[i] = (fp - fm) / (2.0 * h);

        let kinked = cp.len() != cm.len()
            || cp.iter().zip(&cm).any(|(a, b)| {
                (a.abs() <= 1.0) != (b.abs() <= 1.0)
                    || (a.abs() - 1.0).abs() < exclusion_band
                    || (b.abs() - 1.0).abs() < exclusion_band
            });
        if kinked {
            skipped.push(i);
        }
    }

    let scale = linalg::linf_norm(&ad);
    let mut max_rel_error: f64 = 0.0;
    for i in 0..x.len() {
        if skipped.binary_search(&i).is_ok() {
            continue;
        }
        max_rel_error = max_rel_error.max(relative_error(ad.data()[i], fd.data()[i], scale));
    }
    Ok(GradCheckReport {
        max_rel_error,
        checked: x.len() - skipped.len(),
        skipped,
        ad,
        fd,
    })
}
