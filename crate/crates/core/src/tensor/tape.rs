use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::resize::{bilinear_resize_adjoint, bilinear_resize_slice};
use super::{axis_extents, numel, Float, Tensor, TensorId};
use crate::error::{Error, Result};

type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Float> {
    shape: Vec<usize>,
    value: Rc<[T]>,
    requires_grad: bool,
    leaf: Option<TensorId>,
    parents: Vec<usize>,
    /// Which parents want a gradient; fixed when the node is recorded.
    needs: Vec<bool>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of operations. Nodes are appended as they are computed, so
/// the vector is always in topological order.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    leaves: RefCell<HashMap<TensorId, usize>>,
    macs: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(HashMap::new()),
            macs: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Rc<[T]>,
        parents: &[usize],
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let needs: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
        let requires_grad = needs.iter().any(|&n| n);
        let node = Node {
            shape,
            value,
            requires_grad,
            leaf: None,
            parents: if requires_grad { parents.to_vec() } else { Vec::new() },
            needs: if requires_grad { needs } else { Vec::new() },
            backward: if requires_grad { backward } else { None },
        };
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn op(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: &[usize],
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var<'_, T> {
        self.push(shape, value.into(), parents, Some(Box::new(backward)))
    }

    /// Records a parameter or input. A tensor entered twice maps to the same
    /// node, so fan-out gradients are summed in one place.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.leaves.borrow().get(&tensor.id()) {
            return Var { tape: self, id };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().into(),
            requires_grad: tensor.requires_grad(),
            leaf: Some(tensor.id()),
            parents: Vec::new(),
            needs: Vec::new(),
            backward: None,
        });
        let id = nodes.len() - 1;
        self.leaves.borrow_mut().insert(tensor.id(), id);
        Var { tape: self, id }
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data().into(), &[], None)
    }

    pub fn constant_from(&self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var<'_, T>> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn zeros(&self, shape: impl Into<Vec<usize>>) -> Var<'_, T> {
        self.constant(Tensor::zeros(shape))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(bw) = &node.backward {
                let contributions = bw(&g, &node.needs);
                for ((&parent, &need), contribution) in node.parents.iter().zip(&node.needs).zip(contributions) {
                    let (true, Some(c)) = (need, contribution) else {
                        continue;
                    };
                    debug_assert_eq!(c.len(), nodes[parent].value.len());
                    match &mut grads[parent] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[i] = Some(g);
        }
        let leaves = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.leaf.map(|id| (id, i)))
            .collect();
        Ok(Gradients { grads, leaves })
    }

    fn value_of(&self, id: usize) -> Rc<[T]> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients<T: Float> {
    grads: Vec<Option<Vec<T>>>,
    leaves: HashMap<TensorId, usize>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn for_tensor(&self, id: TensorId) -> Option<&[T]> {
        self.leaves.get(&id).and_then(|&i| self.grads[i].as_deref())
    }

    /// Adds this pass's gradient into `tensor.grad` when the tensor takes
    /// part in the pass and requires a gradient.
    pub fn accumulate_into(&self, tensor: &mut Tensor<T>) {
        if !tensor.requires_grad() {
            return;
        }
        if let Some(g) = self.for_tensor(tensor.id()) {
            tensor.accumulate_grad(g);
        }
    }
}

/// `c (+)= op(a) * op(b)` where `op` optionally transposes. `a` is stored as
/// `[m,k]` (or `[k,m]` when `ta`), `b` as `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm<T: Float>(ta: bool, tb: bool, m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices have exactly the extents the strides describe.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradients of `c = op(a) op(b)` with respect to the stored `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm_backward<T: Float>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    dc: &[T],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let da = need_a.then(|| {
        let mut da = vec![T::zero(); m * k];
        match (ta, tb) {
            (false, false) => gemm(false, true, m, n, k, dc, b, &mut da),
            (true, false) => gemm(false, true, k, n, m, b, dc, &mut da),
            (false, true) => gemm(false, false, m, n, k, dc, b, &mut da),
            (true, true) => gemm(true, true, k, n, m, b, dc, &mut da),
        }
        da
    });
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); k * n];
        match (ta, tb) {
            (false, false) => gemm(true, false, k, m, n, a, dc, &mut db),
            (true, false) => gemm(false, false, k, m, n, a, dc, &mut db),
            (false, true) => gemm(true, false, n, m, k, dc, a, &mut db),
            (true, true) => gemm(true, true, n, m, k, dc, a, &mut db),
        }
        db
    });
    (da, db)
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn sigmoid_clamped<T: Float>(x: T) -> T {
    let lim = T::from_f64(30.0);
    let xc = x.max(-lim).min(lim);
    T::one() / (T::one() + (-xc).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation of GELU.
pub(crate) fn gelu_scalar<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Rc<[T]> {
        self.tape.value_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(self.shape(), self.value().to_vec()).expect("consistent by construction")
    }

    /// Value of a single-element var.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on var of shape {:?}", self.shape());
        v[0]
    }

    fn unary(
        self,
        forward: impl Fn(T) -> T,
        // derivative from (input, output)
        derivative: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y: Rc<[T]> = x.iter().map(|&v| forward(v)).collect();
        let y_saved = y.clone();
        self.tape.push(
            self.shape(),
            y,
            &[self.id],
            Some(Box::new(move |g, _| {
                let dx = g
                    .iter()
                    .zip(x.iter().zip(y_saved.iter()))
                    .map(|(&g, (&x, &y))| g * derivative(x, y))
                    .collect();
                vec![Some(dx)]
            })),
        )
    }

    // ---- matrix products -------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_ex(other, false, false)
    }

    /// `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_ex(other, false, true)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_ex(self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!(
                "matmul expects rank-2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {sa:?}{} x {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let k = ka;
        let (a, b) = (self.value(), other.value());
        let mut c = vec![T::zero(); m * n];
        gemm(ta, tb, m, k, n, &a, &b, &mut c);
        self.tape.macs.set(self.tape.macs.get() + (m * k * n) as u64);
        Ok(self.tape.op(vec![m, n], c, &[self.id, other.id], move |g, needs| {
            let (da, db) = gemm_backward(ta, tb, m, k, n, &a, &b, g, needs[0], needs[1]);
            vec![da, db]
        }))
    }

    /// Batched product over a shared leading axis: `[B,m,k] x [B,k,n]`, with
    /// optional transposition of each batch element.
    pub fn bmm(self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(format!(
                "bmm expects [B,..] operands with equal B, got {sa:?} and {sb:?}"
            )));
        }
        let batch = sa[0];
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(Error::dim(format!(
                "bmm inner dimensions disagree: {sa:?} x {sb:?} (ta={ta}, tb={tb})"
            )));
        }
        let k = ka;
        let (a, b) = (self.value(), other.value());
        let mut c = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                ta,
                tb,
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                &b[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
        self.tape.macs.set(self.tape.macs.get() + (batch * m * k * n) as u64);
        Ok(self
            .tape
            .op(vec![batch, m, n], c, &[self.id, other.id], move |g, needs| {
                let mut da = needs[0].then(|| vec![T::zero(); batch * m * k]);
                let mut db = needs[1].then(|| vec![T::zero(); batch * k * n]);
                for i in 0..batch {
                    let (pa, pb) = gemm_backward(
                        ta,
                        tb,
                        m,
                        k,
                        n,
                        &a[i * m * k..(i + 1) * m * k],
                        &b[i * k * n..(i + 1) * k * n],
                        &g[i * m * n..(i + 1) * m * n],
                        needs[0],
                        needs[1],
                    );
                    if let (Some(da), Some(pa)) = (da.as_mut(), pa) {
                        da[i * m * k..(i + 1) * m * k].copy_from_slice(&pa);
                    }
                    if let (Some(db), Some(pb)) = (db.as_mut(), pb) {
                        db[i * k * n..(i + 1) * k * n].copy_from_slice(&pb);
                    }
                }
                vec![da, db]
            }))
    }

    // ---- elementwise binary ---------------------------------------------

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        same_shape("add", &shape, &other.shape())?;
        let (a, b) = (self.value(), other.value());
        let c = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        Ok(self.tape.op(shape, c, &[self.id, other.id], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        same_shape("sub", &shape, &other.shape())?;
        let (a, b) = (self.value(), other.value());
        let c = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        Ok(self.tape.op(shape, c, &[self.id, other.id], |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|&v| -v).collect()),
            ]
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        same_shape("mul", &shape, &other.shape())?;
        let (a, b) = (self.value(), other.value());
        let c = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        Ok(self.tape.op(shape, c, &[self.id, other.id], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(b.iter()).map(|(&g, &y)| g * y).collect()),
                needs[1].then(|| g.iter().zip(a.iter()).map(|(&g, &x)| g * x).collect()),
            ]
        }))
    }

    /// Elementwise quotient.
    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        same_shape("div", &shape, &other.shape())?;
        let (a, b) = (self.value(), other.value());
        let c = a.iter().zip(b.iter()).map(|(&x, &y)| x / y).collect();
        Ok(self.tape.op(shape, c, &[self.id, other.id], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(b.iter()).map(|(&g, &y)| g / y).collect()),
                needs[1].then(|| {
                    g.iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect()
                }),
            ]
        }))
    }

    /// Adds a vector along the last axis: `[.., n] + [n]`.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let n = *shape.last().unwrap_or(&1);
        if bias.shape() != [n] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match last axis of {shape:?}",
                bias.shape()
            )));
        }
        let (x, b) = (self.value(), bias.value());
        let y = x.iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        Ok(self.tape.op(shape, y, &[self.id, bias.id], move |g, needs| {
            let db = needs[1].then(|| {
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                db
            });
            vec![needs[0].then(|| g.to_vec()), db]
        }))
    }

    /// Multiplies every element by a single-element var.
    pub fn scale_by(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        if s.value().len() != 1 {
            return Err(Error::dim(format!("scale_by expects a scalar, got {:?}", s.shape())));
        }
        let (x, sv) = (self.value(), s.value()[0]);
        let y = x.iter().map(|&v| v * sv).collect();
        Ok(self.tape.op(self.shape(), y, &[self.id, s.id], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().map(|&g| g * sv).collect()),
                needs[1].then(|| vec![g.iter().zip(x.iter()).map(|(&g, &x)| g * x).sum()]),
            ]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        self.unary(move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        self.unary(move |v| v + c, |_, _| T::one())
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|v| -v, |_, _| -T::one())
    }

    // ---- elementwise unary ----------------------------------------------

    /// `exp` with the input clamped to `[-30, 30]`.
    pub fn exp(self) -> Var<'t, T> {
        let lim = T::from_f64(30.0);
        self.unary(
            move |v| v.max(-lim).min(lim).exp(),
            move |x, y| if x.abs() <= lim { y } else { T::zero() },
        )
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(|v| v.ln(), |x, _| T::one() / x)
    }

    /// Logistic sigmoid with the input clamped to `[-30, 30]`.
    pub fn sigmoid(self) -> Var<'t, T> {
        let lim = T::from_f64(30.0);
        self.unary(sigmoid_clamped, move |x, y| {
            if x.abs() <= lim {
                y * (T::one() - y)
            } else {
                T::zero()
            }
        })
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.unary(gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    /// Per-element `max(x,0) - x*t + ln(1 + exp(-|x|))` against fixed targets.
    pub fn bce_with_logits(self, targets: &[T]) -> Result<Var<'t, T>> {
        let x = self.value();
        if targets.len() != x.len() {
            return Err(Error::dim(format!(
                "bce_with_logits: {} targets for {} logits",
                targets.len(),
                x.len()
            )));
        }
        let t: Rc<[T]> = targets.into();
        let y = x
            .iter()
            .zip(t.iter())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        Ok(self.tape.op(self.shape(), y, &[self.id], move |g, _| {
            let dx = g
                .iter()
                .zip(x.iter().zip(t.iter()))
                .map(|(&g, (&x, &t))| {
                    let s = T::one() / (T::one() + (-x).exp());
                    g * (s - t)
                })
                .collect();
            vec![Some(dx)]
        }))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let n = x.len();
        let s = x.iter().copied().sum();
        self.tape
            .op(Vec::new(), vec![s], &[self.id], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Gathers elements by flat index into a vector.
    pub fn pick(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::dim(format!(
                "pick index {bad} out of range for {} elements",
                x.len()
            )));
        }
        let idx: Vec<usize> = indices.to_vec();
        let n = x.len();
        let y = idx.iter().map(|&i| x[i]).collect();
        Ok(self.tape.op(vec![idx.len()], y, &[self.id], move |g, _| {
            let mut dx = vec![T::zero(); n];
            for (&i, &g) in idx.iter().zip(g) {
                dx[i] += g;
            }
            vec![Some(dx)]
        }))
    }

    // ---- normalisation ---------------------------------------------------

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (outer, len, inner) = axis_extents(&shape, axis)?;
        let x = self.value();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        let y: Rc<[T]> = y.into();
        let ys = y.clone();
        Ok(self.tape.push(
            shape,
            y,
            &[self.id],
            Some(Box::new(move |g, _| {
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * ys[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = ys[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            })),
        ))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (outer, len, inner) = axis_extents(&shape, axis)?;
        let x = self.value();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let lse = max + (0..len).map(|j| (x[at(j)] - max).exp()).sum::<T>().ln();
                for j in 0..len {
                    y[at(j)] = x[at(j)] - lse;
                }
            }
        }
        let y: Rc<[T]> = y.into();
        let ys = y.clone();
        Ok(self.tape.push(
            shape,
            y,
            &[self.id],
            Some(Box::new(move |g, _| {
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let total: T = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = g[at(j)] - ys[at(j)].exp() * total;
                        }
                    }
                }
                vec![Some(dx)]
            })),
        ))
    }

    /// Normalises each slice along `axis` to zero mean and unit variance,
    /// then applies the per-position affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, axis: usize, eps: f64) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (outer, len, inner) = axis_extents(&shape, axis)?;
        if len == 0 {
            return Err(Error::dim("layer_norm over a zero-length axis"));
        }
        if gamma.shape() != [len] || beta.shape() != [len] {
            return Err(Error::dim(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{len}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let eps = T::from_f64(eps);
        let inv_len = T::one() / T::from_f64(len as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| x[at(j)]).sum::<T>() * inv_len;
                let var = (0..len)
                    .map(|j| {
                        let d = x[at(j)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    * inv_len;
                let r = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for j in 0..len {
                    let h = (x[at(j)] - mean) * r;
                    xhat[at(j)] = h;
                    y[at(j)] = h * gv[j] + bv[j];
                }
            }
        }
        Ok(self.tape.op(shape, y, &[self.id, gamma.id, beta.id], move |g, needs| {
            let mut dx = needs[0].then(|| vec![T::zero(); g.len()]);
            let mut dg = needs[1].then(|| vec![T::zero(); len]);
            let mut db = needs[2].then(|| vec![T::zero(); len]);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    if let Some(dg) = dg.as_mut() {
                        for j in 0..len {
                            dg[j] += g[at(j)] * xhat[at(j)];
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        for j in 0..len {
                            db[j] += g[at(j)];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let r = inv_std[o * inner + i];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..len {
                            let dh = g[at(j)] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[at(j)];
                        }
                        m1 *= inv_len;
                        m2 *= inv_len;
                        for j in 0..len {
                            let dh = g[at(j)] * gv[j];
                            dx[at(j)] = r * (dh - m1 - xhat[at(j)] * m2);
                        }
                    }
                }
            }
            vec![dx, dg, db]
        }))
    }

    /// Divides each slice along the last axis by `max(‖x‖₂, eps)`.
    pub fn l2_normalize(self, eps: f64) -> Var<'t, T> {
        let shape = self.shape();
        let n = (*shape.last().unwrap_or(&1)).max(1);
        let x = self.value();
        let eps = T::from_f64(eps);
        let norms: Vec<T> = x
            .chunks(n)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
            .collect();
        let mut y = Vec::with_capacity(x.len());
        for (row, &nr) in x.chunks(n).zip(&norms) {
            y.extend(row.iter().map(|&v| v / nr));
        }
        let y: Rc<[T]> = y.into();
        let ys = y.clone();
        self.tape.push(
            shape,
            y,
            &[self.id],
            Some(Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), (xr, &nr)) in g.chunks(n).zip(ys.chunks(n)).zip(x.chunks(n).zip(&norms)) {
                    let clamped = nr == eps && xr.iter().map(|&v| v * v).sum::<T>().sqrt() < eps;
                    if clamped {
                        dx.extend(gr.iter().map(|&g| g / nr));
                    } else {
                        let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                        dx.extend(gr.iter().zip(yr).map(|(&g, &y)| (g - y * dot) / nr));
                    }
                }
                vec![Some(dx)]
            })),
        )
    }

    // ---- layout ----------------------------------------------------------

    /// Same data, new shape. Shares the underlying buffer.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let old = self.shape();
        if numel(&shape) != numel(&old) {
            return Err(Error::dim(format!("cannot reshape {old:?} into {shape:?}")));
        }
        Ok(self.tape.push(
            shape,
            self.value(),
            &[self.id],
            Some(Box::new(|g, _| vec![Some(g.to_vec())])),
        ))
    }

    /// Reorders axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!(
                "permute: {axes:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        // For each output position, the flat input offset.
        let total = numel(&shape);
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            src.push(idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum::<usize>());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let x = self.value();
        let y = src.iter().map(|&s| x[s]).collect();
        Ok(self.tape.op(out_shape, y, &[self.id], move |g, _| {
            let mut dx = vec![T::zero(); g.len()];
            for (&s, &g) in src.iter().zip(g) {
                dx[s] = g;
            }
            vec![Some(dx)]
        }))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        self.permute(&[1, 0])
    }

    /// Joins vars along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let tape = first.tape;
        let base = first.shape();
        let (outer, _, inner) = axis_extents(&base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let values: Vec<Rc<[T]>> = parts.iter().map(|p| p.value()).collect();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                y.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.op(out_shape, y, &ids, move |g, needs| {
            let mut offset = 0;
            lens.iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let start = offset;
                    offset += len;
                    need.then(|| {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let row = (o * total + start) * inner;
                            d.extend_from_slice(&g[row..row + len * inner]);
                        }
                        d
                    })
                })
                .collect()
        }))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (outer, full, inner) = axis_extents(&shape, axis)?;
        if start + len > full {
            return Err(Error::dim(format!(
                "slice [{start}, {}) exceeds axis {axis} of {shape:?}",
                start + len
            )));
        }
        let x = self.value();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let row = (o * full + start) * inner;
            y.extend_from_slice(&x[row..row + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let n = x.len();
        Ok(self.tape.op(out_shape, y, &[self.id], move |g, _| {
            let mut dx = vec![T::zero(); n];
            for o in 0..outer {
                let row = (o * full + start) * inner;
                dx[row..row + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Tiles a `[1, c]` row into `[n, c]`.
    pub fn repeat_rows(self, n: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != 1 {
            return Err(Error::dim(format!("repeat_rows expects [1, c], got {shape:?}")));
        }
        let c = shape[1];
        let x = self.value();
        let y = (0..n).flat_map(|_| x.iter().copied()).collect();
        Ok(self.tape.op(vec![n, c], y, &[self.id], move |g, _| {
            let mut dx = vec![T::zero(); c];
            for row in g.chunks(c.max(1)) {
                dx.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
            vec![Some(dx)]
        }))
    }

    /// Bilinear (half-pixel, edge-clamped) resize of an `[h, w, c]` map.
    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::dim(format!("bilinear_resize expects [h, w, c], got {shape:?}")));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(format!(
                "bilinear_resize extents must be positive: {shape:?} -> [{out_h}, {out_w}]"
            )));
        }
        if h == out_h && w == out_w {
            return Ok(self);
        }
        let y = bilinear_resize_slice(&self.value(), h, w, c, out_h, out_w);
        Ok(self.tape.op(vec![out_h, out_w, c], y, &[self.id], move |g, _| {
            vec![Some(bilinear_resize_adjoint(g, h, w, c, out_h, out_w))]
        }))
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.push(self.shape(), self.value(), &[], None)
    }
}
