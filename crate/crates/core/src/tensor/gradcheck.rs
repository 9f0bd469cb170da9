//! Central-difference gradient oracle.

use super::{Float, Parameters, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(format!("{what} evaluated to {v}")))
    }
}

/// Compares the tape gradient of a scalar function of `x` against central
/// differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`, returning the
/// largest relative error over all elements.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Float,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    if eps <= 0.0 {
        return Err(Error::usage("grad_check step must be positive"));
    }
    let input = x.detached_copy().with_requires_grad(true);
    let tape = Tape::new();
    let v = tape.leaf(&input);
    let out = f(&tape, v)?;
    finite(out.item().as_f64(), "f(x)")?;
    let grads = tape.backward(out)?;
    let zeros = vec![T::zero(); input.numel()];
    let analytic = grads.get(v).unwrap_or(&zeros);

    let eval = |probe: &Tensor<T>| -> Result<f64> {
        let tape = Tape::new();
        let out = f(&tape, tape.leaf(probe))?;
        finite(out.item().as_f64(), "f(x ± eps)")
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.detached_copy();
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + eps);
        let plus = eval(&probe)?;
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - eps);
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i].as_f64(), numeric));
    }
    Ok(worst)
}

/// Per-tensor gradients, in visiting order.
pub type NamedGrads = Vec<(String, Vec<f64>)>;

/// Outcome of comparing analytic and numeric parameter gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor name, element index, analytic and numeric values at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    pub elements: usize,
}

impl GradCheckReport {
    pub fn compare(analytic: &NamedGrads, numeric: &NamedGrads) -> Self {
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst: None,
            elements: 0,
        };
        for ((name, a), (name_n, n)) in analytic.iter().zip(numeric) {
            assert_eq!(name, name_n, "gradient lists visit different tensors");
            for (i, (&a, &n)) in a.iter().zip(n).enumerate() {
                report.elements += 1;
                let e = relative_error(a, n);
                if e > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(e);
                    report.worst = Some((name.clone(), i, a, n));
                }
            }
        }
        report
    }
}

/// Tape gradients of `loss` for every parameter that requires one.
pub fn autodiff_grads<T, M, F>(model: &M, loss: F) -> Result<NamedGrads>
where
    T: Float,
    M: Parameters<T>,
    F: for<'t> Fn(&'t Tape<T>, &M) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let out = loss(&tape, model)?;
    finite(out.item().as_f64(), "loss")?;
    let grads = tape.backward(out)?;
    let mut named = Vec::new();
    model.visit(&mut |name, t| {
        if t.requires_grad() {
            let g = grads
                .for_tensor(t.id())
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            named.push((name.to_string(), g));
        }
    });
    Ok(named)
}

/// Finite-difference rule used by [`finite_difference_grads`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x + h) - f(x - h)) / 2h`.
    Central,
    /// `(4 D(h) - D(2h)) / 3` on central differences `D`, cancelling the
    /// `h^2` truncation term so that larger steps can be used.
    Richardson,
}

/// Finite differences of `loss` for every parameter that requires a gradient.
pub fn finite_difference_grads<T, M, F>(model: &mut M, loss: F, eps: f64, stencil: Stencil) -> Result<NamedGrads>
where
    T: Float,
    M: Parameters<T>,
    F: for<'t> Fn(&'t Tape<T>, &M) -> Result<Var<'t, T>>,
{
    let mut shapes = Vec::new();
    model.visit(&mut |name, t| {
        if t.requires_grad() {
            shapes.push((name.to_string(), t.numel()));
        }
    });
    let eval = |model: &M| -> Result<f64> {
        let tape = Tape::new();
        let out = loss(&tape, model)?;
        finite(out.item().as_f64(), "loss")
    };
    let central = |model: &mut M, target: usize, elem: usize, h: f64| -> Result<f64> {
        let orig = element(model, target, elem, None);
        element(model, target, elem, Some(T::from_f64(orig.as_f64() + h)));
        let plus = eval(model);
        element(model, target, elem, Some(T::from_f64(orig.as_f64() - h)));
        let minus = eval(model);
        element(model, target, elem, Some(orig));
        Ok((plus? - minus?) / (2.0 * h))
    };
    let mut named = Vec::with_capacity(shapes.len());
    for (target, (name, len)) in shapes.into_iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for elem in 0..len {
            let d = central(model, target, elem, eps)?;
            g.push(match stencil {
                Stencil::Central => d,
                Stencil::Richardson => (4.0 * d - central(model, target, elem, 2.0 * eps)?) / 3.0,
            });
        }
        named.push((name, g));
    }
    Ok(named)
}

/// Reads one element of the `target`-th trainable tensor, optionally
/// overwriting it; returns the previous value.
fn element<T: Float, M: Parameters<T>>(model: &mut M, target: usize, elem: usize, set: Option<T>) -> T {
    let mut k = 0;
    let mut old = T::zero();
    model.visit_mut(&mut |_, t| {
        if t.requires_grad() {
            if k == target {
                let v = &mut t.data_mut()[elem];
                old = *v;
                if let Some(new) = set {
                    *v = new;
                }
            }
            k += 1;
        }
    });
    old
}

/// Full parameter gradient check of `loss` against central differences in
/// the same precision.
pub fn grad_check_many<T, M, F>(model: &mut M, loss: F, eps: f64) -> Result<GradCheckReport>
where
    T: Float,
    M: Parameters<T>,
    F: for<'t> Fn(&'t Tape<T>, &M) -> Result<Var<'t, T>>,
{
    let analytic = autodiff_grads(model, &loss)?;
    let numeric = finite_difference_grads(model, &loss, eps, Stencil::Central)?;
    Ok(GradCheckReport::compare(&analytic, &numeric))
}
