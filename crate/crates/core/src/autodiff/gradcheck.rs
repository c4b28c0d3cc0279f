use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{Result, TensorError};

/// Where the worst gradient disagreement was found.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per parameter (evenly strided);
    /// `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    /// Restrict the check to these parameters; `None` checks all.
    pub params: Option<Vec<ParamId>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            params: None,
        }
    }
}

fn eval<R: Real, F>(f: &F, store: &ParamStore<R>) -> Result<f64>
where
    F: Fn(&mut Graph<R>, &ParamStore<R>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item().to_f64_lossy())
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the maximum over checked coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`. The store's gradient buffers
/// and values are left as they were found.
pub fn grad_check<R: Real, F>(
    store: &mut ParamStore<R>,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<R>, &ParamStore<R>) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(TensorError::invalid("grad_check", "eps must be positive"));
    }
    let first = eval(&f, store)?;
    let second = eval(&f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let saved: Vec<_> = store.ids().map(|id| store.grad(id).clone()).collect();
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_f64_vec()).collect();
    store.zero_grad();
    for (id, grad) in store.ids().zip(saved).collect::<Vec<_>>() {
        store.accumulate_grad(id, grad.data());
    }

    let ids: Vec<ParamId> = match &opts.params {
        Some(p) => p.clone(),
        None => store.ids().collect(),
    };
    let eps = R::lit(opts.eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    for id in ids {
        let n = store.value(id).len();
        let stride = match opts.max_coords_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = store.value(id).data()[j];
            store.value_mut(id)[j] = orig + eps;
            let plus = eval(&f, store);
            store.value_mut(id)[j] = orig - eps;
            let minus = eval(&f, store);
            store.value_mut(id)[j] = orig;
            // actual step sizes after rounding in the scalar type
            let h = ((orig + eps) - (orig - eps)).to_f64_lossy();
            let numeric = (plus? - minus?) / h;
            let a = analytic[id.index()][j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coords_checked += 1;
            if report.worst_param.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(store.name(id).to_string());
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn exact_linear_function() {
        let mut ps = ParamStore::<f64>::new();
        let p = ps.add("p", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let c = Tensor::vector(vec![1.5, -0.5, 4.0]);
        let r = grad_check(&mut ps, &GradCheckOptions::default(), |g, s| {
            let pv = g.param(s, p);
            let cv = g.constant(c.clone());
            let m = g.mul(pv, cv)?;
            Ok(g.sum(m))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coords_checked, 3);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let mut ps = ParamStore::<f64>::new();
        let p = ps.add("p", Tensor::vector(vec![1.0])).unwrap();
        let calls = Cell::new(0.0);
        let err = grad_check(&mut ps, &GradCheckOptions::default(), |g, s| {
            calls.set(calls.get() + 1.0);
            let pv = g.param(s, p);
            let y = g.add_scalar(pv, calls.get());
            Ok(g.sum(y))
        })
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic { .. }));
    }

    #[test]
    fn preserves_existing_grads() {
        let mut ps = ParamStore::<f64>::new();
        let p = ps.add("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        ps.accumulate_grad(p, &[5.0, 6.0]);
        grad_check(&mut ps, &GradCheckOptions::default(), |g, s| {
            let pv = g.param(s, p);
            let sq = g.mul(pv, pv)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(ps.grad(p).data(), &[5.0, 6.0]);
        assert_eq!(ps.value(p).data(), &[1.0, 2.0]);
    }
}
