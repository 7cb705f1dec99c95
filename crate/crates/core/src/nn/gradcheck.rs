use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Maximum relative error between the tape gradient of `f` and central
/// differences with step `epsilon`, over every scalar in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    compare_with_differences(&f, &analytic, params, epsilon)
}

/// Checks a supplied gradient against central differences of `f`.
pub fn compare_with_differences<F>(
    f: &F,
    analytic: &ParamStore,
    params: &ParamStore,
    epsilon: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1e-2], got {epsilon}")));
    }
    analytic.check_same_layout(params)?;
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let loss = f(&mut g)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v}")));
        }
        Ok(v)
    };
    eval(params)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).expect("listed").len();
        for i in 0..n {
            let orig = params.get(name).expect("listed").data()[i];
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig + epsilon;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig - epsilon;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.get(name).expect("same layout").data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
