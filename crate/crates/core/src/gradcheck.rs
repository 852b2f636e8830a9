//! Central finite differences, kept independent of the reverse-mode path so
//! they can serve as its oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{Context, Var};
use crate::tensor::{ParamStore, Tensor};

/// Central-difference estimate `(f(p+h) - f(p-h)) / 2h` for every coordinate.
///
/// `f` is evaluated twice at `p` first; differing results mean it is not
/// deterministic and the estimate would be meaningless.
pub fn finite_diff_grad<F>(f: F, p: &Tensor<f64>, step: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64> + Sync,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let (first, second) = (f(p)?, f(p)?);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let coords: Vec<usize> = (0..p.len()).collect();
    let vals = central_differences(Exec::default(), &coords, step, |i, v| {
        let mut q = p.clone();
        q.data_mut()[i] = v;
        f(&q)
    }, |i| p.data()[i])?;
    Tensor::new(p.dims(), vals)
}

fn central_differences<F, G>(exec: Exec, coords: &[usize], step: f64, eval: F, base: G) -> Result<Vec<f64>>
where
    F: Fn(usize, f64) -> Result<f64> + Sync,
    G: Fn(usize) -> f64 + Sync,
{
    exec.map(coords.len(), |j| {
        let i = coords[j];
        let x = base(i);
        let plus = eval(i, x + step)?;
        let minus = eval(i, x - step)?;
        Ok((plus - minus) / (2.0 * step))
    })
    .into_iter()
    .collect()
}

/// `max |a - n| / max(max |a|, max |n|)` over the compared coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(1e-12)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamGradError {
    pub name: String,
    pub coords: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamGradError>,
    pub max_rel_error: f64,
}

/// Compares reverse-mode gradients of `loss` with central differences for
/// every trainable parameter in `store`.
///
/// With `per_param = Some(k)` only `k` randomly chosen coordinates of each
/// tensor are perturbed.
pub fn check_param_grads<L>(store: &ParamStore<f64>, loss: L, step: f64, per_param: Option<usize>, seed: u64) -> Result<GradReport>
where
    L: Fn(&mut Context<f64>, &ParamStore<f64>) -> Result<Var> + Sync,
{
    let mut ctx = Context::new();
    let out = loss(&mut ctx, store)?;
    ctx.backward(out)?;
    let mut analytic_store = store.clone();
    ctx.write_param_grads(&mut analytic_store);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut c = Context::new();
        let v = loss(&mut c, s)?;
        Ok(c.value(v).data()[0])
    };
    let (first, second) = (eval(store)?, eval(store)?);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let coords: Vec<usize> = match per_param {
            Some(k) if k < p.value.len() => {
                let mut c = sample(&mut rng, p.value.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.value.len()).collect(),
        };
        let analytic_full = analytic_store.get(id).grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.dims()));
        let analytic: Vec<f64> = coords.iter().map(|&i| analytic_full.data()[i]).collect();
        let numeric = central_differences(
            Exec::default(),
            &coords,
            step,
            |i, v| {
                let mut s = store.clone();
                s.get_mut(id).value.data_mut()[i] = v;
                eval(&s)
            },
            |i| p.value.data()[i],
        )?;
        params.push(ParamGradError { name: p.name.clone(), coords: coords.len(), rel_error: relative_error(&analytic, &numeric) });
    }
    let max_rel_error = params.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradReport { params, max_rel_error })
}

/// Relative gradient error of a scalar function of several input tensors,
/// taken as the worst over the inputs.
///
/// `make_ctx` supplies each evaluation context, so callers can pick the
/// executor or enable fault hooks.
pub fn check_input_grads<C, F>(make_ctx: C, inputs: &[Tensor<f64>], f: F, step: f64) -> Result<f64>
where
    C: Fn() -> Context<f64> + Sync,
    F: Fn(&mut Context<f64>, &[Var]) -> Result<Var> + Sync,
{
    let run = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut ctx = make_ctx();
        let vars = xs
            .iter()
            .map(|t| if grads { ctx.variable(t.clone()) } else { ctx.input(t.clone()) })
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut ctx, &vars)?;
        if ctx.value(out).len() != 1 {
            return Err(Error::shape("gradient check", format!("loss has dims {:?}", ctx.dims(out))));
        }
        let value = ctx.value(out).data()[0];
        if !grads {
            return Ok((value, vec![]));
        }
        ctx.backward(out)?;
        let g = vars
            .iter()
            .zip(xs)
            .map(|(&v, t)| ctx.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.dims())))
            .collect();
        Ok((value, g))
    };
    let (_, analytic) = run(inputs, true)?;
    let mut worst: f64 = 0.0;
    for (j, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |p| {
                let mut xs = inputs.to_vec();
                xs[j] = p.clone();
                Ok(run(&xs, false)?.0)
            },
            x,
            step,
        )?;
        worst = worst.max(relative_error(analytic[j].data(), numeric.data()));
    }
    Ok(worst)
}
