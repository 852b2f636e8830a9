//! Layer-norm handle shared between branches of one block.

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Context, Var};
use crate::scalar::Scalar;
use crate::tensor::{Component, ParamId, ParamStore, Role, Tensor};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LnParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LnParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize, component: Component) -> Result<Self> {
        Ok(LnParams {
            gain: store.add(format!("{prefix}.gain"), Role::LnGain, component, Tensor::full(&[width], T::one()))?,
            bias: store.add(format!("{prefix}.bias"), Role::LnBias, component, Tensor::zeros(&[width]))?,
        })
    }

    /// Random affine parameters, mostly for tests that must not rely on the
    /// identity initialization.
    pub fn randomize<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for v in store.get_mut(self.gain).value.data_mut() {
            *v = T::of(rng.gen_range(0.5..1.5));
        }
        for v in store.get_mut(self.bias).value.data_mut() {
            *v = T::of(rng.gen_range(-0.5..0.5));
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Memoizing normalization for one forward pass.
///
/// Every request is answered from one parameter set. Inputs already
/// normalized in this pass are served from the memo; the remaining ones are
/// normalized together in a single pass. A handle must not outlive the
/// forward pass (the context's graph) it was used in.
#[derive(Debug)]
pub struct NormHandle {
    params: LnParams,
    eps: f64,
    memo: HashMap<Var, Var>,
}

impl NormHandle {
    pub fn new(params: LnParams, eps: f64) -> Self {
        NormHandle { params, eps, memo: HashMap::new() }
    }

    pub fn params(&self) -> LnParams {
        self.params
    }

    pub fn normalize<T: Scalar>(&mut self, ctx: &mut Context<T>, store: &ParamStore<T>, xs: &[Var]) -> Result<Vec<Var>> {
        let mut misses: Vec<Var> = Vec::new();
        for &x in xs {
            if !self.memo.contains_key(&x) && !misses.contains(&x) {
                misses.push(x);
            }
        }
        if !misses.is_empty() {
            let gain = ctx.param(store, self.params.gain)?;
            let bias = ctx.param(store, self.params.bias)?;
            let outs = ctx.layer_norm_group(&misses, gain, bias, self.eps)?;
            self.memo.extend(misses.into_iter().zip(outs));
        }
        Ok(xs.iter().map(|x| self.memo[x]).collect())
    }
}
