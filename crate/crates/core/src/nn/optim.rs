//! SGD and Adam over any parameter tree exposed as flat slices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A parameter tree viewed as an ordered list of flat buffers.
pub trait ParamSet<T> {
    fn param_slices(&self) -> Vec<&[T]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [T]>;
}

fn check_congruent<T>(params: &[&mut [T]], grads: &[&[T]]) -> Result<()> {
    let p: Vec<usize> = params.iter().map(|s| s.len()).collect();
    let g: Vec<usize> = grads.iter().map(|s| s.len()).collect();
    if p != g {
        return Err(Error::ShapeMismatch {
            context: "optimizer parameter/gradient trees",
            expected: p,
            actual: g,
        });
    }
    Ok(())
}

fn check_lr<T: Scalar>(lr: T) -> Result<()> {
    if !(lr > T::zero()) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive and finite, got {lr}")));
    }
    Ok(())
}

/// `p ← p − lr·g`.
pub fn sgd_step<T, P, G>(params: &mut P, grads: &G, lr: T) -> Result<()>
where
    T: Scalar,
    P: ParamSet<T> + ?Sized,
    G: ParamSet<T> + ?Sized,
{
    check_lr(lr)?;
    let g = grads.param_slices();
    let mut p = params.param_slices_mut();
    check_congruent(&p, &g)?;
    for (ps, gs) in p.iter_mut().zip(&g) {
        for (pv, &gv) in ps.iter_mut().zip(gs.iter()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments shaped like `params`, with β1=0.9, β2=0.999, ε=1e-8.
    pub fn new<P: ParamSet<T> + ?Sized>(params: &P) -> Self {
        let zeros: Vec<Vec<T>> = params.param_slices().iter().map(|s| vec![T::zero(); s.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update; increments the step counter.
pub fn adam_step<T, P, G>(state: &mut AdamState<T>, params: &mut P, grads: &G, lr: T) -> Result<()>
where
    T: Scalar,
    P: ParamSet<T> + ?Sized,
    G: ParamSet<T> + ?Sized,
{
    check_lr(lr)?;
    let g = grads.param_slices();
    let mut p = params.param_slices_mut();
    check_congruent(&p, &g)?;
    let m_shape: Vec<usize> = state.m.iter().map(Vec::len).collect();
    let g_shape: Vec<usize> = g.iter().map(|s| s.len()).collect();
    if m_shape != g_shape {
        return Err(Error::ShapeMismatch {
            context: "adam state",
            expected: m_shape,
            actual: g_shape,
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (((ps, gs), ms), vs) in p.iter_mut().zip(&g).zip(&mut state.m).zip(&mut state.v) {
        for (((pv, &gv), mv), vv) in ps.iter_mut().zip(gs.iter()).zip(ms.iter_mut()).zip(vs.iter_mut()) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
