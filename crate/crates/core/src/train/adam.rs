use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step count `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (k, v) in params.iter() {
                s.insert(k, Tensor::zeros(v.shape())).expect("names are unique");
            }
            s
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
///
/// Per element, in 64-bit: `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `p ← p − lr·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
/// Parameters without a gradient entry are an error, not silently skipped.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::State(format!("no gradient for parameter `{name}`")))?;
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("optimizer has no moment for `{name}`")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::State(format!(
                "shape drift on `{name}`: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
        let v = state.v.get_mut(name).expect("m and v share names");
        if v.shape() != p.shape() {
            return Err(Error::State(format!("shape drift on `{name}` second moment")));
        }
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi as f64;
            let mn = hp.beta1 * *mi as f64 + (1.0 - hp.beta1) * gi;
            let vn = hp.beta2 * *vi as f64 + (1.0 - hp.beta2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let step = hp.lr * (mn / bc1) / ((vn / bc2).sqrt() + hp.eps);
            *pi = (*pi as f64 - step) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
        s
    }

    fn grad(g: f32) -> IndexMap<String, Tensor<f32>> {
        IndexMap::from([("p".to_string(), Tensor::new(&[1], vec![g]).unwrap())])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.25);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grad(0.0), &mut st, &AdamParams::default()).unwrap();
        assert_eq!(p.get("p").unwrap().data(), &[0.25]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [1.0f32, -1.0] {
            let mut p = single(0.0);
            let mut st = AdamState::new(&p);
            let hp = AdamParams::default();
            adam_step(&mut p, &grad(g), &mut st, &hp).unwrap();
            let delta = p.get("p").unwrap().data()[0] as f64;
            assert!((delta + hp.lr * g.signum() as f64).abs() < hp.lr * 1e-3);
        }
    }

    #[test]
    fn quadratic_trace_matches_reference() {
        // Minimize (p − 3)², gradient 2(p − 3). Reference written out in f64.
        let hp = AdamParams {
            lr: 0.1,
            ..Default::default()
        };
        let (mut rp, mut rm, mut rv) = (0.0f64, 0.0f64, 0.0f64);
        let mut p = single(0.0);
        let mut st = AdamState::new(&p);
        for t in 1..=10 {
            let g = 2.0 * (rp - 3.0);
            rm = 0.9 * rm + 0.1 * g;
            rv = 0.999 * rv + 0.001 * g * g;
            let mh = rm / (1.0 - 0.9f64.powi(t));
            let vh = rv / (1.0 - 0.999f64.powi(t));
            rp -= 0.1 * mh / (vh.sqrt() + 1e-8);

            let cur = p.get("p").unwrap().data()[0];
            adam_step(&mut p, &grad(2.0 * (cur - 3.0)), &mut st, &hp).unwrap();
            let got = p.get("p").unwrap().data()[0] as f64;
            assert!((got - rp).abs() < 1e-6, "step {t}: {got} vs {rp}");
        }
    }

    #[test]
    fn shape_drift_is_a_state_error() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p);
        let bad = IndexMap::from([("p".to_string(), Tensor::<f32>::zeros(&[2]))]);
        assert!(matches!(
            adam_step(&mut p, &bad, &mut st, &AdamParams::default()),
            Err(Error::State(_))
        ));
        assert!(matches!(
            adam_step(&mut p, &IndexMap::new(), &mut st, &AdamParams::default()),
            Err(Error::State(_))
        ));
    }
}
