//! Adam with per-parameter state, restricted each step to a set of names.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::network::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub state: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            state: BTreeMap::new(),
        }
    }

    /// Updates every parameter for which `active(name)` holds and a gradient
    /// exists. Other parameters, and their optimizer state, are untouched.
    /// Returns the number of updated parameters.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, active: impl Fn(&str) -> bool) -> Result<usize> {
        let mut updated = 0;
        for (name, var) in store.iter() {
            if !active(name) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let st = match self.state.get_mut(name) {
                Some(s) => s,
                None => {
                    let z = var.as_tensor().zeros_like()?;
                    self.state.entry(name.clone()).or_insert(AdamState {
                        m: z.clone(),
                        v: z,
                        step: 0,
                    })
                }
            };
            st.step += 1;
            st.m = ((&st.m * BETA1)? + (g * (1.0 - BETA1))?)?;
            st.v = ((&st.v * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?;
            let bc1 = 1.0 - BETA1.powi(st.step as i32);
            let bc2 = 1.0 - BETA2.powi(st.step as i32);
            let m_hat = (&st.m / bc1)?;
            let v_hat = (&st.v / bc2)?;
            let delta = ((m_hat / (v_hat.sqrt()? + EPS)?)? * self.lr)?;
            var.set(&(var.as_tensor() - delta)?)?;
            updated += 1;
        }
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Init;
    use candle_core::DType;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new(0, DType::F64);
        let w = store.create("w", &[3], Init::Zeros).unwrap();
        store.create("frozen", &[1], Init::Ones).unwrap();
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], w.device()).unwrap();
        let loss = (&w - &target).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(0.1);
        let n = opt.step(&store, &grads, |n| n == "w").unwrap();
        assert_eq!(n, 1);
        let got = store.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        for (g, t) in got.iter().zip([1.0, -2.0, 0.5]) {
            assert!((g - 0.1 * f64::signum(t)).abs() < 1e-6, "{got:?}");
        }
        assert!(!opt.state.contains_key("frozen"));
        assert_eq!(opt.state["w"].step, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new(0, DType::F64);
        store.create("w", &[2], Init::Zeros).unwrap();
        let mut opt = Adam::new(0.05);
        let target = Tensor::new(&[0.7f64, -0.3], &candle_core::Device::Cpu).unwrap();
        for _ in 0..500 {
            let w = store.get("w").unwrap().as_tensor().clone();
            let loss = (&w - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads, |_| true).unwrap();
        }
        let got = store.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert!((got[0] - 0.7).abs() < 1e-2 && (got[1] + 0.3).abs() < 1e-2, "{got:?}");
    }
}
