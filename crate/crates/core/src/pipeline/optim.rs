use crate::container::{round_f32, TensorContainer};
use crate::error::{Error, Result};
use crate::prior::{Group, PriorParams};

use super::config::AdamConfig;

/// Adam over the named parameter arrays of a prior.
///
/// Moments are kept on the `f32` grid like the weights, so a run resumed from
/// a checkpoint continues bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &PriorParams, config: AdamConfig) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, _, p| m.push(vec![0.0; p.len()]));
        Adam {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update of the arrays whose group is in `groups`.
    pub fn update(&mut self, params: &mut PriorParams, grads: &PriorParams, lr: f64, groups: &[Group]) -> Result<()> {
        let mut g_all = Vec::with_capacity(self.m.len());
        grads.visit(&mut |_, _, g| g_all.push(g.to_vec()));
        if g_all.len() != self.m.len() {
            return Err(Error::InvalidState("gradient layout does not match the optimizer".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |group, _, p| {
            let idx = k;
            k += 1;
            if !groups.contains(&group) {
                return;
            }
            let (m, v, g) = (&mut ms[idx], &mut vs[idx], &g_all[idx]);
            for i in 0..p.len() {
                m[i] = round_f32(beta1 * m[i] + (1.0 - beta1) * g[i]);
                v[i] = round_f32(beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]);
                let step = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] = round_f32(p[i] - step);
            }
        });
        Ok(())
    }

    pub fn save_into(&self, c: &mut TensorContainer, params: &PriorParams) -> Result<()> {
        c.insert_i64("adam.step", &[1], &[self.step as i64])?;
        let mut k = 0;
        let mut res = Ok(());
        params.visit(&mut |_, name, _| {
            if res.is_ok() {
                res = c
                    .insert_f64(&format!("adam.m.{name}"), &[self.m[k].len()], &self.m[k])
                    .and_then(|_| c.insert_f64(&format!("adam.v.{name}"), &[self.v[k].len()], &self.v[k]));
            }
            k += 1;
        });
        res
    }

    pub fn load_from(c: &TensorContainer, params: &PriorParams, config: AdamConfig) -> Result<Self> {
        let mut adam = Adam::new(params, config);
        adam.step = c.i64s("adam.step", Some(&[1]))?[0].max(0) as u64;
        let mut k = 0;
        let mut res = Ok(());
        params.visit(&mut |_, name, p| {
            if res.is_ok() {
                let dims = [p.len()];
                match (c.f64s(&format!("adam.m.{name}"), Some(&dims)), c.f64s(&format!("adam.v.{name}"), Some(&dims))) {
                    (Ok(m), Ok(v)) => {
                        adam.m[k] = m;
                        adam.v[k] = v;
                    }
                    (Err(e), _) | (_, Err(e)) => res = Err(e),
                }
            }
            k += 1;
        });
        res.map(|_| adam)
    }
}
