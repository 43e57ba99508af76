//! Bias-corrected Adam.

use crate::data::io::Checkpoint;
use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` from `grads`, which must have the same layout.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g: Vec<&[f32]> = grads.tensors().into_iter().map(|t| t.data).collect();
        let mut p = params.tensors_mut();
        if p.len() != g.len() || p.iter().zip(&g).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("gradient layout differs from parameters".into()));
        }
        if self.m.is_empty() {
            self.m = g.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != g.len() || self.m.iter().zip(&g).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr as f64, self.eps as f64);
        for (((pt, gt), mt), vt) in p.iter_mut().zip(&g).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..pt.len() {
                let gi = gt[i];
                mt[i] = b1 * mt[i] + (1.0 - b1) * gi;
                vt[i] = b2 * vt[i] + (1.0 - b2) * gi * gi;
                let m_hat = mt[i] as f64 / c1;
                let v_hat = vt[i] as f64 / c2;
                pt[i] -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_u64(&format!("{prefix}.step"), self.step);
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ck.push(format!("{prefix}.m.{i}"), &[m.len()], m);
            ck.push(format!("{prefix}.v.{i}"), &[v.len()], v);
        }
    }

    /// Restores moments and step count saved by [`Adam::save`].
    pub fn load(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        self.step = ck.get_u64(&format!("{prefix}.step"))?;
        self.m.clear();
        self.v.clear();
        let mut i = 0;
        while let Some(m) = ck.get(&format!("{prefix}.m.{i}")) {
            self.m.push(m.data.clone());
            self.v.push(ck.require(&format!("{prefix}.v.{i}"))?.data.clone());
            i += 1;
        }
        Ok(())
    }
}
