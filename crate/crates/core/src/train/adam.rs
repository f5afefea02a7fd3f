use serde::{Deserialize, Serialize};

use crate::model::{Component, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for the components it was created over. Components
/// outside that list are never read or written.
pub struct Adam {
    settings: AdamSettings,
    lr: f64,
    components: Vec<Component>,
    step: u64,
    m: ModelParams<f32>,
    v: ModelParams<f32>,
}

impl Adam {
    pub fn new(settings: AdamSettings, lr: f64, params: &ModelParams<f32>, components: &[Component]) -> Self {
        Adam {
            settings,
            lr,
            components: components.to_vec(),
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>) {
        self.step += 1;
        let s = self.settings;
        let bc1 = 1.0 - s.beta1.powi(self.step as i32);
        let bc2 = 1.0 - s.beta2.powi(self.step as i32);
        let step_size = (self.lr / bc1) as f32;
        let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
        let (b1, b2, eps) = (s.beta1 as f32, s.beta2 as f32, s.eps as f32);
        for &c in &self.components {
            let p = params.get_mut(c);
            let g = grads.get(c);
            let m = self.m.get_mut(c);
            let v = self.v.get_mut(c);
            for (((pt, gt), mt), vt) in p.tensors.iter_mut().zip(&g.tensors).zip(&mut m.tensors).zip(&mut v.tensors) {
                for (((w, &dg), mm), vv) in pt.data.iter_mut().zip(&gt.data).zip(&mut mt.data).zip(&mut vt.data) {
                    *mm = b1 * *mm + (1.0 - b1) * dg;
                    *vv = b2 * *vv + (1.0 - b2) * dg * dg;
                    *w -= step_size * *mm / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelBundle, NetConfig};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let bundle = ModelBundle::init(NetConfig::desk(2), 0).unwrap();
        let mut params = bundle.params.clone();
        let mut grads = params.zeros_like();
        grads.tpu.tensors[0].data[0] = 3.0;
        grads.tpu.tensors[0].data[1] = -0.5;
        grads.ufe.tensors[0].data[0] = 1.0;
        let mut adam = Adam::new(AdamSettings::default(), 1e-3, &params, &[Component::Tpu]);
        adam.step(&mut params, &grads);
        let before = &bundle.params.tpu.tensors[0].data;
        let after = &params.tpu.tensors[0].data;
        assert!((before[0] - after[0] - 1e-3).abs() < 1e-6);
        assert!((after[1] - before[1] - 1e-3).abs() < 1e-6);
        assert_eq!(before[2], after[2]);
        // components outside the optimizer stay bit-identical
        assert_eq!(params.ufe, bundle.params.ufe);
    }
}
