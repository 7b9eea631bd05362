/// Adam moments for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// One AdamW update with decoupled weight decay. `t` is the 1-based step.
pub fn adamw_update(params: &mut [f64], grad: &[f64], mom: &mut Moments, t: u64, lr: f64, weight_decay: f64) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        mom.m[i] = BETA1 * mom.m[i] + (1.0 - BETA1) * g;
        mom.v[i] = BETA2 * mom.v[i] + (1.0 - BETA2) * g * g;
        let mhat = mom.m[i] / c1;
        let vhat = mom.v[i] / c2;
        params[i] -= lr * (mhat / (vhat.sqrt() + EPS) + weight_decay * params[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0, -2.0];
        let mut m = Moments::zeros(2);
        adamw_update(&mut p, &[0.5, -3.0], &mut m, 1, 0.1, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = vec![1.0, 2.0];
        let mut m = Moments::zeros(2);
        adamw_update(&mut p, &[1.0, 1.0], &mut m, 1, 0.0, 0.01);
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let mut p = vec![2.0];
        let mut m = Moments::zeros(1);
        adamw_update(&mut p, &[0.0], &mut m, 1, 0.1, 0.5);
        assert!((p[0] - 1.9).abs() < 1e-12);
    }
}
