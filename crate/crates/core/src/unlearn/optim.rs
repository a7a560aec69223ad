use crate::model::ParamSet;

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<P> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: P,
    v: P,
}

impl<P: ParamSet + Clone> AdamW<P> {
    pub fn new(like: &P, lr: f64, weight_decay: f64) -> Self {
        let mut m = like.clone();
        m.fill(0.0);
        AdamW { lr, beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay, step: 0, v: m.clone(), m }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
        let g_all = grads.arrays();
        for ((((_, mut p), (_, mut m)), (_, mut v)), (_, g)) in
            params.arrays_mut().into_iter().zip(self.m.arrays_mut()).zip(self.v.arrays_mut()).zip(g_all)
        {
            ndarray::Zip::from(&mut p).and(&mut m).and(&mut v).and(&g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            });
        }
    }
}

/// Scale `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterBank, ModelConfig};

    fn bank() -> AdapterBank {
        let mut cfg = ModelConfig::new(10);
        cfg.n_layers = 1;
        cfg.d_model = 4;
        cfg.n_heads = 1;
        cfg.adapter_rank = 1;
        AdapterBank::init(&cfg, 3).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = bank();
        let before = p.flatten();
        let mut g = p.zeros_like();
        g.fill(0.25);
        let mut opt = AdamW::new(&p, 0.01, 0.0);
        opt.step(&mut p, &g);
        for (a, b) in p.flatten().iter().zip(before) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = bank();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.fill(-3.0);
        AdamW::new(&p, 0.0, 0.01).step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = bank().zeros_like();
        g.fill(1.0);
        let n = g.num_values() as f64;
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - n.sqrt()).abs() < 1e-12);
        assert!((g.sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
