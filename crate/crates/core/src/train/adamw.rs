use crate::tensor::Tensor;

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    /// Zero state for parameters of the given sizes.
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[Tensor], weight_decay: f64) -> Self {
        let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
        Self::new(&sizes, weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters with an empty gradient buffer are left untouched,
    /// including by weight decay. `lr[i]` is the rate for parameter `i`.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>], lr: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.is_empty() {
                continue;
            }
            let decay = (1.0 - lr[i] * self.weight_decay) as f32;
            let step = (lr[i] / c1) as f32;
            let inv_c2 = (1.0 / c2) as f32;
            let eps = self.eps as f32;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] = p[j] * decay - step * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_only_shrinks() {
        let mut opt = AdamW::new(&[3], 0.01);
        let mut p = vec![1.0f32, -2.0, 4.0];
        opt.step(&mut [&mut p], &[vec![0.0; 3]], &[0.1]);
        let f = 1.0 - 0.1 * 0.01;
        for (a, b) in p.iter().zip([1.0f32, -2.0, 4.0]) {
            assert!((a - b * f as f32).abs() < 1e-7);
        }
    }

    #[test]
    fn first_step_is_sign_of_gradient() {
        let mut opt = AdamW::new(&[2], 0.0);
        opt.eps = 0.0;
        let mut p = vec![0.0f32, 0.0];
        opt.step(&mut [&mut p], &[vec![3.0, -0.25]], &[0.01]);
        assert!((p[0] + 0.01).abs() < 1e-7 && (p[1] - 0.01).abs() < 1e-7, "{p:?}");
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut opt = AdamW::new(&[1], 0.01);
        let mut x = vec![1.0f32];
        for _ in 0..100 {
            let g = vec![2.0 * x[0]];
            opt.step(&mut [&mut x], &[g], &[0.1]);
        }
        assert!(x[0].abs() < 0.05, "x = {}", x[0]);
    }

    #[test]
    fn empty_gradient_leaves_parameter() {
        let mut opt = AdamW::new(&[1, 1], 0.5);
        let mut a = vec![1.0f32];
        let mut b = vec![1.0f32];
        opt.step(&mut [&mut a, &mut b], &[vec![], vec![1.0]], &[0.1, 0.1]);
        assert_eq!(a[0], 1.0);
        assert_ne!(b[0], 1.0);
    }
}
