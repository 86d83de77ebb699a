//! AdamW with global-norm gradient clipping.

use crate::autodiff::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Decoupled decay, applied to matrices only (not biases or norm parameters).
    pub weight_decay: T,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: T, weight_decay: T) -> Self {
        let zeros: Vec<Tensor<T>> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let decay = if p.rank() >= 2 {
                self.lr * self.weight_decay
            } else {
                T::zero()
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (x, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= decay * *x;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm across all gradients.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> T {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| x * x)
        .sum::<T>()
        .sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let n = global_norm(grads);
    if max_norm > T::zero() && n > max_norm {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("b", Tensor::vector(vec![1.0f64, -1.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store, &[Tensor::vector(vec![3.0, -0.5]).unwrap()]);
        let d = store.tensors()[0].data();
        // eps in the denominator shifts the step by about lr * eps / |g|
        assert!((d[0] - 0.9).abs() < 1e-8);
        assert!((d[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only_touches_matrices() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::matrix(1, 1, vec![2.0f64]).unwrap());
        store.add("b", Tensor::vector(vec![2.0f64]).unwrap());
        let mut opt = AdamW::new(&store, 0.1, 0.5);
        let zero = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])];
        opt.step(&mut store, &zero);
        assert!((store.tensors()[0].item() - 1.9).abs() < 1e-12);
        assert_eq!(store.tensors()[1].item(), 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![5.0f64, -3.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.05, 0.0);
        for _ in 0..2000 {
            let g = store.tensors()[0].map(|x| 2.0 * (x - 1.0));
            opt.step(&mut store, &[g]);
        }
        for &x in store.tensors()[0].data() {
            assert!((x - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![3.0f64, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut g = vec![Tensor::vector(vec![0.3f64, 0.4]).unwrap()];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }
}
