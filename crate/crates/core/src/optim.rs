//! Adam optimizer over flat parameter buffers.

use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    /// `sizes` gives the length of each parameter tensor, in the order the
    /// tensors are later passed to [`Adam::step`].
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.config.learning_rate = learning_rate;
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update of every `(param, grad)` pair.
    pub fn step<'a>(&mut self, tensors: impl IntoIterator<Item = (&'a mut [T], &'a [T])>)
    where
        T: 'a,
    {
        self.step += 1;
        let c = &self.config;
        let cast = |x: f64| T::from(x).expect("finite hyper-parameter");
        let (b1, b2) = (cast(c.beta1), cast(c.beta2));
        let one = T::one();
        let bias1 = one - b1.powi(self.step);
        let bias2 = one - b2.powi(self.step);
        let lr = cast(c.learning_rate);
        let eps = cast(c.eps);
        let mut count = 0;
        for ((param, grad), (m, v)) in tensors
            .into_iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(param.len(), m.len(), "parameter tensor size changed");
            assert_eq!(grad.len(), m.len(), "gradient tensor size changed");
            let (c1, c2) = (one - b1, one - b2);
            let (inv1, inv2) = (one / bias1, one / bias2);
            for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                *p = *p - lr * (*m * inv1) / ((*v * inv2).sqrt() + eps);
            }
            count += 1;
        }
        assert_eq!(count, self.m.len(), "wrong number of parameter tensors");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr * sign(g)
        let mut adam = Adam::<f64>::new(AdamConfig::with_learning_rate(0.1), &[2]);
        let mut p = vec![1.0, -1.0];
        let g = vec![3.0, -0.5];
        adam.step([(p.as_mut_slice(), g.as_slice())]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::<f32>::new(AdamConfig::with_learning_rate(0.05), &[1]);
        let mut x = vec![5.0f32];
        for _ in 0..2000 {
            let g = vec![2.0 * (x[0] - 2.0)];
            adam.step([(x.as_mut_slice(), g.as_slice())]);
        }
        assert!((x[0] - 2.0).abs() < 1e-2);
    }
}
