use super::{Element, GradBuffer, NumericsError, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept per parameter of the store
/// the optimizer was created for.
#[derive(Clone, Debug)]
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Restores state saved by [`Adam::moments`] and [`Adam::step_count`].
    pub fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<(), NumericsError> {
        let same = |a: &[Vec<T>], b: &[Vec<T>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(NumericsError::InvalidArgument("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update of every trainable parameter. Non-finite gradients abort
    /// the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>) -> Result<(), NumericsError> {
        if self.m.len() != store.len() {
            return Err(NumericsError::InvalidArgument("optimizer state does not match parameters".into()));
        }
        for id in store.ids() {
            if store.is_trainable(id) {
                let g = grads.get(id);
                if g.len() != store.get(id).numel() {
                    return Err(NumericsError::ShapeMismatch {
                        op: "adam",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: vec![g.len()],
                    });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NumericsError::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = grads.get(id);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let m = b1 * self.m[i][j] + (T::one() - b1) * g[j];
                let v = b2 * self.v[i][j] + (T::one() - b2) * g[j] * g[j];
                self.m[i][j] = m;
                self.v[i][j] = v;
                p[j] -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
