//! Dynamic fusion head: per-row sigmoid gating over the stacked branch
//! outputs, mean pooling, and a scalar logit.

use thiserror::Error;

use crate::layers::Linear;
use crate::numerics::{Element, NumericsError, ParamStore, Session, SplitMix64, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("width mismatch: F_ST has {st} columns, F_M has {m}")]
    WidthMismatch { st: usize, m: usize },
    #[error("weights have {weights} entries for {rows} rows")]
    ShapeMismatch { rows: usize, weights: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug)]
pub struct FusionHead {
    pub gate_in: Linear,
    pub gate_out: Linear,
    pub classifier: Linear,
    pub dim: usize,
}

impl FusionHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut SplitMix64) -> Result<Self, NumericsError> {
        Ok(Self {
            gate_in: Linear::new(store, &format!("{name}.gate_in"), dim, hidden, rng)?,
            gate_out: Linear::new(store, &format!("{name}.gate_out"), hidden, 1, rng)?,
            classifier: Linear::new(store, &format!("{name}.classifier"), dim, 1, rng)?,
            dim,
        })
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden) + Linear::param_count(hidden, 1) + Linear::param_count(dim, 1)
    }

    /// Gate value per row of `rows`, shape `[R×1]`, strictly inside (0,1).
    pub fn gate<T: Element>(&self, s: &mut Session<T>, rows: Var) -> Result<Var, FusionError> {
        let h = self.gate_in.forward(s, rows)?;
        let h = s.g.relu(h);
        let z = self.gate_out.forward(s, h)?;
        Ok(s.g.sigmoid_open(z))
    }

    /// Weights `[(N+M)×1]` for the rows of `CONCAT{F_ST, F_M}`; the first
    /// N belong to F_ST.
    pub fn dynamic_weights<T: Element>(&self, s: &mut Session<T>, f_st: Var, f_m: Var) -> Result<Var, FusionError> {
        let rows = self.stack(s, f_st, f_m)?;
        self.gate(s, rows)
    }

    fn stack<T: Element>(&self, s: &mut Session<T>, f_st: Var, f_m: Var) -> Result<Var, FusionError> {
        let (a, b) = (s.g.shape(f_st)[1], s.g.shape(f_m)[1]);
        if a != b || a != self.dim {
            return Err(FusionError::WidthMismatch { st: a, m: b });
        }
        Ok(s.g.concat_rows(&[f_st, f_m])?)
    }

    /// `F_0 = CONCAT{w_ST ⊙ F_ST, w_M ⊙ F_M}` with one weight per row.
    pub fn refine_and_fuse<T: Element>(&self, s: &mut Session<T>, f_st: Var, f_m: Var, w: Var) -> Result<Var, FusionError> {
        let rows = self.stack(s, f_st, f_m)?;
        refine(s, rows, w)
    }

    /// Logit `classifier(mean over rows of F_0)`, shape `[1×1]`.
    pub fn predict<T: Element>(&self, s: &mut Session<T>, f0: Var) -> Result<Var, FusionError> {
        let pooled = s.g.mean_rows(f0);
        Ok(self.classifier.forward(s, pooled)?)
    }

    /// Gating, refinement and prediction in one pass.
    pub fn forward<T: Element>(&self, s: &mut Session<T>, f_st: Var, f_m: Var) -> Result<Var, FusionError> {
        let rows = self.stack(s, f_st, f_m)?;
        let w = self.gate(s, rows)?;
        let f0 = refine(s, rows, w)?;
        self.predict(s, f0)
    }
}

fn refine<T: Element>(s: &mut Session<T>, rows: Var, w: Var) -> Result<Var, FusionError> {
    let (r, n) = (s.g.shape(rows)[0], s.g.shape(w).iter().product::<usize>());
    if r != n {
        return Err(FusionError::ShapeMismatch { rows: r, weights: n });
    }
    Ok(s.g.mul_col(rows, w)?)
}
