use super::{Element, Graph, NumericsError, Var};

impl<T: Element> Graph<T> {
    /// `softmax(Q·Kᵀ/√d) · V` for `Q[s×d]`, `K[t×d]`, `V[t×e]`.
    ///
    /// `mask[i·t + j]` true lets query `i` attend to key `j`; disallowed pairs
    /// get weight exactly zero.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let weights = self.attention_weights(q, k, mask)?;
        if self.shape(v).len() != 2 || self.shape(v)[0] != self.shape(k)[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(k).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        self.matmul(weights, v)
    }

    /// The `[s×t]` attention weight matrix alone.
    pub fn attention_weights(&mut self, q: Var, k: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let d = *self.shape(q).last().unwrap_or(&1);
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, T::one() / T::from_f64(d as f64).sqrt());
        self.softmax_rows_masked(scaled, mask)
    }
}
