use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};

impl Tape {
    /// `softmax(QKᵀ·s)·V`, `s = 1/√d` when `scale_by_sqrt_d`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, scale_by_sqrt_d: bool) -> Result<Var> {
        if self.shape(k).first() == Some(&0) {
            return Err(TensorError::Precondition {
                op: "scaled_dot_attention",
                detail: "empty key set".into(),
            });
        }
        let d = *self.shape(q).last().unwrap();
        let scale = if scale_by_sqrt_d { 1.0 / (d as f64).sqrt() } else { 1.0 };
        self.attention(q, k, v, scale, None)
    }

    /// `linear → ReLU → linear`.
    pub fn ffn(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let h = self.linear(x, w1, b1)?;
        let h = self.relu(h);
        self.linear(h, w2, b2)
    }
}
