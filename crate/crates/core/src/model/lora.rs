//! Low-rank adapters on frozen linear maps: `y = x·W0ᵀ + (alpha/rank)·(x·Aᵀ)·Bᵀ`.

use super::{ModelError, Result};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Trainable pair `A (rank × in)`, `B (out × rank)` attached to a frozen `W0 (out × in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "lora",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            }
            .into());
        }
        let rank = a.shape()[0];
        if rank == 0 {
            return Err(ModelError::ZeroRank);
        }
        if b.shape()[1] != rank {
            return Err(TensorError::ShapeMismatch {
                op: "lora",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            }
            .into());
        }
        Ok(Self { a, b, rank, alpha })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn check_base(&self, w0: &Tensor) -> Result<()> {
        if w0.shape() != [self.b.shape()[0], self.a.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "lora",
                left: w0.shape().to_vec(),
                right: vec![self.b.shape()[0], self.a.shape()[1]],
            }
            .into());
        }
        Ok(())
    }

    /// `scale · B·A`, the dense update this adapter represents.
    pub fn delta(&self) -> Tensor {
        let (out, r) = (self.b.shape()[0], self.rank);
        let inp = self.a.shape()[1];
        let s = self.scale();
        let mut d = vec![0.0; out * inp];
        for i in 0..out {
            for k in 0..r {
                let bv = s * self.b.data()[i * r + k];
                if bv == 0.0 {
                    continue;
                }
                let arow = &self.a.data()[k * inp..(k + 1) * inp];
                for (dv, av) in d[i * inp..(i + 1) * inp].iter_mut().zip(arow) {
                    *dv += bv * av;
                }
            }
        }
        Tensor::new(vec![out, inp], d).expect("delta shape is consistent")
    }

    /// `W' = W0 + scale·B·A`
    pub fn merge(&self, w0: &Tensor) -> Result<Tensor> {
        self.check_base(w0)?;
        let d = self.delta();
        let data = w0.data().iter().zip(d.data()).map(|(w, dv)| w + dv).collect();
        Ok(Tensor::new(w0.shape().to_vec(), data)?)
    }

    /// `W0 = W' − scale·B·A`, exact up to floating-point rounding.
    pub fn unmerge(&self, merged: &Tensor) -> Result<Tensor> {
        self.check_base(merged)?;
        let d = self.delta();
        let data = merged.data().iter().zip(d.data()).map(|(w, dv)| w - dv).collect();
        Ok(Tensor::new(merged.shape().to_vec(), data)?)
    }

    /// Adapted forward pass on plain tensors.
    pub fn forward(&self, x: &Tensor, w0: &Tensor) -> Result<Tensor> {
        self.check_base(w0)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(w0.clone());
        let a = tape.constant(self.a.clone());
        let b = tape.constant(self.b.clone());
        let y = lora_forward(&mut tape, xv, w, a, b, self.scale())?;
        Ok(tape.value(y).clone())
    }
}

/// Recorded form of the adapted map, used inside the decoder.
pub fn lora_forward(tape: &mut Tape, x: Var, w0: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let base = tape.matmul_nt(x, w0)?;
    let down = tape.matmul_nt(x, a)?;
    let up = tape.matmul_nt(down, b)?;
    let up = tape.scale(up, scale)?;
    Ok(tape.add(base, up)?)
}
