use super::attention::{block, layer_norm};
use super::{Model, ModelError, Result};
use crate::tensor::{Tape, Tensor, Var};

impl Model {
    /// Rows of the (frozen) token embedding table.
    pub fn embed_tokens(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let table = tape.param(&self.params, "lm.tok_embed")?;
        Ok(tape.embedding(table, ids)?)
    }

    /// Causal decoder over a `(seq, d_lm)` embedding sequence; returns `(seq, vocab)` logits.
    pub fn lm_forward(&self, tape: &mut Tape, embeds: Var) -> Result<Var> {
        let seq = tape.value(embeds).rows();
        if seq > self.config.max_text_len {
            return Err(ModelError::SequenceTooLong {
                len: seq,
                limit: self.config.max_text_len,
            });
        }
        let pos = tape.param(&self.params, "lm.pos_embed")?;
        let pos = tape.slice_rows(pos, 0, seq)?;
        let mut x = tape.add(embeds, pos)?;
        for i in 0..self.config.n_layers_lm {
            x = block(tape, self, x, &format!("lm.blocks.{i}"), true, Some(i))?;
        }
        let x = layer_norm(tape, self, x, "lm.ln_final")?;
        let head = tape.param(&self.params, "lm.head.weight")?;
        Ok(tape.matmul_nt(x, head)?)
    }

    /// Untracked forward pass on plain tensors.
    pub fn logits(&self, embeds: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(embeds.clone());
        let y = self.lm_forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn token_embeddings(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = self.embed_tokens(&mut tape, ids)?;
        Ok(tape.value(y).clone())
    }
}
