use super::tokenizer::EOS;
use super::{Model, ModelError, Result};
use crate::tensor::Tensor;

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Width-1 beam search: append the argmax token until EOS, `max_new_tokens`
    /// or the context limit. The EOS id itself is not returned.
    pub fn generate_greedy(&self, prompt_embeds: &Tensor, max_new_tokens: usize) -> Result<Vec<usize>> {
        if prompt_embeds.shape().len() != 2 || prompt_embeds.rows() == 0 {
            return Err(ModelError::EmptyPrompt);
        }
        let limit = self.config.max_text_len;
        if prompt_embeds.rows() > limit {
            return Err(ModelError::SequenceTooLong {
                len: prompt_embeds.rows(),
                limit,
            });
        }
        let d = self.config.d_lm;
        if prompt_embeds.cols() != d {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "generate_greedy",
                left: prompt_embeds.shape().to_vec(),
                right: vec![prompt_embeds.rows(), d],
            }
            .into());
        }
        let table = &self.params.get("lm.tok_embed")?.tensor;
        let mut seq = prompt_embeds.data().to_vec();
        let mut out = Vec::new();
        while out.len() < max_new_tokens && seq.len() / d < limit {
            let embeds = Tensor::new(vec![seq.len() / d, d], seq.clone())?;
            let logits = self.logits(&embeds)?;
            let next = argmax(logits.row(logits.rows() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            seq.extend_from_slice(table.row(next));
        }
        Ok(out)
    }

    /// Greedy continuation of a text-only prompt given as token ids.
    pub fn generate_from_ids(&self, prompt_ids: &[usize], max_new_tokens: usize) -> Result<Vec<usize>> {
        if prompt_ids.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let embeds = self.token_embeddings(prompt_ids)?;
        self.generate_greedy(&embeds, max_new_tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn empty_prompt_rejected() {
        let m = Model::new(ModelConfig::toy()).unwrap();
        assert!(matches!(m.generate_from_ids(&[], 3), Err(ModelError::EmptyPrompt)));
        assert!(matches!(
            m.generate_greedy(&Tensor::zeros(&[1, 10]), 3),
            Err(ModelError::Tensor(_))
        ));
    }

    #[test]
    fn greedy_equals_repeated_argmax() {
        let m = Model::new(ModelConfig::toy()).unwrap();
        let prompt = m.token_embeddings(&[72, 105, 32]).unwrap();
        let got = m.generate_greedy(&prompt, 4).unwrap();
        // oracle: one argmax per full forward pass
        let mut ids = vec![72, 105, 32];
        let mut want = Vec::new();
        for _ in 0..4 {
            let logits = m.logits(&m.token_embeddings(&ids).unwrap()).unwrap();
            let next = argmax(logits.row(ids.len() - 1));
            if next == EOS {
                break;
            }
            want.push(next);
            ids.push(next);
        }
        assert_eq!(got, want);
        assert_eq!(m.generate_greedy(&prompt, 4).unwrap(), got);
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
