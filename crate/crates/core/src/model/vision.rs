use super::attention::{block, layer_norm, linear};
use super::{Model, ModelError, Result};
use crate::data::Image;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Concatenates each run of four consecutive token rows along the feature
/// axis: `(N, d) → (N/4, 4d)`. Row `i` of the output is `[r4i | r4i+1 | r4i+2 | r4i+3]`,
/// which in row-major layout is a reshape.
pub fn group_visual_tokens(tokens: &Tensor, group: usize) -> Result<Tensor> {
    let (n, d) = (tokens.rows(), tokens.cols());
    if tokens.shape().len() != 2 || group == 0 || n % group != 0 {
        return Err(ModelError::Grouping { tokens: n, group });
    }
    Ok(tokens.reshape(&[n / group, group * d])?)
}

/// Inverse of [`group_visual_tokens`].
pub fn ungroup_visual_tokens(grouped: &Tensor, group: usize) -> Result<Tensor> {
    let (n, w) = (grouped.rows(), grouped.cols());
    if grouped.shape().len() != 2 || group == 0 || w % group != 0 {
        return Err(ModelError::Grouping { tokens: w, group });
    }
    Ok(grouped.reshape(&[n * group, w / group])?)
}

pub(crate) fn group_tokens_var(tape: &mut Tape, tokens: Var, group: usize) -> Result<Var> {
    let shape = tape.value(tokens).shape().to_vec();
    let [n, d] = shape[..] else {
        return Err(ModelError::Grouping { tokens: shape[0], group });
    };
    if n % group != 0 {
        return Err(ModelError::Grouping { tokens: n, group });
    }
    Ok(tape.reshape(tokens, &[n / group, group * d])?)
}

/// Raster-order patches, each flattened as (row, col, channel).
fn patchify(image: &Image, patch: usize) -> Tensor {
    let side = image.height / patch;
    let c = image.channels;
    let dim = patch * patch * c;
    let mut data = Vec::with_capacity(side * side * dim);
    for py in 0..side {
        for px in 0..side {
            for y in 0..patch {
                let row = (py * patch + y) * image.width;
                let start = (row + px * patch) * c;
                data.extend_from_slice(&image.data[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![side * side, dim], data).expect("patch grid is consistent")
}

impl Model {
    /// Patch embedding, positional embedding and pre-norm encoder blocks; one
    /// output row per patch. The encoder is frozen, so nothing here requires
    /// gradients unless the freeze policy was bypassed.
    pub fn encode_image(&self, tape: &mut Tape, image: &Image) -> Result<Var> {
        let c = &self.config;
        if image.height != c.image_size || image.width != c.image_size || image.channels != c.channels {
            return Err(ModelError::ImageSize {
                expected: c.image_size,
                channels: c.channels,
                got_h: image.height,
                got_w: image.width,
                got_c: image.channels,
            });
        }
        let patches = tape.constant(patchify(image, c.patch_size));
        let x = linear(tape, self, patches, "vision.patch_embed", true)?;
        let pos = tape.param(&self.params, "vision.pos_embed")?;
        let mut x = tape.add(x, pos)?;
        for i in 0..c.n_layers_vis {
            x = block(tape, self, x, &format!("vision.blocks.{i}"), false, None)?;
        }
        layer_norm(tape, self, x, "vision.ln_final")
    }

    /// Single affine map from grouped visual tokens into the decoder width.
    pub fn project_to_lm(&self, tape: &mut Tape, grouped: Var) -> Result<Var> {
        let width = tape.value(grouped).cols();
        let expected = self.config.group_size * self.config.d_vis;
        if width != expected {
            return Err(TensorError::ShapeMismatch {
                op: "project_to_lm",
                left: tape.value(grouped).shape().to_vec(),
                right: vec![self.config.d_lm, expected],
            }
            .into());
        }
        linear(tape, self, grouped, "projector", true)
    }

    /// Grouped encoder output as a plain tensor. Since the encoder is frozen this
    /// can be computed once per image and fed to [`Model::project_to_lm`].
    pub fn frozen_visual_features(&self, image: &Image) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc = self.encode_image(&mut tape, image)?;
        let grouped = group_tokens_var(&mut tape, enc, self.config.group_size)?;
        Ok(tape.value(grouped).clone())
    }

    /// Encode, group and project: the visual tokens spliced into the prompt.
    pub fn visual_embedding(&self, tape: &mut Tape, image: &Image) -> Result<Var> {
        let enc = self.encode_image(tape, image)?;
        let grouped = group_tokens_var(tape, enc, self.config.group_size)?;
        self.project_to_lm(tape, grouped)
    }
}
