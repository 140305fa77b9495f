use super::{lora::lora_forward, lora_names, proj_weight_name, AttnProj, Model, Result};
use crate::tensor::{Tape, Tensor, Var};

const MASKED: f64 = -1e9;

pub(crate) fn linear(tape: &mut Tape, model: &Model, x: Var, prefix: &str, bias: bool) -> Result<Var> {
    let w = tape.param(&model.params, &format!("{prefix}.weight"))?;
    let y = tape.matmul_nt(x, w)?;
    if bias {
        let b = tape.param(&model.params, &format!("{prefix}.bias"))?;
        Ok(tape.bias_add(y, b)?)
    } else {
        Ok(y)
    }
}

pub(crate) fn layer_norm(tape: &mut Tape, model: &Model, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(&model.params, &format!("{prefix}.gain"))?;
    let b = tape.param(&model.params, &format!("{prefix}.bias"))?;
    Ok(tape.layer_norm(x, g, b)?)
}

/// Attention projection, routed through the adapter when one is active.
fn project(tape: &mut Tape, model: &Model, x: Var, prefix: &str, proj: AttnProj, layer: Option<usize>) -> Result<Var> {
    let w = tape.param(&model.params, &proj_weight_name(prefix, proj))?;
    match layer {
        Some(i) if model.lora_enabled() && model.config.lora_targets.contains(&proj) => {
            let (a, b) = lora_names(i, proj);
            let a = tape.param(&model.params, &a)?;
            let b = tape.param(&model.params, &b)?;
            lora_forward(tape, x, w, a, b, model.config.lora_scale())
        }
        _ => Ok(tape.matmul_nt(x, w)?),
    }
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = MASKED;
        }
    }
    m
}

fn self_attention(
    tape: &mut Tape,
    model: &Model,
    x: Var,
    prefix: &str,
    causal: bool,
    lora_layer: Option<usize>,
) -> Result<Var> {
    let (seq, d) = (tape.value(x).shape()[0], tape.value(x).shape()[1]);
    let heads = model.config.n_heads;
    let dh = d / heads;
    let q = project(tape, model, x, prefix, AttnProj::Q, lora_layer)?;
    let k = project(tape, model, x, prefix, AttnProj::K, lora_layer)?;
    let v = project(tape, model, x, prefix, AttnProj::V, lora_layer)?;
    let mask = causal.then(|| tape.constant(causal_mask(seq)));
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let probs = tape.softmax(scores)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    let joined = tape.concat_cols(&outs)?;
    project(tape, model, joined, prefix, AttnProj::O, lora_layer)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub(crate) fn block(
    tape: &mut Tape,
    model: &Model,
    x: Var,
    prefix: &str,
    causal: bool,
    lora_layer: Option<usize>,
) -> Result<Var> {
    let h = layer_norm(tape, model, x, &format!("{prefix}.ln1"))?;
    let a = self_attention(tape, model, h, prefix, causal, lora_layer)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, model, x, &format!("{prefix}.ln2"))?;
    let h = linear(tape, model, h, &format!("{prefix}.mlp.fc1"), true)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, model, h, &format!("{prefix}.mlp.fc2"), true)?;
    Ok(tape.add(x, h)?)
}
