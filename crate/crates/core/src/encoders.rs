//! The dual encoders.
//!
//! The image side splits a frame into `P × P` patches, projects them
//! linearly, prepends the class token, adds positional embeddings and runs
//! pre-norm transformer blocks; the final class-token state is normalised
//! and multiplied by the image projection. The text side embeds token ids,
//! adds positional embeddings, runs causally masked blocks and reads out
//! the end-of-sequence state through the text projection. A clip embedding
//! is the mean of its per-frame embeddings.
//!
//! The `*_node` functions build onto a caller-supplied [`Graph`] so the
//! trainer can differentiate through them; the `encode_*` wrappers run a
//! throwaway graph for inference.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::frame::{Frame, FrameStack};
use crate::model::{names, Model};
use crate::tensor::Tensor;
use crate::text::TokenSequence;

const LN_EPS: f64 = 1e-5;

/// Per-channel pixel statistics used to standardise patches before the
/// patch projection (the values CLIP's preprocessing uses).
pub const PIXEL_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const PIXEL_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Splits a frame into non-overlapping `P × P` patches in row-major patch
/// order. Each row is the patch flattened as `(dy, dx, channel)`.
pub fn patchify(frame: &Frame, patch: usize) -> Result<Tensor> {
    let (h, w) = (frame.height(), frame.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "frame {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = 3 * patch * patch;
    let mut out = Tensor::zeros(gh * gw, dim);
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let p = frame.pixel(py * patch + dy, px * patch + dx);
                    for c in p {
                        row[k] = f64::from(c);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Standardises patch rows in place; columns cycle through the channels.
pub fn standardize_patches(mut patches: Tensor) -> Tensor {
    let cols = patches.cols();
    for (i, v) in patches.data_mut().iter_mut().enumerate() {
        let c = (i % cols) % 3;
        *v = (*v - PIXEL_MEAN[c]) / PIXEL_STD[c];
    }
    patches
}

/// `[x_cls, patches · W] + e_pos`
pub fn embed_image_tokens(g: &mut Graph, patches: NodeId, model: &Model) -> Result<NodeId> {
    let p = &model.params;
    let proj = g.param(names::PATCH_PROJ, p.get(names::PATCH_PROJ));
    let (rows, cols) = (g.value(patches).rows(), g.value(patches).cols());
    let pos_value = p.get(names::IMAGE_POS);
    if cols != g.value(proj).rows() || rows + 1 != pos_value.rows() {
        return Err(Error::ShapeMismatch {
            name: "patches".into(),
            expected: vec![pos_value.rows() - 1, g.value(proj).rows()],
            found: vec![rows, cols],
        });
    }
    let tokens = g.matmul(patches, proj);
    let cls = g.param(names::CLS_TOKEN, p.get(names::CLS_TOKEN));
    let seq = g.concat_rows(&[cls, tokens]);
    let pos = g.param(names::IMAGE_POS, pos_value);
    Ok(g.add(seq, pos))
}

fn linear(g: &mut Graph, x: NodeId, model: &Model, prefix: &str) -> NodeId {
    let w_name = format!("{prefix}.weight");
    let b_name = format!("{prefix}.bias");
    let w = g.param(&w_name, model.params.get(&w_name));
    let b = g.param(&b_name, model.params.get(&b_name));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn layer_norm(g: &mut Graph, x: NodeId, model: &Model, prefix: &str) -> NodeId {
    let g_name = format!("{prefix}.weight");
    let b_name = format!("{prefix}.bias");
    let gain = g.param(&g_name, model.params.get(&g_name));
    let bias = g.param(&b_name, model.params.get(&b_name));
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// One pre-norm block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
fn transformer_block(
    g: &mut Graph,
    x: NodeId,
    model: &Model,
    prefix: &str,
    causal: bool,
) -> NodeId {
    let d = model.config.hidden_dim;
    let heads = model.config.heads;
    let hd = model.config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let h = layer_norm(g, x, model, &format!("{prefix}.ln_1"));
    let qkv = linear(g, h, model, &format!("{prefix}.attn.in_proj"));
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let q = g.slice_cols(qkv, head * hd, hd);
        let k = g.slice_cols(qkv, d + head * hd, hd);
        let v = g.slice_cols(qkv, 2 * d + head * hd, hd);
        let scores = g.matmul_t(q, k);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores, causal);
        outs.push(g.matmul(attn, v));
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    let attn_out = linear(g, merged, model, &format!("{prefix}.attn.out_proj"));
    let x = g.add(x, attn_out);

    let h = layer_norm(g, x, model, &format!("{prefix}.ln_2"));
    let h = linear(g, h, model, &format!("{prefix}.mlp.fc"));
    let h = g.gelu(h);
    let h = linear(g, h, model, &format!("{prefix}.mlp.proj"));
    g.add(x, h)
}

fn check_finite(g: &Graph, id: NodeId, stage: &'static str, layer: usize) -> Result<()> {
    if g.value(id).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { stage, layer })
    }
}

/// Image embedding `i` as a `1 × projection_dim` node.
pub fn image_node(g: &mut Graph, frame: &Frame, model: &Model) -> Result<NodeId> {
    let c = &model.config;
    if frame.height() != c.image_height || frame.width() != c.image_width {
        return Err(Error::ShapeMismatch {
            name: "frame".into(),
            expected: vec![c.image_height, c.image_width],
            found: vec![frame.height(), frame.width()],
        });
    }
    let patches = g.input(standardize_patches(patchify(frame, c.patch_size)?));
    let mut x = embed_image_tokens(g, patches, model)?;
    check_finite(g, x, "image encoder", 0)?;
    for l in 0..c.image_layers {
        x = transformer_block(g, x, model, &format!("visual.blocks.{l}"), false);
        check_finite(g, x, "image encoder", l + 1)?;
    }
    let cls = g.select_row(x, 0);
    let cls = layer_norm(g, cls, model, "visual.ln_post");
    let proj = g.param(names::IMAGE_PROJ, model.params.get(names::IMAGE_PROJ));
    Ok(g.matmul(cls, proj))
}

/// Text embedding `t` as a `1 × projection_dim` node.
pub fn text_node(g: &mut Graph, tokens: &TokenSequence, model: &Model) -> Result<NodeId> {
    let c = &model.config;
    if tokens.ids.len() != c.max_tokens || tokens.eos_position >= tokens.ids.len() {
        return Err(Error::ShapeMismatch {
            name: "tokens".into(),
            expected: vec![c.max_tokens],
            found: vec![tokens.ids.len()],
        });
    }
    if let Some(&id) = tokens.ids.iter().find(|&&id| id >= c.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: c.vocab_size,
        });
    }
    let table = g.param(names::TOKEN_EMBED, model.params.get(names::TOKEN_EMBED));
    let emb = g.embedding(table, &tokens.ids);
    let pos = g.param(names::TEXT_POS, model.params.get(names::TEXT_POS));
    let mut x = g.add(emb, pos);
    check_finite(g, x, "text encoder", 0)?;
    for l in 0..c.text_layers {
        x = transformer_block(g, x, model, &format!("text.blocks.{l}"), true);
        check_finite(g, x, "text encoder", l + 1)?;
    }
    let eos = g.select_row(x, tokens.eos_position);
    let eos = layer_norm(g, eos, model, "text.ln_final");
    let proj = g.param(names::TEXT_PROJ, model.params.get(names::TEXT_PROJ));
    Ok(g.matmul(eos, proj))
}

/// Clip embedding `v`: per-frame image embeddings with shared weights,
/// averaged over frames.
pub fn video_node(g: &mut Graph, stack: &FrameStack, model: &Model) -> Result<NodeId> {
    if stack.is_empty() {
        return Err(Error::InvalidArgument("empty frame stack".into()));
    }
    let per_frame = stack
        .frames
        .iter()
        .map(|f| image_node(g, f, model))
        .collect::<Result<Vec<_>>>()?;
    let rows = if per_frame.len() == 1 {
        per_frame[0]
    } else {
        g.concat_rows(&per_frame)
    };
    Ok(g.mean_rows(rows))
}

pub fn encode_image(frame: &Frame, model: &Model) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let id = image_node(&mut g, frame, model)?;
    Ok(g.value(id).data().to_vec())
}

pub fn encode_text(tokens: &TokenSequence, model: &Model) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let id = text_node(&mut g, tokens, model)?;
    Ok(g.value(id).data().to_vec())
}

/// Arithmetic mean of the rows.
pub fn temporal_pool(frame_embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = frame_embeddings
        .first()
        .ok_or_else(|| Error::InvalidArgument("temporal_pool needs at least one frame".into()))?;
    let mut out = vec![0.0; first.len()];
    for row in frame_embeddings {
        if row.len() != out.len() {
            return Err(Error::InvalidArgument("ragged frame embeddings".into()));
        }
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    // Same rounding as the differentiable path, which scales by 1/K.
    let inv = 1.0 / frame_embeddings.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

pub fn forward_video(stack: &FrameStack, model: &Model) -> Result<Vec<f64>> {
    let per_frame = stack
        .frames
        .iter()
        .map(|f| encode_image(f, model))
        .collect::<Result<Vec<_>>>()?;
    temporal_pool(&per_frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::Tokenizer;

    fn frame(h: usize, w: usize, seed: u32) -> Frame {
        let data = (0..h * w * 3)
            .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 999.0)
            .collect();
        Frame::new(h, w, data)
    }

    fn desk_model() -> Model {
        Model::init(ModelConfig::desk(), 7, 0.07).unwrap()
    }

    #[test]
    fn patchify_shapes_and_order() {
        let f = frame(224, 224, 1);
        let p = patchify(&f, 16).unwrap();
        assert_eq!(p.shape(), [196, 768]);

        let single = frame(16, 16, 2);
        let p = patchify(&single, 16).unwrap();
        assert_eq!(p.rows(), 1);
        let flat: Vec<f64> = single.data().iter().map(|&v| f64::from(v)).collect();
        assert_eq!(p.data(), flat.as_slice());

        let tall = frame(32, 16, 3);
        let p = patchify(&tall, 16).unwrap();
        assert_eq!(p.rows(), 2);
        assert_eq!(p.get(1, 0), f64::from(tall.pixel(16, 0)[0]));

        assert!(patchify(&frame(20, 16, 0), 16).is_err());
    }

    #[test]
    fn token_embedding_is_additive_identity_on_zero_inputs() {
        let mut m = desk_model();
        let n = m.config.num_patches();
        m.params.insert(names::PATCH_PROJ, Tensor::zeros(48, 32));
        m.params.insert(names::CLS_TOKEN, Tensor::zeros(1, 32));
        let e = m.params.get(names::IMAGE_POS).clone();
        let mut g = Graph::new();
        let patches = g.input(Tensor::zeros(n, 48));
        let out = embed_image_tokens(&mut g, patches, &m).unwrap();
        assert_eq!(g.value(out), &e);
        assert_eq!(g.value(out).shape(), [17, 32]);
    }

    #[test]
    fn residual_only_block_reads_normalised_cls() {
        let mut config = ModelConfig::desk();
        config.image_layers = 1;
        let mut m = Model::init(config, 11, 0.07).unwrap();
        for name in [
            "visual.blocks.0.attn.out_proj.weight",
            "visual.blocks.0.mlp.proj.weight",
        ] {
            let shape = m.params.get(name).shape();
            m.params.insert(name, Tensor::zeros(shape[0], shape[1]));
        }
        let mut prefix = Tensor::zeros(32, 16);
        for i in 0..16 {
            prefix.set(i, i, 1.0);
        }
        m.params.insert(names::IMAGE_PROJ, prefix);

        // Oracle: layer-normalise (x_cls + e_pos[0]) by hand.
        let cls = m.params.get(names::CLS_TOKEN).row(0).to_vec();
        let pos = m.params.get(names::IMAGE_POS).row(0).to_vec();
        let x: Vec<f64> = cls.iter().zip(&pos).map(|(a, b)| a + b).collect();
        let mean = x.iter().sum::<f64>() / 32.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        let expected: Vec<f64> = x[..16]
            .iter()
            .map(|v| (v - mean) / (var + 1e-5).sqrt())
            .collect();

        let i = encode_image(&frame(16, 16, 5), &m).unwrap();
        assert_eq!(i.len(), 16);
        for (a, b) in i.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn image_encoding_is_pure() {
        let m = desk_model();
        let f = frame(16, 16, 9);
        let a = encode_image(&f, &m).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, encode_image(&f, &m).unwrap());
        assert!(encode_image(&frame(8, 8, 0), &m).is_err());
    }

    #[test]
    fn text_encoding_ignores_post_eos_ids() {
        let m = desk_model();
        let tok = Tokenizer::desk();
        let seq = tok.tokenize("a photo of a feeding .").unwrap();
        let a = encode_text(&seq, &m).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, encode_text(&seq, &m).unwrap());
        let mut altered = seq.clone();
        for id in &mut altered.ids[seq.eos_position + 1..] {
            *id = 5;
        }
        assert_eq!(a, encode_text(&altered, &m).unwrap());

        let mut bad = seq;
        bad.ids[1] = 10_000;
        assert!(matches!(
            encode_text(&bad, &m),
            Err(Error::TokenOutOfRange { id: 10_000, .. })
        ));
    }

    #[test]
    fn pooling_examples() {
        let r = vec![0.5, -1.0, 2.0];
        assert_eq!(temporal_pool(&[r.clone(), r.clone(), r.clone()]).unwrap(), r);
        assert_eq!(
            temporal_pool(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(temporal_pool(&[]).is_err());
    }

    #[test]
    fn video_of_repeated_frame_equals_image() {
        let m = desk_model();
        let f = frame(16, 16, 4);
        let stack = FrameStack {
            frames: vec![f.clone(); 4],
            source_indices: vec![0; 4],
        };
        let v = forward_video(&stack, &m).unwrap();
        let i = encode_image(&f, &m).unwrap();
        for (a, b) in v.iter().zip(&i) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let mut g = Graph::new();
        let node = video_node(&mut g, &stack, &m).unwrap();
        assert_eq!(g.value(node).data(), v.as_slice());
    }
}
