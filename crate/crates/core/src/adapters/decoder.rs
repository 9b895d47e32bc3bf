use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Graph, Resample, Var};
use crate::error::{Error, Result};
use crate::nn::{lecun, normal, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct AttentionWeights {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

impl AttentionWeights {
    fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let mut w = |part: &str| store.add(format!("{name}.{part}"), lecun(&[dim, dim], dim, rng));
        Self {
            query: w("query"),
            key: w("key"),
            value: w("value"),
        }
    }

    /// `softmax(q Wq (kv Wk)ᵀ / √d) · kv Wv`.
    fn attend(&self, g: &mut Graph, store: &ParamStore, q_in: Var, kv_in: Var, dim: usize) -> Var {
        let (wq, wk, wv) = (g.param(store, self.query), g.param(store, self.key), g.param(store, self.value));
        let q = g.matmul(q_in, wq);
        let k = g.matmul(kv_in, wk);
        let v = g.matmul(kv_in, wv);
        let logits = g.matmul_nt(q, k);
        let logits = g.scale(logits, 1.0 / (dim as f64).sqrt());
        let attn = g.softmax_rows(logits);
        g.matmul(attn, v)
    }
}

/// Inputs to [`MaskDecoder::decode`].
#[derive(Debug, Clone, Copy)]
pub struct DecoderInputs {
    /// `1 × d` output token; the decoder's own learned token when `None`.
    pub output_token: Option<Var>,
    /// `m × d` sparse prompt tokens.
    pub sparse: Option<Var>,
    /// `dense_dim × h × w` dense prompt grid; the learned no-mask embedding when `None`.
    pub dense: Option<Var>,
    /// `(h·w) × feature_dim` query features, row-major cells.
    pub features: Var,
    pub grid: (usize, usize),
    pub output_size: (usize, usize),
}

/// Trainable stand-in for a promptable mask decoder: one two-way attention
/// block (tokens attend to image cells, then cells attend to tokens), a
/// hypernetwork on the output token and a per-cell dot product, bilinearly
/// upsampled to the output size.
#[derive(Debug, Clone)]
pub struct MaskDecoder {
    dim: usize,
    feature_dim: usize,
    dense_dim: usize,
    image_proj: Linear,
    dense_proj: Linear,
    default_token: ParamId,
    no_mask_embed: ParamId,
    token_to_image: AttentionWeights,
    image_to_token: AttentionWeights,
    hyper: Linear,
    out_bias: ParamId,
}

impl MaskDecoder {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        feature_dim: usize,
        dense_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let image_proj = Linear::new(store, "decoder.image_proj", feature_dim, dim, true, rng);
        let dense_proj = Linear::new(store, "decoder.dense_proj", dense_dim, dim, false, rng);
        let default_token = store.add("decoder.default_token", normal(&[1, dim], 1.0, rng));
        let no_mask_embed = store.add("decoder.no_mask_embed", normal(&[1, dense_dim], 0.1, rng));
        let token_to_image = AttentionWeights::new(store, "decoder.token_to_image", dim, rng);
        let image_to_token = AttentionWeights::new(store, "decoder.image_to_token", dim, rng);
        let hyper = Linear::new(store, "decoder.hyper", dim, dim, true, rng);
        let out_bias = store.add("decoder.out_bias", Tensor::zeros([1]));
        Self {
            dim,
            feature_dim,
            dense_dim,
            image_proj,
            dense_proj,
            default_token,
            no_mask_embed,
            token_to_image,
            image_to_token,
            hyper,
            out_bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, g: &Graph, inputs: &DecoderInputs) -> Result<()> {
        let cells = inputs.grid.0 * inputs.grid.1;
        let mismatch = |what: &str, got: &[usize], want: String| {
            Err(Error::config(format!("decoder {what} has shape {got:?}, expected {want}")))
        };
        let f = g.value(inputs.features);
        if f.rows() != cells || f.cols() != self.feature_dim {
            return mismatch("features", f.shape(), format!("[{cells}, {}]", self.feature_dim));
        }
        if let Some(t) = inputs.output_token {
            let t = g.value(t);
            if t.len() != self.dim {
                return mismatch("output token", t.shape(), format!("[1, {}]", self.dim));
            }
        }
        if let Some(s) = inputs.sparse {
            let s = g.value(s);
            if s.cols() != self.dim {
                return mismatch("sparse tokens", s.shape(), format!("[m, {}]", self.dim));
            }
        }
        if let Some(d) = inputs.dense {
            let d = g.value(d);
            if d.shape() != [self.dense_dim, inputs.grid.0, inputs.grid.1] {
                return mismatch(
                    "dense grid",
                    d.shape(),
                    format!("[{}, {}, {}]", self.dense_dim, inputs.grid.0, inputs.grid.1),
                );
            }
        }
        Ok(())
    }

    /// Mask logits of shape `1 × H × W`.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, inputs: DecoderInputs) -> Result<Var> {
        self.check(g, &inputs)?;
        let (h, w) = inputs.grid;
        let cells = h * w;

        let mut src = self.image_proj.forward(g, store, inputs.features);
        src = match inputs.dense {
            Some(d) => {
                let flat = g.reshape(d, [self.dense_dim, cells]);
                let cells_first = g.transpose(flat);
                let proj = self.dense_proj.forward(g, store, cells_first);
                g.add(src, proj)
            }
            None => {
                let nm = g.param(store, self.no_mask_embed);
                let proj = self.dense_proj.forward(g, store, nm);
                g.add_row(src, proj)
            }
        };

        let out_tok = match inputs.output_token {
            Some(t) => g.reshape(t, [1, self.dim]),
            None => g.param(store, self.default_token),
        };
        let tokens = match inputs.sparse {
            Some(s) if g.value(s).rows() > 0 => g.concat(&[out_tok, s]),
            _ => out_tok,
        };

        let t_upd = self.token_to_image.attend(g, store, tokens, src, self.dim);
        let tokens = g.add(tokens, t_upd);
        let s_upd = self.image_to_token.attend(g, store, src, tokens, self.dim);
        let src = g.add(src, s_upd);

        let out = g.select_rows(tokens, &[0]);
        let hyper = self.hyper.forward(g, store, out);
        let logits = g.matmul_nt(src, hyper);
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let bias = g.param(store, self.out_bias);
        let logits = g.add_row(logits, bias);
        let grid = g.reshape(logits, [1, h, w]);
        let (oh, ow) = inputs.output_size;
        Ok(g.resample(grid, Arc::new(Resample::bilinear(h, w, oh, ow))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, MaskDecoder, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = MaskDecoder::new(&mut store, 8, 6, 4, &mut rng);
        (store, dec, rng)
    }

    #[test]
    fn output_matches_image_size_and_is_repeatable() {
        let (store, dec, mut rng) = setup();
        let feats = normal(&[16, 6], 1.0, &mut rng);
        let dense = normal(&[4, 4, 4], 1.0, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let f = g.constant(feats.clone());
            let d = g.constant(dense.clone());
            let out = dec
                .decode(
                    &mut g,
                    &store,
                    DecoderInputs {
                        output_token: None,
                        sparse: None,
                        dense: Some(d),
                        features: f,
                        grid: (4, 4),
                        output_size: (16, 16),
                    },
                )
                .unwrap();
            g.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[1, 16, 16]);
        assert_eq!(a, run());
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let (store, dec, mut rng) = setup();
        let mut g = Graph::new();
        let f = g.constant(normal(&[16, 6], 1.0, &mut rng));
        let bad_tok = g.constant(normal(&[1, 5], 1.0, &mut rng));
        let err = dec
            .decode(
                &mut g,
                &store,
                DecoderInputs {
                    output_token: Some(bad_tok),
                    sparse: None,
                    dense: None,
                    features: f,
                    grid: (4, 4),
                    output_size: (8, 8),
                },
            )
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn gradients_reach_every_prompt_input() {
        let (store, dec, mut rng) = setup();
        let mut g = Graph::new();
        let f = g.constant(normal(&[16, 6], 1.0, &mut rng));
        let tok = g.leaf(normal(&[1, 8], 1.0, &mut rng));
        let sparse = g.leaf(normal(&[3, 8], 1.0, &mut rng));
        let dense = g.leaf(normal(&[4, 4, 4], 1.0, &mut rng));
        let out = dec
            .decode(
                &mut g,
                &store,
                DecoderInputs {
                    output_token: Some(tok),
                    sparse: Some(sparse),
                    dense: Some(dense),
                    features: f,
                    grid: (4, 4),
                    output_size: (8, 8),
                },
            )
            .unwrap();
        let s = g.sigmoid(out);
        let loss = g.sum(s);
        let grads = g.backward(loss);
        for v in [tok, sparse, dense] {
            let gr = grads.get(v).expect("gradient");
            assert!(gr.data().iter().all(|x| *x != 0.0), "zero entry in {:?}", gr.data());
        }
    }

    #[test]
    fn matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = MaskDecoder::new(&mut store, 4, 3, 2, &mut rng);
        let target = crate::raster::Mask::from_fn(4, 4, |y, x| y + x < 4);
        let inputs = [
            normal(&[1, 4], 1.0, &mut rng),
            normal(&[2, 4], 1.0, &mut rng),
            normal(&[2, 2, 2], 1.0, &mut rng),
            normal(&[4, 3], 1.0, &mut rng),
        ];
        let err = crate::autograd::gradcheck::max_relative_error(&inputs, 1e-6, |g, v| {
            let out = dec
                .decode(
                    g,
                    &store,
                    DecoderInputs {
                        output_token: Some(v[0]),
                        sparse: Some(v[1]),
                        dense: Some(v[2]),
                        features: v[3],
                        grid: (2, 2),
                        output_size: (4, 4),
                    },
                )
                .unwrap();
            crate::losses::bce_loss(g, out, &target)
        });
        assert!(err < 1e-4, "{err}");
    }
}
