//! Stub image/text encoders and the co-attention pre-interaction stage.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Attention, Bound, Linear, ParamId, ParamStore};
use crate::numeric::{Array, Tensor};

/// Per-pair features: class rows `[1, d]`, patches `[G², d]`, tokens `[L, d]`.
#[derive(Clone, Copy)]
pub struct ModalFeatures<'t> {
    pub v_cls: Tensor<'t>,
    pub v_pat: Tensor<'t>,
    pub t_cls: Tensor<'t>,
    pub t_tok: Tensor<'t>,
}

#[derive(Clone, Debug)]
pub struct EncoderDims {
    pub patches: usize,
    pub patch_dim: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub pre_layers: usize,
}

#[derive(Clone, Debug)]
struct CoAttention {
    image: Attention,
    text: Attention,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    dims: EncoderDims,
    pub patch_proj: Linear,
    pub patch_pos: ParamId,
    pub image_query: ParamId,
    pub image_pool: Attention,
    pub token_table: ParamId,
    pub token_pos: ParamId,
    pub text_query: ParamId,
    pub text_pool: Attention,
    pre: Vec<CoAttention>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: EncoderDims, rng: &mut R) -> Self {
        let d = dims.dim;
        let pre = (0..dims.pre_layers)
            .map(|i| CoAttention {
                image: Attention::new(store, &format!("encoder.pre{i}.image"), d, dims.heads, rng),
                text: Attention::new(store, &format!("encoder.pre{i}.text"), d, dims.heads, rng),
            })
            .collect();
        Self {
            patch_proj: Linear::new(store, "encoder.patch_proj", dims.patch_dim, d, rng),
            patch_pos: store.add(
                "encoder.patch_pos",
                Array::randn(&[dims.patches, d], 0.1, rng),
            ),
            image_query: store.add("encoder.image_query", Array::randn(&[1, d], 1.0, rng)),
            image_pool: Attention::new(store, "encoder.image_pool", d, dims.heads, rng),
            token_table: store.add(
                "encoder.token_table",
                Array::randn(&[dims.vocab, d], 1.0, rng),
            ),
            token_pos: store.add(
                "encoder.token_pos",
                Array::randn(&[dims.seq_len, d], 0.1, rng),
            ),
            text_query: store.add("encoder.text_query", Array::randn(&[1, d], 1.0, rng)),
            text_pool: Attention::new(store, "encoder.text_pool", d, dims.heads, rng),
            pre,
            dims,
        }
    }

    pub fn dims(&self) -> &EncoderDims {
        &self.dims
    }

    /// `(V_cls, V_pat)` from a `[G², patch_dim]` grid.
    pub fn embed_image<'t>(
        &self,
        p: &Bound<'t>,
        patches: Tensor<'t>,
    ) -> Result<(Tensor<'t>, Tensor<'t>)> {
        let want = [self.dims.patches, self.dims.patch_dim];
        if patches.shape() != want {
            return Err(Error::shape("embed_image", &patches.shape(), &want));
        }
        let v_pat = self
            .patch_proj
            .forward(p, patches)?
            .gelu()
            .add(p.get(self.patch_pos))?;
        let v_cls = self
            .image_pool
            .forward(p, p.get(self.image_query), v_pat, v_pat, None)?;
        Ok((v_cls, v_pat))
    }

    /// `(T_cls, T_tok)` from token ids.
    pub fn embed_text<'t>(
        &self,
        p: &Bound<'t>,
        tokens: &[usize],
    ) -> Result<(Tensor<'t>, Tensor<'t>)> {
        if tokens.len() != self.dims.seq_len {
            return Err(Error::shape(
                "embed_text",
                &[tokens.len()],
                &[self.dims.seq_len],
            ));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.dims.vocab) {
            return Err(Error::invalid(format!(
                "token id {t} outside vocabulary of {}",
                self.dims.vocab
            )));
        }
        let t_tok = p
            .get(self.token_table)
            .select_rows(tokens)?
            .add(p.get(self.token_pos))?;
        let t_cls = self
            .text_pool
            .forward(p, p.get(self.text_query), t_tok, t_tok, None)?;
        Ok((t_cls, t_tok))
    }

    /// Bidirectional co-attention over `[cls; rows]` of both modalities, with
    /// residuals. Both directions read the layer's inputs.
    pub fn pre_interaction<'t>(
        &self,
        p: &Bound<'t>,
        f: ModalFeatures<'t>,
    ) -> Result<ModalFeatures<'t>> {
        if self.pre.is_empty() {
            return Ok(f);
        }
        let mut v = Tensor::concat_rows(&[f.v_cls, f.v_pat])?;
        let mut t = Tensor::concat_rows(&[f.t_cls, f.t_tok])?;
        for layer in &self.pre {
            let dv = layer.image.forward(p, v, t, t, None)?;
            let dt = layer.text.forward(p, t, v, v, None)?;
            v = v.add(dv)?;
            t = t.add(dt)?;
        }
        let (np, nl) = (v.rows(), t.rows());
        Ok(ModalFeatures {
            v_cls: v.slice_rows(0, 1)?,
            v_pat: v.slice_rows(1, np)?,
            t_cls: t.slice_rows(0, 1)?,
            t_tok: t.slice_rows(1, nl)?,
        })
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        patches: Tensor<'t>,
        tokens: &[usize],
    ) -> Result<ModalFeatures<'t>> {
        let (v_cls, v_pat) = self.embed_image(p, patches)?;
        let (t_cls, t_tok) = self.embed_text(p, tokens)?;
        self.pre_interaction(
            p,
            ModalFeatures {
                v_cls,
                v_pat,
                t_cls,
                t_tok,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(pre_layers: usize) -> EncoderDims {
        EncoderDims {
            patches: 4,
            patch_dim: 3,
            seq_len: 5,
            vocab: 7,
            dim: 8,
            heads: 2,
            pre_layers,
        }
    }

    fn build(pre_layers: usize, seed: u64) -> (ParamStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, dims(pre_layers), &mut rng);
        (store, enc)
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Array::zeros(&shape);
    }

    #[test]
    fn zero_grid_without_positions_gives_identical_rows() {
        let (mut store, enc) = build(1, 1);
        zero(&mut store, enc.patch_pos);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (_, v_pat) = enc
            .embed_image(&p, tape.constant(Array::zeros(&[4, 3])))
            .unwrap();
        let v = v_pat.value();
        for r in 1..4 {
            assert_eq!(v.row_slice(r), v.row_slice(0));
        }
    }

    #[test]
    fn patch_permutation_permutes_rows() {
        let (mut store, enc) = build(1, 2);
        zero(&mut store, enc.patch_pos);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = Array::randn(&[4, 3], 1.0, &mut rng);
        let perm = [2, 0, 3, 1];
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (c1, a) = enc.embed_image(&p, tape.constant(grid.clone())).unwrap();
        let (c2, b) = enc
            .embed_image(&p, tape.constant(grid.select_rows(&perm)))
            .unwrap();
        assert!(a.value().select_rows(&perm).max_abs_diff(&b.value()) < 1e-14);
        assert!(c1.value().max_abs_diff(&c2.value()) < 1e-12);
    }

    #[test]
    fn identical_tokens_share_rows_without_positions() {
        let (mut store, enc) = build(1, 3);
        zero(&mut store, enc.token_pos);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (_, t) = enc.embed_text(&p, &[4, 1, 4, 6, 4]).unwrap();
        let t = t.value();
        assert_eq!(t.row_slice(0), t.row_slice(2));
        assert_eq!(t.row_slice(0), t.row_slice(4));
        assert_ne!(t.row_slice(0), t.row_slice(1));
    }

    #[test]
    fn token_permutation_permutes_rows() {
        let (mut store, enc) = build(0, 4);
        zero(&mut store, enc.token_pos);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (_, a) = enc.embed_text(&p, &[0, 1, 2, 3, 4]).unwrap();
        let (_, b) = enc.embed_text(&p, &[4, 3, 2, 1, 0]).unwrap();
        assert!(
            a.value()
                .select_rows(&[4, 3, 2, 1, 0])
                .max_abs_diff(&b.value())
                < 1e-15
        );
    }

    #[test]
    fn shapes_and_errors() {
        let (store, enc) = build(1, 5);
        let tape = Tape::new();
        let p = store.bind(&tape);
        assert!(enc
            .embed_image(&p, tape.constant(Array::zeros(&[3, 3])))
            .is_err());
        assert!(enc.embed_text(&p, &[0, 1, 2]).is_err());
        assert!(enc.embed_text(&p, &[0, 1, 2, 3, 7]).is_err());
        let f = enc
            .forward(&p, tape.constant(Array::ones(&[4, 3])), &[0, 1, 2, 3, 4])
            .unwrap();
        assert_eq!(f.v_cls.shape(), [1, 8]);
        assert_eq!(f.v_pat.shape(), [4, 8]);
        assert_eq!(f.t_cls.shape(), [1, 8]);
        assert_eq!(f.t_tok.shape(), [5, 8]);
    }

    #[test]
    fn no_pre_layers_is_identity() {
        let (store, enc) = build(0, 6);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (v_cls, v_pat) = enc
            .embed_image(&p, tape.constant(Array::ones(&[4, 3])))
            .unwrap();
        let (t_cls, t_tok) = enc.embed_text(&p, &[0, 1, 2, 3, 4]).unwrap();
        let f = ModalFeatures {
            v_cls,
            v_pat,
            t_cls,
            t_tok,
        };
        let g = enc.pre_interaction(&p, f).unwrap();
        assert_eq!(g.v_pat.id(), v_pat.id());
        assert_eq!(g.t_tok.id(), t_tok.id());
    }

    #[test]
    fn zero_text_leaves_value_bias_residual() {
        let (mut store, enc) = build(1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = &enc.pre[0].image;
        for lin in [&layer.key, &layer.value, &layer.output] {
            let shape = store.get(lin.bias).shape().to_vec();
            *store.get_mut(lin.bias) = Array::randn(&shape, 0.5, &mut rng);
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = Array::randn(&[5, 8], 1.0, &mut rng);
        let f = ModalFeatures {
            v_cls: tape.constant(v.select_rows(&[0])),
            v_pat: tape.constant(v.select_rows(&[1, 2, 3, 4])),
            t_cls: tape.constant(Array::zeros(&[1, 8])),
            t_tok: tape.constant(Array::zeros(&[5, 8])),
        };
        let out = enc.pre_interaction(&p, f).unwrap();
        // Every key is the key bias, so attention is uniform and returns the
        // value bias, which the output projection maps to a constant row.
        let bv = store.get(layer.value.bias);
        let wo = store.get(layer.output.weight);
        let bo = store.get(layer.output.bias);
        let mut shift = [0.0; 8];
        for (j, s) in shift.iter_mut().enumerate() {
            *s = bo.data()[j] + (0..8).map(|i| bv.data()[i] * wo.at(i, j)).sum::<f64>();
        }
        let got = Tensor::concat_rows(&[out.v_cls, out.v_pat])
            .unwrap()
            .to_array();
        for r in 0..5 {
            for (j, s) in shift.iter().enumerate() {
                assert!((got.at(r, j) - v.at(r, j) - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_is_reproducible() {
        let run = || {
            let (store, enc) = build(1, 10);
            let tape = Tape::new();
            let p = store.bind(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let grid = tape.constant(Array::randn(&[4, 3], 1.0, &mut rng));
            let f = enc.forward(&p, grid, &[6, 0, 3, 3, 1]).unwrap();
            let v = f.v_cls.to_array();
            let t = f.t_tok.to_array();
            (v, t)
        };
        let (v1, t1) = run();
        let (v2, t2) = run();
        assert_eq!(v1, v2);
        assert_eq!(t1, t2);
    }
}
