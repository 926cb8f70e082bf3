//! Fine-grained judgment heads: guided manipulation-type classification,
//! disruptive-information culling, grounding aggregation, box regression and
//! token scoring.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Attention, Bound, Linear, Mlp, ParamId, ParamStore};
use crate::numeric::{Array, Tensor};

/// Pre-interaction rows when this modality is fake and the other is genuine,
/// post-interaction rows otherwise. Returns one of its inputs unchanged.
pub fn cull<'t>(
    pre: Tensor<'t>,
    post: Tensor<'t>,
    self_fake: bool,
    other_fake: bool,
) -> Tensor<'t> {
    if self_fake && !other_fake {
        pre
    } else {
        post
    }
}

/// `(cx, cy, w, h)` → `(x0, y0, x1, y1)`.
pub fn cxcywh_to_corners(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

pub fn corners_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    [
        (b[0] + b[2]) / 2.0,
        (b[1] + b[3]) / 2.0,
        b[2] - b[0],
        b[3] - b[1],
    ]
}

fn check_box(b: &[f64; 4]) -> Result<()> {
    if b[2] > b[0] && b[3] > b[1] {
        Ok(())
    } else {
        Err(Error::invalid(format!("box {b:?} is inverted or empty")))
    }
}

/// Intersection over union of two corner boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    Ok(inter / union)
}

/// Generalized IoU: IoU minus the share of the enclosing box outside the union.
pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    let i = iou(a, b)?;
    let inter_union = {
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    };
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    Ok(i - (hull - inter_union) / hull)
}

/// Mean L1 over `(cx, cy, w, h)` plus mean `1 − gIoU`, for `[n, 4]` predictions
/// against `n` ground-truth boxes in the same parameterization.
pub fn bbox_loss<'t>(pred: Tensor<'t>, gt: &[[f64; 4]]) -> Result<Tensor<'t>> {
    let n = gt.len();
    if pred.shape() != [n, 4] {
        return Err(Error::shape("bbox_loss", &pred.shape(), &[n, 4]));
    }
    let tape = pred.tape();
    for b in gt {
        check_box(&cxcywh_to_corners(*b))?;
    }
    let gt_flat: Vec<f64> = gt.iter().flatten().copied().collect();
    let l1 = pred
        .sub(tape.constant(Array::matrix(n, 4, gt_flat)?))?
        .abs()
        .mean();

    let col = |i: usize| pred.slice_cols(i, i + 1);
    let (cx, cy, w, h) = (col(0)?, col(1)?, col(2)?, col(3)?);
    let px0 = cx.sub(w.scale(0.5))?;
    let px1 = cx.add(w.scale(0.5))?;
    let py0 = cy.sub(h.scale(0.5))?;
    let py1 = cy.add(h.scale(0.5))?;
    let corners: Vec<[f64; 4]> = gt.iter().map(|b| cxcywh_to_corners(*b)).collect();
    let gcol = |i: usize| {
        tape.constant(Array::from_parts(
            vec![n, 1],
            corners.iter().map(|c| c[i]).collect(),
        ))
    };
    let (gx0, gy0, gx1, gy1) = (gcol(0), gcol(1), gcol(2), gcol(3));
    let g_area: Vec<f64> = corners
        .iter()
        .map(|c| (c[2] - c[0]) * (c[3] - c[1]))
        .collect();

    let iw = px1.minimum(gx1)?.sub(px0.maximum(gx0)?)?.relu();
    let ih = py1.minimum(gy1)?.sub(py0.maximum(gy0)?)?.relu();
    let inter = iw.mul(ih)?;
    let union = w
        .mul(h)?
        .add(tape.constant(Array::from_parts(vec![n, 1], g_area)))?
        .sub(inter)?;
    let hull_w = px1.maximum(gx1)?.sub(px0.minimum(gx0)?)?;
    let hull_h = py1.maximum(gy1)?.sub(py0.minimum(gy0)?)?;
    let hull = hull_w.mul(hull_h)?;
    let giou = inter.div(union)?.sub(hull.sub(union)?.div(hull)?)?;
    let giou_term = giou.neg().add_scalar(1.0).mean();
    l1.add(giou_term)
}

#[derive(Clone, Debug)]
pub struct Judgment {
    pub image_guide: Attention,
    pub text_guide: Attention,
    pub image_mlc: Mlp,
    pub text_mlc: Mlp,
    pub image_ground_query: ParamId,
    pub text_ground_query: ParamId,
    pub image_ground: Attention,
    pub text_ground: Attention,
    pub bbox_head: Mlp,
    pub token_bilinear: ParamId,
    pub token_linear: Linear,
}

pub struct JudgmentPair<'t> {
    pub v_c: Tensor<'t>,
    pub t_c: Tensor<'t>,
    /// `[1, 2]` logits over (FS, FA)
    pub image_mlc: Tensor<'t>,
    /// `[1, 2]` logits over (TS, TA)
    pub text_mlc: Tensor<'t>,
    /// `[1, 4]` sigmoid-bounded `(cx, cy, w, h)` in grid-normalized units
    pub bbox: Tensor<'t>,
    /// `[L, 1]`
    pub token_logits: Tensor<'t>,
}

/// Inputs of the judgment stage for one pair.
pub struct JudgmentInputs<'t> {
    pub v_cls: Tensor<'t>,
    pub t_cls: Tensor<'t>,
    pub v_pat: Tensor<'t>,
    pub t_tok: Tensor<'t>,
    pub v_tilde: Tensor<'t>,
    pub t_tilde: Tensor<'t>,
    pub image_fake: bool,
    pub text_fake: bool,
}

impl Judgment {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            image_guide: Attention::new(store, "judgment.image_guide", dim, heads, rng),
            text_guide: Attention::new(store, "judgment.text_guide", dim, heads, rng),
            image_mlc: Mlp::new(store, "judgment.image_mlc", (dim, dim, 2), rng),
            text_mlc: Mlp::new(store, "judgment.text_mlc", (dim, dim, 2), rng),
            image_ground_query: store.add(
                "judgment.image_ground_query",
                Array::randn(&[1, dim], 1.0, rng),
            ),
            text_ground_query: store.add(
                "judgment.text_ground_query",
                Array::randn(&[1, dim], 1.0, rng),
            ),
            image_ground: Attention::new(store, "judgment.image_ground", dim, heads, rng),
            text_ground: Attention::new(store, "judgment.text_ground", dim, heads, rng),
            bbox_head: Mlp::new(store, "judgment.bbox_head", (dim, dim, 4), rng),
            token_bilinear: store.add(
                "judgment.token_bilinear",
                Array::randn(&[dim, dim], (1.0 / dim as f64).sqrt(), rng),
            ),
            token_linear: Linear::new(store, "judgment.token_linear", dim, 1, rng),
        }
    }

    /// `cls + MultiAtt(cls, rows, rows)`.
    pub fn guided_cls_feature<'t>(
        att: &Attention,
        p: &Bound<'t>,
        cls: Tensor<'t>,
        rows: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        cls.add(att.forward(p, cls, rows, rows, None)?)
    }

    /// `MultiAtt(g, [cls; rows], [cls; rows])`.
    pub fn grounding_aggregate<'t>(
        att: &Attention,
        p: &Bound<'t>,
        query: Tensor<'t>,
        cls: Tensor<'t>,
        rows: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let keys = Tensor::concat_rows(&[cls, rows])?;
        att.forward(p, query, keys, keys, None)
    }

    pub fn forward_pair<'t>(
        &self,
        p: &Bound<'t>,
        x: &JudgmentInputs<'t>,
    ) -> Result<JudgmentPair<'t>> {
        let v_c = Self::guided_cls_feature(&self.image_guide, p, x.v_cls, x.v_tilde)?;
        let t_c = Self::guided_cls_feature(&self.text_guide, p, x.t_cls, x.t_tilde)?;
        let v_g = cull(x.v_pat, x.v_tilde, x.image_fake, x.text_fake);
        let t_g = cull(x.t_tok, x.t_tilde, x.text_fake, x.image_fake);
        let gv = Self::grounding_aggregate(
            &self.image_ground,
            p,
            p.get(self.image_ground_query),
            x.v_cls,
            v_g,
        )?;
        let gt = Self::grounding_aggregate(
            &self.text_ground,
            p,
            p.get(self.text_ground_query),
            x.t_cls,
            t_g,
        )?;
        let bbox = self.bbox_head.forward(p, gv)?.sigmoid();
        let u = gt.matmul(p.get(self.token_bilinear))?;
        let token_logits = t_g.matmul_t(u)?.add(self.token_linear.forward(p, t_g)?)?;
        Ok(JudgmentPair {
            image_mlc: self.image_mlc.forward(p, v_c)?,
            text_mlc: self.text_mlc.forward(p, t_c)?,
            v_c,
            t_c,
            bbox,
            token_logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cull_branches() {
        let tape = Tape::new();
        let pre = tape.constant(Array::row(&[1.0]));
        let post = tape.constant(Array::row(&[2.0]));
        assert_eq!(cull(pre, post, true, false).id(), pre.id());
        assert_eq!(cull(pre, post, true, true).id(), post.id());
        assert_eq!(cull(pre, post, false, true).id(), post.id());
        // the text side of an image-real, text-fake pair keeps its own rows
        assert_eq!(cull(pre, post, true, false).id(), pre.id());
    }

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[2.0, 2.0, 3.0, 3.0]).unwrap(), 0.0);
        let shifted = [0.5, 0.0, 1.5, 1.0];
        assert!((iou(&a, &shifted).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(iou(&a, &[1.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn giou_of_disjoint_unit_boxes() {
        // enclosing box 2×2 = 4, union 2
        let g = giou(&[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 2.0, 2.0]).unwrap();
        assert!((g + 0.5).abs() < 1e-15);
    }

    #[test]
    fn bbox_loss_cases() {
        let tape = Tape::new();
        let gt = [[0.5, 0.5, 0.2, 0.4]];
        let pred = tape.constant(Array::matrix(1, 4, gt[0].to_vec()).unwrap());
        assert!(bbox_loss(pred, &gt).unwrap().item().abs() < 1e-15);
        // disjoint unit boxes: L1 over (cx, cy) offsets of 1 each → mean 0.5; gIoU term 1.5
        let a = corners_to_cxcywh([0.0, 0.0, 1.0, 1.0]);
        let b = corners_to_cxcywh([1.0, 1.0, 2.0, 2.0]);
        let pred = tape.constant(Array::matrix(1, 4, a.to_vec()).unwrap());
        let l = bbox_loss(pred, &[b]).unwrap().item();
        assert!((l - 2.0).abs() < 1e-14);
    }

    #[test]
    fn single_patch_guidance_and_zero_value_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let j = Judgment::new(&mut store, 4, 2, &mut rng);
        let tape = Tape::new();
        let cls = tape.constant(Array::randn(&[1, 4], 1.0, &mut rng));
        let row = tape.constant(Array::randn(&[1, 4], 1.0, &mut rng));
        {
            let p = store.bind(&tape);
            let vc = Judgment::guided_cls_feature(&j.image_guide, &p, cls, row).unwrap();
            let proj = j
                .image_guide
                .output
                .forward(&p, j.image_guide.value.forward(&p, row).unwrap())
                .unwrap();
            let want = cls.add(proj).unwrap();
            assert!(vc.value().max_abs_diff(&want.value()) < 1e-12);
        }
        for id in [
            j.image_guide.value.weight,
            j.image_guide.value.bias,
            j.image_guide.output.bias,
        ] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Array::zeros(&shape);
        }
        let p = store.bind(&tape);
        let rows = tape.constant(Array::randn(&[3, 4], 1.0, &mut rng));
        let vc = Judgment::guided_cls_feature(&j.image_guide, &p, cls, rows).unwrap();
        assert_eq!(vc.value().data(), cls.value().data());
    }

    #[test]
    fn grounding_over_cls_only_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let j = Judgment::new(&mut store, 4, 2, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let cls = tape.constant(Array::randn(&[1, 4], 1.0, &mut rng));
        let att = &j.image_ground;
        let out = att
            .forward(&p, p.get(j.image_ground_query), cls, cls, None)
            .unwrap();
        let want = att
            .output
            .forward(&p, att.value.forward(&p, cls).unwrap())
            .unwrap();
        assert!(out.value().max_abs_diff(&want.value()) < 1e-12);
    }
}
