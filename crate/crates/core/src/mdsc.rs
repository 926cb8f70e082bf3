//! Multimodal decision supervised correction: unimodal weak supervision,
//! positive / semi-positive / negative contrastive correction and the
//! corrected binary objective.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, Mlp, ParamStore};
use crate::numeric::{cosine_similarity, sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairClass {
    Positive,
    SemiPositive { effective: Modality },
    Negative,
}

pub(crate) fn check_binary(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&y| y > 1) {
        Some(y) => Err(Error::invalid(format!("binary label {y} outside {{0, 1}}"))),
        None => Ok(()),
    }
}

pub(crate) fn as_targets(labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|&y| y as f64).collect()
}

/// Mean BCE of `[B, 1]` logits against per-modality labels.
pub fn unimodal_loss<'t>(logits: Tensor<'t>, labels: &[u8]) -> Result<Tensor<'t>> {
    check_binary(labels)?;
    logits.bce_with_logits(&as_targets(labels))
}

/// A prediction is correct when it falls strictly on the label's side of 0.5.
fn correct(prob: f64, label: u8) -> bool {
    prob != 0.5 && (prob > 0.5) == (label == 1)
}

pub fn partition_pairs(v_probs: &[f64], t_probs: &[f64], y_v: &[u8], y_t: &[u8]) -> Vec<PairClass> {
    assert!(v_probs.len() == t_probs.len() && v_probs.len() == y_v.len() && y_v.len() == y_t.len());
    (0..v_probs.len())
        .map(
            |i| match (correct(v_probs[i], y_v[i]), correct(t_probs[i], y_t[i])) {
                (true, true) => PairClass::Positive,
                (true, false) => PairClass::SemiPositive {
                    effective: Modality::Image,
                },
                (false, true) => PairClass::SemiPositive {
                    effective: Modality::Text,
                },
                (false, false) => PairClass::Negative,
            },
        )
        .collect()
}

/// `−log Σ_{P∪S} e^{s_i/τ} / Σ_all e^{s_i/τ}` with `s_i = cos(r^v_i, r^t_i)`.
/// For semi-positive items the effective modality's row is held fixed.
pub fn mmc_loss<'t>(
    r_v: Tensor<'t>,
    r_t: Tensor<'t>,
    partition: &[PairClass],
    tau: f64,
) -> Result<Tensor<'t>> {
    let b = r_v.rows();
    if partition.len() != b || r_t.rows() != b {
        return Err(Error::shape("mmc_loss", &r_v.shape(), &[partition.len()]));
    }
    let keep: Vec<bool> = partition
        .iter()
        .map(|c| *c != PairClass::Negative)
        .collect();
    if !keep.contains(&true) {
        return Err(Error::EmptyTerm(
            "contrastive correction (no positive pairs)",
        ));
    }
    let pick = |x: Tensor<'t>, frozen: Modality| -> Result<Tensor<'t>> {
        let idx: Vec<usize> = partition
            .iter()
            .enumerate()
            .map(|(i, c)| match c {
                PairClass::SemiPositive { effective } if *effective == frozen => b + i,
                _ => i,
            })
            .collect();
        Tensor::concat_rows(&[x, x.detach()])?.select_rows(&idx)
    };
    let rv = pick(r_v, Modality::Image)?;
    let rt = pick(r_t, Modality::Text)?;
    let s = cosine_similarity(rv, rt)?
        .reshape(&[1, b])?
        .scale(1.0 / tau);
    let all = s.logsumexp_rows(&vec![true; b])?;
    let pos = s.logsumexp_rows(&keep)?;
    all.sub(pos)?.reshape(&[1])
}

/// `L_BIC + α1 (L^v_uni + L^t_uni) + α2 L_mmc`; an absent contrastive term counts as 0.
pub fn mdsc_total<'t>(
    bic: Tensor<'t>,
    uni_v: Tensor<'t>,
    uni_t: Tensor<'t>,
    mmc: Option<Tensor<'t>>,
    alpha1: f64,
    alpha2: f64,
) -> Result<Tensor<'t>> {
    let mut total = bic.add(uni_v.add(uni_t)?.scale(alpha1))?;
    if let Some(m) = mmc {
        total = total.add(m.scale(alpha2))?;
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct Mdsc {
    pub image_cls: Mlp,
    pub text_cls: Mlp,
    pub image_reduce: Linear,
    pub text_reduce: Linear,
    pub binary: Mlp,
}

pub struct MdscOutputs<'t> {
    pub image_logits: Tensor<'t>,
    pub text_logits: Tensor<'t>,
    pub pair_logits: Tensor<'t>,
    pub r_v: Tensor<'t>,
    pub r_t: Tensor<'t>,
}

impl MdscOutputs<'_> {
    pub fn image_probs(&self) -> Vec<f64> {
        self.image_logits
            .value()
            .data()
            .iter()
            .map(|&z| sigmoid(z))
            .collect()
    }

    pub fn text_probs(&self) -> Vec<f64> {
        self.text_logits
            .value()
            .data()
            .iter()
            .map(|&z| sigmoid(z))
            .collect()
    }
}

pub struct MdscLosses<'t> {
    pub bic: Tensor<'t>,
    pub uni_v: Tensor<'t>,
    pub uni_t: Tensor<'t>,
    pub mmc: Option<Tensor<'t>>,
    pub total: Tensor<'t>,
}

impl Mdsc {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        reduced: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            image_cls: Mlp::new(store, "mdsc.image_cls", (dim, dim, 1), rng),
            text_cls: Mlp::new(store, "mdsc.text_cls", (dim, dim, 1), rng),
            image_reduce: Linear::new(store, "mdsc.image_reduce", dim, reduced, rng),
            text_reduce: Linear::new(store, "mdsc.text_reduce", dim, reduced, rng),
            binary: Mlp::new(store, "mdsc.binary", (2 * dim, dim, 1), rng),
        }
    }

    /// Heads over stacked class rows `[B, d]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        v_cls: Tensor<'t>,
        t_cls: Tensor<'t>,
    ) -> Result<MdscOutputs<'t>> {
        Ok(MdscOutputs {
            image_logits: self.image_cls.forward(p, v_cls)?,
            text_logits: self.text_cls.forward(p, t_cls)?,
            pair_logits: self
                .binary
                .forward(p, Tensor::concat_cols(&[v_cls, t_cls])?)?,
            r_v: self.image_reduce.forward(p, v_cls)?,
            r_t: self.text_reduce.forward(p, t_cls)?,
        })
    }

    pub fn losses<'t>(
        &self,
        out: &MdscOutputs<'t>,
        y_v: &[u8],
        y_t: &[u8],
        alpha1: f64,
        alpha2: f64,
        tau: f64,
    ) -> Result<MdscLosses<'t>> {
        let pair: Vec<u8> = y_v.iter().zip(y_t).map(|(a, b)| a | b).collect();
        let bic = unimodal_loss(out.pair_logits, &pair)?;
        let uni_v = unimodal_loss(out.image_logits, y_v)?;
        let uni_t = unimodal_loss(out.text_logits, y_t)?;
        let partition = partition_pairs(&out.image_probs(), &out.text_probs(), y_v, y_t);
        let mmc = if alpha2 == 0.0 {
            None
        } else {
            match mmc_loss(out.r_v, out.r_t, &partition, tau) {
                Ok(t) => Some(t),
                Err(Error::EmptyTerm(what)) => {
                    log::debug!("skipping {what}");
                    None
                }
                Err(e) => return Err(e),
            }
        };
        let total = mdsc_total(bic, uni_v, uni_t, mmc, alpha1, alpha2)?;
        Ok(MdscLosses {
            bic,
            uni_v,
            uni_t,
            mmc,
            total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Array, Tape};

    #[test]
    fn unimodal_loss_examples() {
        let tape = Tape::new();
        let z = tape.constant(Array::matrix(2, 1, vec![100.0, -100.0]).unwrap());
        assert!(unimodal_loss(z, &[1, 0]).unwrap().item() < 1e-40);
        let z = tape.constant(Array::zeros(&[3, 1]));
        assert!((unimodal_loss(z, &[1, 0, 1]).unwrap().item() - 2f64.ln()).abs() < 1e-15);
        assert!(unimodal_loss(z, &[1, 2, 0]).is_err());
    }

    #[test]
    fn partition_rules() {
        let p = partition_pairs(
            &[0.9, 0.9, 0.1, 0.5],
            &[0.2, 0.8, 0.8, 0.5],
            &[1, 1, 1, 1],
            &[0, 0, 1, 1],
        );
        assert_eq!(p[0], PairClass::Positive);
        assert_eq!(
            p[1],
            PairClass::SemiPositive {
                effective: Modality::Image
            }
        );
        assert_eq!(
            p[2],
            PairClass::SemiPositive {
                effective: Modality::Text
            }
        );
        assert_eq!(p[3], PairClass::Negative);
    }

    #[test]
    fn one_positive_one_negative_gives_ln2() {
        let tape = Tape::new();
        let r = tape.constant(Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = mmc_loss(r, r, &[PairClass::Positive, PairClass::Negative], 0.07).unwrap();
        assert!((l.item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn no_negatives_gives_zero_and_no_positives_errors() {
        let tape = Tape::new();
        let rv = tape.constant(Array::matrix(2, 2, vec![1.0, 0.3, -0.2, 1.0]).unwrap());
        let rt = tape.constant(Array::matrix(2, 2, vec![0.5, 0.1, 0.7, -1.0]).unwrap());
        let semi = PairClass::SemiPositive {
            effective: Modality::Text,
        };
        let l = mmc_loss(rv, rt, &[PairClass::Positive, semi], 0.07).unwrap();
        assert!(l.item().abs() < 1e-12);
        let err = mmc_loss(rv, rt, &[PairClass::Negative, PairClass::Negative], 0.07).unwrap_err();
        assert!(matches!(err, Error::EmptyTerm(_)));
    }

    #[test]
    fn semi_positive_effective_side_gets_no_gradient() {
        let tape = Tape::new();
        let rv = tape.param(Array::matrix(3, 2, vec![1.0, 0.3, -0.2, 1.0, 0.4, 0.4]).unwrap());
        let rt = tape.param(Array::matrix(3, 2, vec![0.5, 0.1, 0.7, -1.0, -0.3, 0.9]).unwrap());
        let part = [
            PairClass::SemiPositive {
                effective: Modality::Image,
            },
            PairClass::SemiPositive {
                effective: Modality::Text,
            },
            PairClass::Negative,
        ];
        let l = mmc_loss(rv, rt, &part, 0.07).unwrap();
        let g = tape.backward(l).unwrap();
        let (gv, gt) = (g.get(rv), g.get(rt));
        assert_eq!(gv.row_slice(0), [0.0, 0.0]);
        assert_eq!(gt.row_slice(1), [0.0, 0.0]);
        assert!(gt.row_slice(0).iter().any(|v| *v != 0.0));
        assert!(gv.row_slice(1).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_weights_reduce_to_bic_and_zero_logits_give_three_ln2() {
        let tape = Tape::new();
        let z = tape.constant(Array::zeros(&[2, 1]));
        let bic = unimodal_loss(z, &[1, 0]).unwrap();
        let uv = unimodal_loss(z, &[1, 0]).unwrap();
        let ut = unimodal_loss(z, &[0, 0]).unwrap();
        let m = tape.constant(Array::scalar(0.7));
        let t0 = mdsc_total(bic, uv, ut, Some(m), 0.0, 0.0).unwrap();
        assert_eq!(t0.item(), bic.item());
        let t1 = mdsc_total(bic, uv, ut, Some(m), 1.0, 0.0).unwrap();
        assert!((t1.item() - 3.0 * 2f64.ln()).abs() < 1e-14);
    }
}
