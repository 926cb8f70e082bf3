//! Multimodal forgery alignment reasoning: similarity-guided selection of
//! consistent and inconsistent patch-token pairs, learnable region masks,
//! soft-masked cross-attention and interaction constraints.

use std::cmp::Ordering;

use rand::Rng;

use crate::encoder::ModalFeatures;
use crate::error::{Error, Result};
use crate::nn::{Bound, Mlp, ParamId, ParamStore};
use crate::numeric::{cosine_matrix, Array, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Max,
    Min,
}

/// Support of a selection matrix plus how many entries passed the threshold
/// on their own.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub support: Vec<bool>,
    pub natural: usize,
}

impl Selection {
    pub fn count(&self) -> usize {
        self.support.iter().filter(|&&s| s).count()
    }

    pub fn as_array(&self, rows: usize, cols: usize) -> Array {
        let data = self
            .support
            .iter()
            .map(|&s| if s { 1.0 } else { 0.0 })
            .collect();
        Array::matrix(rows, cols, data).expect("support length matches map")
    }
}

/// Entries strictly above (`Max`) or below (`Min`) the pair similarity, topped
/// up to `k` with the most extreme remaining entries. Ties go to the earlier
/// row-major position.
pub fn build_selection(s_g: f64, s_pt: &[f64], k: usize, mode: SelectMode) -> Result<Selection> {
    if k > s_pt.len() {
        return Err(Error::invalid(format!(
            "selection floor {k} exceeds map size {}",
            s_pt.len()
        )));
    }
    let passes = |v: f64| match mode {
        SelectMode::Max => v > s_g,
        SelectMode::Min => v < s_g,
    };
    let mut support: Vec<bool> = s_pt.iter().map(|&v| passes(v)).collect();
    let natural = support.iter().filter(|&&s| s).count();
    if natural < k {
        let mut rest: Vec<usize> = (0..s_pt.len()).filter(|&i| !support[i]).collect();
        rest.sort_by(|&a, &b| {
            let ord = s_pt[a].partial_cmp(&s_pt[b]).unwrap_or(Ordering::Equal);
            let ord = if mode == SelectMode::Max {
                ord.reverse()
            } else {
                ord
            };
            ord.then(a.cmp(&b))
        });
        for &i in rest.iter().take(k - natural) {
            support[i] = true;
        }
    }
    Ok(Selection { support, natural })
}

/// `s ↦ 1 + s/2`, mapping cosine similarity onto `[0.5, 1.5]`.
pub fn rescale(sim: Tensor<'_>) -> Tensor<'_> {
    sim.scale(0.5).add_scalar(1.0)
}

/// Region targets of one pair: `y_tt[i,j] = 1` iff patch `i` and token `j` are
/// both real, `y_ff` iff both fake. Row-major `[P, L]`.
pub fn region_targets(y_pat: &[u8], y_tok: &[u8]) -> (Vec<f64>, Vec<f64>) {
    let mut tt = Vec::with_capacity(y_pat.len() * y_tok.len());
    let mut ff = Vec::with_capacity(y_pat.len() * y_tok.len());
    for &a in y_pat {
        for &b in y_tok {
            tt.push(((a == 0) && (b == 0)) as u8 as f64);
            ff.push(((a == 1) && (b == 1)) as u8 as f64);
        }
    }
    (tt, ff)
}

/// `(χ_c, χ_ic)` from selected similarity maps and mask logits.
pub fn build_masks<'t>(
    s_max: Tensor<'t>,
    s_min: Tensor<'t>,
    g_tt: Tensor<'t>,
    g_ff: Tensor<'t>,
    alpha3: f64,
) -> Result<(Tensor<'t>, Tensor<'t>)> {
    let tt = g_tt.sigmoid();
    let ff = g_ff.sigmoid();
    let ff_w = ff.scale(alpha3);
    let chi_c = s_max.mul(tt.add(ff_w)?)?;
    let tf = tt.add(ff)?.neg().add_scalar(1.0).clamp(0.0, 1.0);
    let chi_ic = s_min.mul(tf.add(ff_w)?)?;
    Ok((chi_c, chi_ic))
}

/// `(softmax(X Yᵀ/√d) ⊙ χ) Y`, the masked cross-attention update for `X`.
pub fn soft_interaction<'t>(x: Tensor<'t>, y: Tensor<'t>, chi: Tensor<'t>) -> Result<Tensor<'t>> {
    let want = [x.rows(), y.rows()];
    if chi.shape() != want {
        return Err(Error::shape("soft_interaction", &chi.shape(), &want));
    }
    let scale = 1.0 / (x.cols() as f64).sqrt();
    let att = x.matmul_t(y)?.scale(scale).softmax(1)?;
    att.mul(chi)?.matmul(y)
}

/// `L_ai + L_ni + η·ReLU(L_ai − L_ni)`.
pub fn interaction_constraint<'t>(
    l_ai: Tensor<'t>,
    l_ni: Tensor<'t>,
    eta: f64,
) -> Result<Tensor<'t>> {
    let gap = l_ai.sub(l_ni)?.relu().scale(eta);
    l_ai.add(l_ni)?.add(gap)
}

#[derive(Clone, Debug)]
pub struct MfarConfig {
    pub alpha3: f64,
    pub k: usize,
    pub double_residual: bool,
    /// `false` replaces both soft masks by all-ones
    pub masks: bool,
}

#[derive(Clone, Debug)]
pub struct Mfar {
    pub image_proj: Mlp,
    pub text_proj: Mlp,
    pub g_tt: ParamId,
    pub g_ff: ParamId,
    pub patch_head: Mlp,
    pub token_head: Mlp,
}

/// Per-pair outputs.
pub struct MfarPair<'t> {
    /// `V_pat` after the consistency interaction only
    pub v_bar: Tensor<'t>,
    pub v_tilde: Tensor<'t>,
    pub t_bar: Tensor<'t>,
    pub t_tilde: Tensor<'t>,
    pub chi_c: Tensor<'t>,
    pub chi_ic: Tensor<'t>,
}

impl Mfar {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        patches: usize,
        seq_len: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            image_proj: Mlp::new(store, "mfar.image_proj", (dim, dim, dim), rng),
            text_proj: Mlp::new(store, "mfar.text_proj", (dim, dim, dim), rng),
            g_tt: store.add("mfar.g_tt", Array::zeros(&[patches, seq_len])),
            g_ff: store.add("mfar.g_ff", Array::zeros(&[patches, seq_len])),
            patch_head: Mlp::new(store, "mfar.patch_head", (dim, dim, 1), rng),
            token_head: Mlp::new(store, "mfar.token_head", (dim, dim, 1), rng),
        }
    }

    /// `(S_g [1,1], S_pt [P,L])`, both rescaled to `[0.5, 1.5]`.
    pub fn global_guidance<'t>(
        &self,
        p: &Bound<'t>,
        f: &ModalFeatures<'t>,
    ) -> Result<(Tensor<'t>, Tensor<'t>)> {
        let v = self
            .image_proj
            .forward(p, Tensor::concat_rows(&[f.v_cls, f.v_pat])?)?;
        let t = self
            .text_proj
            .forward(p, Tensor::concat_rows(&[f.t_cls, f.t_tok])?)?;
        let (np, nl) = (v.rows(), t.rows());
        let s_g = cosine_matrix(v.slice_rows(0, 1)?, t.slice_rows(0, 1)?)?;
        let s_pt = cosine_matrix(v.slice_rows(1, np)?, t.slice_rows(1, nl)?)?;
        Ok((rescale(s_g), rescale(s_pt)))
    }

    /// Soft masks for one pair.
    pub fn masks<'t>(
        &self,
        p: &Bound<'t>,
        f: &ModalFeatures<'t>,
        cfg: &MfarConfig,
    ) -> Result<(Tensor<'t>, Tensor<'t>)> {
        let (np, nl) = (f.v_pat.rows(), f.t_tok.rows());
        if !cfg.masks {
            let ones = f.v_pat.tape().constant(Array::ones(&[np, nl]));
            return Ok((ones, ones));
        }
        let (s_g, s_pt) = self.global_guidance(p, f)?;
        let (g, map) = (s_g.item(), s_pt.to_array());
        let tape = f.v_pat.tape();
        let hi = build_selection(g, map.data(), cfg.k, SelectMode::Max)?;
        let lo = build_selection(g, map.data(), cfg.k, SelectMode::Min)?;
        let s_max = s_pt.mul(tape.constant(hi.as_array(np, nl)))?;
        let s_min = s_pt.mul(tape.constant(lo.as_array(np, nl)))?;
        build_masks(s_max, s_min, p.get(self.g_tt), p.get(self.g_ff), cfg.alpha3)
    }

    pub fn forward_pair<'t>(
        &self,
        p: &Bound<'t>,
        f: &ModalFeatures<'t>,
        cfg: &MfarConfig,
    ) -> Result<MfarPair<'t>> {
        let (chi_c, chi_ic) = self.masks(p, f, cfg)?;
        let (v, t) = (f.v_pat, f.t_tok);
        let dv_c = soft_interaction(v, t, chi_c)?;
        let dv_ic = soft_interaction(v, t, chi_ic)?;
        let dt_c = soft_interaction(t, v, chi_c.transpose()?)?;
        let dt_ic = soft_interaction(t, v, chi_ic.transpose()?)?;
        let v_bar = v.add(dv_c)?;
        let t_bar = t.add(dt_c)?;
        let (v_tilde, t_tilde) = if cfg.double_residual {
            (v_bar.add(v.add(dv_ic)?)?, t_bar.add(t.add(dt_ic)?)?)
        } else {
            (v_bar.add(dv_ic)?, t_bar.add(dt_ic)?)
        };
        Ok(MfarPair {
            v_bar,
            v_tilde,
            t_bar,
            t_tilde,
            chi_c,
            chi_ic,
        })
    }

    /// `L_tt + L_ff` for a batch. BCE is affine in its target, so the batch
    /// mean over shared logit maps equals one BCE against the mean target.
    pub fn mask_losses<'t>(
        &self,
        p: &Bound<'t>,
        mean_tt: &[f64],
        mean_ff: &[f64],
    ) -> Result<(Tensor<'t>, Tensor<'t>)> {
        let l_tt = p.get(self.g_tt).bce_with_logits(mean_tt)?;
        let l_ff = p.get(self.g_ff).bce_with_logits(mean_ff)?;
        Ok((l_tt, l_ff))
    }
}
