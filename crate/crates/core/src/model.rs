//! The full network: encoders, the three supervision modules and the
//! judgment heads, evaluated over a batch into predictions and losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, LabelSet, Sample};
use crate::encoder::{Encoder, EncoderDims, ModalFeatures};
use crate::error::{Error, Result};
use crate::judgment::{bbox_loss, corners_to_cxcywh, cxcywh_to_corners, Judgment, JudgmentInputs};
use crate::mdsc::Mdsc;
use crate::metrics::{self, MetricsReport};
use crate::mfar::{interaction_constraint, region_targets, Mfar, MfarConfig};
use crate::nn::{Bound, ParamStore};
use crate::numeric::{sigmoid, Array, Tape, Tensor};
use crate::ufmr::{
    self, balanced_coefficients, band_coefficients, band_patches, coefficient_bce, Ufmr,
};

/// Multipliers on the seven top-level objective terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub fs: f64,
    pub ss: f64,
    pub ci: f64,
    pub bic: f64,
    pub mlc: f64,
    pub bbox: f64,
    pub token: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fs: 1.0,
            ss: 1.0,
            ci: 1.0,
            bic: 1.0,
            mlc: 1.0,
            bbox: 1.0,
            token: 1.0,
        }
    }
}

/// Module switches; `false` disables that module's mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub mdsc: bool,
    pub ufmr: bool,
    pub mfar: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            mdsc: true,
            ufmr: true,
            mfar: true,
        }
    }
}

impl Ablation {
    /// Full model with the named module switched off.
    pub fn without(module: &str) -> Result<Self> {
        let mut a = Self::default();
        match module {
            "mdsc" => a.mdsc = false,
            "ufmr" => a.ufmr = false,
            "mfar" => a.mfar = false,
            other => return Err(Error::Config(format!("unknown module {other:?}"))),
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub pre_layers: usize,
    pub reduced_dim: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub eta: f64,
    pub tau: f64,
    pub lambda: f64,
    /// selection floor as a fraction of `G²·L`
    pub k_fraction: f64,
    pub double_residual: bool,
    pub weights: LossWeights,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            pre_layers: 1,
            reduced_dim: 16,
            alpha1: 0.5,
            alpha2: 0.25,
            alpha3: 0.5,
            eta: 1.0,
            tau: 0.07,
            lambda: 0.1,
            k_fraction: 0.1,
            double_residual: false,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.reduced_dim == 0 {
            return bad("reduced_dim must be positive".into());
        }
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("eta", self.eta),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return bad(format!(
                "k_fraction must be in (0, 1], got {}",
                self.k_fraction
            ));
        }
        Ok(())
    }
}

/// Input geometry fixed by the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub grid: usize,
    pub seq_len: usize,
    pub patch_dim: usize,
    pub vocab: usize,
}

impl From<&DatasetConfig> for DataShape {
    fn from(c: &DatasetConfig) -> Self {
        Self {
            grid: c.grid,
            seq_len: c.seq_len,
            patch_dim: c.patch_dim,
            vocab: c.vocab,
        }
    }
}

impl DataShape {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// culling follows ground-truth labels
    Train,
    /// culling follows the unimodal heads at threshold 0.5
    Infer,
}

/// Scalar values of every objective component for one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub bic_star: f64,
    pub bic: f64,
    pub uni_v: f64,
    pub uni_t: f64,
    pub mmc: f64,
    pub fs: f64,
    pub f_v: f64,
    pub f_t: f64,
    pub ss: f64,
    pub s_v: f64,
    pub s_t: f64,
    pub ci: f64,
    pub tt: f64,
    pub ff: f64,
    pub ic_v: f64,
    pub ic_t: f64,
    pub ai_v: f64,
    pub ni_v: f64,
    pub ai_t: f64,
    pub ni_t: f64,
    pub mlc_star: f64,
    pub mlc_v: f64,
    pub mlc_t: f64,
    pub m_v: f64,
    pub m_t: f64,
    pub bbox: f64,
    pub token: f64,
}

/// The composite terms checked by the gradient oracle, plus the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    BicStar,
    Fs,
    Ss,
    Ci,
    MlcStar,
    Bbox,
    Token,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 8] = [
        LossTerm::BicStar,
        LossTerm::Fs,
        LossTerm::Ss,
        LossTerm::Ci,
        LossTerm::MlcStar,
        LossTerm::Bbox,
        LossTerm::Token,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::BicStar => "bic_star",
            LossTerm::Fs => "fs",
            LossTerm::Ss => "ss",
            LossTerm::Ci => "ci",
            LossTerm::MlcStar => "mlc_star",
            LossTerm::Bbox => "bbox",
            LossTerm::Token => "token",
            LossTerm::Total => "total",
        }
    }
}

pub struct LossBundle<'t> {
    pub bic_star: Tensor<'t>,
    pub fs: Tensor<'t>,
    pub ss: Tensor<'t>,
    pub ci: Tensor<'t>,
    pub mlc_star: Tensor<'t>,
    pub bbox: Tensor<'t>,
    pub token: Tensor<'t>,
    pub total: Tensor<'t>,
    pub values: LossValues,
}

impl<'t> LossBundle<'t> {
    pub fn get(&self, term: LossTerm) -> Tensor<'t> {
        match term {
            LossTerm::BicStar => self.bic_star,
            LossTerm::Fs => self.fs,
            LossTerm::Ss => self.ss,
            LossTerm::Ci => self.ci,
            LossTerm::MlcStar => self.mlc_star,
            LossTerm::Bbox => self.bbox,
            LossTerm::Token => self.token,
            LossTerm::Total => self.total,
        }
    }
}

/// Label-free outputs for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pair_prob: f64,
    pub image_prob: f64,
    pub text_prob: f64,
    /// `[FS, FA, TS, TA]`
    pub multi: [f64; 4],
    /// corner box in grid units
    pub bbox: [f64; 4],
    pub token_probs: Vec<f64>,
}

pub struct BatchOutput<'t> {
    pub losses: LossBundle<'t>,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug)]
pub struct FmsModel {
    cfg: ModelConfig,
    shape: DataShape,
    pub encoder: Encoder,
    pub mdsc: Mdsc,
    pub ufmr: Ufmr,
    pub mfar: Mfar,
    pub judgment: Judgment,
}

fn scalar(t: Tensor<'_>) -> Result<Tensor<'_>> {
    t.reshape(&[1])
}

impl FmsModel {
    /// Architecture plus freshly initialized parameters.
    pub fn new(cfg: ModelConfig, shape: DataShape, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let encoder = Encoder::new(
            &mut store,
            EncoderDims {
                patches: shape.patches(),
                patch_dim: shape.patch_dim,
                seq_len: shape.seq_len,
                vocab: shape.vocab,
                dim: d,
                heads: cfg.heads,
                pre_layers: cfg.pre_layers,
            },
            &mut rng,
        );
        let mdsc = Mdsc::new(&mut store, d, cfg.reduced_dim, &mut rng);
        let ufmr = Ufmr::new(&mut store, d, cfg.heads, &mut rng);
        let mfar = Mfar::new(&mut store, d, shape.patches(), shape.seq_len, &mut rng);
        let judgment = Judgment::new(&mut store, d, cfg.heads, &mut rng);
        let model = Self {
            cfg,
            shape,
            encoder,
            mdsc,
            ufmr,
            mfar,
            judgment,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn shape(&self) -> DataShape {
        self.shape
    }

    /// Selection floor `k = ⌈k_fraction·G²·L⌉`.
    pub fn k(&self) -> usize {
        let n = self.shape.patches() * self.shape.seq_len;
        ((self.cfg.k_fraction * n as f64).ceil() as usize).clamp(1, n)
    }

    fn mfar_config(&self) -> MfarConfig {
        MfarConfig {
            alpha3: self.cfg.alpha3,
            k: self.k(),
            double_residual: self.cfg.double_residual,
            masks: self.cfg.ablation.mfar,
        }
    }

    /// Full forward pass over a batch.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        batch: &[&Sample],
        mode: Mode,
    ) -> Result<BatchOutput<'t>> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let tape = p.get(self.mfar.g_tt).tape();
        let cfg = &self.cfg;
        let n = batch.len();
        let (g, np, nl) = (self.shape.grid, self.shape.patches(), self.shape.seq_len);
        let zero = || tape.constant(Array::scalar(0.0));
        let labels: Vec<&LabelSet> = batch.iter().map(|s| &s.labels).collect();
        let y_v: Vec<u8> = labels.iter().map(|l| l.y_v_bin).collect();
        let y_t: Vec<u8> = labels.iter().map(|l| l.y_t_bin).collect();
        let y_pat: Vec<u8> = labels
            .iter()
            .flat_map(|l| l.y_pat.iter().copied())
            .collect();
        let y_tok: Vec<u8> = labels
            .iter()
            .flat_map(|l| l.y_tok.iter().copied())
            .collect();
        let pat_targets: Vec<f64> = y_pat.iter().map(|&y| y as f64).collect();
        let tok_targets: Vec<f64> = y_tok.iter().map(|&y| y as f64).collect();

        let feats = batch
            .iter()
            .map(|s| {
                self.encoder
                    .forward(p, tape.constant(s.patches.clone()), &s.tokens)
            })
            .collect::<Result<Vec<ModalFeatures>>>()?;
        let stack = |f: &dyn Fn(&ModalFeatures<'t>) -> Tensor<'t>| {
            Tensor::concat_rows(&feats.iter().map(f).collect::<Vec<_>>())
        };
        let v_cls = stack(&|f| f.v_cls)?;
        let t_cls = stack(&|f| f.t_cls)?;
        let v_pat = stack(&|f| f.v_pat)?;
        let t_tok = stack(&|f| f.t_tok)?;

        // decision correction
        let (a1, a2) = if cfg.ablation.mdsc {
            (cfg.alpha1, cfg.alpha2)
        } else {
            (0.0, 0.0)
        };
        let md = self.mdsc.forward(p, v_cls, t_cls)?;
        let md_loss = self.mdsc.losses(&md, &y_v, &y_t, a1, a2, cfg.tau)?;
        let image_probs = md.image_probs();
        let text_probs = md.text_probs();

        // forgery mining
        let g_v = Tensor::concat_rows(
            &feats
                .iter()
                .zip(&labels)
                .map(|(f, l)| self.ufmr.aggregate_image(p, f.v_pat, &l.y_pat))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let g_t = Tensor::concat_rows(
            &feats
                .iter()
                .zip(&labels)
                .map(|(f, l)| self.ufmr.aggregate_text(p, f.t_tok, &l.y_tok))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let (f_v, f_t, s_v, s_t) = if cfg.ablation.ufmr {
            let coef_v: Vec<f64> = labels
                .iter()
                .flat_map(|l| band_coefficients(&band_patches(l.bbox.as_ref(), g)))
                .map(|c| c / n as f64)
                .collect();
            let coef_t: Vec<f64> = labels
                .iter()
                .flat_map(|l| balanced_coefficients(&l.y_tok))
                .map(|c| c / n as f64)
                .collect();
            let f_v = coefficient_bce(
                self.ufmr.patch_head.forward(p, v_pat)?,
                &pat_targets,
                &coef_v,
            )?;
            let f_t = coefficient_bce(
                self.ufmr.token_head.forward(p, t_tok)?,
                &tok_targets,
                &coef_t,
            )?;
            let lv: Vec<usize> = y_v.iter().map(|&y| y as usize).collect();
            let lt: Vec<usize> = y_t.iter().map(|&y| y as usize).collect();
            let s_v = optional(ufmr::scl_loss(g_v, &lv, cfg.tau, cfg.lambda))?.unwrap_or_else(zero);
            let s_t = optional(ufmr::scl_loss(g_t, &lt, cfg.tau, cfg.lambda))?.unwrap_or_else(zero);
            (f_v, f_t, s_v, s_t)
        } else {
            (zero(), zero(), zero(), zero())
        };
        let fake_v: Vec<usize> = (0..n).filter(|&i| y_v[i] == 1).collect();
        let fake_t: Vec<usize> = (0..n).filter(|&i| y_t[i] == 1).collect();
        let m_v = if fake_v.is_empty() {
            None
        } else {
            let types: Vec<u8> = fake_v
                .iter()
                .map(|&i| labels[i].y_v_m.unwrap_or(0))
                .collect();
            ufmr::manip_type_loss(
                &self.ufmr.image_type,
                p,
                g_v.select_rows(&fake_v)?,
                &types,
                cfg.tau,
                cfg.lambda,
            )?
        }
        .unwrap_or_else(zero);
        let m_t = if fake_t.is_empty() {
            None
        } else {
            let types: Vec<u8> = fake_t
                .iter()
                .map(|&i| labels[i].y_t_m.unwrap_or(0))
                .collect();
            ufmr::manip_type_loss(
                &self.ufmr.text_type,
                p,
                g_t.select_rows(&fake_t)?,
                &types,
                cfg.tau,
                cfg.lambda,
            )?
        }
        .unwrap_or_else(zero);

        // alignment reasoning
        let mcfg = self.mfar_config();
        let pairs = feats
            .iter()
            .map(|f| self.mfar.forward_pair(p, f, &mcfg))
            .collect::<Result<Vec<_>>>()?;
        let mut ci_parts = None;
        if cfg.ablation.mfar {
            let mut mean_tt = vec![0.0; np * nl];
            let mut mean_ff = vec![0.0; np * nl];
            for l in &labels {
                let (tt, ff) = region_targets(&l.y_pat, &l.y_tok);
                for k in 0..np * nl {
                    mean_tt[k] += tt[k];
                    mean_ff[k] += ff[k];
                }
            }
            for x in mean_tt.iter_mut().chain(mean_ff.iter_mut()) {
                *x /= n as f64;
            }
            let (l_tt, l_ff) = self.mfar.mask_losses(p, &mean_tt, &mean_ff)?;
            let v_bar = Tensor::concat_rows(&pairs.iter().map(|m| m.v_bar).collect::<Vec<_>>())?;
            let t_bar = Tensor::concat_rows(&pairs.iter().map(|m| m.t_bar).collect::<Vec<_>>())?;
            let cv = balanced_coefficients(&y_pat);
            let ct = balanced_coefficients(&y_tok);
            let ai_v = coefficient_bce(self.mfar.patch_head.forward(p, v_bar)?, &pat_targets, &cv)?;
            let ni_v = coefficient_bce(self.mfar.patch_head.forward(p, v_pat)?, &pat_targets, &cv)?;
            let ai_t = coefficient_bce(self.mfar.token_head.forward(p, t_bar)?, &tok_targets, &ct)?;
            let ni_t = coefficient_bce(self.mfar.token_head.forward(p, t_tok)?, &tok_targets, &ct)?;
            let ic_v = interaction_constraint(ai_v, ni_v, cfg.eta)?;
            let ic_t = interaction_constraint(ai_t, ni_t, cfg.eta)?;
            ci_parts = Some([l_tt, l_ff, ic_v, ic_t, ai_v, ni_v, ai_t, ni_t]);
        }

        // judgment
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let (image_fake, text_fake) = match mode {
                Mode::Train => (y_v[i] == 1, y_t[i] == 1),
                Mode::Infer => (image_probs[i] > 0.5, text_probs[i] > 0.5),
            };
            let inputs = JudgmentInputs {
                v_cls: feats[i].v_cls,
                t_cls: feats[i].t_cls,
                v_pat: feats[i].v_pat,
                t_tok: feats[i].t_tok,
                v_tilde: pairs[i].v_tilde,
                t_tilde: pairs[i].t_tilde,
                image_fake,
                text_fake,
            };
            outs.push(self.judgment.forward_pair(p, &inputs)?);
        }
        let image_mlc = Tensor::concat_rows(&outs.iter().map(|o| o.image_mlc).collect::<Vec<_>>())?;
        let text_mlc = Tensor::concat_rows(&outs.iter().map(|o| o.text_mlc).collect::<Vec<_>>())?;
        let mv_targets: Vec<f64> = labels
            .iter()
            .flat_map(|l| [l.y_multi[0] as f64, l.y_multi[1] as f64])
            .collect();
        let mt_targets: Vec<f64> = labels
            .iter()
            .flat_map(|l| [l.y_multi[2] as f64, l.y_multi[3] as f64])
            .collect();
        let mlc_v = image_mlc.bce_with_logits(&mv_targets)?;
        let mlc_t = text_mlc.bce_with_logits(&mt_targets)?;
        let mlc_star = mlc_v.add(mlc_t)?.add(m_v)?.add(m_t)?;

        let bbox = if fake_v.is_empty() {
            zero()
        } else {
            let pred =
                Tensor::concat_rows(&fake_v.iter().map(|&i| outs[i].bbox).collect::<Vec<_>>())?;
            let gts: Vec<[f64; 4]> = fake_v
                .iter()
                .map(|&i| {
                    let b = labels[i].bbox.expect("fake image has a box").0;
                    corners_to_cxcywh(b.map(|v| v / g as f64))
                })
                .collect();
            scalar(bbox_loss(pred, &gts)?)?
        };
        let token_logits =
            Tensor::concat_rows(&outs.iter().map(|o| o.token_logits).collect::<Vec<_>>())?;
        let token = token_logits.bce_with_logits(&tok_targets)?;

        let fs = f_v.add(f_t)?;
        let ss = s_v.add(s_t)?;
        let ci = match &ci_parts {
            Some([tt, ff, icv, ict, ..]) => tt.add(*ff)?.add(*icv)?.add(*ict)?,
            None => zero(),
        };
        let bic_star = scalar(md_loss.total)?;
        let w = &cfg.weights;
        let terms = [
            ("fs", fs, w.fs),
            ("ss", ss, w.ss),
            ("ci", ci, w.ci),
            ("bic_star", bic_star, w.bic),
            ("mlc_star", mlc_star, w.mlc),
            ("bbox", bbox, w.bbox),
            ("token", token, w.token),
        ];
        let mut total = zero();
        for (name, t, weight) in terms {
            if !t.item().is_finite() {
                return Err(Error::NonFinite(format!("loss term {name}")));
            }
            total = total.add(t.scale(weight))?;
        }

        let v = |t: Tensor<'_>| t.item();
        let ci_v = |k: usize| ci_parts.as_ref().map_or(0.0, |c| c[k].item());
        let values = LossValues {
            total: v(total),
            bic_star: v(bic_star),
            bic: v(md_loss.bic),
            uni_v: v(md_loss.uni_v),
            uni_t: v(md_loss.uni_t),
            mmc: md_loss.mmc.map_or(0.0, v),
            fs: v(fs),
            f_v: v(f_v),
            f_t: v(f_t),
            ss: v(ss),
            s_v: v(s_v),
            s_t: v(s_t),
            ci: v(ci),
            tt: ci_v(0),
            ff: ci_v(1),
            ic_v: ci_v(2),
            ic_t: ci_v(3),
            ai_v: ci_v(4),
            ni_v: ci_v(5),
            ai_t: ci_v(6),
            ni_t: ci_v(7),
            mlc_star: v(mlc_star),
            mlc_v: v(mlc_v),
            mlc_t: v(mlc_t),
            m_v: v(m_v),
            m_t: v(m_t),
            bbox: v(bbox),
            token: v(token),
        };

        let pair_logits = md.pair_logits.to_array();
        let predictions = (0..n)
            .map(|i| {
                let o = &outs[i];
                let mv = o.image_mlc.value();
                let mt = o.text_mlc.value();
                let b = o.bbox.value();
                let cxcywh = [
                    b.data()[0],
                    b.data()[1],
                    b.data()[2].max(1e-9),
                    b.data()[3].max(1e-9),
                ];
                Prediction {
                    pair_prob: sigmoid(pair_logits.data()[i]),
                    image_prob: image_probs[i],
                    text_prob: text_probs[i],
                    multi: [
                        sigmoid(mv.data()[0]),
                        sigmoid(mv.data()[1]),
                        sigmoid(mt.data()[0]),
                        sigmoid(mt.data()[1]),
                    ],
                    bbox: cxcywh_to_corners(cxcywh).map(|c| c * g as f64),
                    token_probs: o
                        .token_logits
                        .value()
                        .data()
                        .iter()
                        .map(|&z| sigmoid(z))
                        .collect(),
                }
            })
            .collect();
        Ok(BatchOutput {
            losses: LossBundle {
                bic_star,
                fs,
                ss,
                ci,
                mlc_star,
                bbox,
                token,
                total,
                values,
            },
            predictions,
        })
    }

    /// Forward on a fresh tape and return predictions and loss values only.
    pub fn predict(
        &self,
        store: &ParamStore,
        batch: &[&Sample],
        mode: Mode,
    ) -> Result<(Vec<Prediction>, LossValues)> {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = self.forward(&p, batch, mode)?;
        Ok((out.predictions, out.losses.values))
    }
}

fn optional<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(t) => Ok(Some(t)),
        Err(Error::EmptyTerm(what)) => {
            log::debug!("skipping {what}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Score predictions against labels. Image grounding covers fake images only
/// unless `iou_include_genuine`, in which case genuine images count as IoU 0.
pub fn evaluate_predictions(
    preds: &[Prediction],
    labels: &[&LabelSet],
    iou_include_genuine: bool,
) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "evaluate_predictions",
            &[preds.len()],
            &[labels.len()],
        ));
    }
    let pair_scores: Vec<f64> = preds.iter().map(|p| p.pair_prob).collect();
    let pair_labels: Vec<u8> = labels.iter().map(|l| l.pair_fake() as u8).collect();
    let multi_p: Vec<Vec<f64>> = preds.iter().map(|p| p.multi.to_vec()).collect();
    let multi_y: Vec<Vec<u8>> = labels.iter().map(|l| l.y_multi.to_vec()).collect();
    let ml = metrics::multilabel_metrics(&multi_p, &multi_y, 0.5)?;

    let (mut boxes, mut gts) = (Vec::new(), Vec::new());
    let mut genuine = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        match &l.bbox {
            Some(b) => {
                boxes.push(p.bbox);
                gts.push(b.0);
            }
            None => genuine += 1,
        }
    }
    let mut gr = metrics::grounding_image(&boxes, &gts)?;
    if iou_include_genuine && genuine > 0 {
        let scale = boxes.len() as f64 / (boxes.len() + genuine) as f64;
        gr.iou_mean *= scale;
        gr.iou50 *= scale;
        gr.iou75 *= scale;
    }
    let tok_pred: Vec<bool> = preds
        .iter()
        .flat_map(|p| p.token_probs.iter().map(|&q| q >= 0.5))
        .collect();
    let tok_true: Vec<u8> = labels
        .iter()
        .flat_map(|l| l.y_tok.iter().copied())
        .collect();
    let (precision, recall, f1) = metrics::token_prf(&tok_pred, &tok_true)?;
    Ok(MetricsReport {
        auc: metrics::roc_auc(&pair_scores, &pair_labels)?,
        eer: metrics::eer(&pair_scores, &pair_labels)?,
        acc: metrics::accuracy(&pair_scores, &pair_labels, 0.5)?,
        map: ml.map,
        cf1: ml.cf1,
        of1: ml.of1,
        iou_mean: gr.iou_mean,
        iou50: gr.iou50,
        iou75: gr.iou75,
        precision,
        recall,
        f1,
    })
}
