//! Unimodal forgery mining reinforcement: overlap banding, grouped
//! feature-level supervision, masked global aggregation and the supervised
//! contrastive sample-level and manipulation-type losses.

use rand::Rng;

use crate::data::{patch_intersection_area, BBox};
use crate::error::{Error, Result};
use crate::nn::{Attention, Bound, Mlp, ParamId, ParamStore};
use crate::numeric::{cosine_matrix, Array, Tensor};

/// Overlap band of a patch from its covered fraction `I/P`: quartiles,
/// half-open below with the top band closed.
pub fn band(ratio: f64) -> u8 {
    if ratio < 0.25 {
        0
    } else if ratio < 0.5 {
        1
    } else if ratio < 0.75 {
        2
    } else {
        3
    }
}

/// Bands for every cell of a `grid`×`grid` raster; genuine images are all 0.
pub fn band_patches(bbox: Option<&BBox>, grid: usize) -> Vec<u8> {
    (0..grid * grid)
        .map(|i| {
            bbox.map_or(0, |b| {
                band(patch_intersection_area(b, &BBox::cell(i, grid)))
            })
        })
        .collect()
}

pub const GROUPS: [(u8, u8); 4] = [(0, 2), (0, 3), (1, 2), (1, 3)];

/// Per-patch coefficients `c_i` with `Σ c_i·BCE_i` equal to the image's
/// feature-level loss. Each group weighs its two categories inversely to
/// their counts (per-item weights averaging 1), groups with an empty side
/// contribute 0, and the four groups are averaged.
pub fn band_coefficients(bands: &[u8]) -> Vec<f64> {
    let mut counts = [0usize; 4];
    for &b in bands {
        counts[b as usize] += 1;
    }
    let mut coef = vec![0.0; bands.len()];
    for (a, b) in GROUPS {
        let (na, nb) = (counts[a as usize], counts[b as usize]);
        if na == 0 || nb == 0 {
            continue;
        }
        for (c, &g) in coef.iter_mut().zip(bands) {
            if g == a {
                *c += 1.0 / (2.0 * na as f64) / GROUPS.len() as f64;
            } else if g == b {
                *c += 1.0 / (2.0 * nb as f64) / GROUPS.len() as f64;
            }
        }
    }
    coef
}

/// Per-item coefficients for a binary-flag sequence: inverse-frequency
/// weighted mean when both classes occur, plain mean otherwise.
pub fn balanced_coefficients(flags: &[u8]) -> Vec<f64> {
    let n = flags.len();
    let fake = flags.iter().filter(|&&f| f == 1).count();
    let real = n - fake;
    flags
        .iter()
        .map(|&f| {
            if fake == 0 || real == 0 {
                1.0 / n as f64
            } else if f == 1 {
                1.0 / (2.0 * fake as f64)
            } else {
                1.0 / (2.0 * real as f64)
            }
        })
        .collect()
}

/// `Σ_i c_i·BCE(z_i, y_i)` over stacked logits.
pub fn coefficient_bce<'t>(
    logits: Tensor<'t>,
    targets: &[f64],
    coef: &[f64],
) -> Result<Tensor<'t>> {
    let n = logits.len() as f64;
    let w: Vec<f64> = coef.iter().map(|c| c * n).collect();
    logits.weighted_bce_with_logits(targets, &w)
}

/// Supervised contrastive loss over `[n, d]` embeddings with cosine
/// similarities `℘ = sim/τ`:
/// mean over anchors with positives of `−(1/|P_i|) Σ_{P_i} log softmax_{k≠i}(℘_i)_j`,
/// plus `λ` times the mean over anchors with negatives of `(1/|N_i|) Σ_{N_i} ℘_ij`.
pub fn scl_loss<'t>(
    emb: Tensor<'t>,
    labels: &[usize],
    tau: f64,
    lambda: f64,
) -> Result<Tensor<'t>> {
    let n = emb.rows();
    if labels.len() != n {
        return Err(Error::shape("scl_loss", &emb.shape(), &[labels.len()]));
    }
    if n < 2 {
        return Err(Error::EmptyTerm(
            "supervised contrastive loss (fewer than 2 items)",
        ));
    }
    let sim = cosine_matrix(emb, emb)?.scale(1.0 / tau);
    let pos = |i: usize, j: usize| i != j && labels[i] == labels[j];
    let neg = |i: usize, j: usize| labels[i] != labels[j];
    let anchors: Vec<usize> = (0..n).filter(|&i| (0..n).any(|j| pos(i, j))).collect();
    let neg_anchors: Vec<usize> = (0..n).filter(|&i| (0..n).any(|j| neg(i, j))).collect();

    let mut pair_w = vec![0.0; n * n];
    let mut lse_w = vec![0.0; n];
    for &i in &anchors {
        let np = (0..n).filter(|&j| pos(i, j)).count() as f64;
        lse_w[i] = 1.0 / anchors.len() as f64;
        for j in (0..n).filter(|&j| pos(i, j)) {
            pair_w[i * n + j] -= 1.0 / (anchors.len() as f64 * np);
        }
    }
    for &i in &neg_anchors {
        let nn = (0..n).filter(|&j| neg(i, j)).count() as f64;
        for j in (0..n).filter(|&j| neg(i, j)) {
            pair_w[i * n + j] += lambda / (neg_anchors.len() as f64 * nn);
        }
    }
    if anchors.is_empty() {
        log::debug!("single-class contrastive batch: repulsion term only");
    }
    let mut loss = sim.weighted_sum(&pair_w)?;
    if !anchors.is_empty() {
        let off_diag: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
        let lse = sim.logsumexp_rows(&off_diag)?;
        loss = loss.add(lse.weighted_sum(&lse_w)?)?;
    }
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct Ufmr {
    pub patch_head: Mlp,
    pub token_head: Mlp,
    pub image_query: ParamId,
    pub text_query: ParamId,
    pub image_agg: Attention,
    pub text_agg: Attention,
    pub image_type: Mlp,
    pub text_type: Mlp,
}

impl Ufmr {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            patch_head: Mlp::new(store, "ufmr.patch_head", (dim, dim, 1), rng),
            token_head: Mlp::new(store, "ufmr.token_head", (dim, dim, 1), rng),
            image_query: store.add("ufmr.image_query", Array::randn(&[1, dim], 1.0, rng)),
            text_query: store.add("ufmr.text_query", Array::randn(&[1, dim], 1.0, rng)),
            image_agg: Attention::new(store, "ufmr.image_agg", dim, heads, rng),
            text_agg: Attention::new(store, "ufmr.text_agg", dim, heads, rng),
            image_type: Mlp::new(store, "ufmr.image_type", (dim, dim, 1), rng),
            text_type: Mlp::new(store, "ufmr.text_type", (dim, dim, 1), rng),
        }
    }

    /// Global image embedding: `G_r` over all patches for a genuine image,
    /// `G_f` over forged patches only for a fake one.
    pub fn aggregate_image<'t>(
        &self,
        p: &Bound<'t>,
        v_pat: Tensor<'t>,
        y_pat: &[u8],
    ) -> Result<Tensor<'t>> {
        aggregate(&self.image_agg, p, p.get(self.image_query), v_pat, y_pat)
    }

    pub fn aggregate_text<'t>(
        &self,
        p: &Bound<'t>,
        t_tok: Tensor<'t>,
        y_tok: &[u8],
    ) -> Result<Tensor<'t>> {
        aggregate(&self.text_agg, p, p.get(self.text_query), t_tok, y_tok)
    }
}

/// `MultiAtt(g, X, X)`; real rows are masked out when any row is fake.
pub fn aggregate<'t>(
    att: &Attention,
    p: &Bound<'t>,
    query: Tensor<'t>,
    rows: Tensor<'t>,
    fake: &[u8],
) -> Result<Tensor<'t>> {
    if fake.len() != rows.rows() {
        return Err(Error::shape("aggregate", &rows.shape(), &[fake.len()]));
    }
    if fake.contains(&1) {
        let mask: Vec<f64> = fake
            .iter()
            .map(|&f| if f == 1 { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        att.forward(p, query, rows, rows, Some(&Array::row(&mask)))
    } else {
        att.forward(p, query, rows, rows, None)
    }
}

/// Manipulation-type refinement over the fake subset: BCE of the type head
/// plus a contrastive term keyed by type. Returns `None` with no fake items;
/// the contrastive part is dropped below two items.
pub fn manip_type_loss<'t>(
    head: &Mlp,
    p: &Bound<'t>,
    g_fake: Tensor<'t>,
    types: &[u8],
    tau: f64,
    lambda: f64,
) -> Result<Option<Tensor<'t>>> {
    if types.is_empty() {
        return Ok(None);
    }
    let targets: Vec<f64> = types.iter().map(|&t| t as f64).collect();
    let m1 = head.forward(p, g_fake)?.bce_with_logits(&targets)?;
    if types.len() < 2 {
        return Ok(Some(m1));
    }
    let labels: Vec<usize> = types.iter().map(|&t| t as usize).collect();
    Ok(Some(m1.add(scl_loss(g_fake, &labels, tau, lambda)?)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bce(z: f64, y: f64) -> f64 {
        z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
    }

    #[test]
    fn band_examples() {
        assert_eq!(band(0.0), 0);
        assert_eq!(band(1.0), 3);
        assert_eq!(band(0.6), 2);
        assert_eq!(band(0.25), 1);
        assert_eq!(band(0.75), 3);
        assert!(band_patches(None, 3).iter().all(|&b| b == 0));
    }

    #[test]
    fn genuine_image_has_zero_feature_loss() {
        assert!(band_coefficients(&[0; 16]).iter().all(|&c| c == 0.0));
    }

    #[test]
    fn balanced_group_is_plain_mean() {
        // bands {0,0,2,2}: only group (0,2) is active
        let c = band_coefficients(&[0, 2, 0, 2]);
        assert!(c.iter().all(|&v| (v - 0.25 / 4.0).abs() < 1e-15));
    }

    #[test]
    fn group_03_hand_calculation() {
        let bands = [0, 0, 0, 3];
        let z = [0.3, -1.2, 0.8, 2.0];
        let y = [0.0, 0.0, 1.0, 1.0];
        // n = 4: w_0 = 4/(2·3), w_3 = 4/(2·1); one active group of four
        let w = [2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 2.0];
        let expected: f64 = (0..4).map(|i| w[i] * bce(z[i], y[i])).sum::<f64>() / 4.0 / 4.0;
        let tape = Tape::new();
        let logits = tape.constant(Array::matrix(4, 1, z.to_vec()).unwrap());
        let got = coefficient_bce(logits, &y, &band_coefficients(&bands)).unwrap();
        assert!((got.item() - expected).abs() < 1e-14);
    }

    #[test]
    fn scl_closed_forms() {
        let tape = Tape::new();
        let e = tape.constant(Array::matrix(2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap());
        assert!(scl_loss(e, &[0, 0], 0.07, 0.1).unwrap().item().abs() < 1e-12);
        let e = tape.constant(Array::matrix(2, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap());
        let l = scl_loss(e, &[0, 1], 0.07, 0.1).unwrap();
        assert!((l.item() - 0.1 * 0.6 / 0.07).abs() < 1e-12);
        assert!(matches!(
            scl_loss(e.slice_rows(0, 1).unwrap(), &[0], 0.07, 0.1),
            Err(Error::EmptyTerm(_))
        ));
    }

    #[test]
    fn scl_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array::randn(&[5, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let a = scl_loss(tape.constant(x.clone()), &[0, 1, 0, 1, 1], 0.07, 0.1).unwrap();
        let b = scl_loss(
            tape.constant(x.map(|v| 3.7 * v)),
            &[0, 1, 0, 1, 1],
            0.07,
            0.1,
        )
        .unwrap();
        assert!((a.item() - b.item()).abs() < 1e-9);
    }

    #[test]
    fn single_fake_patch_returns_its_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let u = Ufmr::new(&mut store, 4, 2, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let rows = tape.constant(Array::randn(&[3, 4], 1.0, &mut rng));
        let g = u.aggregate_image(&p, rows, &[0, 1, 0]).unwrap();
        let only = u
            .image_agg
            .output
            .forward(
                &p,
                u.image_agg.value.forward(&p, rows.row(1).unwrap()).unwrap(),
            )
            .unwrap();
        assert!(g.value().max_abs_diff(&only.value()) < 1e-12);
        // a genuine image is aggregated over every row, identical to the unmasked path
        let real = u.aggregate_image(&p, rows, &[0, 0, 0]).unwrap();
        let direct = u
            .image_agg
            .forward(&p, p.get(u.image_query), rows, rows, None)
            .unwrap();
        assert_eq!(real.value().data(), direct.value().data());
    }

    #[test]
    fn manip_type_same_type_has_no_contrastive_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let u = Ufmr::new(&mut store, 4, 2, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let g = tape.constant(Array::randn(&[2, 4], 1.0, &mut rng));
        let total = manip_type_loss(&u.image_type, &p, g, &[1, 1], 0.07, 0.1)
            .unwrap()
            .unwrap();
        let m1 = u
            .image_type
            .forward(&p, g)
            .unwrap()
            .bce_with_logits(&[1.0; 2])
            .unwrap();
        assert!((total.item() - m1.item()).abs() < 1e-12);
        let one = g.slice_rows(0, 1).unwrap();
        assert!(manip_type_loss(&u.image_type, &p, one, &[1], 0.07, 0.1)
            .unwrap()
            .is_some());
        assert!(manip_type_loss(&u.image_type, &p, g, &[], 0.07, 0.1)
            .unwrap()
            .is_none());
    }
}
