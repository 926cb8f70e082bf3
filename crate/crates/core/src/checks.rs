//! Central-difference gradient suite: every differentiable primitive plus the
//! composite objective terms of a small randomly initialized model.
//!
//! Stop-gradient points are replayed as constants during the finite-difference
//! evaluations, so both sides differentiate the same function.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{generate_dataset, DatasetConfig, Sample};
use crate::error::{Error, Result};
use crate::judgment::{bbox_loss, cull};
use crate::mdsc::{mdsc_total, mmc_loss, unimodal_loss, Modality, PairClass};
use crate::mfar::{build_masks, interaction_constraint, rescale, soft_interaction};
use crate::model::{DataShape, FmsModel, LossTerm, Mode, ModelConfig};
use crate::numeric::{
    cosine_matrix, cosine_similarity, multi_head_attention, relative_error, Array, Tape, Tensor,
    FD_STEP, FD_TOLERANCE,
};
use crate::ufmr::{coefficient_bce, scl_loss};

/// Random points per check.
pub const POINTS: usize = 10;

pub const MODULES: [&str; 6] = ["numeric", "mdsc", "ufmr", "mfar", "judgment", "total"];

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: String,
    pub points: usize,
    /// worst relative error over all points
    pub max_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_error <= FD_TOLERANCE
    }
}

type Build = Box<dyn for<'t> Fn(&[Tensor<'t>]) -> Result<Tensor<'t>>>;

struct Case {
    module: &'static str,
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Build,
}

fn case<F>(module: &'static str, name: &'static str, shapes: &[&[usize]], build: F) -> Case
where
    F: for<'t> Fn(&[Tensor<'t>]) -> Result<Tensor<'t>> + 'static,
{
    Case {
        module,
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

fn fixed(shape: &[usize], seed: u64) -> Array {
    Array::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Scalar `Σ w ⊙ x` with fixed pseudo-random `w`, giving every output a generic cotangent.
fn project(x: Tensor<'_>) -> Result<Tensor<'_>> {
    let w = fixed(&x.shape(), 0x5eed ^ x.len() as u64);
    x.weighted_sum(w.data())
}

fn unit_targets(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random::<f64>()).collect()
}

fn primitive_cases() -> Vec<Case> {
    let n = "numeric";
    let t12 = unit_targets(12, 1);
    let t12b = t12.clone();
    // third row keeps nothing, exercising the uniform fallback
    let keep: Vec<bool> = (0..12).map(|i| i < 8 && i % 3 != 1).collect();
    let keep_b = keep.clone();
    let w12 = unit_targets(12, 2);
    let mask = Array::matrix(3, 5, {
        let mut m = vec![0.0; 15];
        m[1] = f64::NEG_INFINITY;
        m[3] = f64::NEG_INFINITY;
        for v in &mut m[10..15] {
            *v = f64::NEG_INFINITY;
        }
        m
    })
    .expect("mask shape");
    vec![
        case(n, "neg", &[&[3, 4]], |x| project(x[0].neg())),
        case(n, "relu", &[&[3, 4]], |x| project(x[0].relu())),
        case(n, "sigmoid", &[&[3, 4]], |x| project(x[0].sigmoid())),
        case(n, "tanh", &[&[3, 4]], |x| project(x[0].tanh())),
        case(n, "gelu", &[&[3, 4]], |x| project(x[0].gelu())),
        case(n, "exp", &[&[3, 4]], |x| project(x[0].exp())),
        case(n, "log", &[&[3, 4]], |x| {
            project(x[0].mul(x[0])?.add_scalar(0.5).log())
        }),
        case(n, "abs", &[&[3, 4]], |x| project(x[0].abs())),
        case(n, "scale", &[&[3, 4]], |x| project(x[0].scale(-1.7))),
        case(n, "add_scalar", &[&[3, 4]], |x| {
            project(x[0].add_scalar(0.3).mul(x[0])?)
        }),
        case(n, "clamp", &[&[3, 4]], |x| project(x[0].clamp(-0.5, 0.8))),
        case(n, "add", &[&[3, 4], &[3, 4]], |x| {
            project(x[0].add(x[1])?.mul(x[0])?)
        }),
        case(n, "sub", &[&[3, 4], &[3, 4]], |x| {
            project(x[0].sub(x[1])?.mul(x[1])?)
        }),
        case(n, "mul", &[&[3, 4], &[3, 4]], |x| project(x[0].mul(x[1])?)),
        case(n, "div", &[&[3, 4], &[3, 4]], |x| {
            project(x[0].div(x[1].mul(x[1])?.add_scalar(0.5))?)
        }),
        case(n, "minimum", &[&[3, 4], &[3, 4]], |x| {
            project(x[0].minimum(x[1])?)
        }),
        case(n, "maximum", &[&[3, 4], &[3, 4]], |x| {
            project(x[0].maximum(x[1])?)
        }),
        case(n, "broadcast_row", &[&[3, 4], &[1, 4]], |x| {
            project(x[0].mul(x[1])?.add(x[1])?)
        }),
        case(n, "broadcast_scalar", &[&[3, 4], &[1]], |x| {
            project(x[0].div(x[1].exp())?.sub(x[1])?)
        }),
        case(n, "matmul", &[&[3, 4], &[4, 2]], |x| {
            project(x[0].matmul(x[1])?)
        }),
        case(n, "matmul_t", &[&[3, 4], &[5, 4]], |x| {
            project(x[0].matmul_t(x[1])?)
        }),
        case(n, "transpose", &[&[3, 4]], |x| {
            project(x[0].transpose()?.mul(x[0].transpose()?)?)
        }),
        case(n, "softmax_rows", &[&[3, 4]], |x| project(x[0].softmax(1)?)),
        case(n, "softmax_cols", &[&[3, 4]], |x| project(x[0].softmax(0)?)),
        case(n, "softmax_masked", &[&[3, 4]], move |x| {
            project(x[0].softmax_masked(1, &keep)?)
        }),
        case(n, "logsumexp_rows", &[&[3, 4]], move |x| {
            project(x[0].slice_rows(0, 2)?.logsumexp_rows(&keep_b[..8])?)
        }),
        case(n, "l2_normalize_rows", &[&[3, 4]], |x| {
            project(x[0].l2_normalize_rows()?)
        }),
        case(n, "cosine_similarity", &[&[3, 4], &[3, 4]], |x| {
            project(cosine_similarity(x[0], x[1])?)
        }),
        case(n, "cosine_matrix", &[&[3, 4], &[2, 4]], |x| {
            project(cosine_matrix(x[0], x[1])?)
        }),
        case(n, "sum", &[&[3, 4]], |x| Ok(x[0].mul(x[0])?.sum())),
        case(n, "mean", &[&[3, 4]], |x| Ok(x[0].sigmoid().mean())),
        case(n, "sum_rows", &[&[3, 4]], |x| {
            project(x[0].tanh().sum_rows())
        }),
        case(n, "weighted_sum", &[&[3, 4]], |x| {
            x[0].mul(x[0])?.weighted_sum(&[0.5; 12])
        }),
        case(n, "bce_with_logits", &[&[12, 1]], move |x| {
            x[0].bce_with_logits(&t12)
        }),
        case(n, "weighted_bce_with_logits", &[&[12, 1]], move |x| {
            x[0].weighted_bce_with_logits(&t12b, &w12)
        }),
        case(n, "slice_cols", &[&[3, 4]], |x| {
            project(x[0].slice_cols(1, 3)?.exp())
        }),
        case(n, "slice_rows", &[&[3, 4]], |x| {
            project(x[0].slice_rows(1, 3)?.exp())
        }),
        case(n, "row", &[&[3, 4]], |x| project(x[0].row(2)?.tanh())),
        case(n, "select_rows", &[&[3, 4]], |x| {
            project(x[0].select_rows(&[2, 0, 2, 1])?.tanh())
        }),
        case(n, "reshape", &[&[3, 4]], |x| {
            project(x[0].reshape(&[2, 6])?.softmax(1)?)
        }),
        case(n, "concat_rows", &[&[3, 4], &[2, 4]], |x| {
            project(Tensor::concat_rows(&[x[0], x[1]])?.softmax(0)?)
        }),
        case(n, "concat_cols", &[&[3, 4], &[3, 2]], |x| {
            project(Tensor::concat_cols(&[x[0], x[1]])?.softmax(1)?)
        }),
        case(n, "detach", &[&[3, 4]], |x| {
            project(x[0].mul(x[0].detach())?)
        }),
        case(
            n,
            "multi_head_attention",
            &[&[3, 4], &[5, 4], &[5, 4]],
            |x| project(multi_head_attention(x[0], x[1], x[2], 2, None)?),
        ),
        case(
            n,
            "multi_head_attention_masked",
            &[&[3, 4], &[5, 4], &[5, 4]],
            move |x| project(multi_head_attention(x[0], x[1], x[2], 2, Some(&mask))?),
        ),
    ]
}

fn module_cases() -> Vec<Case> {
    use PairClass::*;
    let partition = vec![
        Positive,
        SemiPositive {
            effective: Modality::Image,
        },
        Negative,
        SemiPositive {
            effective: Modality::Text,
        },
        Positive,
        Negative,
    ];
    let scl_labels = vec![0, 1, 0, 2, 1, 0, 3];
    let coef = unit_targets(6, 7);
    let coef_t = unit_targets(6, 8);
    let gt = vec![
        [0.4, 0.5, 0.3, 0.2],
        [0.6, 0.45, 0.5, 0.6],
        [0.3, 0.3, 0.2, 0.4],
    ];
    let s_max = {
        let mut a = fixed(&[3, 4], 11).map(|v| if v > 0.0 { 1.0 + v.abs() } else { 0.0 });
        a.data_mut()[0] = 1.2;
        a
    };
    let s_min = fixed(&[3, 4], 12).map(|v| if v < 0.0 { 1.0 + v.abs() / 2.0 } else { 0.0 });
    vec![
        case("mdsc", "unimodal_loss", &[&[6, 1]], |x| {
            unimodal_loss(x[0], &[1, 0, 0, 1, 1, 0])
        }),
        case("mdsc", "mmc_loss", &[&[6, 4], &[6, 4]], move |x| {
            mmc_loss(x[0], x[1], &partition, 0.07)
        }),
        case("mdsc", "mdsc_total", &[&[1], &[1], &[1], &[1]], |x| {
            mdsc_total(
                x[0].exp(),
                x[1].exp(),
                x[2].exp(),
                Some(x[3].exp()),
                0.5,
                0.25,
            )
        }),
        case("ufmr", "scl_loss", &[&[7, 4]], move |x| {
            scl_loss(x[0], &scl_labels, 0.07, 0.1)
        }),
        case("ufmr", "coefficient_bce", &[&[6, 1]], move |x| {
            coefficient_bce(x[0], &coef_t, &coef)
        }),
        case("mfar", "rescale", &[&[3, 4]], |x| {
            project(rescale(x[0].tanh()))
        }),
        case("mfar", "build_masks", &[&[3, 4], &[3, 4]], move |x| {
            let c = x[0].tape().constant(s_max.clone());
            let ic = x[0].tape().constant(s_min.clone());
            let (a, b) = build_masks(c, ic, x[0], x[1], 0.5)?;
            project(Tensor::concat_rows(&[a, b])?)
        }),
        case(
            "mfar",
            "soft_interaction",
            &[&[3, 4], &[5, 4], &[3, 5]],
            |x| project(soft_interaction(x[0], x[1], x[2].sigmoid())?),
        ),
        case("mfar", "interaction_constraint", &[&[1], &[1]], |x| {
            interaction_constraint(x[0].exp(), x[1].exp(), 1.0)
        }),
        case("judgment", "cull", &[&[3, 4], &[3, 4]], |x| {
            let a = cull(x[0], x[1], true, true);
            let b = cull(x[0], x[1], false, true);
            project(Tensor::concat_rows(&[a, b])?)
        }),
        case("judgment", "bbox_loss", &[&[3, 4]], move |x| {
            let raw = x[0].sigmoid();
            let centre = raw.slice_cols(0, 2)?.scale(0.5).add_scalar(0.25);
            let size = raw.slice_cols(2, 4)?.scale(0.4).add_scalar(0.1);
            bbox_loss(Tensor::concat_cols(&[centre, size])?, &gt)
        }),
    ]
}

fn run_case(c: &Case, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        let inputs: Vec<Array> = c
            .shapes
            .iter()
            .map(|s| Array::randn(s, 1.0, &mut rng))
            .collect();
        let tape = Tape::new();
        let ts: Vec<Tensor<'_>> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let loss = (c.build)(&ts)?;
        let frozen = tape.detached_values();
        let grads = tape.backward(loss)?;
        let eval = |xs: &[Array]| -> Result<f64> {
            let t = Tape::replaying(frozen.clone());
            let ts: Vec<Tensor<'_>> = xs.iter().map(|a| t.param(a.clone())).collect();
            Ok((c.build)(&ts)?.item())
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut probe = inputs.clone();
        for (k, t) in ts.iter().enumerate() {
            analytic.extend_from_slice(grads.get(*t).data());
            for i in 0..inputs[k].len() {
                let orig = probe[k].data()[i];
                probe[k].data_mut()[i] = orig + FD_STEP;
                let plus = eval(&probe)?;
                probe[k].data_mut()[i] = orig - FD_STEP;
                let minus = eval(&probe)?;
                probe[k].data_mut()[i] = orig;
                numeric.push((plus - minus) / (2.0 * FD_STEP));
            }
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(CheckOutcome {
        module: c.module,
        name: c.name.to_string(),
        points: POINTS,
        max_error: worst,
    })
}

fn term_module(term: LossTerm) -> &'static str {
    match term {
        LossTerm::BicStar => "mdsc",
        LossTerm::Fs | LossTerm::Ss => "ufmr",
        LossTerm::Ci => "mfar",
        LossTerm::MlcStar | LossTerm::Bbox | LossTerm::Token => "judgment",
        LossTerm::Total => "total",
    }
}

/// Small model and a batch holding two pairs of each class.
pub fn check_fixture() -> Result<(FmsModel, crate::nn::ParamStore, Vec<Sample>)> {
    let dc = DatasetConfig {
        num_samples: 64,
        grid: 2,
        seq_len: 4,
        patch_dim: 4,
        vocab: 16,
        topics: 2,
        box_min: 1.0,
        box_max: 2.0,
        seed: 5,
        ..Default::default()
    };
    let mc = ModelConfig {
        dim: 8,
        heads: 2,
        reduced_dim: 4,
        ..Default::default()
    };
    let pool = generate_dataset(&dc)?;
    let mut batch = Vec::new();
    for want in [(false, false), (true, false), (false, true), (true, true)] {
        let picked: Vec<Sample> = pool
            .iter()
            .filter(|s| (s.labels.image_fake(), s.labels.text_fake()) == want)
            .take(2)
            .cloned()
            .collect();
        if picked.len() < 2 {
            return Err(Error::invalid("fixture pool lacks a pair class"));
        }
        batch.extend(picked);
    }
    let (model, store) = FmsModel::new(mc, DataShape::from(&dc), 3)?;
    Ok((model, store, batch))
}

const NONZERO_COORDS: usize = 24;
const ANY_COORDS: usize = 8;

fn run_term(term: LossTerm, seed: u64) -> Result<CheckOutcome> {
    let (model, mut store, samples) = check_fixture()?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let base = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        for (v, b) in store.values_mut().iter_mut().zip(base.values()) {
            *v = b.clone();
            for x in v.data_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let loss = model.forward(&p, &batch, Mode::Train)?.losses.get(term);
        let frozen = tape.detached_values();
        let mut g = tape.backward(loss)?;
        let grads: Vec<f64> = p
            .grads(&mut g)
            .iter()
            .flat_map(|a| a.data().to_vec())
            .collect();
        drop(tape);

        let nonzero: Vec<usize> = (0..grads.len()).filter(|&i| grads[i] != 0.0).collect();
        let mut coords: Vec<usize> =
            sample(&mut rng, nonzero.len(), NONZERO_COORDS.min(nonzero.len()))
                .into_iter()
                .map(|i| nonzero[i])
                .collect();
        coords.extend(sample(&mut rng, grads.len(), ANY_COORDS));

        let offsets: Vec<usize> = store
            .values()
            .iter()
            .scan(0, |acc, a| {
                let o = *acc;
                *acc += a.len();
                Some(o)
            })
            .collect();
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let pi = offsets.partition_point(|&o| o <= c) - 1;
            let ei = c - offsets[pi];
            let mut eval = |delta: f64| -> Result<f64> {
                let orig = store.values()[pi].data()[ei];
                store.values_mut()[pi].data_mut()[ei] = orig + delta;
                let t = Tape::replaying(frozen.clone());
                let bound = store.bind(&t);
                let out = model
                    .forward(&bound, &batch, Mode::Train)
                    .map(|o| o.losses.get(term).item());
                store.values_mut()[pi].data_mut()[ei] = orig;
                out
            };
            let plus = eval(FD_STEP)?;
            let minus = eval(-FD_STEP)?;
            analytic.push(grads[c]);
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        if analytic.iter().all(|&a| a == 0.0) {
            return Err(Error::invalid(format!(
                "{} has no gradient at a random point",
                term.name()
            )));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(CheckOutcome {
        module: term_module(term),
        name: format!("loss:{}", term.name()),
        points: POINTS,
        max_error: worst,
    })
}

/// Run every check, or only those of one module (see [`MODULES`]).
pub fn run(module: Option<&str>) -> Result<Vec<CheckOutcome>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!(
                "unknown module {m:?}; expected one of {MODULES:?}"
            )));
        }
    }
    let keep = |m: &str| module.is_none_or(|want| want == m);
    let mut out = Vec::new();
    for (i, c) in primitive_cases()
        .iter()
        .chain(module_cases().iter())
        .enumerate()
    {
        if keep(c.module) {
            out.push(run_case(c, 100 + i as u64)?);
        }
    }
    for (i, term) in LossTerm::ALL.into_iter().enumerate() {
        if keep(term_module(term)) {
            out.push(run_term(term, 500 + i as u64)?);
        }
    }
    Ok(out)
}
