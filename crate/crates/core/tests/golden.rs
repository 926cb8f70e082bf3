//! Regression pins for seeded forward passes. Each output is reduced to a
//! short digest compared within 1e-12. Set `FMS_RECORD_GOLDEN=1` to print
//! fresh digests instead of checking them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fms_core::encoder::{Encoder, EncoderDims};
use fms_core::judgment::Judgment;
use fms_core::nn::{Attention, ParamStore};
use fms_core::numeric::{Array, Tape};
use fms_core::ufmr::Ufmr;

const TOL: f64 = 1e-12;

fn digest(a: &Array) -> [f64; 5] {
    let d = a.data();
    let n = d.len() as f64;
    [
        d.iter().sum(),
        d.iter().map(|v| v * v).sum(),
        d.iter()
            .enumerate()
            .map(|(i, v)| (i + 1) as f64 * v)
            .sum::<f64>()
            / n,
        d[0],
        d[d.len() - 1],
    ]
}

fn check(name: &str, got: &Array, want: [f64; 5]) {
    let g = digest(got);
    if std::env::var_os("FMS_RECORD_GOLDEN").is_some() {
        println!("{name}: {g:?}");
        return;
    }
    for (k, (a, b)) in g.iter().zip(want).enumerate() {
        assert!(
            (a - b).abs() <= TOL,
            "{name} digest[{k}]: {a:?} vs pinned {b:?}"
        );
    }
}

fn encoder(pre_layers: usize) -> (ParamStore, Encoder) {
    let dims = EncoderDims {
        patches: 4,
        patch_dim: 3,
        seq_len: 5,
        vocab: 7,
        dim: 8,
        heads: 2,
        pre_layers,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, dims, &mut rng);
    (store, enc)
}

fn grid() -> Array {
    Array::randn(&[4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(11))
}

const TOKENS: [usize; 5] = [6, 0, 3, 3, 1];

fn rows(n: usize, seed: u64) -> Array {
    Array::randn(&[n, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn image_embedding() {
    let (store, enc) = encoder(0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (cls, pat) = enc.embed_image(&p, tape.constant(grid())).unwrap();
    check(
        "image cls",
        &cls.to_array(),
        [
            -0.2971100345169464,
            0.7680170033417622,
            -0.628742794166002,
            0.08412190774993543,
            -0.7505489327445556,
        ],
    );
    check(
        "image patches",
        &pat.to_array(),
        [
            10.247106875972088,
            13.164637848562883,
            4.6798664452015135,
            0.9276688232787985,
            -0.08150460811246589,
        ],
    );
}

#[test]
fn text_embedding() {
    let (store, enc) = encoder(0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (cls, tok) = enc.embed_text(&p, &TOKENS).unwrap();
    check(
        "text cls",
        &cls.to_array(),
        [
            -1.1577113410338626,
            1.7161758026999836,
            -0.34432709097799286,
            -0.5386616505978962,
            0.23968867614728984,
        ],
    );
    check(
        "text tokens",
        &tok.to_array(),
        [
            13.039136266644793,
            28.69761456933444,
            6.449250245170906,
            0.3016751342316654,
            -0.41921419857283126,
        ],
    );
}

#[test]
fn pre_interaction() {
    let (store, enc) = encoder(1);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let f = enc.forward(&p, tape.constant(grid()), &TOKENS).unwrap();
    check(
        "pre v_cls",
        &f.v_cls.to_array(),
        [
            -0.707703439403049,
            2.497299315527111,
            -0.7618842778304666,
            0.5207270647422649,
            -0.4403127402672139,
        ],
    );
    check(
        "pre v_pat",
        &f.v_pat.to_array(),
        [
            6.9016357731973725,
            17.51245519714512,
            4.607288283912999,
            0.18258800866616867,
            -0.31888445475923366,
        ],
    );
    check(
        "pre t_cls",
        &f.t_cls.to_array(),
        [
            -0.6355783105150151,
            2.703051596862232,
            -0.31964147823483147,
            0.613013781378692,
            -0.47637144060820313,
        ],
    );
    check(
        "pre t_tok",
        &f.t_tok.to_array(),
        [
            1.2461863335027379,
            39.75342433468512,
            4.719956278798931,
            0.811210643097939,
            0.9406163960374625,
        ],
    );
}

#[test]
fn global_aggregation() {
    let mut store = ParamStore::new();
    let ufmr = Ufmr::new(&mut store, 8, 2, &mut ChaCha8Rng::seed_from_u64(12));
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(rows(4, 13));
    check(
        "aggregate real",
        &ufmr
            .aggregate_image(&p, x, &[0, 0, 0, 0])
            .unwrap()
            .to_array(),
        [
            0.8016130041631946,
            1.158230937413613,
            0.7888038297111947,
            0.1601431637532244,
            0.622267956018001,
        ],
    );
    check(
        "aggregate fake",
        &ufmr
            .aggregate_image(&p, x, &[0, 1, 1, 0])
            .unwrap()
            .to_array(),
        [
            0.7078562853072498,
            1.9962792274158505,
            0.9115859065969075,
            0.1591491055099913,
            0.8306778826449779,
        ],
    );
}

#[test]
fn guided_class_feature_and_grounding() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let att = Attention::new(&mut store, "att", 8, 2, &mut rng);
    let query = store.add("query", Array::randn(&[1, 8], 1.0, &mut rng));
    let tape = Tape::new();
    let p = store.bind(&tape);
    let cls = tape.constant(rows(1, 15));
    let feats = tape.constant(rows(5, 16));
    let guided = Judgment::guided_cls_feature(&att, &p, cls, feats).unwrap();
    check(
        "guided cls",
        &guided.to_array(),
        [
            -3.3355517558964953,
            10.402791177340767,
            -2.441917305395089,
            1.4037152278008165,
            -1.130518789964415,
        ],
    );
    let ground = Judgment::grounding_aggregate(&att, &p, p.get(query), cls, feats).unwrap();
    check(
        "grounding",
        &ground.to_array(),
        [
            2.4542514147140313,
            2.167987001599948,
            1.944125304802461,
            0.38203861813512363,
            0.6520218042022943,
        ],
    );
}
