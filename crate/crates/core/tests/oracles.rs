//! Each optimized routine against a direct, quadratic-time restatement of its
//! definition on many small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fms_core::mdsc::{mmc_loss, Modality, PairClass};
use fms_core::metrics::{auc_pair_count, eer, multilabel_metrics, roc_auc};
use fms_core::mfar::{build_selection, SelectMode};
use fms_core::numeric::{Array, Tape};
use fms_core::ufmr::scl_loss;

const INSTANCES: usize = 200;

fn report(name: &str, n: usize) {
    println!("oracle {name}: {n} instances");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn vectors(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-4 {
                break v;
            }
        })
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn to_array(rows: &[Vec<f64>]) -> Array {
    Array::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

/// Scores drawn from a coarse grid half the time, so ties are common.
fn scores(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let coarse = r.random_bool(0.5);
    (0..n)
        .map(|_| {
            if coarse {
                r.random_range(0..5) as f64 / 4.0
            } else {
                r.random::<f64>()
            }
        })
        .collect()
}

fn labels_with_both(r: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    loop {
        let l: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        if l.contains(&0) && l.contains(&1) {
            return l;
        }
    }
}

fn brute_scl(e: &[Vec<f64>], labels: &[usize], tau: f64, lambda: f64) -> f64 {
    let n = e.len();
    let p = |i: usize, j: usize| cos(&e[i], &e[j]) / tau;
    let (mut pos_sum, mut pos_anchors) = (0.0, 0);
    let (mut neg_sum, mut neg_anchors) = (0.0, 0);
    for i in 0..n {
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| p(i, k).exp()).sum();
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if !positives.is_empty() {
            let s: f64 = positives
                .iter()
                .map(|&j| (p(i, j).exp() / denom).ln())
                .sum();
            pos_sum += -s / positives.len() as f64;
            pos_anchors += 1;
        }
        let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        if !negatives.is_empty() {
            neg_sum += negatives.iter().map(|&j| p(i, j)).sum::<f64>() / negatives.len() as f64;
            neg_anchors += 1;
        }
    }
    let pos = if pos_anchors > 0 {
        pos_sum / pos_anchors as f64
    } else {
        0.0
    };
    let neg = if neg_anchors > 0 {
        neg_sum / neg_anchors as f64
    } else {
        0.0
    };
    pos + lambda * neg
}

#[test]
fn scl_matches_direct_formula() {
    let mut r = rng(1);
    for _ in 0..INSTANCES {
        let n = r.random_range(2..=8);
        let d = r.random_range(2..=4);
        let e = vectors(&mut r, n, d);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let tau = r.random_range(0.05..1.0);
        let lambda = r.random_range(0.0..1.0);
        let tape = Tape::new();
        let got = scl_loss(tape.constant(to_array(&e)), &labels, tau, lambda)
            .unwrap()
            .item();
        let want = brute_scl(&e, &labels, tau, lambda);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
    report("scl_loss", INSTANCES);
}

#[test]
fn mmc_matches_direct_formula() {
    let mut r = rng(2);
    let mut checked = 0;
    while checked < INSTANCES {
        let n = r.random_range(1..=8);
        let d = r.random_range(2..=4);
        let (rv, rt) = (vectors(&mut r, n, d), vectors(&mut r, n, d));
        let part: Vec<PairClass> = (0..n)
            .map(|_| match r.random_range(0..4) {
                0 => PairClass::Positive,
                1 => PairClass::SemiPositive {
                    effective: Modality::Image,
                },
                2 => PairClass::SemiPositive {
                    effective: Modality::Text,
                },
                _ => PairClass::Negative,
            })
            .collect();
        if part.iter().all(|c| *c == PairClass::Negative) {
            continue;
        }
        let tau = r.random_range(0.05..1.0);
        let s: Vec<f64> = (0..n).map(|i| cos(&rv[i], &rt[i]) / tau).collect();
        let all: f64 = s.iter().map(|v| v.exp()).sum();
        let kept: f64 = (0..n)
            .filter(|&i| part[i] != PairClass::Negative)
            .map(|i| s[i].exp())
            .sum();
        let want = -(kept / all).ln();
        let tape = Tape::new();
        let got = mmc_loss(
            tape.constant(to_array(&rv)),
            tape.constant(to_array(&rt)),
            &part,
            tau,
        )
        .unwrap()
        .item();
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        checked += 1;
    }
    report("mmc_loss", checked);
}

#[test]
fn auc_matches_pair_enumeration() {
    let mut r = rng(3);
    for _ in 0..INSTANCES {
        let n = r.random_range(2..=8);
        let s = scores(&mut r, n);
        let l = labels_with_both(&mut r, n);
        let mut count = 0u64;
        for i in (0..n).filter(|&i| l[i] == 1) {
            for j in (0..n).filter(|&j| l[j] == 0) {
                count += if s[i] > s[j] {
                    2
                } else if s[i] == s[j] {
                    1
                } else {
                    0
                };
            }
        }
        assert_eq!(auc_pair_count(&s, &l).unwrap(), count);
        let pos = l.iter().filter(|&&y| y == 1).count() as f64;
        let neg = n as f64 - pos;
        assert_eq!(roc_auc(&s, &l).unwrap(), count as f64 / (2.0 * pos * neg));
    }
    report("roc_auc", INSTANCES);
}

fn brute_eer(s: &[f64], l: &[u8]) -> f64 {
    let pos = l.iter().filter(|&&y| y == 1).count() as f64;
    let neg = l.len() as f64 - pos;
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut curve = vec![(0.0, 1.0)];
    for &t in &thresholds {
        let fp = (0..s.len()).filter(|&i| l[i] == 0 && s[i] >= t).count() as f64;
        let tp = (0..s.len()).filter(|&i| l[i] == 1 && s[i] >= t).count() as f64;
        curve.push((fp / neg, 1.0 - tp / pos));
    }
    for w in curve.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.0 - a.1, b.0 - b.1);
        if da >= 0.0 {
            return a.0;
        }
        if db >= 0.0 {
            if db == 0.0 {
                return b.0;
            }
            let t = da / (da - db);
            return 0.5 * ((a.0 + t * (b.0 - a.0)) + (a.1 + t * (b.1 - a.1)));
        }
    }
    curve.last().unwrap().0
}

#[test]
fn eer_matches_threshold_sweep() {
    let mut r = rng(4);
    for _ in 0..INSTANCES {
        let n = r.random_range(2..=8);
        let s = scores(&mut r, n);
        let l = labels_with_both(&mut r, n);
        let (got, want) = (eer(&s, &l).unwrap(), brute_eer(&s, &l));
        assert!((got - want).abs() <= 1e-12, "{s:?} {l:?}: {got} vs {want}");
    }
    report("eer", INSTANCES);
}

fn brute_ap(s: &[f64], l: &[u8]) -> Option<f64> {
    let positives: Vec<usize> = (0..s.len()).filter(|&i| l[i] == 1).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let above = (0..s.len()).filter(|&j| s[j] >= s[i]);
            let (n, hits) = above.fold((0, 0), |(n, h), j| (n + 1, h + (l[j] == 1) as usize));
            hits as f64 / n as f64
        })
        .sum();
    Some(total / positives.len() as f64)
}

#[test]
fn map_matches_per_positive_precision() {
    let mut r = rng(5);
    for _ in 0..INSTANCES {
        let n = r.random_range(1..=8);
        let c = r.random_range(1..=4);
        let probs: Vec<Vec<f64>> = (0..n).map(|_| scores(&mut r, c)).collect();
        let labels: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..c).map(|_| r.random_range(0..2)).collect())
            .collect();
        let aps: Vec<f64> = (0..c)
            .filter_map(|k| {
                let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
                let y: Vec<u8> = labels.iter().map(|p| p[k]).collect();
                brute_ap(&s, &y)
            })
            .collect();
        let want = if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        };
        let got = multilabel_metrics(&probs, &labels, 0.5).unwrap().map;
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
    report("map", INSTANCES);
}

/// Threshold, then repeatedly take the most extreme unselected entry
/// (earliest position on ties) until the floor is met.
fn brute_selection(g: f64, s: &[f64], k: usize, max: bool) -> Vec<bool> {
    let mut sel: Vec<bool> = s.iter().map(|&v| if max { v > g } else { v < g }).collect();
    while sel.iter().filter(|&&x| x).count() < k {
        let mut best: Option<usize> = None;
        for i in 0..s.len() {
            if sel[i] {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    if max {
                        s[i] > s[b]
                    } else {
                        s[i] < s[b]
                    }
                }
            };
            if better {
                best = Some(i);
            }
        }
        sel[best.unwrap()] = true;
    }
    sel
}

#[test]
fn selection_matches_greedy_fill() {
    let mut r = rng(6);
    for _ in 0..INSTANCES {
        let (rows, cols) = (r.random_range(1..=3), r.random_range(1..=3));
        let n = rows * cols;
        let s = scores(&mut r, n);
        let g = if r.random_bool(0.3) {
            s[r.random_range(0..n)]
        } else {
            r.random::<f64>()
        };
        let k = r.random_range(0..=n);
        let max = r.random_bool(0.5);
        let mode = if max {
            SelectMode::Max
        } else {
            SelectMode::Min
        };
        let got = build_selection(g, &s, k, mode).unwrap();
        assert_eq!(
            got.support,
            brute_selection(g, &s, k, max),
            "{s:?} g={g} k={k} max={max}"
        );
    }
    report("build_selection", INSTANCES);
}
