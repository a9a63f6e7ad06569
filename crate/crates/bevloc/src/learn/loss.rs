//! Hinge losses over embedding distances, with analytic subgradients.
//!
//! Both losses use the Euclidean distance d(x, y) = |x - y|. At hinge kinks
//! (argument exactly zero) and at coincident points (d = 0) the zero
//! subgradient branch is chosen.

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TripletGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QuadrupletGrads {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub decoy: Vec<f64>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// d|a - b| / da, or zero at a == b.
fn dist_grad(a: &[f64], b: &[f64], d: f64) -> Vec<f64> {
    if d <= 0.0 {
        return vec![0.0; a.len()];
    }
    a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
}

/// Hinge retrieval loss max{ d(a,p) - d(a,n) + m, 0 } with subgradients.
pub fn triplet_loss(
    a: &Descriptor,
    p: &Descriptor,
    n: &Descriptor,
    margin: f64,
) -> (f64, TripletGrads) {
    triplet_loss_raw(&a.values_f64(), &p.values_f64(), &n.values_f64(), margin)
}

/// As [`triplet_loss`] on raw vectors (the training loop and the
/// finite-difference checks operate on unnormalized f64 views).
pub fn triplet_loss_raw(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> (f64, TripletGrads) {
    assert_eq!(a.len(), p.len());
    assert_eq!(a.len(), n.len());
    let d_ap = distance(a, p);
    let d_an = distance(a, n);
    let hinge = d_ap - d_an + margin;
    if hinge <= 0.0 {
        let zeros = vec![0.0; a.len()];
        return (
            0.0,
            TripletGrads {
                anchor: zeros.clone(),
                positive: zeros.clone(),
                negative: zeros,
            },
        );
    }
    let g_ap = dist_grad(a, p, d_ap); // d d_ap / d a
    let g_an = dist_grad(a, n, d_an); // d d_an / d a
    let anchor: Vec<f64> = g_ap.iter().zip(&g_an).map(|(x, y)| x - y).collect();
    let positive: Vec<f64> = g_ap.iter().map(|x| -x).collect();
    let negative = g_an;
    (
        hinge,
        TripletGrads {
            anchor,
            positive,
            negative,
        },
    )
}

/// Lazy quadruplet loss: with d_pos the distance to the closest positive,
///
///   max_j [ alpha + d_pos - d(a, n_j) ]_+  +  max_j [ beta + d_pos - d(decoy, n_j) ]_+
///
/// Subgradients flow through the argmin positive and the argmax negative of
/// each hinge.
pub fn lazy_quadruplet_loss(
    a: &Descriptor,
    positives: &[Descriptor],
    negatives: &[Descriptor],
    decoy: &Descriptor,
    margins: (f64, f64),
) -> Result<(f64, QuadrupletGrads)> {
    let pos: Vec<Vec<f64>> = positives.iter().map(|d| d.values_f64()).collect();
    let neg: Vec<Vec<f64>> = negatives.iter().map(|d| d.values_f64()).collect();
    lazy_quadruplet_loss_raw(
        &a.values_f64(),
        &pos.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        &neg.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        &decoy.values_f64(),
        margins,
    )
}

pub fn lazy_quadruplet_loss_raw(
    a: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    decoy: &[f64],
    (alpha, beta): (f64, f64),
) -> Result<(f64, QuadrupletGrads)> {
    if positives.is_empty() {
        return Err(Error::EmptyInput("quadruplet loss needs >= 1 positive"));
    }
    if negatives.is_empty() {
        return Err(Error::EmptyInput("quadruplet loss needs >= 1 negative"));
    }
    let dim = a.len();

    // Closest positive (first index on ties).
    let mut best_p = 0usize;
    let mut d_pos = f64::INFINITY;
    for (i, p) in positives.iter().enumerate() {
        let d = distance(a, p);
        if d < d_pos {
            d_pos = d;
            best_p = i;
        }
    }

    // Hardest negative per hinge (first index on ties).
    let d_a_n: Vec<f64> = negatives.iter().map(|n| distance(a, n)).collect();
    let d_c_n: Vec<f64> = negatives.iter().map(|n| distance(decoy, n)).collect();
    let j1 = argmax(d_a_n.iter().map(|d| alpha + d_pos - d));
    let j2 = argmax(d_c_n.iter().map(|d| beta + d_pos - d));
    let h1 = alpha + d_pos - d_a_n[j1];
    let h2 = beta + d_pos - d_c_n[j2];
    let l1 = h1.max(0.0);
    let l2 = h2.max(0.0);

    let mut grads = QuadrupletGrads {
        anchor: vec![0.0; dim],
        positives: vec![vec![0.0; dim]; positives.len()],
        negatives: vec![vec![0.0; dim]; negatives.len()],
        decoy: vec![0.0; dim],
    };

    let g_dpos_a = dist_grad(a, positives[best_p], d_pos);
    // Coefficient on d_pos: one per active hinge.
    let dpos_coeff = (h1 > 0.0) as u32 as f64 + (h2 > 0.0) as u32 as f64;
    if dpos_coeff > 0.0 {
        for (g, v) in grads.anchor.iter_mut().zip(&g_dpos_a) {
            *g += dpos_coeff * v;
        }
        for (g, v) in grads.positives[best_p].iter_mut().zip(&g_dpos_a) {
            *g -= dpos_coeff * v;
        }
    }
    if h1 > 0.0 {
        let g_an = dist_grad(a, negatives[j1], d_a_n[j1]);
        for (g, v) in grads.anchor.iter_mut().zip(&g_an) {
            *g -= v;
        }
        // d d(a, n_j1) / d n_j1 = -(a - n)/d; hinge carries another minus.
        for (g, v) in grads.negatives[j1].iter_mut().zip(&g_an) {
            *g += v;
        }
    }
    if h2 > 0.0 {
        let g_cn = dist_grad(decoy, negatives[j2], d_c_n[j2]);
        for (g, v) in grads.decoy.iter_mut().zip(&g_cn) {
            *g -= v;
        }
        for (g, v) in grads.negatives[j2].iter_mut().zip(&g_cn) {
            *g += v;
        }
    }

    Ok((l1 + l2, grads))
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.iter().map(|v| v / n).collect()
    }

    #[test]
    fn inactive_hinge_is_zero_everywhere() {
        // d(a,p)=0.2, d(a,n)=0.9, m=0.5 -> hinge argument -0.2.
        let a = vec![0.0, 0.0];
        let p = vec![0.2, 0.0];
        let n = vec![0.9, 0.0];
        let (loss, g) = triplet_loss_raw(&a, &p, &n, 0.5);
        assert_eq!(loss, 0.0);
        assert!(g.anchor.iter().all(|&v| v == 0.0));
        assert!(g.positive.iter().all(|&v| v == 0.0));
        assert!(g.negative.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn active_hinge_direct_substitution() {
        // d(a,p)=0.6, d(a,n)=0.4, m=0.5 -> loss 0.7.
        let a = vec![0.0, 0.0];
        let p = vec![0.6, 0.0];
        let n = vec![0.0, 0.4];
        let (loss, _) = triplet_loss_raw(&a, &p, &n, 0.5);
        assert!((loss - 0.7).abs() < 1e-12);
    }

    #[test]
    fn triplet_gradients_match_central_differences() {
        let mut rng = crate::seeds::rng_for(42, "loss-fd", 0);
        let dim = 8;
        let h = 1e-5;
        let mut checked = 0;
        while checked < 100 {
            let a = unit(&mut rng, dim);
            let p = unit(&mut rng, dim);
            let n = unit(&mut rng, dim);
            let m = rng.random_range(0.1..1.0);
            let (_, grads) = triplet_loss_raw(&a, &p, &n, m);
            // Stay away from the hinge kink and coincident points.
            let d_ap = a.iter().zip(&p).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let d_an = a.iter().zip(&n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            if (d_ap - d_an + m).abs() < 1e-3 || d_ap < 1e-3 || d_an < 1e-3 {
                continue;
            }
            checked += 1;
            for (vec_idx, (base, grad)) in [(&a, &grads.anchor), (&p, &grads.positive), (&n, &grads.negative)]
                .into_iter()
                .enumerate()
            {
                for i in 0..dim {
                    let mut plus = base.clone();
                    plus[i] += h;
                    let mut minus = base.clone();
                    minus[i] -= h;
                    let (lp, lm) = match vec_idx {
                        0 => (triplet_loss_raw(&plus, &p, &n, m).0, triplet_loss_raw(&minus, &p, &n, m).0),
                        1 => (triplet_loss_raw(&a, &plus, &n, m).0, triplet_loss_raw(&a, &minus, &n, m).0),
                        _ => (triplet_loss_raw(&a, &p, &plus, m).0, triplet_loss_raw(&a, &p, &minus, m).0),
                    };
                    let fd = (lp - lm) / (2.0 * h);
                    let denom = fd.abs().max(grad[i].abs()).max(1e-8);
                    assert!(
                        ((fd - grad[i]).abs() / denom) < 1e-4,
                        "component {i} of vec {vec_idx}: fd {fd} vs {g}",
                        g = grad[i]
                    );
                }
            }
        }
    }

    #[test]
    fn quadruplet_inactive_when_negatives_far() {
        let a = vec![0.0, 0.0];
        let p = vec![0.1, 0.0];
        let decoy = vec![0.0, 0.1];
        let negs: Vec<&[f64]> = vec![&[5.0, 0.0], &[0.0, 5.0]];
        let (loss, g) =
            lazy_quadruplet_loss_raw(&a, &[&p], &negs, &decoy, (0.5, 0.25)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.anchor.iter().all(|&v| v == 0.0));
        assert!(g.decoy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadruplet_reduces_to_triplet_when_beta_disabled() {
        let mut rng = crate::seeds::rng_for(7, "loss-reduce", 0);
        for _ in 0..20 {
            let a = unit(&mut rng, 6);
            let p = unit(&mut rng, 6);
            let n = unit(&mut rng, 6);
            let decoy = unit(&mut rng, 6);
            let alpha = 0.5;
            let (ql, qg) = lazy_quadruplet_loss_raw(
                &a,
                &[p.as_slice()],
                &[n.as_slice()],
                &decoy,
                (alpha, f64::NEG_INFINITY),
            )
            .unwrap();
            let (tl, tg) = triplet_loss_raw(&a, &p, &n, alpha);
            assert!((ql - tl).abs() < 1e-12);
            for (x, y) in qg.anchor.iter().zip(&tg.anchor) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in qg.positives[0].iter().zip(&tg.positive) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in qg.negatives[0].iter().zip(&tg.negative) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadruplet_gradients_match_central_differences() {
        let mut rng = crate::seeds::rng_for(99, "quad-fd", 0);
        let dim = 6;
        let h = 1e-5;
        let mut checked = 0;
        'outer: while checked < 100 {
            let a = unit(&mut rng, dim);
            let decoy = unit(&mut rng, dim);
            let positives: Vec<Vec<f64>> = (0..2).map(|_| unit(&mut rng, dim)).collect();
            let negatives: Vec<Vec<f64>> = (0..18).map(|_| unit(&mut rng, dim)).collect();
            let margins = (rng.random_range(0.2..0.8), rng.random_range(0.05..0.4));

            let p_refs: Vec<&[f64]> = positives.iter().map(|v| v.as_slice()).collect();
            let n_refs: Vec<&[f64]> = negatives.iter().map(|v| v.as_slice()).collect();

            // Keep away from kinks: distinct argmin/argmax and hinge arguments
            // bounded away from zero.
            let d_pos: Vec<f64> = positives
                .iter()
                .map(|p| a.iter().zip(p).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .collect();
            let mut sorted_d = d_pos.clone();
            sorted_d.sort_by(f64::total_cmp);
            if sorted_d[1] - sorted_d[0] < 1e-3 {
                continue;
            }
            let dp = sorted_d[0];
            let h1s: Vec<f64> = negatives
                .iter()
                .map(|n| {
                    margins.0 + dp
                        - a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            let h2s: Vec<f64> = negatives
                .iter()
                .map(|n| {
                    margins.1 + dp
                        - decoy.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            for hs in [&h1s, &h2s] {
                let mut s = hs.clone();
                s.sort_by(f64::total_cmp);
                s.reverse();
                if s[0].abs() < 1e-3 || (s[0] - s[1]).abs() < 1e-3 {
                    continue 'outer;
                }
            }

            let (_, grads) =
                lazy_quadruplet_loss_raw(&a, &p_refs, &n_refs, &decoy, margins).unwrap();
            checked += 1;

            let eval = |a: &[f64], ps: &[Vec<f64>], ns: &[Vec<f64>], c: &[f64]| -> f64 {
                let pr: Vec<&[f64]> = ps.iter().map(|v| v.as_slice()).collect();
                let nr: Vec<&[f64]> = ns.iter().map(|v| v.as_slice()).collect();
                lazy_quadruplet_loss_raw(a, &pr, &nr, c, margins).unwrap().0
            };

            let check = |analytic: &[f64], perturb: &dyn Fn(usize, f64) -> f64| {
                for i in 0..dim {
                    let fd = (perturb(i, h) - perturb(i, -h)) / (2.0 * h);
                    let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
                    assert!(
                        (fd - analytic[i]).abs() / denom < 1e-4,
                        "fd {fd} vs analytic {}",
                        analytic[i]
                    );
                }
            };

            check(&grads.anchor, &|i, d| {
                let mut v = a.clone();
                v[i] += d;
                eval(&v, &positives, &negatives, &decoy)
            });
            check(&grads.decoy, &|i, d| {
                let mut v = decoy.clone();
                v[i] += d;
                eval(&a, &positives, &negatives, &v)
            });
            for (pi, pg) in grads.positives.iter().enumerate() {
                check(pg, &|i, d| {
                    let mut ps = positives.clone();
                    ps[pi][i] += d;
                    eval(&a, &ps, &negatives, &decoy)
                });
            }
            for (ni, ng) in grads.negatives.iter().enumerate() {
                check(ng, &|i, d| {
                    let mut ns = negatives.clone();
                    ns[ni][i] += d;
                    eval(&a, &positives, &ns, &decoy)
                });
            }
        }
    }

    #[test]
    fn empty_lists_are_errors() {
        let a = vec![0.0, 1.0];
        assert!(lazy_quadruplet_loss_raw(&a, &[], &[&[1.0, 0.0]], &a, (0.5, 0.25)).is_err());
        assert!(lazy_quadruplet_loss_raw(&a, &[&[1.0, 0.0]], &[], &a, (0.5, 0.25)).is_err());
    }

    #[test]
    fn loss_bounded_by_positive_distance_plus_margin() {
        let mut rng = crate::seeds::rng_for(3, "loss-bound", 0);
        for _ in 0..200 {
            let a = unit(&mut rng, 5);
            let p = unit(&mut rng, 5);
            let n = unit(&mut rng, 5);
            let m = rng.random_range(0.0..1.0);
            let (loss, _) = triplet_loss_raw(&a, &p, &n, m);
            let d_ap = a.iter().zip(&p).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(loss >= 0.0);
            assert!(loss <= d_ap + m + 1e-12);
        }
    }
}
