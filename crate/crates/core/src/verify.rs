//! The two ratio conditions an approximating attention matrix must meet.
//!
//! For every row `i`, with `j2` ranging over nonzeros of `A`:
//!
//! * zero condition: `M[i,j1] / M[i,j2] < eps1` whenever `A[i,j1] = 0`;
//! * nonzero condition: `M[i,j1] / M[i,j2]` lies strictly within a factor
//!   `exp(±eps2)` of `A[i,j1] / A[i,j2]` whenever `A[i,j1] != 0`.
//!
//! Since softmax ratios are exponentials of logit differences, both
//! conditions are checked on `Z` directly ([`check_conditions`]), which is
//! immune to overflow. [`check_direct`] evaluates them literally on `M` and
//! serves as an oracle for small instances. For causal targets only
//! `j1, j2 <= i` are considered.

use std::sync::Arc;

use serde::Serialize;

use crate::attention::{kernel_for, AttentionMatrix, LogitMatrix};
use crate::matrices::SparseStochasticMatrix;
use crate::registry::{Named, Registry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    ZeroRatio,
    NonzeroRatio,
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TripleViolation {
    pub i: usize,
    pub j1: usize,
    pub j2: usize,
    pub kind: ViolationKind,
}

/// Outcome of a condition check. `worst_zero_ratio_log` is the largest
/// `log(M[i,j1]/M[i,j2])` over zero-condition triples (compare with
/// `log eps1`; `-inf` when there are none) and `worst_nonzero_dev` the largest
/// `|log(M[i,j1]/M[i,j2]) - log(A[i,j1]/A[i,j2])|` (compare with `eps2`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApproxReport {
    pub passed: bool,
    pub worst_zero_ratio_log: f64,
    pub worst_nonzero_dev: f64,
    pub n_triples_checked: u64,
    pub first_violation: Option<TripleViolation>,
}

/// Columns considered for row `i`.
fn row_limit(l: usize, i: usize, causal: bool) -> usize {
    if causal {
        i + 1
    } else {
        l
    }
}

fn nonzeros(a: &SparseStochasticMatrix, i: usize, limit: usize) -> Vec<(usize, f64)> {
    a.row(i).iter().copied().filter(|&(j, _)| j < limit).collect()
}

/// Log-domain check on the logits.
///
/// Per row this costs `O(L + nnz²)`: the zero condition only depends on the
/// largest logit over zero positions and the smallest over nonzero positions.
/// Rows that fail are rescanned in `(j1, j2)` order to report the first
/// violating triple.
pub fn check_conditions(
    z: &LogitMatrix,
    a: &SparseStochasticMatrix,
    eps1: f64,
    eps2: f64,
    causal: bool,
) -> ApproxReport {
    let l = a.l();
    assert_eq!(z.l(), l, "logits and target differ in size");
    let log_eps1 = eps1.ln();
    let mut worst_zero = f64::NEG_INFINITY;
    let mut worst_dev = 0.0f64;
    let mut n_triples = 0u64;
    let mut first = None;

    for i in 0..l {
        let limit = row_limit(l, i, causal);
        let zr = &z.row(i)[..limit];
        let nz = nonzeros(a, i, limit);
        let log_a: Vec<f64> = nz.iter().map(|&(_, v)| v.ln()).collect();

        let mut zero_max = f64::NEG_INFINITY;
        let mut next = nz.iter().map(|&(j, _)| j).peekable();
        let mut n_zero = 0u64;
        for (j, &v) in zr.iter().enumerate() {
            if next.peek() == Some(&j) {
                next.next();
                continue;
            }
            n_zero += 1;
            zero_max = zero_max.max(v);
        }
        let nz_min = nz.iter().map(|&(j, _)| zr[j]).fold(f64::INFINITY, f64::min);

        let mut row_ok = true;
        if n_zero > 0 && !nz.is_empty() {
            // floating subtraction is monotone, so this is the max over all pairs
            let w = zero_max - nz_min;
            worst_zero = worst_zero.max(w);
            row_ok &= w < log_eps1;
            n_triples += n_zero * nz.len() as u64;
        }
        for (p, &(j1, _)) in nz.iter().enumerate() {
            for (q, &(j2, _)) in nz.iter().enumerate() {
                if p == q {
                    continue;
                }
                let dev = ((zr[j1] - zr[j2]) - (log_a[p] - log_a[q])).abs();
                worst_dev = worst_dev.max(dev);
                row_ok &= dev < eps2;
                n_triples += 1;
            }
        }

        if !row_ok && first.is_none() {
            first = first_in_row_log(i, zr, &nz, &log_a, log_eps1, eps2);
        }
    }

    ApproxReport {
        passed: first.is_none(),
        worst_zero_ratio_log: worst_zero,
        worst_nonzero_dev: worst_dev,
        n_triples_checked: n_triples,
        first_violation: first,
    }
}

fn first_in_row_log(
    i: usize,
    zr: &[f64],
    nz: &[(usize, f64)],
    log_a: &[f64],
    log_eps1: f64,
    eps2: f64,
) -> Option<TripleViolation> {
    for j1 in 0..zr.len() {
        let p1 = nz.iter().position(|&(j, _)| j == j1);
        for (q, &(j2, _)) in nz.iter().enumerate() {
            if j1 == j2 {
                continue;
            }
            let kind = match p1 {
                None if !((zr[j1] - zr[j2]) < log_eps1) => ViolationKind::ZeroRatio,
                Some(p) if !(((zr[j1] - zr[j2]) - (log_a[p] - log_a[q])).abs() < eps2) => {
                    ViolationKind::NonzeroRatio
                }
                _ => continue,
            };
            return Some(TripleViolation { i, j1, j2, kind });
        }
    }
    None
}

/// Literal check of the ratio conditions on `M`. Non-finite ratios count as
/// violations. Meant for small `L` where every entry of `M` is representable.
pub fn check_direct(
    m: &AttentionMatrix,
    a: &SparseStochasticMatrix,
    eps1: f64,
    eps2: f64,
    causal: bool,
) -> ApproxReport {
    let l = a.l();
    assert_eq!(m.l(), l, "attention matrix and target differ in size");
    let (lo, hi) = ((-eps2).exp(), eps2.exp());
    let mut worst_zero = f64::NEG_INFINITY;
    let mut worst_dev = 0.0f64;
    let mut n_triples = 0u64;
    let mut first = None;

    for i in 0..l {
        let limit = row_limit(l, i, causal);
        let mr = &m.row(i)[..limit];
        let nz = nonzeros(a, i, limit);
        for j1 in 0..limit {
            let a1 = nz.iter().find(|&&(j, _)| j == j1).map(|&(_, v)| v);
            for &(j2, a2) in &nz {
                if j1 == j2 {
                    continue;
                }
                n_triples += 1;
                let ratio = mr[j1] / mr[j2];
                let kind = if !ratio.is_finite() {
                    Some(ViolationKind::NonFinite)
                } else {
                    match a1 {
                        None => {
                            worst_zero = worst_zero.max(ratio.ln());
                            (!(ratio < eps1)).then_some(ViolationKind::ZeroRatio)
                        }
                        Some(a1) => {
                            let target = a1 / a2;
                            worst_dev = worst_dev.max((ratio.ln() - target.ln()).abs());
                            (!(target * lo < ratio && ratio < target * hi))
                                .then_some(ViolationKind::NonzeroRatio)
                        }
                    }
                };
                if let (Some(kind), None) = (kind, first) {
                    first = Some(TripleViolation { i, j1, j2, kind });
                }
            }
        }
    }

    ApproxReport {
        passed: first.is_none(),
        worst_zero_ratio_log: worst_zero,
        worst_nonzero_dev: worst_dev,
        n_triples_checked: n_triples,
        first_violation: first,
    }
}

/// A way of deciding whether logits approximate a target.
pub trait ConditionChecker: Named + Send + Sync {
    fn check(
        &self,
        z: &LogitMatrix,
        a: &SparseStochasticMatrix,
        eps1: f64,
        eps2: f64,
        causal: bool,
    ) -> ApproxReport;
}

/// Log-domain check on `Z`.
pub struct LogDomain;

/// Normalizes `Z` with the matching kernel and checks `M` literally.
pub struct Direct;

impl Named for LogDomain {
    fn name(&self) -> &'static str {
        "log"
    }
}

impl ConditionChecker for LogDomain {
    fn check(
        &self,
        z: &LogitMatrix,
        a: &SparseStochasticMatrix,
        eps1: f64,
        eps2: f64,
        causal: bool,
    ) -> ApproxReport {
        check_conditions(z, a, eps1, eps2, causal)
    }
}

impl Named for Direct {
    fn name(&self) -> &'static str {
        "direct"
    }
}

impl ConditionChecker for Direct {
    fn check(
        &self,
        z: &LogitMatrix,
        a: &SparseStochasticMatrix,
        eps1: f64,
        eps2: f64,
        causal: bool,
    ) -> ApproxReport {
        let m = kernel_for(causal).apply(z);
        check_direct(&m, a, eps1, eps2, causal)
    }
}

pub fn checkers() -> Registry<dyn ConditionChecker> {
    Registry::<dyn ConditionChecker>::new("condition checker")
        .with(Arc::new(LogDomain))
        .with(Arc::new(Direct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{csam, sam};
    use crate::construct::build_log_gap;
    use crate::dense::RowMatrix;
    use crate::matrices::{generate, ApproxParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Full O(L²) enumeration of every triple, in `(i, j1, j2)` order.
    fn naive(
        z: &LogitMatrix,
        a: &SparseStochasticMatrix,
        eps1: f64,
        eps2: f64,
        causal: bool,
    ) -> ApproxReport {
        let l = a.l();
        let (mut wz, mut wd, mut n, mut first) = (f64::NEG_INFINITY, 0.0f64, 0u64, None);
        for i in 0..l {
            let limit = if causal { i + 1 } else { l };
            for j1 in 0..limit {
                for j2 in 0..limit {
                    let (a1, a2) = (a.get(i, j1), a.get(i, j2));
                    if j1 == j2 || a2 == 0.0 {
                        continue;
                    }
                    n += 1;
                    let diff = z.get(i, j1) - z.get(i, j2);
                    let kind = if a1 == 0.0 {
                        wz = wz.max(diff);
                        (!(diff < eps1.ln())).then_some(ViolationKind::ZeroRatio)
                    } else {
                        let dev = (diff - (a1.ln() - a2.ln())).abs();
                        wd = wd.max(dev);
                        (!(dev < eps2)).then_some(ViolationKind::NonzeroRatio)
                    };
                    if let (Some(kind), None) = (kind, first) {
                        first = Some(TripleViolation { i, j1, j2, kind });
                    }
                }
            }
        }
        ApproxReport {
            passed: first.is_none(),
            worst_zero_ratio_log: wz,
            worst_nonzero_dev: wd,
            n_triples_checked: n,
            first_violation: first,
        }
    }

    fn noisy_b(a: &SparseStochasticMatrix, eps1: f64, eps2: f64, noise: f64, seed: u64) -> LogitMatrix {
        let bm = build_log_gap(a, eps1, eps2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let l = a.l();
        LogitMatrix(RowMatrix::from_fn(l, l, |i, j| {
            bm.b[(i, j)] + noise * rng.random_range(-1.0..1.0)
        }))
    }

    fn b_logits(a: &SparseStochasticMatrix, eps1: f64, eps2: f64) -> LogitMatrix {
        noisy_b(a, eps1, eps2, 0.0, 0)
    }

    #[test]
    fn exact_b_passes_with_margin() {
        for causal in [false, true] {
            let p = ApproxParams::new(30, 2, 2.0, 0.2, 0.4, causal).unwrap();
            let a = generate(&p, 3).unwrap();
            let rep = check_conditions(&b_logits(&a, 0.2, 0.4), &a, 0.2, 0.4, causal);
            assert!(rep.passed);
            assert!(rep.worst_zero_ratio_log <= 0.2f64.ln() - 0.4 + 1e-12);
        }
    }

    #[test]
    fn row_shifts_leave_report_unchanged() {
        let p = ApproxParams::new(12, 2, 2.0, 0.3, 0.5, false).unwrap();
        let a = generate(&p, 9).unwrap();
        let z = b_logits(&a, 0.3, 0.5);
        let mut shifted = z.clone();
        for i in 0..12 {
            shifted.0.row_mut(i).iter_mut().for_each(|x| *x += 0.5 * i as f64);
        }
        let (r1, r2) = (
            check_conditions(&z, &a, 0.3, 0.5, false),
            check_conditions(&shifted, &a, 0.3, 0.5, false),
        );
        assert_eq!(r1.passed, r2.passed);
        assert_eq!(r1.n_triples_checked, r2.n_triples_checked);
        assert!((r1.worst_zero_ratio_log - r2.worst_zero_ratio_log).abs() < 1e-12);
    }

    #[test]
    fn direct_check_on_hand_rows() {
        // A row [0.9, 0.1, 0]; M row [0.9, 0.1 - t, t]
        let a = SparseStochasticMatrix::from_entries(
            3,
            [(0, 0, 0.9), (0, 1, 0.1), (1, 1, 1.0), (2, 2, 1.0)],
            false,
        )
        .unwrap();
        let build = |t: f64| AttentionMatrix {
            m: RowMatrix::from_rows(
                3,
                3,
                vec![0.9, 0.1 - t, t, 0.001, 0.998, 0.001, 0.001, 0.001, 0.998],
            ),
            causal: false,
        };
        // t / (0.1 - t) < 0.15 iff t < 0.013043...
        assert!(check_direct(&build(0.013), &a, 0.15, 0.5, false).passed);
        let rep = check_direct(&build(0.0131), &a, 0.15, 0.5, false);
        assert_eq!(
            rep.first_violation,
            Some(TripleViolation { i: 0, j1: 2, j2: 1, kind: ViolationKind::ZeroRatio })
        );
        // with t = 0.01: ratio 0.9/0.09 = 10 must lie in (9e^-eps2, 9e^eps2)
        assert!(check_direct(&build(0.01), &a, 0.15, 0.2, false).passed);
        let rep = check_direct(&build(0.01), &a, 0.15, 0.1, false);
        assert_eq!(rep.first_violation.unwrap().kind, ViolationKind::NonzeroRatio);
    }

    #[test]
    fn uniform_attention_fails_zero_condition() {
        let a = SparseStochasticMatrix::identity(4);
        let m = sam(&LogitMatrix(RowMatrix::zeros(4, 4)));
        let rep = check_direct(&m, &a, 0.9, 1.0, false);
        assert!(!rep.passed);
        assert_eq!(rep.first_violation.unwrap().kind, ViolationKind::ZeroRatio);
        assert_eq!(rep.worst_zero_ratio_log, 0.0);
    }

    #[test]
    fn direct_flags_non_finite_ratios() {
        let a = SparseStochasticMatrix::identity(2);
        let m = AttentionMatrix {
            m: RowMatrix::from_rows(2, 2, vec![0.0, 1.0, 0.0, 1.0]),
            causal: false,
        };
        let rep = check_direct(&m, &a, 0.5, 0.5, false);
        assert_eq!(
            rep.first_violation,
            Some(TripleViolation { i: 0, j1: 1, j2: 0, kind: ViolationKind::NonFinite })
        );
    }

    #[test]
    fn registry_checkers_agree_on_small_instance() {
        let p = ApproxParams::new(8, 2, 2.0, 0.3, 0.6, false).unwrap();
        let a = generate(&p, 2).unwrap();
        let z = noisy_b(&a, 0.3, 0.6, 0.4, 5);
        let reg = checkers();
        let r_log = reg.get("log").unwrap().check(&z, &a, 0.3, 0.6, false);
        let r_dir = reg.get("direct").unwrap().check(&z, &a, 0.3, 0.6, false);
        assert_eq!(r_log.passed, r_dir.passed);
        assert_eq!(r_log.first_violation, r_dir.first_violation);
    }

    #[test]
    fn report_serializes_listed_fields() {
        let a = SparseStochasticMatrix::identity(3);
        let rep = check_conditions(&LogitMatrix(RowMatrix::zeros(3, 3)), &a, 0.5, 0.5, false);
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        for key in [
            "passed",
            "worst_zero_ratio_log",
            "worst_nonzero_dev",
            "n_triples_checked",
            "first_violation",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["first_violation"]["kind"], "zero_ratio");
    }

    proptest! {
        #[test]
        fn fast_check_equals_naive_enumeration(
            l in 2usize..14,
            k in 1usize..4,
            gamma in 1.0f64..3.0,
            causal: bool,
            noise in 0.0f64..2.0,
            seed: u64,
        ) {
            let k = k.min(l);
            let p = ApproxParams::new(l, k, gamma, 0.25, 0.7, causal).unwrap();
            let a = generate(&p, seed).unwrap();
            let z = noisy_b(&a, 0.25, 0.7, noise, seed ^ 1);
            let fast = check_conditions(&z, &a, 0.25, 0.7, causal);
            let slow = naive(&z, &a, 0.25, 0.7, causal);
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn log_and_direct_agree(
            l in 2usize..17,
            k in 1usize..3,
            causal: bool,
            noise in 0.0f64..1.5,
            seed: u64,
        ) {
            let k = k.min(l);
            let p = ApproxParams::new(l, k, 2.0, 0.2, 0.5, causal).unwrap();
            let a = generate(&p, seed).unwrap();
            let z = noisy_b(&a, 0.2, 0.5, noise, seed.wrapping_add(3));
            let m = if causal { csam(&z) } else { sam(&z) };
            let r_log = check_conditions(&z, &a, 0.2, 0.5, causal);
            let r_dir = check_direct(&m, &a, 0.2, 0.5, causal);
            prop_assert_eq!(r_log.passed, r_dir.passed);
            prop_assert_eq!(r_log.first_violation, r_dir.first_violation);
        }

        #[test]
        fn relaxing_thresholds_never_breaks_a_pass(
            noise in 0.0f64..1.5,
            seed: u64,
            d1 in 0.0f64..0.5,
            d2 in 0.0f64..0.5,
        ) {
            let p = ApproxParams::new(10, 2, 2.0, 0.2, 0.5, false).unwrap();
            let a = generate(&p, seed).unwrap();
            let z = noisy_b(&a, 0.2, 0.5, noise, seed ^ 7);
            let tight = check_conditions(&z, &a, 0.2, 0.5, false);
            let loose = check_conditions(&z, &a, 0.2 + d1, 0.5 + d2, false);
            prop_assert!(!tight.passed || loose.passed);
        }
    }
}
