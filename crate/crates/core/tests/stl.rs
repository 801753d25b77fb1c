mod common;

use common::{holds, max_operands, operator_depth, rho, rng, stl_instance};
use lineguard_core::stl::{robustness, smooth_robustness, smooth_robustness_gradient, LinearPredicate, StlFormula, Trace};

#[test]
fn sign_agrees_with_boolean_satisfaction() {
    let mut r = rng(11);
    for i in 0..1000 {
        let (f, t) = stl_instance(&mut r);
        let q = robustness(&f, &t, 0).unwrap();
        assert_eq!(q > 0.0, holds(&f, &t, 0), "instance {i}: {f}");
        assert_eq!(q, rho(&f, &t, 0), "instance {i}: {f}");
    }
}

#[test]
fn smoothing_error_is_bounded_by_depth_and_width() {
    let mut r = rng(12);
    for i in 0..1000 {
        let (f, t) = stl_instance(&mut r);
        let exact = robustness(&f, &t, 0).unwrap();
        let (d, m) = (operator_depth(&f) as f64, max_operands(&f) as f64);
        for kappa in [1.0, 10.0, 1000.0] {
            let smooth = smooth_robustness(&f, &t, 0, kappa).unwrap();
            let bound = d * m.ln() / kappa;
            assert!((smooth - exact).abs() <= bound + 1e-12, "instance {i}, kappa {kappa}: |{smooth} - {exact}| > {bound}");
        }
    }
}

/// Doubling κ tightens the approximation when all operators pull the same
/// way. With mixed soft-min and soft-max nodes the one-sided errors partly
/// cancel, so the sequence need not be monotone; those cases are counted
/// and must still converge.
#[test]
fn doubling_kappa_converges() {
    let mut r = rng(13);
    let mut mixed_regressions = 0;
    for i in 0..1000 {
        let (f, t) = stl_instance(&mut r);
        let exact = robustness(&f, &t, 0).unwrap();
        let single_sign = same_polarity(&f);
        let mut kappa = 1.0;
        let mut err = (smooth_robustness(&f, &t, 0, kappa).unwrap() - exact).abs();
        while kappa < 1024.0 {
            kappa *= 2.0;
            let next = (smooth_robustness(&f, &t, 0, kappa).unwrap() - exact).abs();
            if next > err + 1e-12 {
                assert!(!single_sign, "instance {i}: error grew from {err} to {next} at kappa {kappa} for {f}");
                mixed_regressions += 1;
            }
            err = next;
        }
        assert!(err <= operator_depth(&f) as f64 * (max_operands(&f) as f64).ln() / 1024.0 + 1e-12);
    }
    println!("non-monotone steps on mixed min/max formulas: {mixed_regressions}");
}

fn polarity(f: &StlFormula, out: &mut (bool, bool)) {
    match f {
        StlFormula::Predicate(_) => {}
        StlFormula::And(c) => {
            out.0 |= c.len() > 1;
            c.iter().for_each(|g| polarity(g, out));
        }
        StlFormula::Or(c) => {
            out.1 |= c.len() > 1;
            c.iter().for_each(|g| polarity(g, out));
        }
        StlFormula::Globally { a, b, child } => {
            out.0 |= b > a;
            polarity(child, out);
        }
        StlFormula::Eventually { a, b, child } => {
            out.1 |= b > a;
            polarity(child, out);
        }
    }
}

/// Whether every node with more than one operand is of the same kind.
fn same_polarity(f: &StlFormula) -> bool {
    let mut p = (false, false);
    polarity(f, &mut p);
    !(p.0 && p.1)
}

#[test]
fn gradient_matches_central_differences() {
    let mut r = rng(14);
    let h = 1e-5;
    let kappa = 10.0;
    for i in 0..150 {
        let (f, t) = stl_instance(&mut r);
        let g = smooth_robustness_gradient(&f, &t, 0, kappa).unwrap();
        let mut fd = vec![0.0; t.data().len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let mut plus = t.clone();
            plus.data_mut()[j] += h;
            let mut minus = t.clone();
            minus.data_mut()[j] -= h;
            *slot = (smooth_robustness(&f, &plus, 0, kappa).unwrap() - smooth_robustness(&f, &minus, 0, kappa).unwrap()) / (2.0 * h);
        }
        let diff = g.gradient.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(diff <= 1e-4 * scale.max(1e-12), "instance {i}: relative error {} for {f}", diff / scale);
    }
}

#[test]
fn shifting_a_predicate_offset_shifts_its_robustness() {
    let mut r = rng(15);
    for _ in 0..200 {
        let (f, t) = stl_instance(&mut r);
        if let StlFormula::Predicate(p) = &f {
            let c = 0.37;
            let shifted = StlFormula::predicate(LinearPredicate::new(p.coefficients.clone(), p.offset + c));
            let before = robustness(&f, &t, 0).unwrap();
            let after = robustness(&shifted, &t, 0).unwrap();
            assert!((after - (before - c)).abs() <= 1e-12);
        }
        for k in 0..t.len() {
            let p = StlFormula::predicate(LinearPredicate::new(vec![1.0; t.dim()], 0.0));
            let q = StlFormula::predicate(LinearPredicate::new(vec![1.0; t.dim()], 2.5));
            assert!((robustness(&q, &t, k).unwrap() - robustness(&p, &t, k).unwrap() + 2.5).abs() <= 1e-12);
        }
    }
}

#[test]
fn nested_example_against_brute_force() {
    let t = Trace::scalar(1.0, &[-1.0, 4.0, 2.0]).unwrap();
    let f = StlFormula::and(vec![
        StlFormula::eventually(0, 2, StlFormula::predicate(LinearPredicate::new(vec![1.0], 0.0))),
        StlFormula::globally(0, 2, StlFormula::predicate(LinearPredicate::new(vec![-1.0], -3.0))),
    ]);
    assert_eq!(robustness(&f, &t, 0).unwrap(), rho(&f, &t, 0));
    assert_eq!(robustness(&f, &t, 0).unwrap(), -1.0);
}
