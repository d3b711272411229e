//! Central finite-difference verification of tape gradients.

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|g_ad − g_fd| / max(1, |g_ad| + |g_fd|)` over all checked entries.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

/// Compares reverse-mode gradients of `objective` against central differences
/// for every entry of `params`.
///
/// `objective` must build its loss on the supplied tape from the supplied store
/// and be deterministic.
pub fn gradient_check<F>(
    store: &ParamStore,
    params: &[ParamId],
    objective: F,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    gradient_check_against(store, params, &objective, &objective, step, tol)
}

/// Reverse-mode gradients of `analytic` against central differences of
/// `reference`. With two different objectives this checks that a candidate
/// implementation differentiates to the gradient of a trusted one.
pub fn gradient_check_against<A, R>(
    store: &ParamStore,
    params: &[ParamId],
    analytic: A,
    reference: R,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    A: Fn(&ParamStore, &mut Tape) -> Result<Var>,
    R: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let loss = analytic(store, &mut tape)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = reference(s, &mut t)?;
        Ok(t.value(l).get(0, 0))
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance: tol,
        failures: Vec::new(),
    };

    for &id in params {
        let n = store.get(id).len();
        let g = grads.param(id);
        for idx in 0..n {
            let g_ad = g.map_or(0.0, |g| g.as_slice()[idx]);
            let orig = store.get(id).as_slice()[idx];
            work.get_mut(id).as_mut_slice()[idx] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).as_mut_slice()[idx] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).as_mut_slice()[idx] = orig;
            report.checked += 1;

            let name = store.name(id).to_string();
            if !plus.is_finite() || !minus.is_finite() || !g_ad.is_finite() {
                report.failures.push(GradCheckFailure {
                    param: name,
                    index: idx,
                    analytic: g_ad,
                    numeric: f64::NAN,
                    reason: "non-finite objective or gradient".into(),
                });
                continue;
            }
            let g_fd = (plus - minus) / (2.0 * step);
            let r = relative_error(g_ad, g_fd);
            if r >= report.max_rel_error {
                report.max_rel_error = r;
                report.worst = Some((name.clone(), idx));
            }
            if r >= tol {
                report.failures.push(GradCheckFailure {
                    param: name,
                    index: idx,
                    analytic: g_ad,
                    numeric: g_fd,
                    reason: format!("relative error {r:.3e} >= {tol:.1e}"),
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Matrix, ParamGroupKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::scalar(3.0), ParamGroupKind::Graph);
        let report = gradient_check(
            &store,
            &[x],
            |s, t| {
                let v = t.param(s, x);
                t.mul(v, v)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::scalar(3.0), ParamGroupKind::Graph);
        let report = gradient_check(&store, &[x], |_, t| Ok(t.constant(Matrix::scalar(2.0))), 1e-5, 1e-4).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn non_finite_objective_is_a_located_failure() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::scalar(0.0), ParamGroupKind::Graph);
        let report = gradient_check(
            &store,
            &[x],
            |s, t| {
                let v = t.param(s, x);
                let c = t.constant(Matrix::scalar(f64::INFINITY));
                t.mul(v, c)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures[0].param, "x");
        assert_eq!(report.failures[0].index, 0);
    }

    #[test]
    fn sum_of_product_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::random_normal(3, 4, 1.0, &mut rng), ParamGroupKind::Graph);
        let b = store.add("b", Matrix::random_normal(4, 2, 1.0, &mut rng), ParamGroupKind::Graph);
        let report = gradient_check(
            &store,
            &[a, b],
            |s, t| {
                let (va, vb) = (t.param(s, a), t.param(s, b));
                let p = t.matmul(va, vb)?;
                Ok(t.sum(p))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    /// Every differentiable tape operation, composed into one scalar.
    #[test]
    fn every_operation_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let g = ParamGroupKind::LanguageModel;
        let x = store.add("x", Matrix::random_normal(4, 3, 1.0, &mut rng), g);
        let w = store.add("w", Matrix::random_normal(3, 3, 1.0, &mut rng), g);
        let bias = store.add("bias", Matrix::random_normal(1, 3, 1.0, &mut rng), g);
        let gain = store.add("gain", Matrix::random_normal(1, 3, 1.0, &mut rng), g);
        let y = store.add("y", Matrix::random_normal(2, 3, 1.0, &mut rng), g);
        let mut mask = Matrix::filled(4, 4, 1.0);
        mask.set(0, 1, 0.0);
        mask.set(2, 3, 0.0);

        let report = gradient_check(
            &store,
            &[x, w, bias, gain, y],
            |s, t| {
                let (x, w, bias, gain, y) = (
                    t.param(s, x),
                    t.param(s, w),
                    t.param(s, bias),
                    t.param(s, gain),
                    t.param(s, y),
                );
                let h = t.matmul(x, w)?;
                let h = t.add_bias(h, bias)?;
                let h = t.layer_norm(h, gain, bias)?;
                let h = t.gelu(h);
                let scores = t.matmul_nt(h, x)?;
                let m = t.constant(mask.clone());
                let lr = t.leaky_relu(scores, 0.2)?;
                let att = t.masked_row_softmax(lr, m)?;
                let mixed = t.matmul(att, h)?;
                let th = t.tanh(mixed);
                let both = t.concat_rows(&[th, y])?;
                let wide = t.concat_cols(&[both, both])?;
                let cut = t.slice_cols(wide, 1, 5)?;
                let top = t.slice_rows(cut, 1, 5)?;
                let sel = t.select_rows(top, &[Some(2), None, Some(0), Some(2)])?;
                let prod = t.mul(sel, top)?;
                let sc = t.scale(prod, 0.7);
                let ce = t.cross_entropy(sc, &[0, 3, 1, 2])?;
                let tot = t.sum(sc);
                let tot = t.scale(tot, 0.1);
                t.add(ce, tot)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert!(report.checked > 30);
    }
}
