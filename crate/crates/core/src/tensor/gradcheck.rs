use std::collections::BTreeMap;

use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error. Gradient entries whose analytic
/// and numeric magnitudes are both below it are compared in absolute terms,
/// since differences of O(1) losses cannot resolve them much better than
/// roundoff/h ≈ 1e-12.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Worst-case agreement for one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Entries compared against a numeric derivative.
    pub checked: usize,
    /// Entries where every step of the ladder straddled a kink, so no
    /// finite difference exists to compare against.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Steps tried per entry, largest first: `eps`, `eps/10`, `eps/100`.
const LADDER: [f64; 3] = [1.0, 0.1, 0.01];

/// Compares the tape's gradients with the fourth-order central difference
/// `(8(L(θ+h) − L(θ−h)) − (L(θ+2h) − L(θ−2h))) / 12h` for every element of
/// every parameter.
///
/// A difference is only trusted when all four evaluations share the kink
/// pattern of the unperturbed point (see [`Graph::kink_pattern`]); otherwise
/// the next smaller step is tried, and an entry that straddles a kink at
/// every step is counted as skipped.
///
/// `loss` must be a pure function of the bound parameters: any noise, dropout
/// mask or permutation it uses has to be frozen outside the closure.
pub fn grad_check<F>(
    params: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    tolerance: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let eval = |p: &BTreeMap<String, Tensor<f64>>, track: bool| -> Result<(Graph<f64>, BTreeMap<String, Var>, Var)> {
        let mut g = Graph::new();
        let vars: BTreeMap<String, Var> = p
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), track)))
            .collect();
        let l = loss(&mut g, &vars)?;
        Ok((g, vars, l))
    };

    let (mut g, vars, l) = eval(params, true)?;
    let base_pattern = g.kink_pattern();
    g.backward(l)?;

    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (name, t) in params {
        let analytic = g
            .grad(vars[name])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        let (mut checked, mut skipped) = (0, 0);
        for i in 0..t.numel() {
            let orig = t.data()[i];
            let mut at = |offset: f64| -> Result<(f64, bool)> {
                work.get_mut(name).expect("present").data_mut()[i] = orig + offset;
                let (ge, _, le) = eval(&work, false)?;
                work.get_mut(name).expect("present").data_mut()[i] = orig;
                Ok((ge.value(le).item(), ge.kink_pattern() == base_pattern))
            };
            let mut numeric = None;
            for factor in LADDER {
                let h = eps * factor;
                let (p1, s1) = at(h)?;
                let (m1, s2) = at(-h)?;
                let (p2, s3) = at(2.0 * h)?;
                let (m2, s4) = at(-2.0 * h)?;
                if s1 && s2 && s3 && s4 {
                    numeric = Some((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            checked += 1;
            let a = analytic.data()[i];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        out.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            checked,
            skipped,
            passed: max_rel < tolerance,
        });
    }
    Ok(GradCheckReport {
        eps,
        tolerance,
        params: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Axis, Rng};

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn matmul_matches_central_differences() {
        let mut rng = Rng::new(2, "gradcheck");
        let params = BTreeMap::from([
            ("a".to_string(), random(&mut rng, 3, 4)),
            ("b".to_string(), random(&mut rng, 4, 2)),
        ]);
        let w = random(&mut rng, 3, 2);
        let report = grad_check(&params, 1e-4, 1e-6, |g, v| {
            let p = g.matmul(v["a"], v["b"])?;
            let c = g.constant(w.clone());
            let y = g.mul(p, c)?;
            let y = g.square(y)?;
            g.sum(y, Axis::All)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn every_unary_op_matches_central_differences() {
        use crate::tensor::Unary;
        let mut rng = Rng::new(8, "gradcheck");
        let x = random(&mut rng, 3, 3);
        for op in [
            Unary::LeakyRelu(0.2),
            Unary::Relu,
            Unary::Sigmoid,
            Unary::Softplus,
            Unary::Exp,
            Unary::Square,
        ] {
            let params = BTreeMap::from([("x".to_string(), x.clone())]);
            let r = grad_check(&params, 1e-4, 1e-6, |g, v| {
                let y = g.unary(v["x"], op)?;
                let y = g.log_softmax(y)?;
                g.sum(y, Axis::Rows).and_then(|s| g.sum(s, Axis::All))
            })
            .unwrap();
            let r2 = grad_check(&params, 1e-4, 1e-6, |g, v| {
                let y = g.unary(v["x"], op)?;
                let y = g.square(y)?;
                g.mean(y, Axis::All)
            })
            .unwrap();
            assert!(r.passed() && r2.passed(), "{op:?}: {r:?} {r2:?}");
        }
        let pos = x.map(|v| v.abs() + 0.5);
        let params = BTreeMap::from([("x".to_string(), pos)]);
        let r = grad_check(&params, 1e-4, 1e-6, |g, v| {
            let y = g.log(v["x"])?;
            let y = g.square(y)?;
            g.sum(y, Axis::All)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn structural_ops_match_central_differences() {
        let mut rng = Rng::new(4, "gradcheck");
        let params = BTreeMap::from([
            ("a".to_string(), random(&mut rng, 4, 2)),
            ("b".to_string(), random(&mut rng, 4, 3)),
            ("bias".to_string(), random(&mut rng, 1, 5)),
        ]);
        let r = grad_check(&params, 1e-4, 1e-6, |g, v| {
            let h = g.concat_cols(v["a"], v["b"])?;
            let h = g.add_bias(h, v["bias"])?;
            let p = g.gather_rows(h, &[3, 0, 0, 2, 1])?;
            let s = g.slice_cols(p, 1..4)?;
            let s = g.sub(s, s)?;
            let t = g.slice_cols(p, 0..3)?;
            let u = g.add(s, t)?;
            let u = g.affine(u, 0.7, 0.3)?;
            let u = g.clamp(u, -1.5, 1.5)?;
            let u = g.reshape(u, &[3, 5])?;
            let u = g.square(u)?;
            let c = g.sum(u, Axis::Cols)?;
            g.mean(c, Axis::All)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn entries_on_a_kink_are_skipped_not_failed() {
        let x = Tensor::from_rows(&[&[0.0, 1.0, -1.0, 1e-5]]).unwrap();
        let params = BTreeMap::from([("x".to_string(), x)]);
        let r = grad_check(&params, 1e-4, 1e-6, |g, v| {
            let y = g.relu(v["x"])?;
            let y = g.square(y)?;
            let y = g.affine(y, 1.0, 0.0)?;
            let s = g.sum(y, Axis::All)?;
            let lin = g.sum(v["x"], Axis::All)?;
            g.add(s, lin)
        })
        .unwrap();
        assert_eq!((r.checked(), r.skipped()), (3, 1), "{r:?}");
        assert!(r.passed(), "{r:?}");
    }
}
