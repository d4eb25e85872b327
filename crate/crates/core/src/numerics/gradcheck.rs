//! Central finite differences, computed by perturbing tape leaves and
//! replaying the forward pass. Independent of the backward sweep it checks.

use super::{ParamSet, Tape, Tensor, Var};
use crate::error::Result;

/// Step used for every central difference.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively, so
/// exact-zero gradients do not divide by zero.
const MAGNITUDE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries_checked += other.entries_checked;
        if other.max_relative_error > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
            if other.worst.is_some() && other.max_relative_error >= self.max_relative_error {
                self.worst = other.worst;
            }
        }
    }
}

/// Numeric gradient of `loss` with respect to every trainable leaf.
pub fn central_difference(tape: &mut Tape, loss: Var, step: f64) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, leaf) in tape.param_leaves() {
        let original = tape.value(leaf).clone();
        let mut grad = vec![0.0; original.numel()];
        for (i, g) in grad.iter_mut().enumerate() {
            let mut plus = original.data().to_vec();
            plus[i] += step;
            tape.set_leaf(leaf, Tensor::new(original.shape().to_vec(), plus)?)?;
            tape.replay()?;
            let f_plus = tape.value(loss).data()[0];

            let mut minus = original.data().to_vec();
            minus[i] -= step;
            tape.set_leaf(leaf, Tensor::new(original.shape().to_vec(), minus)?)?;
            tape.replay()?;
            let f_minus = tape.value(loss).data()[0];

            *g = (f_plus - f_minus) / (2.0 * step);
        }
        tape.set_leaf(leaf, original.clone())?;
        let g = Tensor::new(original.shape().to_vec(), grad)?;
        match out.get_mut(&name) {
            Some(existing) => existing.add_assign(&g),
            None => {
                out.insert(name, g);
            }
        }
    }
    tape.replay()?;
    Ok(out)
}

/// Compares the backward sweep against central differences for every
/// trainable leaf on `tape`.
pub fn check_tape(tape: &mut Tape, loss: Var) -> Result<GradCheckReport> {
    let analytic = tape.backward(loss)?.into_named();
    let numeric = central_difference(tape, loss, FD_STEP)?;
    let mut report = GradCheckReport::default();
    for (name, a) in analytic.iter() {
        let n = numeric.require(name)?;
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let err = relative_error(av, nv);
            report.entries_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Checks every differentiable tape operation in isolation. Each op's output
/// is reduced to a scalar through a fixed random weighting so that no output
/// entry's gradient is trivially uniform.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use rand::{Rng as _, SeedableRng};
    let mut rng = crate::rng::Rng::seed_from_u64(seed);
    let mut random = |rows: usize, cols: usize, lo: f64, hi: f64| {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::matrix(rows, cols, data)
    };
    let a = random(3, 4, -1.0, 1.0)?;
    let b = random(3, 4, -1.0, 1.0)?;
    let m = random(4, 2, -1.0, 1.0)?;
    let row = random(1, 4, -1.0, 1.0)?;
    let probs = random(1, 4, 0.1, 0.9)?;
    let weights: Vec<Tensor> = [(3, 4), (3, 2), (4, 3), (3, 6), (1, 4), (1, 1)]
        .iter()
        .map(|&(r, c)| random(r, c, -1.0, 1.0))
        .collect::<Result<_>>()?;
    let weight_for = |t: &Tensor| -> Option<Tensor> {
        weights.iter().find(|w| w.shape() == t.shape()).cloned()
    };

    type Build = fn(&mut Tape, [Var; 4]) -> Result<Var>;
    let cases: [(&'static str, Build); 19] = [
        ("matmul", |t, [a, _, m, _]| t.matmul(a, m)),
        ("transpose", |t, [a, ..]| t.transpose(a)),
        ("add", |t, [a, b, ..]| t.add(a, b)),
        ("sub", |t, [a, b, ..]| t.sub(a, b)),
        ("mul", |t, [a, b, ..]| t.mul(a, b)),
        ("add_row", |t, [a, _, _, r]| t.add_row(a, r)),
        ("mul_row", |t, [a, _, _, r]| t.mul_row(a, r)),
        ("scale", |t, [a, ..]| t.scale(a, 1.7)),
        ("sigmoid", |t, [a, ..]| t.sigmoid(a)),
        ("exp", |t, [a, ..]| t.exp(a)),
        ("concat_cols", |t, [a, _, m, _]| {
            let am = t.matmul(a, m)?;
            t.concat_cols(am, a)
        }),
        ("repeat_rows", |t, [_, _, _, r]| t.repeat_rows(r, 3)),
        ("softmax_rows", |t, [a, ..]| t.softmax_rows(a)),
        ("layer_norm_rows", |t, [a, ..]| t.layer_norm_rows(a, 1e-5)),
        ("mean_rows", |t, [a, ..]| t.mean_rows(a)),
        ("sum", |t, [a, ..]| t.sum(a)),
        ("mean", |t, [a, ..]| t.mean(a)),
        ("dense", |t, [a, _, m, r]| {
            let rt = t.transpose(r)?;
            let w = t.matmul(rt, r)?;
            let x = t.dense(a, w, r)?;
            t.matmul(x, m)
        }),
        ("mse", |t, [a, b, ..]| t.mse(a, b)),
    ];

    let mut out = Vec::with_capacity(cases.len() + 1);
    for (name, build) in cases {
        let mut tape = Tape::new();
        let vars = [
            tape.param("a", a.clone()),
            tape.param("b", b.clone()),
            tape.param("m", m.clone()),
            tape.param("r", row.clone()),
        ];
        let y = build(&mut tape, vars)?;
        let w = weight_for(tape.value(y))
            .ok_or_else(|| crate::Error::shape(format!("no weighting for {name}")))?;
        let w = tape.constant(w);
        let weighted = tape.mul(y, w)?;
        let loss = tape.sum(weighted)?;
        out.push((name, check_tape(&mut tape, loss)?));
    }

    let mut tape = Tape::new();
    let p = tape.param("p", probs);
    let loss = tape.nll(p, 2, 1e-12)?;
    out.push(("nll", check_tape(&mut tape, loss)?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn composite_chain_matches_finite_differences() {
        let mut tape = Tape::new();
        let w = tape.param(
            "w",
            Tensor::from_rows(&[[0.3, -0.8, 0.1], [0.5, 0.2, -0.4]]).unwrap(),
        );
        let b = tape.param("b", Tensor::from_rows(&[[0.05, -0.1, 0.2]]).unwrap());
        let v = tape.param("v", Tensor::from_rows(&[[0.7], [-0.3], [0.9], [0.4], [-0.6]]).unwrap());
        let x = tape.constant(Tensor::from_rows(&[[1.0, -2.0], [0.5, 0.25]]).unwrap());
        let h = tape.dense(x, w, b).unwrap();
        let s = tape.sigmoid(h).unwrap();
        let cat = tape.concat_cols(s, x).unwrap();
        let y = tape.matmul(cat, v).unwrap();
        let e = tape.exp(y).unwrap();
        let loss = tape.sum(e).unwrap();
        let report = check_tape(&mut tape, loss).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
        assert_eq!(report.entries_checked, 6 + 3 + 5);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let suite = op_suite(5).unwrap();
        assert_eq!(suite.len(), 20);
        for (name, report) in suite {
            assert!(report.entries_checked > 0, "{name}");
            assert!(report.max_relative_error < 1e-4, "{name}: {report:?}");
        }
    }
}
