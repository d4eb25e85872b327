//! Server-side algebra: synthesis of the global representation, relevance
//! scoring and weight aggregation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

/// Arithmetic mean of the participants' global estimates.
pub fn synthesize_global(d_hats: &[Tensor]) -> Result<Tensor> {
    let first = d_hats.first().ok_or(Error::Empty("distribution estimates"))?;
    let mut sum = first.clone();
    for d in &d_hats[1..] {
        if d.shape() != first.shape() {
            return Err(Error::DimensionMismatch(format!(
                "estimate shape {:?} differs from {:?}",
                d.shape(),
                first.shape()
            )));
        }
        sum = sum.add(d)?;
    }
    Ok(sum.map(|v| v / d_hats.len() as f64))
}

/// Max-shifted softmax. Equal inputs give exactly `1/K` each.
pub fn softmax_scores(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("relevance distances".into()));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// Softmax over participants of `|d_hat_k - d_tilde|_2`: the further an
/// estimate is from the synthesis, the larger its weight.
pub fn relevance_scores(d_hats: &[Tensor], d_tilde: &Tensor) -> Result<Vec<f64>> {
    let distances = d_hats
        .iter()
        .map(|d| {
            if d.shape() != d_tilde.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "estimate shape {:?} differs from synthesis {:?}",
                    d.shape(),
                    d_tilde.shape()
                )));
            }
            Ok(d.sub(d_tilde)?.norm2())
        })
        .collect::<Result<Vec<_>>>()?;
    softmax_scores(&distances)
}

fn check_names(params: &[&ParamSet]) -> Result<()> {
    let first = params.first().ok_or(Error::Empty("uploaded models"))?;
    for p in &params[1..] {
        let diff = first.name_difference(p);
        if !diff.is_empty() {
            return Err(Error::NameMismatch(diff));
        }
        for (name, t) in first.iter() {
            if p[name.as_str()].shape() != t.shape() {
                return Err(Error::shape(format!("`{name}` differs in shape between participants")));
            }
        }
    }
    Ok(())
}

/// `sum_k r_k * params_k` per parameter, accumulated in participant order.
pub fn aggregate_weights(params: &[&ParamSet], r: &[f64]) -> Result<ParamSet> {
    check_names(params)?;
    if r.len() != params.len() {
        return Err(Error::invalid(format!("{} weights for {} models", r.len(), params.len())));
    }
    let sum: f64 = r.iter().sum();
    if (sum - 1.0).abs() > super::WEIGHT_SUM_TOLERANCE || r.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid(format!("weights {r:?} are not a convex combination")));
    }
    let mut out = ParamSet::new();
    for (name, t) in params[0].iter() {
        let mut acc: Vec<f64> = t.data().iter().map(|v| r[0] * v).collect();
        for (p, &w) in params.iter().zip(r).skip(1) {
            for (a, v) in acc.iter_mut().zip(p[name.as_str()].data()) {
                *a += w * v;
            }
        }
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), acc)?);
    }
    Ok(out)
}

/// Layer of a parameter name: everything before the last `.`.
fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(layer, _)| layer)
}

/// Layer-wise attentive aggregation. For each layer `l` the attention over
/// participants is `softmax_k |Theta_l - Theta_k,l|_2` and the server moves
/// `Theta_l <- Theta_l - eps * sum_k a_k (Theta_l - Theta_k,l)`.
///
/// Returns the new model and the attention averaged over layers.
pub fn fedatt_step(global: &ParamSet, params: &[&ParamSet], eps: f64) -> Result<(ParamSet, Vec<f64>)> {
    check_names(params)?;
    let diff = global.name_difference(params[0]);
    if !diff.is_empty() {
        return Err(Error::NameMismatch(diff));
    }
    let mut layers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for name in global.names() {
        layers.entry(layer_of(name)).or_default().push(name);
    }
    let k = params.len();
    let mut mean_attention = vec![0.0; k];
    let mut out = ParamSet::new();
    for names in layers.values() {
        let distances: Vec<f64> = params
            .iter()
            .map(|p| {
                names
                    .iter()
                    .flat_map(|&n| global[n].data().iter().zip(p[n].data()))
                    .map(|(g, v)| (g - v) * (g - v))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let attention = softmax_scores(&distances)?;
        for (m, a) in mean_attention.iter_mut().zip(&attention) {
            *m += a / layers.len() as f64;
        }
        for &n in names {
            let g = &global[n];
            let mut step = vec![0.0; g.numel()];
            for (p, a) in params.iter().zip(&attention) {
                for ((s, gv), pv) in step.iter_mut().zip(g.data()).zip(p[n].data()) {
                    *s += a * (gv - pv);
                }
            }
            let next = g.data().iter().zip(&step).map(|(gv, s)| gv - eps * s).collect();
            out.insert(n.to_string(), Tensor::new(g.shape().to_vec(), next)?);
        }
    }
    Ok((out, mean_attention))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v.to_vec()).unwrap()
    }

    fn scalar_set(v: f64) -> ParamSet {
        [("a.w".to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    #[test]
    fn synthesis_oracles() {
        let one = row(&[0.3, -1.0]);
        assert_eq!(synthesize_global(std::slice::from_ref(&one)).unwrap(), one);
        assert_eq!(synthesize_global(&[row(&[1.0]), row(&[3.0])]).unwrap(), row(&[2.0]));
        assert!(matches!(synthesize_global(&[]), Err(Error::Empty(_))));
        assert!(matches!(
            synthesize_global(&[row(&[1.0]), row(&[1.0, 2.0])]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn relevance_hand_values() {
        let d_tilde = row(&[0.0, 0.0]);
        let r = relevance_scores(&[row(&[0.0, 0.0]), row(&[0.0, std::f64::consts::LN_2])], &d_tilde).unwrap();
        assert!((r[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(relevance_scores(&[row(&[4.0, 1.0])], &d_tilde).unwrap(), vec![1.0]);
        for k in 1..=7 {
            let same = vec![row(&[0.1, 0.7]); k];
            let d = synthesize_global(&same).unwrap();
            let r = relevance_scores(&same, &d).unwrap();
            assert!(r.iter().all(|&v| v == 1.0 / k as f64), "{r:?}");
        }
    }

    #[test]
    fn aggregation_oracles() {
        let a = scalar_set(0.0);
        let b = scalar_set(2.0);
        assert_eq!(aggregate_weights(&[&a, &b], &[0.5, 0.5]).unwrap(), scalar_set(1.0));
        assert_eq!(aggregate_weights(&[&b, &a], &[1.0, 0.0]).unwrap(), b);
        let mut c = scalar_set(1.0);
        c.insert("extra.b", Tensor::scalar(0.0));
        match aggregate_weights(&[&a, &c], &[0.5, 0.5]) {
            Err(Error::NameMismatch(names)) => assert_eq!(names, vec!["extra.b".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(aggregate_weights(&[&a, &b], &[0.7, 0.7]).is_err());
    }

    #[test]
    fn fedatt_identical_uploads_are_a_fixed_point() {
        let g: ParamSet = [
            ("l.w".to_string(), Tensor::matrix(2, 2, vec![0.5, -0.0, 3.0, -1.25]).unwrap()),
            ("l.b".to_string(), Tensor::row(vec![0.1, 0.2]).unwrap()),
            ("m.w".to_string(), Tensor::scalar(7.0)),
        ]
        .into_iter()
        .collect();
        let (next, att) = fedatt_step(&g, &[&g, &g, &g], 1.5e-3).unwrap();
        assert_eq!(next, g);
        assert!(att.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn fedatt_hand_step() {
        // One layer, two participants at distances 0 and ln 2 from the
        // global value 0: attention (1/3, 2/3), step 1 * (2/3) * ln 2.
        let g = scalar_set(0.0);
        let p = scalar_set(std::f64::consts::LN_2);
        let (next, att) = fedatt_step(&g, &[&g, &p], 1.0).unwrap();
        assert!((att[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((next["a.w"].data()[0] - 2.0 / 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn aggregation_is_convex(
            values in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..6),
            raw in prop::collection::vec(0.01f64..1.0, 6),
        ) {
            let sets: Vec<ParamSet> = values
                .iter()
                .map(|v| [("x.w".to_string(), Tensor::matrix(2, 2, v.clone()).unwrap())].into_iter().collect())
                .collect();
            let refs: Vec<&ParamSet> = sets.iter().collect();
            let r = softmax_scores(&raw[..sets.len()]).unwrap();
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let out = aggregate_weights(&refs, &r).unwrap();
            for i in 0..4 {
                let lo = values.iter().map(|v| v[i]).fold(f64::INFINITY, f64::min);
                let hi = values.iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max);
                let x = out["x.w"].data()[i];
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }

        #[test]
        fn relevance_sums_to_one(
            d in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..8),
        ) {
            let d_hats: Vec<Tensor> = d.iter().map(|v| Tensor::row(v.clone()).unwrap()).collect();
            let d_tilde = synthesize_global(&d_hats).unwrap();
            let r = relevance_scores(&d_hats, &d_tilde).unwrap();
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v > 0.0));
        }
    }
}
