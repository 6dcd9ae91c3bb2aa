use super::graph::{Graph, ParamId, ParamStore, Var};
use crate::error::{PierError, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients against central differences.
///
/// The error per entry is `|analytic − numeric| / max(1, |analytic|)`; the
/// report carries the maximum over every entry of every listed parameter.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(PierError::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        if !g.scalar(loss).is_finite() {
            return Err(PierError::Numeric {
                param: "<loss>".into(),
                detail: "non-finite loss at the base point".into(),
            });
        }
        g.backward(loss)?
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        entries_checked: 0,
    };
    for &id in params {
        let n = store.get(id).len();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(PierError::Numeric {
                    param: store.name(id).to_string(),
                    detail: format!("non-finite loss when perturbing entry {i}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id)[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Activation;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_is_near_exact() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(&[0.3, -1.2, 2.5]));
        let report = grad_check(&mut store, &[x], 1e-5, |g| {
            let v = g.param(x);
            let sq = g.square(v);
            let s = g.scale(sq, 1.5);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn sigmoid_bce_toy() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_rows(&[vec![0.4], vec![-0.9]]).unwrap());
        let b = store.add("b", Tensor::row_vector(&[0.1]));
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3], vec![2.0, -1.0]]).unwrap();
        let report = grad_check(&mut store, &[w, b], 1e-6, |g| {
            let xv = g.input(&x);
            let (wv, bv) = (g.param(w), g.param(b));
            let p = g.dense(xv, wv, bv, Activation::Sigmoid)?;
            g.bce(p, &[1.0, 0.0, 1.0])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn eps_out_of_range() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(&[1.0]));
        let r = grad_check(&mut store, &[x], 0.1, |g| {
            let v = g.param(x);
            Ok(g.sum(v))
        });
        assert!(matches!(r, Err(PierError::Contract(_))));
    }

    #[test]
    fn non_finite_names_parameter() {
        let mut store = ParamStore::new();
        let x = store.add("blowup", Tensor::row_vector(&[1e308]));
        let r = grad_check(&mut store, &[x], 1e-3, |g| {
            let v = g.param(x);
            let s = g.scale(v, 1e10);
            Ok(g.sum(s))
        });
        match r {
            Err(PierError::Numeric { param, .. }) => assert_eq!(param, "<loss>"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layout_and_attention_ops() {
        let mut store = ParamStore::new();
        let vals: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect();
        let a = store.add("a", Tensor::new(vec![6, 4], vals.clone()).unwrap());
        let b = store.add("b", Tensor::new(vec![6, 4], vals.iter().rev().map(|x| x * 0.8).collect()).unwrap());
        let report = grad_check(&mut store, &[a, b], 1e-6, |g| {
            let (av, bv) = (g.param(a), g.param(b));
            let att = g.block_attention(av, bv, av, 3)?;
            let il = g.interleave_rows(&[att, bv])?;
            let bm = g.block_mean_rows(il, 4)?;
            let gathered = g.gather_rows(bm, vec![0, 5, 5, 11])?;
            let seg = g.segment_mean(il, &[(0, 3), (3, 0), (4, 8)])?;
            let rep = g.repeat_rows(seg, 2);
            let tiled = g.tile_rows(gathered, 1);
            let head = g.slice_rows(rep, 0, 4)?;
            let prod = g.mul(head, tiled)?;
            let sm = g.softmax_rows(prod);
            let rm = g.row_mean(sm);
            let sq = g.square(rm);
            let cat = g.concat_cols(&[prod, sm])?;
            let s1 = g.sum(cat);
            let s2 = g.sum(sq);
            g.add(s1, s2)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn segment_mean_values() {
        let mut g = Graph::standalone();
        let x = g.input(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let s = g.segment_mean(x, &[(0, 2), (1, 0), (2, 1)]).unwrap();
        assert_eq!(g.value(s), &[2.0, 3.0, 0.0, 0.0, 5.0, 6.0]);
        assert!(g.segment_mean(x, &[(2, 2)]).is_err());
    }
}
