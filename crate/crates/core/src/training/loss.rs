use serde::{Deserialize, Serialize};

use crate::error::{PierError, Result};
use crate::numerics::{Graph, Var, BCE_CLAMP};
use crate::ocpm::ListwisePrediction;

/// Which form of the contrastive term to optimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrastive {
    /// `−Σ (Δ_k)²`, direction-free.
    #[default]
    Squared,
    /// `−Σ max(Δ_k, 0)²`, only rewards selected scoring above unselected.
    Signed,
}

/// `Σ_t −y log ŷ − (1−y) log(1−ŷ)` with ŷ clamped to `[1e-12, 1−1e-12]`.
pub fn loss_bce(pred: &ListwisePrediction, labels: &[u8]) -> Result<f64> {
    if pred.0.len() != labels.len() {
        return Err(PierError::dim("loss_bce", &[pred.0.len()], &[labels.len()]));
    }
    Ok(pred
        .0
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum())
}

fn mean(p: &ListwisePrediction) -> f64 {
    p.0.iter().sum::<f64>() / p.0.len() as f64
}

fn pair_means(selected: &[ListwisePrediction], unselected: &[ListwisePrediction]) -> Result<Vec<f64>> {
    if selected.len() != unselected.len() {
        return Err(PierError::Contract(format!(
            "contrastive groups differ in size: {} selected vs {} unselected",
            selected.len(),
            unselected.len()
        )));
    }
    let n_d = selected.first().map_or(0, |p| p.0.len());
    if selected.iter().chain(unselected).any(|p| p.0.len() != n_d || n_d == 0) {
        return Err(PierError::Contract("contrastive predictions differ in length".into()));
    }
    Ok(selected.iter().zip(unselected).map(|(s, u)| mean(s) - mean(u)).collect())
}

/// `−Σ_k (mean ŷ_sel_k − mean ŷ_unsel_k)²` over index-aligned pairs.
pub fn loss_contrastive(selected: &[ListwisePrediction], unselected: &[ListwisePrediction]) -> Result<f64> {
    Ok(-pair_means(selected, unselected)?.iter().map(|d| d * d).sum::<f64>())
}

/// `−Σ_k max(Δ_k, 0)²`.
pub fn loss_contrastive_signed(selected: &[ListwisePrediction], unselected: &[ListwisePrediction]) -> Result<f64> {
    Ok(-pair_means(selected, unselected)?
        .iter()
        .map(|d| d.max(0.0).powi(2))
        .sum::<f64>())
}

/// Batch mean of `l1 + α·l2` over per-example `(l1, l2)` pairs.
pub fn combined_loss(per_example: &[(f64, f64)], alpha: f64) -> Result<f64> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(PierError::Config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    if per_example.is_empty() {
        return Err(PierError::Contract("combined loss over an empty batch".into()));
    }
    Ok(per_example.iter().map(|(l1, l2)| l1 + alpha * l2).sum::<f64>() / per_example.len() as f64)
}

/// Recorded contrastive term over rows of a `P × N_d` prediction matrix:
/// rows `sel..sel+k` are paired index-wise with rows `unsel..unsel+k`.
pub fn contrastive_node(g: &mut Graph<'_>, preds: Var, sel: usize, unsel: usize, k: usize, form: Contrastive) -> Result<Var> {
    let means = g.row_mean(preds);
    let s = g.slice_rows(means, sel, k)?;
    let u = g.slice_rows(means, unsel, k)?;
    let mut diff = g.sub(s, u)?;
    if form == Contrastive::Signed {
        diff = g.relu(diff);
    }
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, -1.0))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn lp(v: &[f64]) -> ListwisePrediction {
        ListwisePrediction(v.to_vec())
    }

    #[test]
    fn bce_examples() {
        let l = loss_bce(&lp(&[0.5, 0.5, 0.5]), &[1, 0, 1]).unwrap();
        assert!((l - 3.0 * 2f64.ln()).abs() < 1e-12);
        let perfect = loss_bce(&lp(&[1.0, 0.0, 1.0]), &[1, 0, 1]).unwrap();
        assert!(perfect < 4e-12 && perfect > 0.0);
        assert!(loss_bce(&lp(&[0.5]), &[1, 0]).is_err());
    }

    #[test]
    fn bce_matches_per_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..7).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<u8> = (0..7).map(|_| rng.random_range(0..2)).collect();
        let mut want = 0.0;
        for i in 0..7 {
            want += if y[i] == 1 { -(p[i]).ln() } else { -(1.0 - p[i]).ln() };
        }
        assert!((loss_bce(&lp(&p), &y).unwrap() - want).abs() < 1e-12);
        let mut g = Graph::standalone();
        let pv = g.input_raw(1, 7, p.clone()).unwrap();
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let node = g.bce(pv, &yf).unwrap();
        assert!((g.scalar(node) - want).abs() < 1e-12);
    }

    #[test]
    fn contrastive_examples() {
        let eq = loss_contrastive(&[lp(&[0.2, 0.4])], &[lp(&[0.4, 0.2])]).unwrap();
        assert_eq!(eq, 0.0);
        let l = loss_contrastive(&[lp(&[0.8, 0.8, 0.8])], &[lp(&[0.3, 0.3, 0.3])]).unwrap();
        assert!((l + 0.25).abs() < 1e-12);
        assert!(loss_contrastive(&[lp(&[0.1])], &[]).is_err());
        let s = loss_contrastive_signed(&[lp(&[0.3])], &[lp(&[0.8])]).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn contrastive_matches_direct_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_pred = || lp(&(0..3).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
        let sel = vec![rand_pred(), rand_pred()];
        let uns = vec![rand_pred(), rand_pred()];
        let m = |p: &ListwisePrediction| (p.0[0] + p.0[1] + p.0[2]) / 3.0;
        let want = -((m(&sel[0]) - m(&uns[0])).powi(2) + (m(&sel[1]) - m(&uns[1])).powi(2));
        assert!((loss_contrastive(&sel, &uns).unwrap() - want).abs() < 1e-12);

        let mut g = Graph::standalone();
        let data: Vec<f64> = sel.iter().chain(&uns).flat_map(|p| p.0.clone()).collect();
        let preds = g.input_raw(4, 3, data).unwrap();
        let node = contrastive_node(&mut g, preds, 0, 2, 2, Contrastive::Squared).unwrap();
        assert!((g.scalar(node) - want).abs() < 1e-12);
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(&[(2.0, -0.5)], 0.0).unwrap(), 2.0);
        assert!((combined_loss(&[(2.0, -0.5)], 0.1).unwrap() - 1.95).abs() < 1e-12);
        let batch = [(1.0, -0.2), (3.0, -0.6), (0.5, 0.0)];
        let want = ((1.0 - 0.02) + (3.0 - 0.06) + 0.5) / 3.0;
        assert!((combined_loss(&batch, 0.1).unwrap() - want).abs() < 1e-12);
        assert!(combined_loss(&batch, -0.1).is_err());
    }
}
