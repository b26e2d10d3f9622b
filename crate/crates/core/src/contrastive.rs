//! Contrastive objectives over (anchor, positive) hidden-state pairs.
//!
//! Two interchangeable losses: an InfoNCE form that treats the other
//! positives in the batch as negatives, and a negative-free form that is
//! just the squared distance between L2-normalized vectors — equivalently
//! `2 - 2 cos`. Both are combined with the classification loss as
//! `ce + lambda * cl`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, softmax_inplace, Tensor};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClMode {
    Off,
    InfoNce,
    #[default]
    NegativeFree,
}

/// Which hidden row feeds the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClVector {
    #[default]
    Cls,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLossConfig {
    pub mode: ClMode,
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Treat the positive branch as a fixed target (no gradient through it).
    pub stop_grad_positive: bool,
    pub cl_vector: ClVector,
}

impl Default for JointLossConfig {
    fn default() -> JointLossConfig {
        JointLossConfig {
            mode: ClMode::NegativeFree,
            lambda: 1.0,
            tau: 0.05,
            stop_grad_positive: false,
            cl_vector: ClVector::Cls,
        }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lambda must be finite and >= 0".into()));
        }
        if self.mode == ClMode::InfoNce && !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be finite and > 0".into()));
        }
        Ok(())
    }

    /// Whether training should build positive views and apply the
    /// contrastive term at all.
    pub fn active(&self) -> bool {
        self.mode != ClMode::Off && self.lambda != 0.0
    }
}

pub fn joint_loss(ce: f64, cl: f64, lambda: f64) -> f64 {
    ce + lambda * cl
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Err(Error::DegenerateNorm(na.min(nb)));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Cosine similarity plus its gradients in both arguments.
fn cosine_sim_grads(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Err(Error::DegenerateNorm(na.min(nb)));
    }
    let c = dot(a, b) / (na * nb);
    let da: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - c * ai / (na * na))
        .collect();
    let db: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai / (na * nb) - c * bi / (nb * nb))
        .collect();
    Ok((c, da, db))
}

/// A batch of anchor/positive representation pairs, row `i` of each tensor
/// belonging to the same example.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
}

impl PairBatch {
    pub fn new(anchors: Tensor, positives: Tensor) -> Result<PairBatch> {
        if anchors.shape != positives.shape {
            return Err(Error::InvalidConfig(format!(
                "anchor shape {:?} != positive shape {:?}",
                anchors.shape, positives.shape
            )));
        }
        if anchors.rows() == 0 {
            return Err(Error::InvalidConfig("empty pair batch".into()));
        }
        Ok(PairBatch { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows() == 0
    }
}

/// Mean InfoNCE over the batch: each anchor must pick out its own positive
/// among all positives, similarities being cosines over temperature `tau`.
pub fn infonce_loss(batch: &PairBatch, tau: f64) -> Result<f64> {
    Ok(infonce_loss_and_grads(batch, tau)?.0)
}

/// Returns `(loss, d anchors, d positives)`.
pub fn infonce_loss_and_grads(batch: &PairBatch, tau: f64) -> Result<(f64, Tensor, Tensor)> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidConfig("tau must be finite and > 0".into()));
    }
    let n = batch.len();
    let d = batch.anchors.cols();
    // cos[i][j], plus gradients of each entry in h_i and hp_j.
    let mut cos = vec![vec![0.0; n]; n];
    let mut dcos_da = vec![vec![Vec::new(); n]; n];
    let mut dcos_db = vec![vec![Vec::new(); n]; n];
    for i in 0..n {
        for j in 0..n {
            let (c, da, db) = cosine_sim_grads(batch.anchors.row(i), batch.positives.row(j))?;
            cos[i][j] = c;
            dcos_da[i][j] = da;
            dcos_db[i][j] = db;
        }
    }
    let mut loss = 0.0;
    let mut d_anchors = Tensor::zeros(&[n, d]);
    let mut d_positives = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let mut p: Vec<f64> = (0..n).map(|j| cos[i][j] / tau).collect();
        let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + p.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_z - cos[i][i] / tau;
        softmax_inplace(&mut p);
        for j in 0..n {
            // d loss / d cos[i][j], averaged over the batch.
            let dc = (p[j] - if i == j { 1.0 } else { 0.0 }) / (n as f64 * tau);
            for k in 0..d {
                d_anchors.row_mut(i)[k] += dc * dcos_da[i][j][k];
                d_positives.row_mut(j)[k] += dc * dcos_db[i][j][k];
            }
        }
    }
    Ok((loss / n as f64, d_anchors, d_positives))
}

/// Mean negative-free loss: `2 - 2 cos(h_i, hp_i)`, the squared distance
/// between the normalized vectors. No other batch rows are involved.
pub fn negative_free_loss(batch: &PairBatch) -> Result<f64> {
    Ok(negative_free_loss_and_grads(batch)?.0)
}

/// Returns `(loss, d anchors, d positives)`.
pub fn negative_free_loss_and_grads(batch: &PairBatch) -> Result<(f64, Tensor, Tensor)> {
    let n = batch.len();
    let d = batch.anchors.cols();
    let mut loss = 0.0;
    let mut d_anchors = Tensor::zeros(&[n, d]);
    let mut d_positives = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let (c, da, db) = cosine_sim_grads(batch.anchors.row(i), batch.positives.row(i))?;
        loss += 2.0 - 2.0 * c;
        let dc = -2.0 / n as f64;
        for k in 0..d {
            d_anchors.row_mut(i)[k] += dc * da[k];
            d_positives.row_mut(i)[k] += dc * db[k];
        }
    }
    Ok((loss / n as f64, d_anchors, d_positives))
}

/// Dispatches on the configured mode. `Off` contributes nothing.
pub fn contrastive_loss_and_grads(
    batch: &PairBatch,
    cfg: &JointLossConfig,
) -> Result<(f64, Tensor, Tensor)> {
    match cfg.mode {
        ClMode::Off => Ok((
            0.0,
            Tensor::zeros(&batch.anchors.shape),
            Tensor::zeros(&batch.positives.shape),
        )),
        ClMode::InfoNce => infonce_loss_and_grads(batch, cfg.tau),
        ClMode::NegativeFree => negative_free_loss_and_grads(batch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(rows_a: Vec<Vec<f64>>, rows_b: Vec<Vec<f64>>) -> PairBatch {
        let n = rows_a.len();
        let d = rows_a[0].len();
        let a = Tensor::from_vec(&[n, d], rows_a.concat());
        let b = Tensor::from_vec(&[n, d], rows_b.concat());
        PairBatch::new(a, b).unwrap()
    }

    #[test]
    fn cosine_matches_hand_value() {
        let c = cosine_sim(&[3.0, 4.0], &[4.0, 3.0]).unwrap();
        assert!((c - 24.0 / 25.0).abs() < 1e-12);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateNorm(_))
        ));
    }

    #[test]
    fn infonce_on_orthonormal_pairs_matches_closed_form() {
        // cos matrix = identity at tau = 1: each term is log(1 + e^-1).
        let batch = pair(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let loss = infonce_loss(&batch, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn negative_free_matches_hand_value() {
        let batch = pair(vec![vec![3.0, 4.0]], vec![vec![4.0, 3.0]]);
        let loss = negative_free_loss(&batch).unwrap();
        assert!((loss - 0.08).abs() < 1e-12);
        // Identical directions: zero loss.
        let same = pair(vec![vec![1.0, 2.0]], vec![vec![2.0, 4.0]]);
        assert!(negative_free_loss(&same).unwrap().abs() < 1e-12);
    }

    #[test]
    fn off_mode_contributes_nothing() {
        let batch = pair(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]);
        let cfg = JointLossConfig {
            mode: ClMode::Off,
            ..JointLossConfig::default()
        };
        let (loss, da, db) = contrastive_loss_and_grads(&batch, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(da.data.iter().all(|&v| v == 0.0));
        assert!(db.data.iter().all(|&v| v == 0.0));
        assert!(!cfg.active());
        assert!(!JointLossConfig { lambda: 0.0, ..Default::default() }.active());
    }

    fn fd_check(
        loss_of: impl Fn(&PairBatch) -> f64,
        grads: (&Tensor, &Tensor),
        batch: &PairBatch,
    ) {
        let h = 1e-6;
        let (d_anchors, d_positives) = grads;
        for (tensor_idx, d_tensor) in [d_anchors, d_positives].into_iter().enumerate() {
            for idx in 0..d_tensor.numel() {
                let mut plus = batch.clone();
                let mut minus = batch.clone();
                let (tp, tm) = if tensor_idx == 0 {
                    (&mut plus.anchors, &mut minus.anchors)
                } else {
                    (&mut plus.positives, &mut minus.positives)
                };
                tp.data[idx] += h;
                tm.data[idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = d_tensor.data[idx];
                assert!(
                    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-5,
                    "tensor {tensor_idx} [{idx}]: analytic {an:.4e} vs fd {fd:.4e}"
                );
            }
        }
    }

    #[test]
    fn infonce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mk = |n: usize, d: usize| {
            Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let batch = PairBatch::new(mk(4, 5), mk(4, 5)).unwrap();
        let (_, da, db) = infonce_loss_and_grads(&batch, 0.07).unwrap();
        fd_check(|b| infonce_loss(b, 0.07).unwrap(), (&da, &db), &batch);
    }

    #[test]
    fn negative_free_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mk = |n: usize, d: usize| {
            Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let batch = PairBatch::new(mk(3, 6), mk(3, 6)).unwrap();
        let (_, da, db) = negative_free_loss_and_grads(&batch).unwrap();
        fd_check(|b| negative_free_loss(b).unwrap(), (&da, &db), &batch);
    }

    #[test]
    fn joint_loss_is_linear_in_lambda() {
        assert_eq!(joint_loss(1.25, 0.5, 0.0), 1.25);
        assert!((joint_loss(1.25, 0.5, 2.0) - 2.25).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_bounded_and_scale_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            s in 0.1f64..10.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let c = cosine_sim(&a, &b).unwrap();
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
            let c_rev = cosine_sim(&b, &a).unwrap();
            prop_assert!((c - c_rev).abs() < 1e-9);
            let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
            let c_scaled = cosine_sim(&scaled, &b).unwrap();
            prop_assert!((c - c_scaled).abs() < 1e-9);
        }

        #[test]
        fn negative_free_equals_normalized_squared_distance(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let batch = PairBatch::new(
                Tensor::from_vec(&[1, 6], a.clone()),
                Tensor::from_vec(&[1, 6], b.clone()),
            ).unwrap();
            let loss = negative_free_loss(&batch).unwrap();
            let (na, nb) = (norm(&a), norm(&b));
            let direct: f64 = a.iter().zip(&b).map(|(x, y)| (x / na - y / nb).powi(2)).sum();
            prop_assert!((loss - direct).abs() < 1e-9);
            prop_assert!((-1e-9..=4.0 + 1e-9).contains(&loss));
        }

        #[test]
        fn infonce_stays_inside_its_analytic_bounds(
            seed in 0u64..500,
            tau in 0.05f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 3;
            let d = 4;
            let mut mk = || Tensor::from_vec(
                &[n, d],
                (0..n * d).map(|_| rng.gen_range(-1.0f64..1.0)).collect(),
            );
            let batch = PairBatch::new(mk(), mk()).unwrap();
            let loss = infonce_loss(&batch, tau).unwrap();
            // -log p_ii with p_ii < 1 is positive; cosines in [-1, 1] cap
            // the log-sum-exp at log(n) + 2/tau.
            prop_assert!(loss > 0.0);
            prop_assert!(loss <= (n as f64).ln() + 2.0 / tau + 1e-9);
        }
    }
}
