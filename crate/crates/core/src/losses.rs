//! Training objectives: masked-patch reconstruction, InfoNCE over pooled
//! embeddings, the SimSiam and VicReg baselines, the contrastive weight
//! schedule and the combined report.
//!
//! Every loss comes as a plain function returning the value and a `_grad`
//! twin returning the value together with analytic gradients. The autodiff
//! graph wraps the `_grad` forms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::MaskPlan;
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, matmul_nt, Tensor};

/// Tolerance on row norms accepted by the unit-sphere losses.
pub const UNIT_NORM_TOL: f64 = 1e-4;

fn check_pair<T: Scalar>(p: &Tensor<T>, z: &Tensor<T>, min_rows: usize) -> Result<(usize, usize)> {
    if p.shape() != z.shape() || p.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "embedding batches must be matching [N, D] arrays, got {:?} and {:?}",
            p.shape(),
            z.shape()
        )));
    }
    let (n, d) = (p.rows(), p.cols());
    if n < min_rows {
        return Err(Error::Invalid(format!(
            "batch of {n} rows; at least {min_rows} required"
        )));
    }
    Ok((n, d))
}

fn check_unit_rows<T: Scalar>(x: &Tensor<T>, name: &str) -> Result<()> {
    for r in 0..x.rows() {
        let norm = x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt().as_f64();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Invalid(format!(
                "row {r} of {name} has norm {norm:.6}; unit rows required"
            )));
        }
    }
    Ok(())
}

/// Per-token weights (1 = masked, 0 = visible) for a batch of plans, laid out
/// row-major as `[N, L]`.
pub fn mask_weights<T: Scalar>(plans: &[MaskPlan]) -> Vec<T> {
    let mut w = Vec::new();
    for plan in plans {
        let mut row = vec![T::zero(); plan.len()];
        for &k in plan.masked_idx() {
            row[k] = T::one();
        }
        w.extend(row);
    }
    w
}

/// Mean over masked tokens of the per-token mean squared error.
///
/// `pred` and `target` are `[N, L, P]`; `plans` holds one plan per sample.
pub fn recon_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, plans: &[MaskPlan]) -> Result<T> {
    let w = mask_weights(plans);
    recon_loss_weighted_grad(pred, target, &w).map(|(l, _)| l)
}

/// Reconstruction loss with explicit token weights; returns the gradient with
/// respect to `pred`.
pub fn recon_loss_weighted_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    weights: &[T],
) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let rows = pred.rows();
    let p = pred.cols();
    if weights.len() != rows {
        return Err(Error::Shape(format!(
            "{} token weights for {rows} tokens",
            weights.len()
        )));
    }
    let denom: T = weights.iter().copied().sum();
    if denom <= T::zero() {
        return Err(Error::Invalid("no masked tokens to reconstruct".into()));
    }
    let pdim = T::of(p as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(pred.shape());
    for r in 0..rows {
        let w = weights[r];
        if w == T::zero() {
            continue;
        }
        let (pr, tr) = (pred.row(r), target.row(r));
        let mut sq = T::zero();
        let g = grad.row_mut(r);
        for j in 0..p {
            let e = pr[j] - tr[j];
            sq += e * e;
            g[j] = T::of(2.0) * e * w / (pdim * denom);
        }
        loss += w * sq / pdim;
    }
    Ok((loss / denom, grad))
}

/// Normalizes each target patch to zero mean and unit variance.
pub fn normalize_patch_targets<T: Scalar>(target: &Tensor<T>) -> Tensor<T> {
    let mut out = target.clone();
    let eps = T::of(1e-6);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = T::of(row.len() as f64);
        let mean = row.iter().copied().sum::<T>() / n;
        // unbiased, matching the usual MAE recipe
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>()
            / T::of((row.len().max(2) - 1) as f64);
        let scale = (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / scale;
        }
    }
    out
}

/// Symmetric InfoNCE over the `2N` embeddings `[p; z]`.
///
/// Each embedding is an anchor whose positive is its pair partner; the
/// denominator runs over every other embedding in the batch.
pub fn info_nce<T: Scalar>(p: &Tensor<T>, z: &Tensor<T>, tau: T) -> Result<T> {
    if !(tau > T::zero()) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    info_nce_grad(p, z, T::one() / tau).map(|g| g.loss)
}

pub struct InfoNceGrad<T> {
    pub loss: T,
    pub d_p: Tensor<T>,
    pub d_z: Tensor<T>,
    /// Derivative with respect to the inverse temperature.
    pub d_inv_temp: T,
}

/// InfoNCE with logits `e_a · e_k · inv_temp`, plus gradients.
pub fn info_nce_grad<T: Scalar>(p: &Tensor<T>, z: &Tensor<T>, inv_temp: T) -> Result<InfoNceGrad<T>> {
    let (n, d) = check_pair(p, z, 2)?;
    check_unit_rows(p, "p")?;
    check_unit_rows(z, "z")?;
    let m = 2 * n;
    let mut e = Vec::with_capacity(m * d);
    e.extend_from_slice(p.data());
    e.extend_from_slice(z.data());

    let mut gram = vec![T::zero(); m * m];
    matmul_nt(&e, &e, &mut gram, m, d, m);

    // coef[a, k] = d loss_a / d logit_ak
    let mut coef = vec![T::zero(); m * m];
    let mut loss = T::zero();
    let mut d_inv = T::zero();
    for a in 0..m {
        let partner = if a < n { a + n } else { a - n };
        let row = &gram[a * m..(a + 1) * m];
        let mut mx = T::neg_infinity();
        for (k, &g) in row.iter().enumerate() {
            if k != a {
                mx = mx.max(g * inv_temp);
            }
        }
        let mut denom = T::zero();
        for (k, &g) in row.iter().enumerate() {
            if k != a {
                denom += (g * inv_temp - mx).exp();
            }
        }
        let lse = mx + denom.ln();
        loss += lse - row[partner] * inv_temp;
        let crow = &mut coef[a * m..(a + 1) * m];
        for (k, &g) in row.iter().enumerate() {
            if k == a {
                continue;
            }
            let mut c = (g * inv_temp - lse).exp();
            if k == partner {
                c -= T::one();
            }
            crow[k] = c;
            d_inv += c * g;
        }
    }
    let scale = T::one() / T::of(m as f64);
    // d logit_ak / d e_a = inv_temp · e_k, and symmetrically for e_k
    let mut sym = vec![T::zero(); m * m];
    for a in 0..m {
        for k in 0..m {
            sym[a * m + k] = (coef[a * m + k] + coef[k * m + a]) * inv_temp * scale;
        }
    }
    let mut de = vec![T::zero(); m * d];
    matmul_nn(&sym, &e, &mut de, m, m, d);
    let d_z = Tensor::new(vec![n, d], de.split_off(n * d))?;
    let d_p = Tensor::new(vec![n, d], de)?;
    Ok(InfoNceGrad {
        loss: loss * scale,
        d_p,
        d_z,
        d_inv_temp: d_inv * scale,
    })
}

/// Negative-free SimSiam objective: mean over the batch of `2(1 − p_i·z_i)`.
pub fn simsiam_loss<T: Scalar>(p: &Tensor<T>, z: &Tensor<T>) -> Result<T> {
    simsiam_loss_grad(p, z).map(|(l, _)| l)
}

/// SimSiam value and gradient with respect to `p`. `z` is a constant
/// (stop-gradient) so no gradient is returned for it.
pub fn simsiam_loss_grad<T: Scalar>(p: &Tensor<T>, z: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let (n, _) = check_pair(p, z, 1)?;
    check_unit_rows(p, "p")?;
    check_unit_rows(z, "z")?;
    let nn = T::of(n as f64);
    let mut loss = T::zero();
    let mut d_p = Tensor::zeros(p.shape());
    for i in 0..n {
        let dot: T = p.row(i).iter().zip(z.row(i)).map(|(&a, &b)| a * b).sum();
        loss += T::of(2.0) * (T::one() - dot);
        for (g, &zv) in d_p.row_mut(i).iter_mut().zip(z.row(i)) {
            *g = -T::of(2.0) * zv / nn;
        }
    }
    Ok((loss / nn, d_p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VicRegCoeffs {
    pub lambda_inv: f64,
    pub mu: f64,
    pub nu: f64,
    /// Target standard deviation; fixed to 1.
    pub gamma: f64,
    pub eps: f64,
}

impl Default for VicRegCoeffs {
    fn default() -> Self {
        Self {
            lambda_inv: 25.0,
            mu: 25.0,
            nu: 1.0,
            gamma: 1.0,
            eps: 1e-4,
        }
    }
}

impl VicRegCoeffs {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_inv, self.mu, self.nu, self.gamma, self.eps];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "VicReg coefficients must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Unweighted VicReg terms plus the weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VicRegTerms<T> {
    pub invariance: T,
    pub variance_p: T,
    pub variance_z: T,
    pub covariance_p: T,
    pub covariance_z: T,
    pub total: T,
}

pub fn vicreg_loss<T: Scalar>(p: &Tensor<T>, z: &Tensor<T>, coeffs: &VicRegCoeffs) -> Result<VicRegTerms<T>> {
    vicreg_loss_grad(p, z, coeffs).map(|(t, _, _)| t)
}

/// Variance hinge and off-diagonal covariance penalty for one branch, with
/// the gradient of `mu·v + nu·c`.
fn vicreg_branch<T: Scalar>(x: &Tensor<T>, c: &VicRegCoeffs) -> (T, T, Tensor<T>) {
    let (n, d) = (x.rows(), x.cols());
    let nn = T::of(n as f64);
    let nm1 = T::of((n - 1) as f64);
    let dd = T::of(d as f64);
    let mut mean = vec![T::zero(); d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= nn;
    }
    let mut xc = x.clone();
    for i in 0..n {
        for (v, &m) in xc.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    // covariance, unbiased
    let mut cov = vec![T::zero(); d * d];
    crate::tensor::matmul_tn(xc.data(), xc.data(), &mut cov, n, d, d);
    for v in cov.iter_mut() {
        *v /= nm1;
    }
    let gamma = T::of(c.gamma);
    let eps = T::of(c.eps);
    let mu = T::of(c.mu);
    let nu = T::of(c.nu);

    let mut var_term = T::zero();
    let mut d_std = vec![T::zero(); d];
    for l in 0..d {
        let s = (cov[l * d + l] + eps).sqrt();
        let h = gamma - s;
        if h > T::zero() {
            var_term += h;
            // d(-s)/d var = -1 / (2 s)
            d_std[l] = -T::one() / (T::of(2.0) * s);
        }
    }
    var_term /= dd;

    let mut cov_term = T::zero();
    let mut g_cov = vec![T::zero(); d * d];
    for l in 0..d {
        for k in 0..d {
            if l != k {
                let v = cov[l * d + k];
                cov_term += v * v;
                g_cov[l * d + k] = nu * T::of(2.0) * v / dd;
            }
        }
    }
    cov_term /= dd;

    // d/dX of nu·c: 2 Xc G / (n-1) with G symmetric
    let mut grad = vec![T::zero(); n * d];
    matmul_nn(xc.data(), &g_cov, &mut grad, n, d, d);
    for v in grad.iter_mut() {
        *v = *v * T::of(2.0) / nm1;
    }
    // d/dX of mu·v: per-dim var derivative 2 (x - mean) / (n - 1)
    for i in 0..n {
        let xr = xc.row(i);
        for l in 0..d {
            if d_std[l] != T::zero() {
                grad[i * d + l] += mu / dd * d_std[l] * T::of(2.0) * xr[l] / nm1;
            }
        }
    }
    (var_term, cov_term, Tensor::new(vec![n, d], grad).expect("shape"))
}

/// VicReg value and gradients with respect to both branches.
pub fn vicreg_loss_grad<T: Scalar>(
    p: &Tensor<T>,
    z: &Tensor<T>,
    coeffs: &VicRegCoeffs,
) -> Result<(VicRegTerms<T>, Tensor<T>, Tensor<T>)> {
    let (n, d) = check_pair(p, z, 2)?;
    coeffs.validate()?;
    let nn = T::of(n as f64);
    let lam = T::of(coeffs.lambda_inv);
    let mut inv = T::zero();
    let mut d_p = Tensor::zeros(&[n, d]);
    let mut d_z = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..d {
            let e = p.row(i)[j] - z.row(i)[j];
            inv += e * e;
            let g = lam * T::of(2.0) * e / nn;
            d_p.row_mut(i)[j] = g;
            d_z.row_mut(i)[j] = -g;
        }
    }
    inv /= nn;
    let (vp, cp, gp) = vicreg_branch(p, coeffs);
    let (vz, cz, gz) = vicreg_branch(z, coeffs);
    d_p.add_assign(&gp);
    d_z.add_assign(&gz);
    let total = lam * inv + T::of(coeffs.mu) * (vp + vz) + T::of(coeffs.nu) * (cp + cz);
    Ok((
        VicRegTerms {
            invariance: inv,
            variance_p: vp,
            variance_z: vz,
            covariance_p: cp,
            covariance_z: cz,
            total,
        },
        d_p,
        d_z,
    ))
}

/// Cross-entropy against soft targets (label smoothing, mixup), averaged over
/// rows. Returns the loss and the gradient with respect to the logits.
pub fn soft_cross_entropy_grad<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let n = logits.rows();
    let nn = T::of(n as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(logits.shape());
    for i in 0..n {
        let row = logits.row(i);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        let t = targets.row(i);
        let g = grad.row_mut(i);
        for c in 0..row.len() {
            loss -= t[c] * (row[c] - lse);
            g[c] = ((row[c] - lse).exp() - t[c]) / nn;
        }
    }
    Ok((loss / nn, grad))
}

/// Step (or ramped) schedule that keeps the contrastive term off for the first
/// part of training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaSchedule {
    pub lambda_max: f64,
    pub switch_fraction: f64,
    /// When set, λ rises linearly from 0 to `lambda_max` over this fraction of
    /// training, starting at the switch epoch.
    pub ramp_fraction: Option<f64>,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            lambda_max: 0.025,
            switch_fraction: 0.25,
            ramp_fraction: None,
        }
    }
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.switch_fraction) {
            return Err(Error::Config(format!(
                "switch_fraction {} outside [0, 1]",
                self.switch_fraction
            )));
        }
        if !(self.lambda_max.is_finite() && self.lambda_max >= 0.0) {
            return Err(Error::Config(format!("lambda_max {} must be >= 0", self.lambda_max)));
        }
        if let Some(r) = self.ramp_fraction {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("ramp_fraction {r} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn at(&self, epoch: usize, total_epochs: usize) -> Result<f64> {
        self.validate()?;
        if epoch >= total_epochs.max(1) {
            return Err(Error::Invalid(format!(
                "epoch {epoch} outside [0, {total_epochs})"
            )));
        }
        // ceil with slack so that 0.1 * 30 lands on epoch 3, not 4
        let switch = (self.switch_fraction * total_epochs as f64 - 1e-9).ceil().max(0.0) as usize;
        if epoch < switch {
            return Ok(0.0);
        }
        match self.ramp_fraction {
            None => Ok(self.lambda_max),
            Some(r) => {
                let len = (r * total_epochs as f64).max(1.0);
                let t = ((epoch - switch + 1) as f64 / len).min(1.0);
                Ok(self.lambda_max * t)
            }
        }
    }
}

/// Step schedule: 0 before `switch_fraction · total_epochs`, `lambda_max` after.
pub fn lambda_schedule(epoch: usize, total_epochs: usize, lambda_max: f64, switch_fraction: f64) -> Result<f64> {
    LambdaSchedule {
        lambda_max,
        switch_fraction,
        ramp_fraction: None,
    }
    .at(epoch, total_epochs)
}

/// Per-step loss breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub contrastive: f64,
    pub lambda_effective: f64,
    pub total: f64,
}

pub fn combined_loss(recon: f64, contrastive: f64, lambda_effective: f64) -> Result<LossReport> {
    for (term, v) in [
        ("recon", recon),
        ("contrastive", contrastive),
        ("lambda", lambda_effective),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: term.into(),
                detail: format!(
                    "recon={recon} contrastive={contrastive} lambda={lambda_effective}"
                ),
            });
        }
    }
    Ok(LossReport {
        recon,
        contrastive,
        lambda_effective,
        total: recon + lambda_effective * contrastive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut t = Tensor::from_fn(&[n, d], |i| ((i as f64 + 1.0) * (seed as f64 + 0.7) * 1.618).sin());
        for r in 0..n {
            let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            t.row_mut(r).iter_mut().for_each(|v| *v /= norm);
        }
        t
    }

    #[test]
    fn recon_zero_when_prediction_matches() {
        let x = Tensor::from_fn(&[4, 3], |i| i as f64);
        let (l, _) = recon_loss_weighted_grad(&x, &x, &[1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn recon_hand_computed_mean_of_ones() {
        // N=1, L=2, token 1 masked, residual all ones
        let target = Tensor::zeros(&[2, 5]);
        let mut pred = Tensor::<f64>::zeros(&[2, 5]);
        pred.row_mut(1).iter_mut().for_each(|v| *v = 1.0);
        pred.row_mut(0).iter_mut().for_each(|v| *v = 7.0);
        let (l, _) = recon_loss_weighted_grad(&pred, &target, &[0.0, 1.0]).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn recon_rejects_no_masked_tokens() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(recon_loss_weighted_grad(&x, &x, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn info_nce_identical_embeddings_is_ln3() {
        let e = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let l = info_nce(&e, &e, 1.0).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_rejects_bad_inputs() {
        let e = unit_rows(1, 3, 1);
        assert!(info_nce(&e, &e, 0.1).is_err());
        let raw = Tensor::from_fn(&[2, 3], |i| i as f64 + 1.0);
        assert!(info_nce(&raw, &raw, 0.1).is_err());
        let e = unit_rows(2, 3, 1);
        assert!(info_nce(&e, &e, 0.0).is_err());
    }

    #[test]
    fn info_nce_vanishes_for_separated_pairs_at_low_temperature() {
        let mut e = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            e.row_mut(i)[i] = 1.0;
        }
        let l = info_nce(&e, &e, 0.01).unwrap();
        assert!(l < 1e-30, "{l}");
    }

    #[test]
    fn simsiam_anchor_values() {
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let orth = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(simsiam_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(simsiam_loss(&p, &orth).unwrap(), 2.0);
        let neg = p.map(|v| -v);
        assert_eq!(simsiam_loss(&p, &neg).unwrap(), 4.0);
    }

    #[test]
    fn vicreg_identical_rows_variance() {
        let x = Tensor::from_fn(&[4, 3], |i| (i % 3) as f64 * 0.2);
        let t = vicreg_loss(&x, &x, &VicRegCoeffs::default()).unwrap();
        assert_relative_eq!(t.variance_p, 1.0 - 1e-4f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(t.variance_z, 0.99, epsilon = 1e-12);
        assert_eq!(t.covariance_p, 0.0);
        assert_eq!(t.invariance, 0.0);
    }

    #[test]
    fn vicreg_hinge_inactive_with_wide_spread() {
        // columns with std well above 1, uncorrelated
        let p = Tensor::new(vec![4, 2], vec![3.0, 3.0, -3.0, 3.0, 3.0, -3.0, -3.0, -3.0]).unwrap();
        let t = vicreg_loss(&p, &p, &VicRegCoeffs::default()).unwrap();
        assert_eq!(t.variance_p, 0.0);
        assert_eq!(t.covariance_p, 0.0);
        assert!(vicreg_loss(&unit_rows(1, 2, 0), &unit_rows(1, 2, 0), &VicRegCoeffs::default()).is_err());
    }

    #[test]
    fn lambda_schedule_table_values() {
        assert_eq!(lambda_schedule(199, 800, 0.025, 0.25).unwrap(), 0.0);
        assert_eq!(lambda_schedule(200, 800, 0.025, 0.25).unwrap(), 0.025);
        assert_eq!(lambda_schedule(0, 800, 0.025, 0.0).unwrap(), 0.025);
        assert_eq!(lambda_schedule(3, 30, 1.0, 0.1).unwrap(), 1.0);
        assert!(lambda_schedule(0, 800, 0.025, 1.5).is_err());
        assert!(lambda_schedule(800, 800, 0.025, 0.25).is_err());
    }

    #[test]
    fn lambda_ramp_reaches_max() {
        let s = LambdaSchedule {
            lambda_max: 1.0,
            switch_fraction: 0.5,
            ramp_fraction: Some(0.2),
        };
        assert_eq!(s.at(4, 10).unwrap(), 0.0);
        assert_eq!(s.at(5, 10).unwrap(), 0.5);
        assert_eq!(s.at(6, 10).unwrap(), 1.0);
        assert_eq!(s.at(9, 10).unwrap(), 1.0);
    }

    #[test]
    fn combined_loss_arithmetic_and_errors() {
        let r = combined_loss(1.0, 2.0, 0.025).unwrap();
        assert!((r.total - 1.05).abs() < 1e-15);
        assert_eq!(combined_loss(0.7, 3.0, 0.0).unwrap().total, 0.7);
        let err = combined_loss(1.0, f64::NAN, 0.1).unwrap_err().to_string();
        assert!(err.contains("contrastive"), "{err}");
    }
}
