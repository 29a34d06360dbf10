//! Probabilistic reachable sets and ultimate bounds: Markov moment bounds,
//! region-of-linearity radius, the refined effective contraction rate, and
//! the rate-selection rule that feeds constraint tightening.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ellipsoid `{e : e' P e <= r}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub p: Vec<Vec<f64>>,
    pub r: f64,
}

impl Ellipsoid {
    pub fn new(p: &DMatrix<f64>, r: f64) -> Result<Self> {
        if r < 0.0 {
            return Err(Error::contract("Ellipsoid: level must be nonnegative"));
        }
        if p.clone().cholesky().is_none() {
            return Err(Error::contract("Ellipsoid: shape matrix must be SPD"));
        }
        Ok(Ellipsoid {
            p: (0..p.nrows())
                .map(|i| (0..p.ncols()).map(|j| p[(i, j)]).collect())
                .collect(),
            r,
        })
    }

    pub fn p_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            self.p.len(),
            self.p[0].len(),
            self.p.iter().flatten().copied(),
        )
    }

    pub fn contains(&self, e: &nalgebra::DVector<f64>) -> bool {
        let p = self.p_matrix();
        (e.transpose() * p * e)[(0, 0)] <= self.r
    }
}

/// Largest sublevel set of `e' P e` on which the feedback stays unsaturated.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinearityRegion {
    pub r_l: f64,
    pub v_ss: f64,
}

/// Exact trace of the matrix product `P W`.
pub fn trace_pw(p: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    if p.nrows() != w.nrows() || p.ncols() != w.ncols() || p.nrows() != p.ncols() {
        return Err(Error::contract("trace_pw: shape mismatch"));
    }
    Ok((p * w).trace())
}

/// `r_L = min_j (1 - v_ss)^2 / (K_j P^-1 K_j')` — inputs in normalized
/// units, so the saturation threshold is 1 for every channel.
pub fn region_of_linearity(
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v_ss: f64,
) -> Result<LinearityRegion> {
    if !(0.0..1.0).contains(&v_ss) {
        return Err(Error::contract(format!(
            "region_of_linearity: v_ss = {v_ss} must lie in [0, 1)"
        )));
    }
    let p_inv = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::contract("region_of_linearity: P must be SPD"))?
        .inverse();
    let mut r_l = f64::INFINITY;
    for j in 0..k.nrows() {
        let kj = k.row(j);
        let denom = (kj * &p_inv * kj.transpose())[(0, 0)];
        if denom > 0.0 {
            r_l = r_l.min((1.0 - v_ss).powi(2) / denom);
        }
    }
    if !r_l.is_finite() || r_l <= 0.0 {
        return Err(Error::contract(
            "region_of_linearity: gain must have at least one nonzero row",
        ));
    }
    Ok(LinearityRegion { r_l, v_ss })
}

/// Outcome of the effective-rate refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EffectiveLambda {
    /// The refined rate: unique root of the balance equation in
    /// `[lambda_L, lambda]`.
    Refined(f64),
    /// The stationary moment bound does not fit inside the region of
    /// linearity; the global rate must be used.
    NotApplicable,
}

/// Balance function whose unique root is the effective rate: positive once
/// the linear-regime fraction of the ellipsoid dominates the moment inflow.
fn balance(mu: f64, lambda: f64, lambda_l: f64, r_l: f64, tr_pw: f64) -> f64 {
    ((mu - lambda_l) / (lambda - lambda_l)) * r_l - tr_pw / (1.0 - mu)
}

/// Refines the contraction rate when the stationary moment bound fits inside
/// the region of linearity; bisection to 1e-10 on the balance function.
pub fn effective_lambda(
    lambda: f64,
    lambda_l: f64,
    r_l: f64,
    tr_pw: f64,
) -> Result<EffectiveLambda> {
    if !(0.0 <= lambda_l && lambda_l <= lambda && lambda < 1.0) {
        return Err(Error::contract(
            "effective_lambda: need 0 <= lambda_L <= lambda < 1",
        ));
    }
    if !(r_l > 0.0) || tr_pw < 0.0 {
        return Err(Error::contract("effective_lambda: need r_L > 0, trPW >= 0"));
    }
    if tr_pw / (1.0 - lambda) >= r_l {
        return Ok(EffectiveLambda::NotApplicable);
    }
    if tr_pw == 0.0 || lambda == lambda_l {
        return Ok(EffectiveLambda::Refined(lambda_l));
    }
    // balance < 0 at lambda_L, > 0 at lambda (by the applicability test)
    let (mut lo, mut hi) = (lambda_l, lambda);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if balance(mid, lambda, lambda_l, r_l, tr_pw) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(EffectiveLambda::Refined(0.5 * (lo + hi)))
}

/// Rate-selection rule: the refined rate when available, the global rate
/// otherwise.
pub fn select_hat_lambda(refined: EffectiveLambda, lambda: f64) -> f64 {
    match refined {
        EffectiveLambda::Refined(x) => x,
        EffectiveLambda::NotApplicable => lambda,
    }
}

/// Markov-based ellipsoidal PRS schedule at rate `hat_lambda`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrsSchedule {
    pub hat_lambda: f64,
    pub tr_pw: f64,
    pub epsilon: f64,
    /// `radii[i]` is the level r_i for step i, i = 0..=horizon.
    pub radii: Vec<f64>,
    pub r_inf: f64,
}

impl PrsSchedule {
    /// Moment bound at step i: `(1 - hat_lambda^i)/(1 - hat_lambda) * trPW`.
    pub fn expectation_bound(&self, i: usize) -> f64 {
        expectation_bound(i, self.hat_lambda, self.tr_pw)
    }

    /// CSV export: `i,r_i,expectation_bound`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,r_i,expectation_bound\n");
        for (i, r) in self.radii.iter().enumerate() {
            out.push_str(&format!("{i},{r:.12e},{:.12e}\n", self.expectation_bound(i)));
        }
        out
    }
}

/// Builds the PRS schedule `r_i = (1 - hat_lambda^i)/(eps (1 - hat_lambda)) * trPW`.
pub fn prs_schedule(
    hat_lambda: f64,
    tr_pw: f64,
    epsilon: f64,
    horizon: usize,
) -> Result<PrsSchedule> {
    if !(0.0 < epsilon && epsilon < 1.0) {
        return Err(Error::contract("prs_schedule: epsilon must lie in (0, 1)"));
    }
    if !(0.0 <= hat_lambda && hat_lambda < 1.0) || tr_pw < 0.0 {
        return Err(Error::contract(
            "prs_schedule: need hat_lambda in [0, 1) and trPW >= 0",
        ));
    }
    if horizon < 1 {
        return Err(Error::contract("prs_schedule: horizon must be at least 1"));
    }
    let radii = (0..=horizon)
        .map(|i| expectation_bound(i, hat_lambda, tr_pw) / epsilon)
        .collect();
    Ok(PrsSchedule {
        hat_lambda,
        tr_pw,
        epsilon,
        radii,
        r_inf: tr_pw / (epsilon * (1.0 - hat_lambda)),
    })
}

/// Moment bound `E[e_i' P e_i] <= (1 - rate^i)/(1 - rate) * trPW` from e = 0.
pub fn expectation_bound(i: usize, hat_lambda: f64, tr_pw: f64) -> f64 {
    // geometric partial sum; stable for hat_lambda near 1
    let mut acc = 0.0;
    if hat_lambda == 0.0 {
        return if i == 0 { 0.0 } else { tr_pw };
    }
    // (1 - q^i)/(1 - q) without cancellation for small i, closed form otherwise
    if i <= 64 {
        let mut pow = 1.0;
        for _ in 0..i {
            acc += pow;
            pow *= hat_lambda;
        }
    } else {
        acc = (1.0 - hat_lambda.powi(i as i32)) / (1.0 - hat_lambda);
    }
    acc * tr_pw
}

/// Diagnostic: the Markov-based PUB radius at the global rate with explicit
/// limit slack `zeta > 0` (valid for arbitrary initial error).
pub fn pub_radius(lambda: f64, tr_pw: f64, epsilon: f64, zeta: f64) -> Result<f64> {
    if !(zeta > 0.0) {
        return Err(Error::contract("pub_radius: zeta must be positive"));
    }
    if !(0.0 < epsilon && epsilon < 1.0) || !(0.0 <= lambda && lambda < 1.0) {
        return Err(Error::contract("pub_radius: parameter out of range"));
    }
    Ok(tr_pw / (epsilon * (1.0 - lambda)) + zeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_fixtures::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    const TR_PW: f64 = 6.5016108e-4;
    const R_L: f64 = 0.0959164846;

    #[test]
    fn trace_pw_identity() {
        let p = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(trace_pw(&p, &p).unwrap(), 2.0);
    }

    #[test]
    fn trace_pw_cstr_value() {
        let p = cstr_published_p();
        let w = DMatrix::identity(2, 2) * 9e-6;
        assert_relative_eq!(trace_pw(&p, &w).unwrap(), TR_PW, epsilon = 1e-8);
    }

    #[test]
    fn trace_pw_linear_in_w() {
        let p = cstr_published_p();
        let w = DMatrix::identity(2, 2) * 9e-6;
        let base = trace_pw(&p, &w).unwrap();
        let scaled = trace_pw(&p, &(&w * 3.0)).unwrap();
        assert_relative_eq!(scaled, 3.0 * base, epsilon = 1e-12);
    }

    #[test]
    fn linearity_region_cstr_value() {
        // normalized units: threshold 1, v_ss = 24/25
        let nm = cstr().normalize();
        let k = nm.normalize_gain(&cstr_published_gain());
        let p = cstr_published_p();
        let region = region_of_linearity(&p, &k, 0.96).unwrap();
        assert_relative_eq!(region.r_l, R_L, epsilon = 1e-8);
    }

    #[test]
    fn linearity_region_units_invariance() {
        // computing in actual units, (u_max - u_ss)^2 / (K P^-1 K'), matches
        // the normalized-units value exactly
        let k = cstr_published_gain();
        let p = cstr_published_p();
        let p_inv = p.clone().cholesky().unwrap().inverse();
        let denom = (k.row(0) * &p_inv * k.row(0).transpose())[(0, 0)];
        let actual_units = (25.0 - 24.0f64).powi(2) / denom;
        assert_relative_eq!(actual_units, R_L, epsilon = 1e-8);
    }

    #[test]
    fn linearity_region_scales_with_p() {
        let nm = cstr().normalize();
        let k = nm.normalize_gain(&cstr_published_gain());
        let p = cstr_published_p();
        let base = region_of_linearity(&p, &k, 0.96).unwrap().r_l;
        let scaled = region_of_linearity(&(&p * 4.0), &k, 0.96).unwrap().r_l;
        assert_relative_eq!(scaled, 4.0 * base, epsilon = 1e-10);
    }

    #[test]
    fn linearity_region_membership_implies_unsaturated() {
        // maximize K e over the ellipsoid analytically: max = sqrt(r K P^-1 K')
        let nm = cstr().normalize();
        let k = nm.normalize_gain(&cstr_published_gain());
        let p = cstr_published_p();
        let region = region_of_linearity(&p, &k, 0.96).unwrap();
        let p_inv = p.cholesky().unwrap().inverse();
        let max_ke = (region.r_l * (k.row(0) * &p_inv * k.row(0).transpose())[(0, 0)]).sqrt();
        assert!(max_ke <= 1.0 - 0.96 + 1e-12);
    }

    #[test]
    fn effective_lambda_cstr_value() {
        match effective_lambda(0.9049, 0.67035, R_L, TR_PW).unwrap() {
            EffectiveLambda::Refined(x) => {
                // matches the quadratic closed form to bisection accuracy
                assert_relative_eq!(x, 0.6752456250, epsilon = 1e-8);
                // and the rounded published figure
                assert_relative_eq!(x, 0.6752, epsilon = 1e-4);
            }
            other => panic!("expected Refined, got {other:?}"),
        }
    }

    #[test]
    fn effective_lambda_zero_noise() {
        match effective_lambda(0.9, 0.6, 0.05, 0.0).unwrap() {
            EffectiveLambda::Refined(x) => assert_relative_eq!(x, 0.6),
            other => panic!("expected Refined(lambda_L), got {other:?}"),
        }
    }

    #[test]
    fn effective_lambda_not_applicable() {
        // trPW/(1 - lambda) >= r_L forces the fallback branch
        let out = effective_lambda(0.9, 0.6, 0.05, 0.006).unwrap();
        assert_eq!(out, EffectiveLambda::NotApplicable);
    }

    #[test]
    fn quadratic_closed_form_cross_check() {
        // the balance equation is quadratic in mu:
        //   r_L mu^2 - r_L (1 + lambda_L) mu + r_L lambda_L + trPW (lambda - lambda_L) = 0
        let (lambda, lambda_l) = (0.9049, 0.67035);
        let a = R_L;
        let b = -R_L * (1.0 + lambda_l);
        let c = R_L * lambda_l + TR_PW * (lambda - lambda_l);
        let disc = (b * b - 4.0 * a * c).sqrt();
        let roots = [(-b - disc) / (2.0 * a), (-b + disc) / (2.0 * a)];
        let in_range: Vec<f64> = roots
            .iter()
            .cloned()
            .filter(|&x| (lambda_l..=lambda).contains(&x))
            .collect();
        assert_eq!(in_range.len(), 1);
        match effective_lambda(lambda, lambda_l, R_L, TR_PW).unwrap() {
            EffectiveLambda::Refined(x) => assert_relative_eq!(x, in_range[0], epsilon = 1e-9),
            other => panic!("expected Refined, got {other:?}"),
        }
    }

    #[test]
    fn balance_sign_structure_randomized() {
        // the balance function must be negative left of the root and
        // positive right of it, over many random applicable tuples
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 10_000 {
            let lambda_l: f64 = rng.random_range(0.0..0.95);
            let lambda: f64 = rng.random_range(lambda_l..0.999);
            let r_l: f64 = rng.random_range(1e-6..10.0);
            let tr_pw: f64 = rng.random_range(0.0..r_l * (1.0 - lambda));
            if tr_pw / (1.0 - lambda) >= r_l || lambda == lambda_l {
                continue;
            }
            let root = match effective_lambda(lambda, lambda_l, r_l, tr_pw).unwrap() {
                EffectiveLambda::Refined(x) => x,
                EffectiveLambda::NotApplicable => continue,
            };
            // the root is accurate to 1e-10 in mu; the residual bound must
            // scale with the balance function's slope
            let slope = r_l / (lambda - lambda_l) + tr_pw / (1.0 - lambda).powi(2);
            assert!(
                balance(root, lambda, lambda_l, r_l, tr_pw).abs() < 1e-9 * (1.0 + slope)
            );
            for t in [0.1, 0.5, 0.9] {
                let left = lambda_l + t * (root - lambda_l) * 0.999;
                let right = root + t * (lambda - root);
                if left > lambda_l && root - left > 1e-9 {
                    assert!(balance(left, lambda, lambda_l, r_l, tr_pw) < 0.0);
                }
                if right - root > 1e-9 {
                    assert!(balance(right, lambda, lambda_l, r_l, tr_pw) > 0.0);
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn select_rule_branches() {
        assert_relative_eq!(
            select_hat_lambda(EffectiveLambda::Refined(0.6752), 0.9049),
            0.6752
        );
        assert_relative_eq!(
            select_hat_lambda(EffectiveLambda::NotApplicable, 0.9049),
            0.9049
        );
    }

    #[test]
    fn schedule_closed_form_and_limits() {
        let s = prs_schedule(0.6752456250, TR_PW, 0.2, 50).unwrap();
        assert_eq!(s.radii[0], 0.0);
        assert_relative_eq!(s.radii[1], TR_PW / 0.2, epsilon = 1e-15);
        assert_relative_eq!(s.r_inf, 0.0100100434, epsilon = 1e-8);
        // strictly increasing toward the limit
        for i in 1..s.radii.len() {
            assert!(s.radii[i] > s.radii[i - 1]);
            assert!(s.radii[i] < s.r_inf);
        }
    }

    #[test]
    fn markov_consistency() {
        let s = prs_schedule(0.6752456250, TR_PW, 0.2, 50).unwrap();
        for (i, &r) in s.radii.iter().enumerate() {
            assert_relative_eq!(r, s.expectation_bound(i) / 0.2, epsilon = 1e-14);
        }
    }

    #[test]
    fn expectation_bound_limit() {
        let b = expectation_bound(10_000, 0.6752456250, TR_PW);
        assert_relative_eq!(b, 2.0017e-3, epsilon = 1e-6);
        assert_relative_eq!(b, 0.0020020087, epsilon = 1e-8);
    }

    #[test]
    fn absorbing_fixed_point_containment() {
        // beta -> lam*beta + trPW maps [0, trPW/(1-lam)] into itself
        let lam = 0.6752456250;
        let limit = TR_PW / (1.0 - lam);
        for t in 0..=100 {
            let beta = limit * (t as f64) / 100.0;
            let mapped = lam * beta + TR_PW;
            assert!(mapped >= 0.0 && mapped <= limit + 1e-15);
        }
    }

    #[test]
    fn conservative_lambda_schedule_dominates() {
        // the global-rate schedule upper-bounds the refined one pointwise
        let refined = prs_schedule(0.6752456250, TR_PW, 0.2, 50).unwrap();
        let coarse = prs_schedule(0.9049, TR_PW, 0.2, 50).unwrap();
        for i in 1..=50 {
            assert!(coarse.radii[i] >= refined.radii[i]);
        }
    }

    #[test]
    fn pub_radius_diagnostic() {
        let r = pub_radius(0.9049, TR_PW, 0.2, 1e-6).unwrap();
        assert_relative_eq!(r, TR_PW / (0.2 * (1.0 - 0.9049)) + 1e-6, epsilon = 1e-12);
        assert!(pub_radius(0.9049, TR_PW, 0.2, 0.0).is_err());
    }

    #[test]
    fn ellipsoid_membership() {
        let e = Ellipsoid::new(&cstr_published_p(), 0.01).unwrap();
        assert!(e.contains(&DVector::from_row_slice(&[0.0, 0.0])));
        assert!(!e.contains(&DVector::from_row_slice(&[1.0, 0.0])));
        assert!(Ellipsoid::new(&cstr_published_p(), -1.0).is_err());
    }

    #[test]
    fn schedule_csv_export() {
        let s = prs_schedule(0.5, 1e-3, 0.2, 3).unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "i,r_i,expectation_bound");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,"));
    }
}
