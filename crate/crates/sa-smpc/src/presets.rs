//! Built-in benchmark instance: the CSTR concentration-control model and the
//! contraction certificate reported for it. Shipped so the CLI and
//! integration tests can reproduce the reference results without external
//! files.

use nalgebra::{DMatrix, DVector};

use crate::model::LtiModel;
use crate::offline::{lmi_residuals, ContractionCertificate};
use crate::Result;

/// CSTR deviation model (concentration control with dilution-rate input,
/// sampled at 2 ms): two states, one input saturating at +-25, isotropic
/// process noise with standard deviation 3e-3.
pub fn cstr_model() -> LtiModel {
    LtiModel::new(
        DMatrix::from_row_slice(2, 2, &[0.95123, 0.0, 0.08833, 0.81873]),
        DMatrix::from_row_slice(2, 1, &[-0.0048771, -0.0020429]),
        DVector::from_vec(vec![25.0]),
        DMatrix::identity(2, 2) * 0.003f64.powi(2),
    )
    .expect("cstr preset model is valid")
}

/// Reference gain for the CSTR instance, in actuator units.
pub fn cstr_reference_gain() -> DMatrix<f64> {
    DMatrix::from_row_slice(1, 2, &[27.1573, 0.09622])
}

/// Reference Lyapunov weight for the CSTR instance.
pub fn cstr_reference_p() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[71.2230, -0.4498, -0.4498, 1.01712])
}

/// Reference certificate (P, K, lambda, lambda_L) for the CSTR instance,
/// with residuals recomputed against the preset model. The gain is stored in
/// normalized input units, matching `design_certificate` output.
pub fn cstr_reference_certificate() -> Result<ContractionCertificate> {
    let norm = cstr_model().normalize();
    let p = cstr_reference_p();
    let k = norm.normalize_gain(&cstr_reference_gain());
    let (lambda, lambda_l) = (0.9049, 0.67035);
    let residuals = lmi_residuals(&norm, &p, &k, lambda, lambda_l)?;
    Ok(ContractionCertificate::from_matrices(
        &p, &k, lambda, lambda_l, residuals,
    ))
}
