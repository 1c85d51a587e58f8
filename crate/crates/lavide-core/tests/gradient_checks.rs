//! Central finite-difference verification of every trainable module's
//! analytic gradients at 64-bit precision, plus a composed whole-model
//! check over 50 sampled parameters on a 32x32 instance.

use lavide_core::gradcheck::{module_gradient_suite, whole_model_gradient_err};

const MODULE_TOL: f64 = 1e-4;
const COMPOSED_TOL: f64 = 1e-3;

#[test]
fn per_module_gradients_match_finite_differences() {
    for (name, worst) in module_gradient_suite() {
        eprintln!("{name}: worst relative error {worst:.3e}");
        assert!(worst <= MODULE_TOL, "{name}: {worst:.3e} exceeds {MODULE_TOL:.0e}");
    }
}

#[test]
fn whole_model_sampled_gradients_match_finite_differences() {
    let worst = whole_model_gradient_err(50, 99);
    eprintln!("whole model: worst relative error {worst:.3e}");
    assert!(worst <= COMPOSED_TOL, "{worst:.3e} exceeds {COMPOSED_TOL:.0e}");
}
