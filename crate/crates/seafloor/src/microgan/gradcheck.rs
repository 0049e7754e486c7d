//! Central finite-difference gradient checks.
//!
//! Used both by the unit tests (per primitive) and by the acceptance suite
//! (the full four-generator objective graph).

use super::tensor::Tensor;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-3;

/// Relative error between an analytic and a finite-difference derivative.
/// Agreement below an absolute floor of 1e-7 counts as exact; that floor
/// absorbs cancellation noise on near-zero gradients of large losses.
pub fn rel_error(analytic: f64, fd: f64) -> f64 {
    let diff = (analytic - fd).abs();
    if diff <= 1e-7 {
        return 0.0;
    }
    diff / analytic.abs().max(fd.abs()).max(1e-8)
}

/// Probes selected elements of selected tensors: re-evaluates `build` under
/// +/- h perturbations and compares against one reverse-mode sweep.
/// Returns the worst relative error seen.
pub fn probe_max_rel_error(
    build: &mut dyn FnMut() -> Tensor,
    probes: &[(Tensor, Vec<usize>)],
    h: f64,
) -> f64 {
    for (t, _) in probes {
        t.zero_grad();
    }
    let out = build();
    assert_eq!(out.len(), 1, "gradient checks need a scalar output");
    out.backward();
    let analytic: Vec<Vec<f64>> = probes
        .iter()
        .map(|(t, idxs)| {
            let g = t.grad();
            idxs.iter().map(|&i| g[i]).collect()
        })
        .collect();

    let mut worst = 0.0f64;
    for (pi, (t, idxs)) in probes.iter().enumerate() {
        for (k, &i) in idxs.iter().enumerate() {
            let orig = t.data()[i];
            t.apply_to_data(|d| d[i] = orig + h);
            let f_plus = build().value();
            t.apply_to_data(|d| d[i] = orig - h);
            let f_minus = build().value();
            t.apply_to_data(|d| d[i] = orig);
            let fd = (f_plus - f_minus) / (2.0 * h);
            worst = worst.max(rel_error(analytic[pi][k], fd));
        }
    }
    worst
}

/// Probes every element of every listed tensor.
pub fn check_all_elements(
    build: &mut dyn FnMut() -> Tensor,
    inputs: &[Tensor],
    h: f64,
) -> f64 {
    let probes: Vec<(Tensor, Vec<usize>)> = inputs
        .iter()
        .map(|t| (t.clone(), (0..t.len()).collect()))
        .collect();
    probe_max_rel_error(build, &probes, h)
}
