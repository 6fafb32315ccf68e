//! Brute-force gradient verification.
//!
//! Central finite differences of the per-pixel cross-entropy loss, computed
//! entirely in f64 with the auxiliary label frozen at its base-trace value,
//! validate the closed-form gradient machinery: the convolution derivative,
//! the unfold patch extraction, the batch-norm slope, the Heaviside gate, the
//! softmax Jacobian and the rank-1 p-norm factorization. The closed forms
//! compared against finite differences are the cross-entropy-gradient factors
//! (label weight `π − y`); the deviation of the score-formula weighting
//! (`π(1 − y)`) from the finite differences is reported alongside for
//! reference — at the predicted channel (one-hot) and globally (uniform)
//! the score weighting is not the derivative of the cross entropy, by
//! construction.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradnorm::{
    last_layer_ce_grad_factors, last_layer_grad_factors, materialize_outer,
    penult_layer_ce_grad_factors, penult_layer_grad_factors, pnorm_factored, LabelMode, Layer,
};
use crate::tensor::Tensor;
use crate::toynet::{forward, ForwardTrace, SegHeadParams};

/// Probabilities are clamped here before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Enumeration budget: `H * W * weight_count` per layer check.
pub const SIZE_GUARD: usize = 1_000_000;

/// Entrywise errors are measured relative to the infinity norm of the pixel's
/// finite-difference gradient, floored by this value.
pub const REL_FLOOR: f64 = 1e-12;

/// Materializes the frozen auxiliary label of a trace as `C x H x W`.
pub fn label_tensor(trace: &ForwardTrace, mode: &LabelMode) -> Result<Tensor> {
    let (c, h, w) = (trace.num_classes(), trace.height(), trace.width());
    let plane = h * w;
    match mode {
        LabelMode::OneHot => {
            let mut y = vec![0.0f64; c * plane];
            for px in 0..plane {
                y[trace.pred[px] as usize * plane + px] = 1.0;
            }
            Tensor::from_vec(vec![c, h, w], y)
        }
        LabelMode::Uniform => {
            Tensor::from_vec(vec![c, h, w], vec![1.0 / c as f64; c * plane])
        }
        LabelMode::Explicit(label) => {
            // Reuse the gradient engine's validation.
            last_layer_grad_factors(trace, mode)?;
            Ok(label.clone())
        }
    }
}

fn loss_at(probs: &Tensor, labels: &Tensor, px: usize) -> (f64, bool) {
    let c = probs.shape()[0];
    let plane = probs.shape()[1] * probs.shape()[2];
    let mut loss = 0.0;
    let mut clamped = false;
    for k in 0..c {
        let y = labels.data()[k * plane + px];
        if y == 0.0 {
            continue;
        }
        let mut p = probs.data()[k * plane + px];
        if p < PROB_CLAMP {
            p = PROB_CLAMP;
            clamped = true;
        }
        loss -= y * p.ln();
    }
    (loss, clamped)
}

/// Cross entropy of the mode's auxiliary label against `probs` at one pixel.
pub fn pixel_loss(trace: &ForwardTrace, mode: &LabelMode, pixel: (usize, usize)) -> Result<f64> {
    let (a, b) = pixel;
    let (h, w) = (trace.height(), trace.width());
    if a >= h || b >= w {
        return Err(Error::Validation(format!(
            "pixel ({a},{b}) outside {h}x{w} image"
        )));
    }
    let labels = label_tensor(trace, mode)?;
    Ok(loss_at(&trace.probs, &labels, a * w + b).0)
}

/// Central difference `(f(x+eps) - f(x-eps)) / (2 eps)`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

fn layer_weight_count(params: &SegHeadParams, layer: Layer) -> usize {
    match layer {
        Layer::Last => params.k_last.len(),
        Layer::Penultimate => params.k_penult.len(),
    }
}

/// Per-pixel losses (all pixels, frozen labels) after adding `delta` to one
/// flat filter weight of the chosen layer. Re-runs the full forward pass.
fn perturbed_losses(
    params: &SegHeadParams,
    psi_prev: &Tensor,
    layer: Layer,
    weight_idx: usize,
    delta: f64,
    labels: &Tensor,
) -> Result<(Vec<f64>, bool)> {
    let mut p = params.clone();
    match layer {
        Layer::Last => p.k_last.data_mut()[weight_idx] += delta,
        Layer::Penultimate => p.k_penult.data_mut()[weight_idx] += delta,
    }
    let trace = forward(&p, psi_prev)?;
    let plane = trace.height() * trace.width();
    let mut out = vec![0.0f64; plane];
    let mut clamped = false;
    for px in 0..plane {
        let (l, c) = loss_at(&trace.probs, labels, px);
        out[px] = l;
        clamped |= c;
    }
    Ok((out, clamped))
}

/// Central-difference gradient of the pixel loss w.r.t. every filter weight
/// of the chosen layer, in the filter bank's row-major order.
pub fn fd_gradient(
    params: &SegHeadParams,
    psi_prev: &Tensor,
    mode: &LabelMode,
    layer: Layer,
    pixel: (usize, usize),
    epsilon: f64,
) -> Result<Vec<f64>> {
    if epsilon <= 0.0 {
        return Err(Error::Validation("epsilon must be > 0".into()));
    }
    let trace = forward(params, psi_prev)?;
    let (a, b) = pixel;
    let w = trace.width();
    if a >= trace.height() || b >= w {
        return Err(Error::Validation(format!(
            "pixel ({a},{b}) outside image"
        )));
    }
    let labels = label_tensor(&trace, mode)?;
    let px = a * w + b;
    let n = layer_weight_count(params, layer);
    let mut grad = vec![0.0f64; n];
    for wi in 0..n {
        let (plus, _) = perturbed_losses(params, psi_prev, layer, wi, epsilon, &labels)?;
        let (minus, _) = perturbed_losses(params, psi_prev, layer, wi, -epsilon, &labels)?;
        grad[wi] = (plus[px] - minus[px]) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// Finite-difference gradients at every pixel: `[weight][pixel]`, flattened
/// weight-major. Two forward passes per weight cover all pixels at once.
pub fn fd_gradient_all_pixels(
    params: &SegHeadParams,
    psi_prev: &Tensor,
    labels: &Tensor,
    layer: Layer,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let n = layer_weight_count(params, layer);
    let plane = psi_prev.shape()[1] * psi_prev.shape()[2];
    let mut out = vec![0.0f64; n * plane];
    for wi in 0..n {
        let (plus, _) = perturbed_losses(params, psi_prev, layer, wi, epsilon, labels)?;
        let (minus, _) = perturbed_losses(params, psi_prev, layer, wi, -epsilon, labels)?;
        for px in 0..plane {
            out[wi * plane + px] = (plus[px] - minus[px]) / (2.0 * epsilon);
        }
    }
    Ok(out)
}

/// Outcome of one closed-form-vs-brute-force verification run.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub tolerance: f64,
    pub epsilon: f64,
    /// Worst relative error of any verified comparison (cross-entropy-gradient
    /// closed forms vs finite differences, entrywise and factored-norm),
    /// relative to the pixel gradient's infinity norm.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_pixel: (usize, usize),
    /// Flat weight index of the worst entrywise comparison;
    /// `usize::MAX` when the worst case came from a norm comparison.
    pub worst_weight_index: usize,
    pub passed: bool,
    /// Worst entrywise error alone.
    pub entry_max_rel_err: f64,
    /// Worst factored-p-norm error alone.
    pub norm_max_rel_err: f64,
    /// Deviation of the score-formula weighting from the finite differences,
    /// same error measure. Expected to be O(1); reported for reference only.
    pub score_formula_max_rel_err: f64,
    /// Pixels skipped in penultimate-layer comparisons because some
    /// pre-activation sat within `10 * epsilon` of the ReLU kink.
    pub excluded_pixels: usize,
    pub configs: Vec<String>,
    pub ps: Vec<f64>,
    /// True if any probability hit the log clamp during loss evaluation.
    pub clamped: bool,
}

/// Compares closed-form gradients and factored norms against central finite
/// differences for every requested `(mode, layer)` pair and every `p`.
pub fn check_closed_form(
    params: &SegHeadParams,
    psi_prev: &Tensor,
    modes: &[LabelMode],
    layers: &[Layer],
    ps: &[f64],
    tolerance: f64,
) -> Result<OracleReport> {
    let epsilon = 1e-3;
    let trace = forward(params, psi_prev)?;
    let (h, w) = (trace.height(), trace.width());
    let plane = h * w;

    for &layer in layers {
        let budget = plane * layer_weight_count(params, layer);
        if budget > SIZE_GUARD {
            return Err(Error::SizeGuard(format!(
                "H*W*weights = {budget} exceeds the {SIZE_GUARD} enumeration budget"
            )));
        }
    }

    // Pixels whose pre-activation sits within 10*eps of the ReLU kink have a
    // discontinuous penultimate-layer derivative; finite differences are
    // meaningless there.
    let hidden = params.hidden_channels();
    let kink: Vec<bool> = (0..plane)
        .map(|px| {
            (0..hidden).any(|f| trace.pre_relu.data()[f * plane + px].abs() < 10.0 * epsilon)
        })
        .collect();

    let mut report = OracleReport {
        tolerance,
        epsilon,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_pixel: (0, 0),
        worst_weight_index: 0,
        passed: false,
        entry_max_rel_err: 0.0,
        norm_max_rel_err: 0.0,
        score_formula_max_rel_err: 0.0,
        excluded_pixels: 0,
        configs: Vec::new(),
        ps: ps.to_vec(),
        clamped: false,
    };

    for mode in modes {
        let labels = label_tensor(&trace, mode)?;
        for &layer in layers {
            report
                .configs
                .push(format!("{}/{}", mode.tag(), layer.tag()));
            let fd = fd_gradient_all_pixels(params, psi_prev, &labels, layer, epsilon)?;
            let (s_ce, psi_ce) = match layer {
                Layer::Last => last_layer_ce_grad_factors(&trace, mode)?,
                Layer::Penultimate => penult_layer_ce_grad_factors(&trace, params, mode)?,
            };
            let cf = materialize_outer(&s_ce, &psi_ce)?;
            let (s_m, psi_m) = match layer {
                Layer::Last => last_layer_grad_factors(&trace, mode)?,
                Layer::Penultimate => penult_layer_grad_factors(&trace, params, mode)?,
            };
            let cf_m = materialize_outer(&s_m, &psi_m)?;
            let n = cf.shape()[0];

            for px in 0..plane {
                if layer == Layer::Penultimate && kink[px] {
                    report.excluded_pixels += 1;
                    continue;
                }
                let mut scale = 0.0f64;
                for wi in 0..n {
                    scale = scale.max(fd[wi * plane + px].abs());
                }
                let denom = scale.max(REL_FLOOR);
                for wi in 0..n {
                    let f = fd[wi * plane + px];
                    let c = cf.data()[wi * plane + px];
                    let abs = (c - f).abs();
                    let rel = abs / denom;
                    if rel > report.entry_max_rel_err {
                        report.entry_max_rel_err = rel;
                    }
                    if rel > report.max_rel_err {
                        report.max_rel_err = rel;
                        report.max_abs_err = abs;
                        report.worst_pixel = (px / w, px % w);
                        report.worst_weight_index = wi;
                    }
                    let m = cf_m.data()[wi * plane + px];
                    let rel_m = (m - f).abs() / denom;
                    if rel_m > report.score_formula_max_rel_err {
                        report.score_formula_max_rel_err = rel_m;
                    }
                }
            }

            for &p in ps {
                let factored = pnorm_factored(&s_ce, &psi_ce, p)?;
                for px in 0..plane {
                    if layer == Layer::Penultimate && kink[px] {
                        continue;
                    }
                    let mut acc = 0.0f64;
                    for wi in 0..n {
                        acc += fd[wi * plane + px].abs().powf(p);
                    }
                    let fd_norm = acc.powf(1.0 / p);
                    let f = factored.data()[px];
                    let rel = (f - fd_norm).abs() / f.abs().max(fd_norm.abs()).max(REL_FLOOR);
                    if rel > report.norm_max_rel_err {
                        report.norm_max_rel_err = rel;
                    }
                    if rel > report.max_rel_err {
                        report.max_rel_err = rel;
                        report.max_abs_err = (f - fd_norm).abs();
                        report.worst_pixel = (px / w, px % w);
                        report.worst_weight_index = usize::MAX;
                    }
                }
            }
        }
    }

    report.passed = report.max_rel_err <= tolerance;
    Ok(report)
}
