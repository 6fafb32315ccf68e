//! Closed-form per-pixel loss-gradient scores.
//!
//! For a head ending in a 1x1 convolution the per-pixel gradient of the
//! cross-entropy-style score w.r.t. the filter weights is a rank-1 outer
//! product `S ⊗ Ψ` of a class-vector and a feature-vector, so its p-norm
//! factorizes into `|S|_p * |Ψ|_p` and never requires materializing the
//! full gradient tensor. The same structure holds one layer deeper with
//! `Ψ` replaced by unfolded 3x3 patches.
//!
//! Two label weightings are exposed per auxiliary-label mode:
//!
//! * the *score* factors (`last_layer_grad_factors`,
//!   `penult_layer_grad_factors`): label weight `π_h · (1 − y_h)`. One-hot
//!   mode therefore zeroes the predicted channel exactly; uniform mode is the
//!   constant prefactor `(C−1)/C`. These define the uncertainty scores.
//! * the *cross-entropy gradient* factors (`last_layer_ce_grad_factors`,
//!   `penult_layer_ce_grad_factors`): label weight `π_h − y_h`, the exact
//!   derivative of the per-pixel cross entropy under a fixed auxiliary
//!   label. These are what central finite differences of the loss reproduce,
//!   and the oracle module verifies them; they share every other factor
//!   (Heaviside, batch-norm slope, unfolded patches) with the score path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{unfold, Tensor};
use crate::toynet::{ForwardTrace, SegHeadParams};

/// Auxiliary label supplying the per-pixel target distribution.
#[derive(Debug, Clone)]
pub enum LabelMode {
    /// One-hot at the predicted class.
    OneHot,
    /// Constant `1/C` for every class.
    Uniform,
    /// Caller-provided `C x H x W` per-pixel distributions.
    Explicit(Tensor),
}

impl LabelMode {
    pub fn tag(&self) -> &'static str {
        match self {
            LabelMode::OneHot => "oh",
            LabelMode::Uniform => "uni",
            LabelMode::Explicit(_) => "explicit",
        }
    }
}

/// Which filter bank the gradient is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Last,
    Penultimate,
}

impl Layer {
    pub fn tag(self) -> &'static str {
        match self {
            Layer::Last => "last",
            Layer::Penultimate => "penult",
        }
    }
}

/// Per-pixel uncertainty heatmap plus the configuration that produced it.
#[derive(Debug, Clone)]
pub struct GradientScoreMap {
    /// `H x W`, elementwise >= 0.
    pub scores: Tensor,
    pub mode: LabelMode,
    pub layer: Layer,
    pub p: f64,
}

impl GradientScoreMap {
    /// Short identifier used in file names and feature columns,
    /// e.g. `G_uni_last_p0.5`.
    pub fn tag(&self) -> String {
        format!("G_{}_{}_p{}", self.mode.tag(), self.layer.tag(), self.p)
    }
}

fn validate_explicit(label: &Tensor, c: usize, h: usize, w: usize) -> Result<()> {
    if label.shape() != [c, h, w] {
        return Err(Error::Validation(format!(
            "explicit label must be {c} x {h} x {w}, got {:?}",
            label.shape()
        )));
    }
    let plane = h * w;
    for px in 0..plane {
        let mut sum = 0.0;
        for k in 0..c {
            let v = label.data()[k * plane + px];
            if v < 0.0 {
                return Err(Error::Validation(format!(
                    "explicit label negative at class {k}, pixel {px}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "explicit label must sum to 1 per pixel, got {sum} at pixel {px}"
            )));
        }
    }
    Ok(())
}

/// Label weighting of the score formulas: `S_h = π_h (1 − y_h)`.
fn score_weight(trace: &ForwardTrace, mode: &LabelMode) -> Result<Tensor> {
    let (c, h, w) = (trace.num_classes(), trace.height(), trace.width());
    let plane = h * w;
    let probs = trace.probs.data();
    let mut s = vec![0.0f64; c * plane];
    match mode {
        LabelMode::OneHot => {
            for k in 0..c {
                for px in 0..plane {
                    let keep = trace.pred[px] != k as i64;
                    s[k * plane + px] = if keep { probs[k * plane + px] } else { 0.0 };
                }
            }
        }
        LabelMode::Uniform => {
            let fac = (c as f64 - 1.0) / c as f64;
            for i in 0..c * plane {
                s[i] = probs[i] * fac;
            }
        }
        LabelMode::Explicit(label) => {
            validate_explicit(label, c, h, w)?;
            for i in 0..c * plane {
                s[i] = probs[i] * (1.0 - label.data()[i]);
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], s)
}

/// Label weighting of the cross-entropy derivative: `S_h = π_h − y_h`.
fn ce_weight(trace: &ForwardTrace, mode: &LabelMode) -> Result<Tensor> {
    let (c, h, w) = (trace.num_classes(), trace.height(), trace.width());
    let plane = h * w;
    let probs = trace.probs.data();
    let mut s = vec![0.0f64; c * plane];
    match mode {
        LabelMode::OneHot => {
            for k in 0..c {
                for px in 0..plane {
                    let y = if trace.pred[px] == k as i64 { 1.0 } else { 0.0 };
                    s[k * plane + px] = probs[k * plane + px] - y;
                }
            }
        }
        LabelMode::Uniform => {
            let u = 1.0 / c as f64;
            for i in 0..c * plane {
                s[i] = probs[i] - u;
            }
        }
        LabelMode::Explicit(label) => {
            validate_explicit(label, c, h, w)?;
            for i in 0..c * plane {
                s[i] = probs[i] - label.data()[i];
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], s)
}

/// Last-layer factors of the score gradient: the full per-pixel gradient
/// w.r.t. the 1x1 filter bank is `S[h] * Psi[e]`.
pub fn last_layer_grad_factors(
    trace: &ForwardTrace,
    mode: &LabelMode,
) -> Result<(Tensor, Tensor)> {
    Ok((score_weight(trace, mode)?, trace.psi.clone()))
}

/// Last-layer factors of the exact cross-entropy gradient.
pub fn last_layer_ce_grad_factors(
    trace: &ForwardTrace,
    mode: &LabelMode,
) -> Result<(Tensor, Tensor)> {
    Ok((ce_weight(trace, mode)?, trace.psi.clone()))
}

/// Folds a class-weight tensor through the 1x1 filter bank, the Heaviside of
/// the pre-activation and the batch-norm slope, yielding the hidden-channel
/// factor of the penultimate-layer gradient.
fn penult_channel_factor(
    weight: &Tensor,
    trace: &ForwardTrace,
    params: &SegHeadParams,
) -> Result<Tensor> {
    let (c, h, w) = (trace.num_classes(), trace.height(), trace.width());
    let hidden = params.hidden_channels();
    let plane = h * w;
    if trace.pre_relu.shape() != [hidden, h, w] {
        return Err(Error::Contract(
            "trace is missing a consistent pre_relu tensor".into(),
        ));
    }
    if trace.psi_prev.shape()[0] != params.in_channels() {
        return Err(Error::Contract(
            "trace psi_prev does not match the parameter bank".into(),
        ));
    }
    let k_last = params.k_last.data(); // [c, hidden, 1, 1]
    let mut s = vec![0.0f64; hidden * plane];
    for f in 0..hidden {
        // Heaviside at exactly zero evaluates to 0.
        let bn_slope =
            params.bn_gamma.data()[f] / (params.bn_var.data()[f] + params.bn_eps).sqrt();
        for px in 0..plane {
            let gate = if trace.pre_relu.data()[f * plane + px] > 0.0 {
                1.0
            } else {
                0.0
            };
            if gate == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for d in 0..c {
                acc += weight.data()[d * plane + px] * k_last[d * hidden + f];
            }
            s[f * plane + px] = acc * bn_slope;
        }
    }
    Tensor::from_vec(vec![hidden, h, w], s)
}

/// Second-to-last-layer factors of the score gradient. `S` is per hidden
/// channel, `Psi` is the 3x3 unfold of the pre-convolution features; the full
/// per-pixel gradient is the outer product `S ⊗ Psi`.
pub fn penult_layer_grad_factors(
    trace: &ForwardTrace,
    params: &SegHeadParams,
    mode: &LabelMode,
) -> Result<(Tensor, Tensor)> {
    let weight = score_weight(trace, mode)?;
    let s = penult_channel_factor(&weight, trace, params)?;
    let psi = unfold(&trace.psi_prev, 3, 1)?;
    Ok((s, psi))
}

/// Second-to-last-layer factors of the exact cross-entropy gradient.
pub fn penult_layer_ce_grad_factors(
    trace: &ForwardTrace,
    params: &SegHeadParams,
    mode: &LabelMode,
) -> Result<(Tensor, Tensor)> {
    let weight = ce_weight(trace, mode)?;
    let s = penult_channel_factor(&weight, trace, params)?;
    let psi = unfold(&trace.psi_prev, 3, 1)?;
    Ok((s, psi))
}

/// Factored p-norm: `out[a][b] = |S[.,a,b]|_p * |Psi[.,a,b]|_p`.
///
/// For `0 < p < 1` this is a seminorm; the same `|x|^p` power rule applies.
pub fn pnorm_factored(s: &Tensor, psi: &Tensor, p: f64) -> Result<Tensor> {
    if p <= 0.0 {
        return Err(Error::Validation(format!("p must be > 0, got {p}")));
    }
    if s.shape().len() != 3 || psi.shape().len() != 3 || s.shape()[1..] != psi.shape()[1..] {
        return Err(Error::Dimension(format!(
            "factor spatial dims disagree: {:?} vs {:?}",
            s.shape(),
            psi.shape()
        )));
    }
    let (h, w) = (s.shape()[1], s.shape()[2]);
    let plane = h * w;
    let norm_of = |t: &Tensor| -> Vec<f64> {
        let ch = t.shape()[0];
        let data = t.data();
        let mut out = vec![0.0f64; plane];
        for px in 0..plane {
            let mut acc = 0.0;
            for i in 0..ch {
                acc += data[i * plane + px].abs().powf(p);
            }
            out[px] = acc.powf(1.0 / p);
        }
        out
    };
    let ns = norm_of(s);
    let np = norm_of(psi);
    let data = ns.iter().zip(&np).map(|(a, b)| a * b).collect();
    Tensor::from_vec(vec![h, w], data)
}

/// Materializes the rank-1 gradient: output channel `i*B + j` at pixel
/// `(a,b)` holds `S[i][a][b] * Psi[j][a][b]`. Index order matches the
/// row-major flattening of the corresponding filter bank. Test and oracle
/// support; production scoring never calls this.
pub fn materialize_outer(s: &Tensor, psi: &Tensor) -> Result<Tensor> {
    if s.shape().len() != 3 || psi.shape().len() != 3 || s.shape()[1..] != psi.shape()[1..] {
        return Err(Error::Dimension(format!(
            "factor spatial dims disagree: {:?} vs {:?}",
            s.shape(),
            psi.shape()
        )));
    }
    let (a_ch, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    let b_ch = psi.shape()[0];
    let plane = h * w;
    let mut out = vec![0.0f64; a_ch * b_ch * plane];
    for i in 0..a_ch {
        for j in 0..b_ch {
            let base = (i * b_ch + j) * plane;
            for px in 0..plane {
                out[base + px] = s.data()[i * plane + px] * psi.data()[j * plane + px];
            }
        }
    }
    Tensor::from_vec(vec![a_ch * b_ch, h, w], out)
}

/// Flat p-norm of the materialized outer product, per pixel. The slow
/// reference path the factored computation is benchmarked and verified
/// against.
pub fn materialized_pnorm(s: &Tensor, psi: &Tensor, p: f64) -> Result<Tensor> {
    if p <= 0.0 {
        return Err(Error::Validation(format!("p must be > 0, got {p}")));
    }
    let full = materialize_outer(s, psi)?;
    let (ch, h, w) = (full.shape()[0], full.shape()[1], full.shape()[2]);
    let plane = h * w;
    let mut out = vec![0.0f64; plane];
    for px in 0..plane {
        let mut acc = 0.0;
        for i in 0..ch {
            acc += full.data()[i * plane + px].abs().powf(p);
        }
        out[px] = acc.powf(1.0 / p);
    }
    Tensor::from_vec(vec![h, w], out)
}

/// Computes one uncertainty heatmap: factor computation for the chosen layer
/// followed by the factored p-norm.
pub fn pgn_heatmap(
    trace: &ForwardTrace,
    params: &SegHeadParams,
    mode: &LabelMode,
    layer: Layer,
    p: f64,
) -> Result<GradientScoreMap> {
    let (s, psi) = match layer {
        Layer::Last => last_layer_grad_factors(trace, mode)?,
        Layer::Penultimate => penult_layer_grad_factors(trace, params, mode)?,
    };
    let scores = pnorm_factored(&s, &psi, p)?;
    Ok(GradientScoreMap {
        scores,
        mode: mode.clone(),
        layer,
        p,
    })
}

/// Output-based baseline uncertainty maps.
#[derive(Debug, Clone)]
pub struct BaselineMaps {
    /// `1 − max_k π_k`, higher = more uncertain.
    pub max_softmax: Tensor,
    /// Softmax entropy normalized to `[0, 1]` by `log C`.
    pub entropy: Tensor,
}

pub fn baseline_maps(trace: &ForwardTrace) -> Result<BaselineMaps> {
    let (c, h, w) = (trace.num_classes(), trace.height(), trace.width());
    let plane = h * w;
    let probs = trace.probs.data();
    let mut ms = vec![0.0f64; plane];
    let mut ent = vec![0.0f64; plane];
    let log_c = (c as f64).ln();
    for px in 0..plane {
        let mut pmax = 0.0f64;
        let mut e = 0.0f64;
        for k in 0..c {
            let v = probs[k * plane + px];
            pmax = pmax.max(v);
            if v > 0.0 {
                e -= v * v.ln();
            }
        }
        ms[px] = 1.0 - pmax;
        ent[px] = e / log_c;
    }
    Ok(BaselineMaps {
        max_softmax: Tensor::from_vec(vec![h, w], ms)?,
        entropy: Tensor::from_vec(vec![h, w], ent)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynet::{forward, gen_synthetic, HeadDims};

    fn toy_dims() -> HeadDims {
        HeadDims {
            in_channels: 4,
            hidden_channels: 6,
            num_classes: 5,
            height: 8,
            width: 8,
        }
    }

    fn toy_trace(seed: u64) -> (crate::toynet::SegHeadParams, ForwardTrace) {
        let (params, psi_prev) = gen_synthetic(seed, toy_dims()).unwrap();
        let trace = forward(&params, &psi_prev).unwrap();
        (params, trace)
    }

    #[test]
    fn onehot_zeroes_predicted_channel() {
        let (_, trace) = toy_trace(42);
        let (s, _) = last_layer_grad_factors(&trace, &LabelMode::OneHot).unwrap();
        let plane = trace.height() * trace.width();
        for px in 0..plane {
            let c_hat = trace.pred[px] as usize;
            assert_eq!(s.data()[c_hat * plane + px], 0.0);
        }
    }

    #[test]
    fn uniform_prefactor_hand_value() {
        // C=2, probs=(0.8, 0.2), psi=(1.0): score-gradient entries (0.4, 0.1).
        let logits = Tensor::from_vec(vec![2, 1, 1], vec![4.0f64.ln(), 0.0]).unwrap();
        let probs = crate::toynet::softmax(&logits).unwrap();
        let trace = ForwardTrace {
            psi_prev: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            pre_bn: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            pre_relu: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            psi: Tensor::from_vec(vec![1, 1, 1], vec![1.0]).unwrap(),
            logits,
            probs,
            pred: vec![0],
        };
        let (s, psi) = last_layer_grad_factors(&trace, &LabelMode::Uniform).unwrap();
        let grad = materialize_outer(&s, &psi).unwrap();
        assert!((grad.data()[0] - 0.4).abs() < 1e-12);
        assert!((grad.data()[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn uniform_prefactor_c19() {
        let fac: f64 = (19.0 - 1.0) / 19.0;
        assert!((fac - 18.0 / 19.0).abs() < 1e-15);
        let mut logits = vec![0.0; 19];
        logits[3] = 1.0;
        let logits = Tensor::from_vec(vec![19, 1, 1], logits).unwrap();
        let probs = crate::toynet::softmax(&logits).unwrap();
        let trace = ForwardTrace {
            psi_prev: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            pre_bn: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            pre_relu: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            psi: Tensor::from_vec(vec![1, 1, 1], vec![1.0]).unwrap(),
            logits,
            probs: probs.clone(),
            pred: vec![3],
        };
        let (s, _) = last_layer_grad_factors(&trace, &LabelMode::Uniform).unwrap();
        for k in 0..19 {
            assert!((s.data()[k] - probs.data()[k] * 18.0 / 19.0).abs() < 1e-15);
        }
    }

    #[test]
    fn explicit_label_validation() {
        let (_, trace) = toy_trace(1);
        let bad = Tensor::from_vec(
            vec![trace.num_classes(), trace.height(), trace.width()],
            vec![0.3; 5 * 64],
        )
        .unwrap();
        assert!(matches!(
            last_layer_grad_factors(&trace, &LabelMode::Explicit(bad)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn dead_relu_kills_penult_scores() {
        let (params, psi_prev) = gen_synthetic(5, toy_dims()).unwrap();
        let trace = forward(&params, &psi_prev).unwrap();
        let (s, _) = penult_layer_grad_factors(&trace, &params, &LabelMode::Uniform).unwrap();
        let hidden = params.hidden_channels();
        let plane = trace.height() * trace.width();
        for px in 0..plane {
            let all_dead = (0..hidden).all(|f| trace.pre_relu.data()[f * plane + px] <= 0.0);
            if all_dead {
                for f in 0..hidden {
                    assert_eq!(s.data()[f * plane + px], 0.0);
                }
            }
        }
        // Channel-level: any non-positive pre-activation zeroes that channel.
        for f in 0..hidden {
            for px in 0..plane {
                if trace.pre_relu.data()[f * plane + px] <= 0.0 {
                    assert_eq!(s.data()[f * plane + px], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_bn_gamma_kills_penult_scores() {
        let (mut params, psi_prev) = gen_synthetic(6, toy_dims()).unwrap();
        params.bn_gamma = Tensor::zeros(vec![params.hidden_channels()]).unwrap();
        let trace = forward(&params, &psi_prev).unwrap();
        let map = pgn_heatmap(&trace, &params, &LabelMode::OneHot, Layer::Penultimate, 2.0)
            .unwrap();
        assert!(map.scores.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pnorm_hand_example() {
        let s = Tensor::from_vec(vec![2, 1, 1], vec![3.0, 4.0]).unwrap();
        let psi = Tensor::from_vec(vec![2, 1, 1], vec![1.0, 2.0]).unwrap();
        let out = pnorm_factored(&s, &psi, 2.0).unwrap();
        assert!((out.data()[0] - 125.0f64.sqrt()).abs() < 1e-12);
        let flat = materialized_pnorm(&s, &psi, 2.0).unwrap();
        assert!((flat.data()[0] - 125.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pnorm_zero_factor() {
        let s = Tensor::from_vec(vec![2, 1, 1], vec![3.0, 4.0]).unwrap();
        let psi = Tensor::zeros(vec![3, 1, 1]).unwrap();
        let out = pnorm_factored(&s, &psi, 0.5).unwrap();
        assert_eq!(out.data()[0], 0.0);
    }

    #[test]
    fn pnorm_p1_distributes() {
        let s = Tensor::from_vec(vec![2, 1, 1], vec![0.5, 1.5]).unwrap();
        let psi = Tensor::from_vec(vec![3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let out = pnorm_factored(&s, &psi, 1.0).unwrap();
        assert!((out.data()[0] - 2.0 * 6.0).abs() < 1e-12);
    }

    #[test]
    fn pnorm_rejects_bad_p() {
        let s = Tensor::zeros(vec![1, 1, 1]).unwrap();
        assert!(matches!(
            pnorm_factored(&s, &s, 0.0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            pnorm_factored(&s, &s, -1.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn factorization_identity_random() {
        let mut rng = crate::rng::SplitMix64::new(11);
        for &p in &[0.1, 0.3, 0.5, 1.0, 2.0] {
            let s = Tensor::from_vec(
                vec![4, 3, 3],
                (0..36).map(|_| rng.next_sym()).collect::<Vec<_>>(),
            )
            .unwrap();
            let psi = Tensor::from_vec(
                vec![6, 3, 3],
                (0..54).map(|_| rng.next_sym()).collect::<Vec<_>>(),
            )
            .unwrap();
            let a = pnorm_factored(&s, &psi, p).unwrap();
            let b = materialized_pnorm(&s, &psi, p).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                let denom = x.abs().max(y.abs()).max(1e-12);
                assert!(((x - y) / denom).abs() < 1e-6, "p={p}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn uniform_dominates_scaled_onehot() {
        let (params, trace) = toy_trace(9);
        let c = trace.num_classes() as f64;
        for &p in &[1.0, 2.0] {
            let uni = pgn_heatmap(&trace, &params, &LabelMode::Uniform, Layer::Last, p).unwrap();
            let oh = pgn_heatmap(&trace, &params, &LabelMode::OneHot, Layer::Last, p).unwrap();
            for (u, o) in uni.scores.data().iter().zip(oh.scores.data()) {
                assert!(*u >= (c - 1.0) / c * o - 1e-12);
            }
        }
    }

    #[test]
    fn scale_covariance_in_psi() {
        let (params, trace) = toy_trace(13);
        let lambda = 3.5;
        let mut scaled = trace.clone();
        scaled.psi = trace.psi.scale(lambda);
        for &p in &[0.3, 1.0, 2.0] {
            let base = pgn_heatmap(&trace, &params, &LabelMode::Uniform, Layer::Last, p).unwrap();
            let big = pgn_heatmap(&scaled, &params, &LabelMode::Uniform, Layer::Last, p).unwrap();
            for (a, b) in base.scores.data().iter().zip(big.scores.data()) {
                let denom = b.abs().max(1e-12);
                assert!(((lambda * a - b) / denom).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sharp_probs_zero_onehot_score() {
        // One-hot-sharp probabilities: every non-predicted softmax value ~ 0.
        let logits = Tensor::from_vec(vec![3, 1, 1], vec![500.0, 0.0, 0.0]).unwrap();
        let probs = crate::toynet::softmax(&logits).unwrap();
        let trace = ForwardTrace {
            psi_prev: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            pre_bn: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            pre_relu: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            psi: Tensor::from_vec(vec![2, 1, 1], vec![1.0, 2.0]).unwrap(),
            logits,
            probs,
            pred: vec![0],
        };
        let (s, psi) = last_layer_grad_factors(&trace, &LabelMode::OneHot).unwrap();
        let score = pnorm_factored(&s, &psi, 2.0).unwrap();
        assert!(score.data()[0] < 1e-100);
    }

    #[test]
    fn baseline_maps_extremes() {
        let c = 4;
        let uniform = Tensor::from_vec(vec![c, 1, 1], vec![1.0 / c as f64; c]).unwrap();
        let trace = ForwardTrace {
            psi_prev: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            pre_bn: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            pre_relu: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            psi: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            logits: Tensor::zeros(vec![c, 1, 1]).unwrap(),
            probs: uniform,
            pred: vec![0],
        };
        let maps = baseline_maps(&trace).unwrap();
        assert!((maps.entropy.data()[0] - 1.0).abs() < 1e-12);
        assert!((maps.max_softmax.data()[0] - (1.0 - 0.25)).abs() < 1e-12);

        let onehot = Tensor::from_vec(vec![2, 1, 1], vec![1.0, 0.0]).unwrap();
        let trace2 = ForwardTrace {
            probs: onehot,
            logits: Tensor::zeros(vec![2, 1, 1]).unwrap(),
            ..trace
        };
        let maps2 = baseline_maps(&trace2).unwrap();
        assert_eq!(maps2.entropy.data()[0], 0.0);
        assert_eq!(maps2.max_softmax.data()[0], 0.0);
    }

    #[test]
    fn baseline_entropy_hand_value() {
        let probs = Tensor::from_vec(vec![2, 1, 1], vec![0.8, 0.2]).unwrap();
        let trace = ForwardTrace {
            psi_prev: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            pre_bn: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            pre_relu: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            psi: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            logits: Tensor::zeros(vec![2, 1, 1]).unwrap(),
            probs,
            pred: vec![0],
        };
        let maps = baseline_maps(&trace).unwrap();
        let want = -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln()) / 2f64.ln();
        assert!((maps.entropy.data()[0] - want).abs() < 1e-12);
        assert!((want - 0.7219).abs() < 1e-4);
    }

    #[test]
    fn uniform_logits_give_constant_onehot_scores() {
        // All logits equal: probs uniform, S identical per pixel; scores vary
        // only through the psi norm.
        let (c, h, w) = (3usize, 2usize, 2usize);
        let logits = Tensor::zeros(vec![c, h, w]).unwrap();
        let probs = crate::toynet::softmax(&logits).unwrap();
        let psi = Tensor::from_vec(
            vec![2, h, w],
            vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let trace = ForwardTrace {
            psi_prev: Tensor::zeros(vec![1, h, w]).unwrap(),
            pre_bn: Tensor::zeros(vec![1, h, w]).unwrap(),
            pre_relu: Tensor::zeros(vec![1, h, w]).unwrap(),
            psi,
            logits,
            probs,
            pred: vec![0; h * w],
        };
        let (s, psi) = last_layer_grad_factors(&trace, &LabelMode::OneHot).unwrap();
        let score = pnorm_factored(&s, &psi, 2.0).unwrap();
        // Pixels 0 and 1 share psi-norm with no other pixel; pixels sharing
        // psi values (columns repeat per row here) share scores.
        let plane = h * w;
        for px in 0..plane {
            let psi_norm: f64 = (0..2)
                .map(|e| trace.psi.data()[e * plane + px].powi(2))
                .sum::<f64>()
                .sqrt();
            let s_norm: f64 = (0..c)
                .map(|k| s.data()[k * plane + px].powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((score.data()[px] - psi_norm * s_norm).abs() < 1e-12);
        }
        // S is identical across pixels.
        for k in 0..c {
            for px in 1..plane {
                assert!((s.data()[k * plane + px] - s.data()[k * plane]).abs() < 1e-15);
            }
        }
    }
}
