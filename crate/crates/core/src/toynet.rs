//! Two-layer reference segmentation head and its forward pass.
//!
//! Architecture: conv 3x3 -> batch norm (inference mode) -> ReLU ->
//! conv 1x1 -> softmax. The forward pass keeps every intermediate tensor the
//! gradient engine needs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::rng::SplitMix64;
use crate::tensor::{conv2d, Dtype, Tensor};

/// Channel/spatial sizes of a head instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    /// Channels entering the 3x3 convolution.
    pub in_channels: usize,
    /// Channels between the two convolutions.
    pub hidden_channels: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
}

/// Weights, biases and batch-norm state of the head.
#[derive(Debug, Clone)]
pub struct SegHeadParams {
    /// `hidden x in x 3 x 3` filter bank of the penultimate convolution.
    pub k_penult: Tensor,
    /// `hidden` bias of the penultimate convolution.
    pub b_penult: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_mean: Tensor,
    pub bn_var: Tensor,
    pub bn_eps: f64,
    /// `classes x hidden x 1 x 1` filter bank of the final convolution.
    pub k_last: Tensor,
    /// `classes` bias of the final convolution.
    pub b_last: Tensor,
    pub num_classes: usize,
}

impl SegHeadParams {
    pub fn hidden_channels(&self) -> usize {
        self.k_penult.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.k_penult.shape()[1]
    }

    /// Validates shape consistency and the batch-norm invariants.
    pub fn validate(&self) -> Result<()> {
        let kp = self.k_penult.shape();
        if kp.len() != 4 || kp[2] != 3 || kp[3] != 3 {
            return Err(Error::Dimension(format!(
                "k_penult must be hidden x in x 3 x 3, got {kp:?}"
            )));
        }
        let hidden = kp[0];
        let kl = self.k_last.shape();
        if kl.len() != 4 || kl[2] != 1 || kl[3] != 1 {
            return Err(Error::Dimension(format!(
                "k_last must be classes x hidden x 1 x 1, got {kl:?}"
            )));
        }
        if kl[1] != hidden {
            return Err(Error::Dimension(format!(
                "k_last expects {} hidden channels, k_penult provides {hidden}",
                kl[1]
            )));
        }
        if self.num_classes != kl[0] {
            return Err(Error::Dimension(format!(
                "num_classes {} != k_last output channels {}",
                self.num_classes, kl[0]
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("num_classes must be >= 2".into()));
        }
        for (name, t) in [
            ("b_penult", &self.b_penult),
            ("bn_gamma", &self.bn_gamma),
            ("bn_beta", &self.bn_beta),
            ("bn_mean", &self.bn_mean),
            ("bn_var", &self.bn_var),
        ] {
            if t.shape() != [hidden] {
                return Err(Error::Dimension(format!(
                    "{name} must have shape [{hidden}], got {:?}",
                    t.shape()
                )));
            }
        }
        if self.b_last.shape() != [self.num_classes] {
            return Err(Error::Dimension(format!(
                "b_last must have shape [{}], got {:?}",
                self.num_classes,
                self.b_last.shape()
            )));
        }
        if self.bn_eps <= 0.0 {
            return Err(Error::Validation("bn_eps must be > 0".into()));
        }
        if self.bn_var.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Validation("bn_var must be elementwise > 0".into()));
        }
        Ok(())
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to the 3x3 convolution, `in x H x W`.
    pub psi_prev: Tensor,
    /// 3x3 convolution output, before batch norm.
    pub pre_bn: Tensor,
    /// Batch-norm output, input to ReLU.
    pub pre_relu: Tensor,
    /// ReLU output, input to the final 1x1 convolution, `hidden x H x W`.
    pub psi: Tensor,
    /// Final convolution output, `classes x H x W`.
    pub logits: Tensor,
    /// Softmax of the logits.
    pub probs: Tensor,
    /// Per-pixel argmax of `probs`, row-major `H x W`. Ties resolve to the
    /// lowest class index.
    pub pred: Vec<i64>,
}

impl ForwardTrace {
    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }
}

/// Per-pixel softmax over the class axis of a `C x H x W` tensor, computed
/// with max-subtraction so large logits cannot overflow.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 3 {
        return Err(Error::Dimension(format!(
            "softmax expects C x H x W, got {:?}",
            logits.shape()
        )));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input contains NaN/Inf".into()));
    }
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let plane = h * w;
    let src = logits.data();
    let mut out = vec![0.0f64; c * plane];
    for px in 0..plane {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(src[k * plane + px]);
        }
        let mut denom = 0.0;
        for k in 0..c {
            let e = (src[k * plane + px] - m).exp();
            out[k * plane + px] = e;
            denom += e;
        }
        for k in 0..c {
            out[k * plane + px] /= denom;
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Runs the head and records every intermediate tensor.
pub fn forward(params: &SegHeadParams, psi_prev: &Tensor) -> Result<ForwardTrace> {
    params.validate()?;
    if psi_prev.shape().len() != 3 || psi_prev.shape()[0] != params.in_channels() {
        return Err(Error::Dimension(format!(
            "psi_prev must be {} x H x W, got {:?}",
            params.in_channels(),
            psi_prev.shape()
        )));
    }
    let pre_bn = conv2d(psi_prev, &params.k_penult, &params.b_penult, 1)?;
    let (hidden, h, w) = (pre_bn.shape()[0], pre_bn.shape()[1], pre_bn.shape()[2]);
    let plane = h * w;

    // Inference-mode batch norm: (x - mean)/sqrt(var + eps) * gamma + beta.
    let mut pre_relu = vec![0.0f64; hidden * plane];
    for f in 0..hidden {
        let gamma = params.bn_gamma.data()[f];
        let beta = params.bn_beta.data()[f];
        let mean = params.bn_mean.data()[f];
        let inv = 1.0 / (params.bn_var.data()[f] + params.bn_eps).sqrt();
        for px in 0..plane {
            pre_relu[f * plane + px] = (pre_bn.data()[f * plane + px] - mean) * inv * gamma + beta;
        }
    }
    let pre_relu = Tensor::from_vec(vec![hidden, h, w], pre_relu)?;
    let psi = pre_relu.map(|v| v.max(0.0));
    let logits = conv2d(&psi, &params.k_last, &params.b_last, 0)?;
    let probs = softmax(&logits)?;

    let c = params.num_classes;
    let mut pred = vec![0i64; plane];
    for px in 0..plane {
        let mut best = 0usize;
        let mut best_v = probs.data()[px];
        for k in 1..c {
            let v = probs.data()[k * plane + px];
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        pred[px] = best as i64;
    }

    Ok(ForwardTrace {
        psi_prev: psi_prev.clone(),
        pre_bn,
        pre_relu,
        psi,
        logits,
        probs,
        pred,
    })
}

/// Deterministic synthetic head + input.
///
/// Draw order and scaling are fixed so that identical `(seed, dims)` yield
/// bit-identical tensors across implementations. One SplitMix64 stream seeded
/// with `seed` is consumed in this exact order, row-major within each tensor:
///
/// 1. `k_penult`: sym * inv_sqrt(in_channels)
/// 2. `b_penult`: sym * 0.1
/// 3. `bn_gamma`: 0.5 + unit          (in [0.5, 1.5))
/// 4. `bn_beta`:  sym * 0.1
/// 5. `bn_mean`:  sym * 0.25
/// 6. `bn_var`:   0.5 + 0.5 * unit    (strictly positive)
/// 7. `k_last`:   sym * inv_sqrt(hidden_channels)
/// 8. `b_last`:   sym * 0.1
/// 9. `psi_prev`: sym
///
/// where `sym` is uniform in [-1, 1) and `unit` in [0, 1). `bn_eps` is fixed
/// at 1e-5. The scaling keeps logits O(1) so softmax never saturates on toy
/// instances.
pub fn gen_synthetic(seed: u64, dims: HeadDims) -> Result<(SegHeadParams, Tensor)> {
    if dims.num_classes < 2 {
        return Err(Error::Validation(format!(
            "num_classes must be >= 2, got {}",
            dims.num_classes
        )));
    }
    for (name, v) in [
        ("in_channels", dims.in_channels),
        ("hidden_channels", dims.hidden_channels),
        ("height", dims.height),
        ("width", dims.width),
    ] {
        if v == 0 {
            return Err(Error::Validation(format!("{name} must be >= 1")));
        }
    }
    let mut rng = SplitMix64::new(seed);
    let mut draw = |n: usize, f: &mut dyn FnMut(&mut SplitMix64) -> f64| -> Vec<f64> {
        (0..n).map(|_| f(&mut rng)).collect()
    };
    let (ci, ch, c, h, w) = (
        dims.in_channels,
        dims.hidden_channels,
        dims.num_classes,
        dims.height,
        dims.width,
    );
    let s_pen = 1.0 / (ci as f64).sqrt();
    let s_last = 1.0 / (ch as f64).sqrt();
    let k_penult = Tensor::from_vec(
        vec![ch, ci, 3, 3],
        draw(ch * ci * 9, &mut |r| r.next_sym() * s_pen),
    )?;
    let b_penult = Tensor::from_vec(vec![ch], draw(ch, &mut |r| r.next_sym() * 0.1))?;
    let bn_gamma = Tensor::from_vec(vec![ch], draw(ch, &mut |r| 0.5 + r.next_unit()))?;
    let bn_beta = Tensor::from_vec(vec![ch], draw(ch, &mut |r| r.next_sym() * 0.1))?;
    let bn_mean = Tensor::from_vec(vec![ch], draw(ch, &mut |r| r.next_sym() * 0.25))?;
    let bn_var = Tensor::from_vec(vec![ch], draw(ch, &mut |r| 0.5 + 0.5 * r.next_unit()))?;
    let k_last = Tensor::from_vec(
        vec![c, ch, 1, 1],
        draw(c * ch, &mut |r| r.next_sym() * s_last),
    )?;
    let b_last = Tensor::from_vec(vec![c], draw(c, &mut |r| r.next_sym() * 0.1))?;
    let psi_prev = Tensor::from_vec(vec![ci, h, w], draw(ci * h * w, &mut |r| r.next_sym()))?;

    let params = SegHeadParams {
        k_penult,
        b_penult,
        bn_gamma,
        bn_beta,
        bn_mean,
        bn_var,
        bn_eps: 1e-5,
        k_last,
        b_last,
        num_classes: c,
    };
    params.validate()?;
    Ok((params, psi_prev))
}

/// On-disk description of a head bundle; the manifest is the single source of
/// truth for tensor shapes during ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: Option<u64>,
    pub dims: HeadDims,
    pub bn_eps: f64,
    /// Logical tensor name -> file name inside the bundle directory.
    pub tensors: BTreeMap<String, String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

const TENSOR_NAMES: [&str; 9] = [
    "k_penult", "b_penult", "bn_gamma", "bn_beta", "bn_mean", "bn_var", "k_last", "b_last",
    "psi_prev",
];

/// Writes the parameter bundle as f32 NPY files plus `manifest.json`.
pub fn save_bundle(
    dir: impl AsRef<Path>,
    params: &SegHeadParams,
    psi_prev: &Tensor,
    seed: Option<u64>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let dims = HeadDims {
        in_channels: params.in_channels(),
        hidden_channels: params.hidden_channels(),
        num_classes: params.num_classes,
        height: psi_prev.shape()[1],
        width: psi_prev.shape()[2],
    };
    let fields: [(&str, &Tensor); 9] = [
        ("k_penult", &params.k_penult),
        ("b_penult", &params.b_penult),
        ("bn_gamma", &params.bn_gamma),
        ("bn_beta", &params.bn_beta),
        ("bn_mean", &params.bn_mean),
        ("bn_var", &params.bn_var),
        ("k_last", &params.k_last),
        ("b_last", &params.b_last),
        ("psi_prev", psi_prev),
    ];
    let mut tensors = BTreeMap::new();
    for (name, t) in fields {
        let file = format!("{name}.npy");
        npy::write_npy(&t.clone().astype(Dtype::F32), dir.join(&file))?;
        tensors.insert(name.to_string(), file);
    }
    let manifest = Manifest {
        seed,
        dims,
        bn_eps: params.bn_eps,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_NAME), json + "\n")?;
    Ok(())
}

/// Loads a bundle, checking every tensor against the manifest's dims.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<(SegHeadParams, Tensor, Manifest)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_NAME))?)?;
    let get = |name: &str| -> Result<Tensor> {
        let file = manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("manifest missing tensor '{name}'")))?;
        npy::read_npy(dir.join(file))
    };
    let d = manifest.dims;
    let expectations: [(&str, Vec<usize>); 9] = [
        ("k_penult", vec![d.hidden_channels, d.in_channels, 3, 3]),
        ("b_penult", vec![d.hidden_channels]),
        ("bn_gamma", vec![d.hidden_channels]),
        ("bn_beta", vec![d.hidden_channels]),
        ("bn_mean", vec![d.hidden_channels]),
        ("bn_var", vec![d.hidden_channels]),
        ("k_last", vec![d.num_classes, d.hidden_channels, 1, 1]),
        ("b_last", vec![d.num_classes]),
        ("psi_prev", vec![d.in_channels, d.height, d.width]),
    ];
    let mut loaded = BTreeMap::new();
    for (name, shape) in &expectations {
        let t = get(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "bundle tensor '{name}': manifest dims imply {shape:?}, file has {:?}",
                t.shape()
            )));
        }
        loaded.insert(name.to_string(), t);
    }
    let mut take = |name: &str| loaded.remove(name).expect("loaded above");
    let params = SegHeadParams {
        k_penult: take("k_penult"),
        b_penult: take("b_penult"),
        bn_gamma: take("bn_gamma"),
        bn_beta: take("bn_beta"),
        bn_mean: take("bn_mean"),
        bn_var: take("bn_var"),
        bn_eps: manifest.bn_eps,
        k_last: take("k_last"),
        b_last: take("b_last"),
        num_classes: d.num_classes,
    };
    params.validate()?;
    let psi_prev = take("psi_prev");
    Ok((params, psi_prev, manifest))
}

/// Names of the files a bundle contains besides the manifest.
pub fn bundle_tensor_names() -> &'static [&'static str] {
    &TENSOR_NAMES
}
