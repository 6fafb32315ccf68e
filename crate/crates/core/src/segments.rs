//! Connected components of the predicted segmentation, inner/boundary
//! splitting, per-segment IoU targets and the hand-crafted feature table.

use crate::error::{Error, Result};
use crate::gradnorm::GradientScoreMap;
use crate::tensor::Tensor;
use crate::toynet::ForwardTrace;

/// Ground-truth pixels carrying this value are excluded from IoU counts.
pub const IGNORE_LABEL: i64 = 255;

/// Default dilation radius of the localized IoU union, in pixels.
pub const IOU_DILATION: usize = 32;

/// Connected-component decomposition of a class map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    /// Component id per pixel, row-major, ids `1..=count` without gaps.
    pub labels: Vec<u32>,
    pub height: usize,
    pub width: usize,
    /// Predicted class per component, indexed by `id - 1`.
    pub class_of: Vec<i64>,
    pub count: usize,
}

const NEIGHBORS8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = x;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Anchor to the smaller root so ids stay raster-ordered.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// 8-connected components of equal values. Ids are assigned in raster-scan
/// order of each component's first pixel, starting at 1.
pub fn connected_components(pred: &[i64], height: usize, width: usize) -> SegmentMap {
    assert_eq!(pred.len(), height * width, "pred length must be H*W");
    let n = pred.len();
    let mut uf = UnionFind::new(n);
    for a in 0..height {
        for b in 0..width {
            let px = a * width + b;
            // Union with already-visited neighbors (upper row + left).
            for &(da, db) in &[(-1isize, -1isize), (-1, 0), (-1, 1), (0, -1)] {
                let (na, nb) = (a as isize + da, b as isize + db);
                if na < 0 || nb < 0 || nb >= width as isize {
                    continue;
                }
                let npx = na as usize * width + nb as usize;
                if pred[npx] == pred[px] {
                    uf.union(npx as u32, px as u32);
                }
            }
        }
    }
    let mut labels = vec![0u32; n];
    let mut class_of = Vec::new();
    let mut next_id = 0u32;
    let mut id_of_root = vec![0u32; n];
    for px in 0..n {
        let root = uf.find(px as u32) as usize;
        if id_of_root[root] == 0 {
            next_id += 1;
            id_of_root[root] = next_id;
            class_of.push(pred[px]);
        }
        labels[px] = id_of_root[root];
    }
    SegmentMap {
        labels,
        height,
        width,
        class_of,
        count: next_id as usize,
    }
}

/// 8-connected components of the `true` pixels of a binary mask, as pixel
/// index lists in raster order of first pixel.
pub fn mask_components(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    assert_eq!(mask.len(), height * width);
    let as_classes: Vec<i64> = mask.iter().map(|&m| i64::from(m)).collect();
    let seg = connected_components(&as_classes, height, width);
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut id_map = vec![usize::MAX; seg.count + 1];
    for px in 0..mask.len() {
        if !mask[px] {
            continue;
        }
        let id = seg.labels[px] as usize;
        if id_map[id] == usize::MAX {
            id_map[id] = comps.len();
            comps.push(Vec::new());
        }
        comps[id_map[id]].push(px);
    }
    comps
}

/// Inner-pixel flags: a pixel is inner iff all 8 neighbors exist in-image and
/// share its component id. Everything else (including every border pixel) is
/// boundary.
pub fn inner_flags(seg: &SegmentMap) -> Vec<bool> {
    let (h, w) = (seg.height, seg.width);
    let mut inner = vec![false; h * w];
    for a in 0..h {
        for b in 0..w {
            let px = a * w + b;
            let id = seg.labels[px];
            let mut ok = true;
            for &(da, db) in &NEIGHBORS8 {
                let (na, nb) = (a as isize + da, b as isize + db);
                if na < 0 || nb < 0 || na >= h as isize || nb >= w as isize {
                    ok = false;
                    break;
                }
                if seg.labels[na as usize * w + nb as usize] != id {
                    ok = false;
                    break;
                }
            }
            inner[px] = ok;
        }
    }
    inner
}

/// Pixel-wise dispersion maps of a `C x H x W` probability tensor:
/// normalized entropy `E` and probability margin `M = 1 - p_max + p_2nd`.
pub fn dispersion_maps(probs: &Tensor) -> Result<(Tensor, Tensor)> {
    if probs.shape().len() != 3 || probs.shape()[0] < 2 {
        return Err(Error::Dimension(format!(
            "dispersion_maps expects C x H x W with C >= 2, got {:?}",
            probs.shape()
        )));
    }
    let (c, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let plane = h * w;
    let log_c = (c as f64).ln();
    let mut e = vec![0.0f64; plane];
    let mut m = vec![0.0f64; plane];
    for px in 0..plane {
        let mut ent = 0.0f64;
        let mut top = 0.0f64;
        let mut second = 0.0f64;
        for k in 0..c {
            let v = probs.data()[k * plane + px];
            if v > 0.0 {
                ent -= v * v.ln();
            }
            if v > top {
                second = top;
                top = v;
            } else if v > second {
                second = v;
            }
        }
        e[px] = ent / log_c;
        m[px] = 1.0 - top + second;
    }
    Ok((
        Tensor::from_vec(vec![h, w], e)?,
        Tensor::from_vec(vec![h, w], m)?,
    ))
}

/// Per-component IoU against ground truth, indexed by `id - 1`.
///
/// The union is localized: the ground-truth mask of the component's class is
/// clipped to the component's bounding box dilated by `dilation` pixels, so a
/// small segment of a large class is not drowned by the full-image mask.
/// Ignore-label pixels count in neither intersection nor union.
pub fn segment_iou(
    seg: &SegmentMap,
    gt: &[i64],
    ignore_label: i64,
    dilation: usize,
) -> Result<Vec<f64>> {
    let (h, w) = (seg.height, seg.width);
    if gt.len() != h * w {
        return Err(Error::Dimension(format!(
            "gt map has {} pixels, expected {}",
            gt.len(),
            h * w
        )));
    }
    // Bounding box per component.
    let mut boxes = vec![(usize::MAX, usize::MAX, 0usize, 0usize); seg.count];
    for a in 0..h {
        for b in 0..w {
            let id = seg.labels[a * w + b] as usize - 1;
            let bx = &mut boxes[id];
            bx.0 = bx.0.min(a);
            bx.1 = bx.1.min(b);
            bx.2 = bx.2.max(a);
            bx.3 = bx.3.max(b);
        }
    }
    let mut out = vec![0.0f64; seg.count];
    for id in 0..seg.count {
        let class = seg.class_of[id];
        let (a0, b0, a1, b1) = boxes[id];
        let a0 = a0.saturating_sub(dilation);
        let b0 = b0.saturating_sub(dilation);
        let a1 = (a1 + dilation).min(h - 1);
        let b1 = (b1 + dilation).min(w - 1);
        let mut inter = 0usize;
        let mut union = 0usize;
        for a in a0..=a1 {
            for b in b0..=b1 {
                let px = a * w + b;
                if gt[px] == ignore_label {
                    continue;
                }
                let in_comp = seg.labels[px] as usize == id + 1;
                let in_gt = gt[px] == class;
                if in_comp && in_gt {
                    inter += 1;
                }
                if in_comp || in_gt {
                    union += 1;
                }
            }
        }
        out[id] = if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(out)
}

/// One feature row of the segment table.
#[derive(Debug, Clone)]
pub struct SegmentFeatureRow {
    pub id: u32,
    pub values: Vec<f64>,
    /// Ground-truth IoU target.
    pub iou: f64,
    /// Set when the segment has no inner pixels; inner features are 0 then.
    pub inner_empty: bool,
}

/// Structured per-segment dataset: columns are features, rows are predicted
/// segments.
#[derive(Debug, Clone)]
pub struct SegmentTable {
    pub feature_names: Vec<String>,
    pub rows: Vec<SegmentFeatureRow>,
}

impl SegmentTable {
    /// CSV with header `segment_id,<features...>,inner_empty,iou`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment_id");
        for name in &self.feature_names {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",inner_empty,iou\n");
        for row in &self.rows {
            out.push_str(&row.id.to_string());
            for v in &row.values {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push_str(&format!(",{},{}\n", u8::from(row.inner_empty), row.iou));
        }
        out
    }
}

struct PixelSets {
    all: Vec<Vec<usize>>,
    inner: Vec<Vec<usize>>,
    boundary: Vec<Vec<usize>>,
}

fn pixel_sets(seg: &SegmentMap) -> PixelSets {
    let inner = inner_flags(seg);
    let mut all = vec![Vec::new(); seg.count];
    let mut inn = vec![Vec::new(); seg.count];
    let mut bd = vec![Vec::new(); seg.count];
    for px in 0..seg.labels.len() {
        let id = seg.labels[px] as usize - 1;
        all[id].push(px);
        if inner[px] {
            inn[id].push(px);
        } else {
            bd[id].push(px);
        }
    }
    PixelSets {
        all,
        inner: inn,
        boundary: bd,
    }
}

fn mean_over(map: &[f64], pixels: &[usize]) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    pixels.iter().map(|&px| map[px]).sum::<f64>() / pixels.len() as f64
}

/// Population (biased) variance; 0 on empty sets.
fn var_over(map: &[f64], pixels: &[usize]) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    let mu = mean_over(map, pixels);
    pixels
        .iter()
        .map(|&px| {
            let d = map[px] - mu;
            d * d
        })
        .sum::<f64>()
        / pixels.len() as f64
}

/// Builds the per-segment feature table from a forward trace, its component
/// decomposition, the configured gradient heatmaps and the ground truth.
///
/// Feature layout (names in this order): `S, S_in, S_bd, S_rel, S_in_rel`,
/// then `P_1..P_C` mean class probabilities, then for each dispersion `D` in
/// `{E, M}`: `D_mu, D_mu_in, D_mu_bd, D_mu_rel, D_mu_in_rel`, then per
/// heatmap tag `G`: `G_mu, G_mu_in, G_mu_bd, G_mu_rel, G_mu_in_rel, G_v,
/// G_v_in, G_v_bd, G_v_rel, G_v_in_rel`, where `_rel` features are the
/// whole/inner values scaled by `S_rel`/`S_in_rel`. Total feature count:
/// `5 + C + 10 + 10 * #heatmaps`.
pub fn build_feature_table(
    trace: &ForwardTrace,
    seg: &SegmentMap,
    heatmaps: &[GradientScoreMap],
    gt: &[i64],
    ignore_label: i64,
    dilation: usize,
) -> Result<SegmentTable> {
    let (h, w) = (trace.height(), trace.width());
    if seg.height != h || seg.width != w {
        return Err(Error::Dimension(
            "segment map and trace spatial dims disagree".into(),
        ));
    }
    for m in heatmaps {
        if m.scores.shape() != [h, w] {
            return Err(Error::Dimension(format!(
                "heatmap {} has shape {:?}, expected [{h}, {w}]",
                m.tag(),
                m.scores.shape()
            )));
        }
    }
    let c = trace.num_classes();
    let plane = h * w;
    let (e_map, m_map) = dispersion_maps(&trace.probs)?;
    let ious = segment_iou(seg, gt, ignore_label, dilation)?;
    let sets = pixel_sets(seg);

    let mut feature_names = vec![
        "S".to_string(),
        "S_in".to_string(),
        "S_bd".to_string(),
        "S_rel".to_string(),
        "S_in_rel".to_string(),
    ];
    for k in 0..c {
        feature_names.push(format!("P_{}", k + 1));
    }
    for d in ["E", "M"] {
        for suffix in ["mu", "mu_in", "mu_bd", "mu_rel", "mu_in_rel"] {
            feature_names.push(format!("{d}_{suffix}"));
        }
    }
    for mhm in heatmaps {
        let tag = mhm.tag();
        for suffix in [
            "mu", "mu_in", "mu_bd", "mu_rel", "mu_in_rel", "v", "v_in", "v_bd", "v_rel",
            "v_in_rel",
        ] {
            feature_names.push(format!("{tag}_{suffix}"));
        }
    }

    let mut rows = Vec::with_capacity(seg.count);
    for id in 0..seg.count {
        let all = &sets.all[id];
        let inn = &sets.inner[id];
        let bd = &sets.boundary[id];
        let s = all.len() as f64;
        let s_in = inn.len() as f64;
        // Border pixels are always boundary, so s_bd >= 1 for any component.
        let s_bd = bd.len() as f64;
        let s_rel = s / s_bd;
        let s_in_rel = s_in / s_bd;
        let inner_empty = inn.is_empty();

        let mut values = vec![s, s_in, s_bd, s_rel, s_in_rel];
        for k in 0..c {
            let class_plane = &trace.probs.data()[k * plane..(k + 1) * plane];
            values.push(mean_over(class_plane, all));
        }
        for map in [&e_map, &m_map] {
            let mu = mean_over(map.data(), all);
            let mu_in = mean_over(map.data(), inn);
            let mu_bd = mean_over(map.data(), bd);
            values.extend_from_slice(&[mu, mu_in, mu_bd, mu * s_rel, mu_in * s_in_rel]);
        }
        for mhm in heatmaps {
            let g = mhm.scores.data();
            let mu = mean_over(g, all);
            let mu_in = mean_over(g, inn);
            let mu_bd = mean_over(g, bd);
            let v = var_over(g, all);
            let v_in = var_over(g, inn);
            let v_bd = var_over(g, bd);
            values.extend_from_slice(&[
                mu,
                mu_in,
                mu_bd,
                mu * s_rel,
                mu_in * s_in_rel,
                v,
                v_in,
                v_bd,
                v * s_rel,
                v_in * s_in_rel,
            ]);
        }
        rows.push(SegmentFeatureRow {
            id: id as u32 + 1,
            values,
            iou: ious[id],
            inner_empty,
        });
    }
    Ok(SegmentTable {
        feature_names,
        rows,
    })
}
