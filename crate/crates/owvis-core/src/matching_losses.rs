//! Bipartite matching between queries and ground truth plus the training
//! loss components: focal classification/objectness losses, box L1 +
//! GIoU-free regression, dice+focal mask losses, and the total-loss
//! composition `L = L_c + L_r + alpha * L_f + L_contr`.

use crate::autodiff::{Tape, Var};
use crate::config::LossParams;
use crate::data_model::{BoxCxcywh, CategoryId, Mask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ground truth for one instance restricted to a training clip window.
/// Boxes are normalized to the (padded) clip frame; masks stay at the
/// annotation resolution. Frames where the object is absent carry the
/// empty box and an all-zero mask.
#[derive(Clone, Debug)]
pub struct GtClipInstance {
    pub category_id: CategoryId,
    /// Classifier index (1..=C).
    pub class_index: usize,
    pub boxes: Vec<BoxCxcywh>,
    pub masks: Vec<Mask>,
}

/// Result of the bipartite matching.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// (query index, ground-truth index) pairs, sorted by ground truth.
    pub assignment: Vec<(usize, usize)>,
    pub cost: f64,
}

impl MatchResult {
    pub fn matched_queries(&self) -> Vec<usize> {
        self.assignment.iter().map(|&(q, _)| q).collect()
    }
}

/// Exact minimum-cost assignment of `rows <= cols` via shortest
/// augmenting paths (Jonker-Volgenant). Returns the column chosen for
/// each row. Ascending column scans with strict improvement give a fixed
/// deterministic result on ties.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment needs rows <= cols");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // p[j] = row assigned to column j (1-based), 0 = free
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Generalized IoU of two center-format boxes, in `[-1, 1]`.
pub fn giou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.to_xyxy();
    let (bx0, by0, bx1, by1) = b.to_xyxy();
    let ia = (ax1.min(bx1) - ax0.max(bx0)).max(0.0) * (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let area_a = (ax1 - ax0).max(0.0) * (ay1 - ay0).max(0.0);
    let area_b = (bx1 - bx0).max(0.0) * (by1 - by0).max(0.0);
    let union = area_a + area_b - ia;
    let iou = if union > 0.0 { ia / union } else { 0.0 };
    let cw = ax1.max(bx1) - ax0.min(bx0);
    let ch = ay1.max(by1) - ay0.min(by0);
    let enclose = cw * ch;
    if enclose > 0.0 {
        iou - (enclose - union) / enclose
    } else {
        iou
    }
}

fn box_l1(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    ((a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()) / 4.0
}

/// Row-wise softmax of a 2-D tensor of logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        let row = &logits.data()[r * k..(r + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in 0..k {
            let e = (row[j] - mx).exp();
            out[r * k + j] = e;
            s += e;
        }
        for j in 0..k {
            out[r * k + j] /= s;
        }
    }
    Tensor::new(&[n, k], out)
}

/// Minimum-cost matching of the K ground-truth instances to queries under
/// `w_cls (1 - p_i(c_j)) + w_box L1 + w_giou (1 - GIoU)`, box terms
/// averaged over the frames where the ground truth is present.
pub fn hungarian_match(
    class_logits: &Tensor,
    boxes: &Tensor,
    gt: &[GtClipInstance],
    loss: &LossParams,
) -> Result<MatchResult> {
    let q = class_logits.shape()[0];
    let k = gt.len();
    if k > q {
        return Err(Error::Matching(format!("{k} ground-truth instances exceed {q} queries")));
    }
    if k == 0 {
        return Ok(MatchResult { assignment: Vec::new(), cost: 0.0 });
    }
    let m = boxes.shape()[1];
    let probs = softmax_rows(class_logits);
    let mut cost = vec![vec![0.0; q]; k];
    for (j, inst) in gt.iter().enumerate() {
        assert_eq!(inst.boxes.len(), m, "ground-truth frame count must match the clip");
        for i in 0..q {
            let p = probs.at(&[i, inst.class_index]);
            let mut box_cost = 0.0;
            let mut giou_cost = 0.0;
            let mut frames = 0usize;
            for f in 0..m {
                if inst.boxes[f].is_empty() {
                    continue;
                }
                let pred = BoxCxcywh {
                    cx: boxes.at(&[i, f, 0]),
                    cy: boxes.at(&[i, f, 1]),
                    w: boxes.at(&[i, f, 2]),
                    h: boxes.at(&[i, f, 3]),
                };
                box_cost += box_l1(&pred, &inst.boxes[f]);
                giou_cost += 1.0 - giou(&pred, &inst.boxes[f]);
                frames += 1;
            }
            if frames > 0 {
                box_cost /= frames as f64;
                giou_cost /= frames as f64;
            }
            cost[j][i] = loss.w_cls * (1.0 - p) + loss.w_box * box_cost + loss.w_giou * giou_cost;
        }
    }
    let row_to_col = solve_assignment(&cost);
    let mut assignment: Vec<(usize, usize)> =
        row_to_col.iter().enumerate().map(|(j, &i)| (i, j)).collect();
    assignment.sort_by_key(|&(_, j)| j);
    let total = assignment.iter().map(|&(i, j)| cost[j][i]).sum();
    Ok(MatchResult { assignment, cost: total })
}

/// Sum of binary focal terms `-alpha_f (1 - p_t)^gamma log p_t` over all
/// elements, where `p_t` is the probability assigned to the 0/1 target.
pub fn binary_focal_sum(tape: &mut Tape, logits: Var, targets: &[f64], gamma: f64, alpha: f64) -> Var {
    let n = tape.value(logits).numel();
    assert_eq!(n, targets.len());
    let shape = tape.shape(logits).to_vec();
    let sign = Tensor::new(&shape, targets.iter().map(|&t| 2.0 * t - 1.0).collect());
    let z = tape.mul_const(logits, &sign);
    let p_t = tape.sigmoid(z);
    let one_minus = tape.scale(p_t, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let weight = tape.pow_const(one_minus, gamma);
    let neg_z = tape.scale(z, -1.0);
    let nll = tape.softplus(neg_z); // -log p_t
    let elems = tape.mul(weight, nll);
    let s = tape.sum(elems);
    tape.scale(s, alpha)
}

/// Focal loss averaged over the number of foreground queries.
pub fn focal_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[f64],
    gamma: f64,
    alpha: f64,
    num_foreground: usize,
) -> Var {
    let s = binary_focal_sum(tape, logits, targets, gamma, alpha);
    tape.scale(s, 1.0 / num_foreground.max(1) as f64)
}

/// Classification targets for the (C+1)-wide class branch: matched
/// queries are one-hot at their class, pseudo-unknowns one-hot at class 0,
/// background rows all-negative.
pub fn class_targets(
    q: usize,
    width: usize,
    assignment: &[(usize, usize)],
    gt: &[GtClipInstance],
    pseudo_unknown: &[usize],
) -> Vec<f64> {
    let mut t = vec![0.0; q * width];
    for &(qi, gj) in assignment {
        let cls = gt[gj].class_index;
        assert!(cls < width, "class index {cls} out of classifier width {width}");
        t[qi * width + cls] = 1.0;
    }
    for &qi in pseudo_unknown {
        t[qi * width] = 1.0;
    }
    t
}

/// Class-agnostic targets: 1 for matched and pseudo-unknown queries, 0
/// for background.
pub fn objectness_targets(q: usize, foreground: &[usize]) -> Vec<f64> {
    let mut t = vec![0.0; q];
    for &i in foreground {
        t[i] = 1.0;
    }
    t
}

pub struct RegressionInputs<'a> {
    /// Predicted boxes `[q, M, 4]` on the tape.
    pub boxes: Var,
    /// Mask logits `[K, M, h8, w8]` for the matched queries, ordered like
    /// the assignment.
    pub matched_mask_logits: Var,
    pub assignment: &'a [(usize, usize)],
    pub gt: &'a [GtClipInstance],
    /// Crop window from the padded clip back to annotation resolution.
    pub pad_top: usize,
    pub pad_left: usize,
    pub gt_h: usize,
    pub gt_w: usize,
}

/// Box L1 (coordinate mean, then mean over present frames and instances)
/// plus the mask loss (dice + per-pixel focal at ground-truth resolution,
/// or literal L1 on probabilities when configured).
pub fn regression_loss(tape: &mut Tape, inputs: &RegressionInputs, loss: &LossParams) -> (Var, Var) {
    let k = inputs.assignment.len();
    if k == 0 {
        let z = tape.constant(Tensor::scalar(0.0));
        return (z, z);
    }
    let m = tape.shape(inputs.boxes)[1];

    // ---- box L1 over matched, present frames ----
    let queries: Vec<usize> = inputs.assignment.iter().map(|&(q, _)| q).collect();
    let pred = tape.gather_rows(inputs.boxes, &queries); // [K, M, 4]
    let mut gt_data = vec![0.0; k * m * 4];
    let mut valid = vec![0.0; k * m * 4];
    let mut valid_frames = 0usize;
    for (row, &(_, gj)) in inputs.assignment.iter().enumerate() {
        for f in 0..m {
            let b = &inputs.gt[gj].boxes[f];
            if b.is_empty() {
                continue;
            }
            valid_frames += 1;
            let base = (row * m + f) * 4;
            gt_data[base..base + 4].copy_from_slice(&[b.cx, b.cy, b.w, b.h]);
            valid[base..base + 4].copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        }
    }
    let l_box = if valid_frames == 0 {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let gt_c = Tensor::new(&[k, m, 4], gt_data);
        let valid_c = Tensor::new(&[k, m, 4], valid);
        let neg = tape.scale(pred, -1.0);
        let diff = tape.add_const(neg, &gt_c);
        let l1 = tape.abs(diff);
        let l1 = tape.mul_const(l1, &valid_c);
        let s = tape.sum(l1);
        tape.scale(s, 1.0 / (4.0 * valid_frames as f64))
    };

    // ---- mask loss at ground-truth resolution ----
    let (h8, w8) = {
        let s = tape.shape(inputs.matched_mask_logits);
        (s[2], s[3])
    };
    let flat = tape.reshape(inputs.matched_mask_logits, &[k * m, h8, w8]);
    let up = tape.upsample_bilinear(flat, h8 * 8, w8 * 8);
    let cropped = tape.crop2d(up, inputs.pad_top, inputs.pad_left, inputs.gt_h, inputs.gt_w);
    let pixels = inputs.gt_h * inputs.gt_w;
    let logits_flat = tape.reshape(cropped, &[k * m * pixels]);

    let mut gt_pix = vec![0.0; k * m * pixels];
    for (row, &(_, gj)) in inputs.assignment.iter().enumerate() {
        for f in 0..m {
            let mask = &inputs.gt[gj].masks[f];
            debug_assert_eq!((mask.h, mask.w), (inputs.gt_h, inputs.gt_w));
            let base = (row * m + f) * pixels;
            for (p, &bit) in mask.pixels().iter().enumerate() {
                if bit {
                    gt_pix[base + p] = 1.0;
                }
            }
        }
    }

    let l_mask = if loss.literal_l1_mask {
        let probs = tape.sigmoid(logits_flat);
        let neg = tape.scale(probs, -1.0);
        let gt_c = Tensor::new(&[k * m * pixels], gt_pix);
        let diff = tape.add_const(neg, &gt_c);
        let l1 = tape.abs(diff);
        tape.mean(l1)
    } else {
        // dice over each (instance, frame)
        let probs = tape.sigmoid(logits_flat);
        let probs2 = tape.reshape(probs, &[k * m, pixels]);
        let gt_c = Tensor::new(&[k * m, pixels], gt_pix.clone());
        let pg = tape.mul_const(probs2, &gt_c);
        let pg_sum = tape.sum_rows(pg);
        let p_sum = tape.sum_rows(probs2);
        let mut g_sums = vec![0.0; k * m];
        for r in 0..k * m {
            g_sums[r] = gt_pix[r * pixels..(r + 1) * pixels].iter().sum();
        }
        let num = tape.scale(pg_sum, 2.0);
        let num = tape.add_scalar(num, 1.0);
        let den = tape.add_scalar(p_sum, 1.0);
        let den = tape.add_const(den, &Tensor::new(&[k * m], g_sums));
        let ratio = tape.div(num, den);
        let neg = tape.scale(ratio, -1.0);
        let dice = tape.add_scalar(neg, 1.0);
        let dice_mean = tape.mean(dice);

        let fsum = binary_focal_sum(tape, logits_flat, &gt_pix, loss.gamma, loss.alpha_f);
        let fmean = tape.scale(fsum, 1.0 / (k * m * pixels) as f64);
        tape.add(dice_mean, fmean)
    };

    (l_box, l_mask)
}

/// Loss components of one training step, as plain numbers for logging.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct LossBundle {
    pub l_c: f64,
    pub l_f: f64,
    pub l_r_box: f64,
    pub l_r_mask: f64,
    pub l_contr: f64,
    pub total: f64,
}

/// `L = L_c + (L_r_box + L_r_mask) + alpha * L_f + L_contr`, aborting on
/// any non-finite component.
pub fn total_loss(
    tape: &mut Tape,
    l_c: Var,
    l_f: Var,
    l_r_box: Var,
    l_r_mask: Var,
    l_contr: Var,
    alpha: f64,
    step: u64,
) -> Result<(Var, LossBundle)> {
    let components = [
        ("L_c", l_c),
        ("L_f", l_f),
        ("L_r_box", l_r_box),
        ("L_r_mask", l_r_mask),
        ("L_contr", l_contr),
    ];
    for (name, v) in components {
        if !tape.value(v).is_finite() {
            return Err(Error::NonFiniteLoss { component: name.into(), step });
        }
    }
    let r = tape.add(l_r_box, l_r_mask);
    let cf = tape.scale(l_f, alpha);
    let t = tape.add(l_c, r);
    let t = tape.add(t, cf);
    let total = tape.add(t, l_contr);
    let bundle = LossBundle {
        l_c: tape.value(l_c).item(),
        l_f: tape.value(l_f).item(),
        l_r_box: tape.value(l_r_box).item(),
        l_r_mask: tape.value(l_r_mask).item(),
        l_contr: tape.value(l_contr).item(),
        total: tape.value(total).item(),
    };
    Ok((total, bundle))
}
