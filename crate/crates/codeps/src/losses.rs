//! Training objectives: photometric depth loss with smoothness, batch depth
//! aggregation with motion gating, bootstrapped cross-entropy, and instance
//! center/offset losses. Every loss returns analytic gradients w.r.t. its
//! direct inputs; the model chains them into parameter space.

use crate::error::{CodepsError, Result};
use crate::imaging::{
    rotation_from_axis_angle, rotation_jacobian_axis_angle, sample_bilinear_with_grad,
    CameraIntrinsics, ImageTensor, InstanceMap, LabelMap, IGNORE_ID,
};
use crate::scalar::Real;

/// Loss weights and thresholds. Defaults follow the upstream conventions of
/// the cited depth/panoptic training recipes.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights<R> {
    pub lambda_pr: R,
    pub lambda_sm: R,
    pub lambda_center: R,
    pub lambda_offset: R,
    pub bootstrap_fraction: R,
    pub motion_threshold: R,
}

impl<R: Real> Default for LossWeights<R> {
    fn default() -> Self {
        Self {
            lambda_pr: R::one(),
            lambda_sm: R::c(1e-3),
            lambda_center: R::c(200.0 / (255.0 * 255.0)),
            lambda_offset: R::c(0.01),
            bootstrap_fraction: R::c(0.2),
            motion_threshold: R::c(0.03),
        }
    }
}

impl<R: Real> LossWeights<R> {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_pr < R::zero()
            || self.lambda_sm < R::zero()
            || self.lambda_center < R::zero()
            || self.lambda_offset < R::zero()
        {
            return Err(CodepsError::invalid("loss weights must be >= 0"));
        }
        if self.bootstrap_fraction <= R::zero() || self.bootstrap_fraction > R::one() {
            return Err(CodepsError::invalid("bootstrap_fraction must be in (0,1]"));
        }
        Ok(())
    }
}

// Numerically smooth |x|; exact 0 at x = 0, indistinguishable from |x|
// beyond ~1e-3 yet differentiable everywhere.
const SMOOTH_ABS_DELTA: f64 = 1e-6;

#[inline]
fn smooth_abs<R: Real>(x: R) -> (R, R) {
    let d2 = R::c(SMOOTH_ABS_DELTA * SMOOTH_ABS_DELTA);
    let s = (x * x + d2).sqrt();
    (s - R::c(SMOOTH_ABS_DELTA), x / s)
}

/// Result of the per-sample photometric objective.
#[derive(Debug, Clone)]
pub struct PhotometricLoss<R> {
    pub total: R,
    pub reprojection: R,
    pub smoothness: R,
    /// Gradient w.r.t. the center-frame depth map (length H*W).
    pub d_depth: Vec<R>,
    /// Gradient w.r.t. the axis-angle+translation pose into the previous frame.
    pub d_pose_prev: [R; 6],
    /// Gradient w.r.t. the pose into the next frame.
    pub d_pose_next: [R; 6],
    pub valid_pixels: usize,
}

struct ViewGeometry<R> {
    rotation: [[R; 3]; 3],
    rotation_jac: [[[R; 3]; 3]; 3],
    translation: [R; 3],
}

impl<R: Real> ViewGeometry<R> {
    fn new(pose: &[R; 6]) -> Self {
        let w = [pose[0], pose[1], pose[2]];
        Self {
            rotation: rotation_from_axis_angle(w),
            rotation_jac: rotation_jacobian_axis_angle(w),
            translation: [pose[3], pose[4], pose[5]],
        }
    }
}

/// Min-reprojection L1 photometric error over the two neighbor views plus
/// edge-aware mean-normalized disparity smoothness.
///
/// `depth` is the predicted depth of the center frame (`frames[1]`), row
/// major, strictly positive. Poses map center-frame camera coordinates into
/// the previous/next frame's camera.
pub fn photometric_loss<R: Real>(
    frames: &[ImageTensor<R>; 3],
    depth: &[R],
    pose_prev: &[R; 6],
    pose_next: &[R; 6],
    k: &CameraIntrinsics<R>,
    weights: &LossWeights<R>,
) -> Result<PhotometricLoss<R>> {
    let center = &frames[1];
    let (h, w) = (center.height(), center.width());
    let channels = center.channels();
    if depth.len() != h * w {
        return Err(CodepsError::invalid("photometric_loss: depth shape"));
    }
    if depth.iter().any(|d| *d <= R::zero() || !d.is_finite()) {
        return Err(CodepsError::invalid("photometric_loss: non-positive depth"));
    }

    let views = [
        (&frames[0], ViewGeometry::new(pose_prev)),
        (&frames[2], ViewGeometry::new(pose_next)),
    ];

    // First pass: per-pixel min error, remembering the chosen view.
    struct PixelPick<R> {
        view: usize,
        err: R,
    }
    let mut picks: Vec<Option<PixelPick<R>>> = Vec::with_capacity(h * w);
    let cc = R::from_usize_c(channels);
    for y in 0..h {
        for x in 0..w {
            let d = depth[y * w + x];
            let ray = k.unproject(R::from_usize_c(x), R::from_usize_c(y));
            let p = [ray[0] * d, ray[1] * d, ray[2] * d];
            let mut best: Option<PixelPick<R>> = None;
            for (vi, (img, geo)) in views.iter().enumerate() {
                let q = transform(geo, p);
                if q[2] <= R::c(1e-6) {
                    continue;
                }
                let (u, v) = k.project(q);
                if !crate::imaging::in_bounds(h, w, u, v) {
                    continue;
                }
                let mut e = R::zero();
                for c in 0..channels {
                    let (val, _, _) = sample_bilinear_with_grad(img, u, v, c);
                    let (a, _) = smooth_abs(val - center.get(y, x, c));
                    e += a;
                }
                e = e / cc;
                if best.as_ref().map_or(true, |b| e < b.err) {
                    best = Some(PixelPick { view: vi, err: e });
                }
            }
            picks.push(best);
        }
    }

    let valid_pixels = picks.iter().filter(|p| p.is_some()).count();
    if valid_pixels == 0 {
        return Err(CodepsError::UnusableFrame(
            "photometric_loss: no valid reprojection".into(),
        ));
    }
    let n_pr = R::from_usize_c(valid_pixels);
    let mut reprojection = R::zero();
    let mut d_depth = vec![R::zero(); h * w];
    let mut d_pose = [[R::zero(); 6]; 2];

    // Second pass: gradient of the chosen branch per pixel.
    for y in 0..h {
        for x in 0..w {
            let pick = match &picks[y * w + x] {
                Some(p) => p,
                None => continue,
            };
            reprojection += pick.err;
            let (img, geo) = &views[pick.view];
            let d = depth[y * w + x];
            let ray = k.unproject(R::from_usize_c(x), R::from_usize_c(y));
            let p = [ray[0] * d, ray[1] * d, ray[2] * d];
            let q = transform(geo, p);
            let (u, v) = k.project(q);

            // de/d(u,v) summed over channels.
            let mut de_du = R::zero();
            let mut de_dv = R::zero();
            for c in 0..channels {
                let (val, gu, gv) = sample_bilinear_with_grad(img, u, v, c);
                let (_, sgn) = smooth_abs(val - center.get(y, x, c));
                de_du += sgn * gu / cc;
                de_dv += sgn * gv / cc;
            }
            // Projection Jacobian.
            let fz = R::one() / q[2];
            let du_dq = [k.fx * fz, R::zero(), -k.fx * q[0] * fz * fz];
            let dv_dq = [R::zero(), k.fy * fz, -k.fy * q[1] * fz * fz];
            let mut de_dq = [R::zero(); 3];
            for i in 0..3 {
                de_dq[i] = de_du * du_dq[i] + de_dv * dv_dq[i];
            }
            let scale = weights.lambda_pr / n_pr;
            // Depth: dq/dd = R * ray.
            let mut dq_dd = [R::zero(); 3];
            for (i, dq) in dq_dd.iter_mut().enumerate() {
                for j in 0..3 {
                    *dq += geo.rotation[i][j] * ray[j];
                }
            }
            let mut dd = R::zero();
            for i in 0..3 {
                dd += de_dq[i] * dq_dd[i];
            }
            d_depth[y * w + x] += scale * dd;
            // Rotation params: dq/dw_i = dR/dw_i * p.
            for wi in 0..3 {
                let jr = &geo.rotation_jac[wi];
                let mut g = R::zero();
                for i in 0..3 {
                    let mut dqi = R::zero();
                    for j in 0..3 {
                        dqi += jr[i][j] * p[j];
                    }
                    g += de_dq[i] * dqi;
                }
                d_pose[pick.view][wi] += scale * g;
            }
            // Translation params: dq/dt = I.
            for ti in 0..3 {
                d_pose[pick.view][3 + ti] += scale * de_dq[ti];
            }
        }
    }
    reprojection = reprojection / n_pr;

    // Edge-aware mean-normalized disparity smoothness on the center frame.
    let n = h * w;
    let nf = R::from_usize_c(n);
    let disp: Vec<R> = depth.iter().map(|d| R::one() / *d).collect();
    let mu: R = disp.iter().cloned().sum::<R>() / nf;
    let nd: Vec<R> = disp.iter().map(|d| *d / mu).collect();
    let mut g_nd = vec![R::zero(); n];
    let mut smooth_sum = R::zero();
    let pair_count = h * (w - 1) + (h - 1) * w;
    let pc = R::from_usize_c(pair_count.max(1));
    let mut add_pair = |a: usize, b: usize, weight: R| {
        let (s, sgn) = smooth_abs(nd[a] - nd[b]);
        smooth_sum += s * weight;
        g_nd[a] += sgn * weight / pc;
        g_nd[b] -= sgn * weight / pc;
    };
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let a = y * w + x + 1;
            let b = y * w + x;
            let gi = (center.mean_channel(y, x + 1) - center.mean_channel(y, x)).abs();
            add_pair(a, b, (-gi).exp());
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let a = (y + 1) * w + x;
            let b = y * w + x;
            let gi = (center.mean_channel(y + 1, x) - center.mean_channel(y, x)).abs();
            add_pair(a, b, (-gi).exp());
        }
    }
    let smoothness = smooth_sum / pc;
    // Chain: nd = disp/mu with mu depending on all entries, then disp = 1/d.
    let dot: R = g_nd.iter().zip(&disp).map(|(g, d)| *g * *d).sum();
    for i in 0..n {
        let d_disp = g_nd[i] / mu - dot / (mu * mu * nf);
        d_depth[i] += weights.lambda_sm * (-d_disp / (depth[i] * depth[i]));
    }

    Ok(PhotometricLoss {
        total: weights.lambda_pr * reprojection + weights.lambda_sm * smoothness,
        reprojection,
        smoothness,
        d_depth,
        d_pose_prev: d_pose[0],
        d_pose_next: d_pose[1],
        valid_pixels,
    })
}

fn transform<R: Real>(geo: &ViewGeometry<R>, p: [R; 3]) -> [R; 3] {
    let r = &geo.rotation;
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + geo.translation[0],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + geo.translation[1],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + geo.translation[2],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchDepthLoss<R> {
    pub value: R,
    pub online_gated: bool,
    pub denominator: usize,
}

/// Equal-contribution mean over the batch. The online term is dropped (and
/// the denominator reduced by one) when the predicted motion magnitude falls
/// below the threshold; replay samples are never gated.
pub fn batch_depth_loss<R: Real>(
    online_loss: R,
    replay_losses: &[R],
    online_motion: R,
    threshold: R,
) -> BatchDepthLoss<R> {
    let gated = online_motion < threshold;
    let mut sum: R = replay_losses.iter().cloned().sum();
    let mut denom = replay_losses.len();
    if !gated {
        sum += online_loss;
        denom += 1;
    }
    if denom == 0 {
        return BatchDepthLoss {
            value: R::zero(),
            online_gated: gated,
            denominator: 0,
        };
    }
    BatchDepthLoss {
        value: sum / R::from_usize_c(denom),
        online_gated: gated,
        denominator: denom,
    }
}

#[derive(Debug, Clone)]
pub struct CeLoss<R> {
    pub loss: R,
    /// Gradient w.r.t. logits, layout `(y*W + x)*C + c`.
    pub d_logits: Vec<R>,
    pub pixels_used: usize,
}

/// Bootstrapped cross-entropy with hard pixel mining: averages only the top
/// `fraction` hardest non-ignore pixels.
pub fn bootstrapped_ce<R: Real>(
    logits: &[R],
    height: usize,
    width: usize,
    num_classes: usize,
    labels: &LabelMap,
    fraction: R,
) -> Result<CeLoss<R>> {
    if logits.len() != height * width * num_classes {
        return Err(CodepsError::invalid("bootstrapped_ce: logits shape"));
    }
    if labels.height != height || labels.width != width {
        return Err(CodepsError::invalid("bootstrapped_ce: label shape"));
    }
    if fraction <= R::zero() || fraction > R::one() {
        return Err(CodepsError::invalid("bootstrapped_ce: fraction out of range"));
    }
    let n = height * width;
    let mut pixel_losses: Vec<(usize, R)> = Vec::new();
    let mut softmaxes: Vec<R> = vec![R::zero(); logits.len()];
    for i in 0..n {
        let label = labels.data[i];
        if label == IGNORE_ID {
            continue;
        }
        if label as usize >= num_classes {
            return Err(CodepsError::invalid("bootstrapped_ce: label out of range"));
        }
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        let max = row.iter().cloned().fold(R::neg_infinity(), R::max);
        let mut z = R::zero();
        for c in 0..num_classes {
            let e = (row[c] - max).exp();
            softmaxes[i * num_classes + c] = e;
            z += e;
        }
        for c in 0..num_classes {
            softmaxes[i * num_classes + c] = softmaxes[i * num_classes + c] / z;
        }
        let p = softmaxes[i * num_classes + label as usize];
        pixel_losses.push((i, -(p.max(R::c(1e-300))).ln()));
    }
    if pixel_losses.is_empty() {
        return Err(CodepsError::invalid("bootstrapped_ce: all pixels ignored"));
    }
    let n_valid = pixel_losses.len();
    let k = ((fraction * R::from_usize_c(n_valid)).ceil().as_f64() as usize)
        .clamp(1, n_valid);
    // Hardest first; stable tie-break on pixel index for determinism.
    pixel_losses.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let kf = R::from_usize_c(k);
    let mut loss = R::zero();
    let mut d_logits = vec![R::zero(); logits.len()];
    for (i, l) in pixel_losses.iter().take(k) {
        loss += *l;
        let label = labels.data[*i] as usize;
        for c in 0..num_classes {
            let onehot = if c == label { R::one() } else { R::zero() };
            d_logits[*i * num_classes + c] = (softmaxes[*i * num_classes + c] - onehot) / kf;
        }
    }
    Ok(CeLoss {
        loss: loss / kf,
        d_logits,
        pixels_used: k,
    })
}

/// Gaussian sigma (pixels) for instance center targets.
pub const CENTER_SIGMA: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct InstanceLoss<R> {
    pub loss: R,
    pub center_term: R,
    pub offset_term: R,
    pub d_center: Vec<R>,
    /// Layout `(y*W + x)*2 + {0: dy, 1: dx}`.
    pub d_offset: Vec<R>,
}

/// Builds the Gaussian center target and centroid offsets from the instance
/// map, used both as loss targets and by tests.
pub fn instance_targets<R: Real>(instance_gt: &InstanceMap) -> (Vec<R>, Vec<R>, Vec<bool>) {
    let (h, w) = (instance_gt.height, instance_gt.width);
    let mut centroids: std::collections::HashMap<u32, (f64, f64, f64)> =
        std::collections::HashMap::new();
    for y in 0..h {
        for x in 0..w {
            let id = instance_gt.get(y, x);
            if id != 0 {
                let e = centroids.entry(id).or_insert((0.0, 0.0, 0.0));
                e.0 += y as f64;
                e.1 += x as f64;
                e.2 += 1.0;
            }
        }
    }
    let mut center_target = vec![R::zero(); h * w];
    let mut offset_target = vec![R::zero(); h * w * 2];
    let mut thing_mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0.0f64;
            for (cy, cx, n) in centroids.values() {
                let (cy, cx) = (cy / n, cx / n);
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                best = best.max((-d2 / (2.0 * CENTER_SIGMA * CENTER_SIGMA)).exp());
            }
            center_target[y * w + x] = R::c(best);
            let id = instance_gt.get(y, x);
            if id != 0 {
                let (cy, cx, n) = centroids[&id];
                let (cy, cx) = (cy / n, cx / n);
                offset_target[(y * w + x) * 2] = R::c(cy - y as f64);
                offset_target[(y * w + x) * 2 + 1] = R::c(cx - x as f64);
                thing_mask[y * w + x] = true;
            }
        }
    }
    (center_target, offset_target, thing_mask)
}

/// MSE center loss against Gaussian centroid splats plus L1 offset loss over
/// thing pixels.
pub fn instance_loss<R: Real>(
    center_pred: &[R],
    offset_pred: &[R],
    instance_gt: &InstanceMap,
    weights: &LossWeights<R>,
) -> Result<InstanceLoss<R>> {
    let (h, w) = (instance_gt.height, instance_gt.width);
    if center_pred.len() != h * w || offset_pred.len() != h * w * 2 {
        return Err(CodepsError::invalid("instance_loss: prediction shape"));
    }
    let (center_target, offset_target, thing_mask) = instance_targets::<R>(instance_gt);
    let n = R::from_usize_c(h * w);
    let mut center_term = R::zero();
    let mut d_center = vec![R::zero(); h * w];
    for i in 0..h * w {
        let diff = center_pred[i] - center_target[i];
        center_term += diff * diff / n;
        d_center[i] = weights.lambda_center * R::c(2.0) * diff / n;
    }
    let n_thing = thing_mask.iter().filter(|m| **m).count();
    let mut offset_term = R::zero();
    let mut d_offset = vec![R::zero(); h * w * 2];
    if n_thing > 0 {
        let denom = R::from_usize_c(n_thing * 2);
        for i in 0..h * w {
            if !thing_mask[i] {
                continue;
            }
            for k in 0..2 {
                let (a, sgn) = smooth_abs(offset_pred[i * 2 + k] - offset_target[i * 2 + k]);
                offset_term += a / denom;
                d_offset[i * 2 + k] = weights.lambda_offset * sgn / denom;
            }
        }
    }
    Ok(InstanceLoss {
        loss: weights.lambda_center * center_term + weights.lambda_offset * offset_term,
        center_term,
        offset_term,
        d_center,
        d_offset,
    })
}

/// Per-step loss breakdown tagged by sample origin.
#[derive(Debug, Clone)]
pub struct LossBreakdown<R> {
    pub depth: R,
    pub source_ce: R,
    pub mixed_ce: R,
    pub total: R,
    pub terms: Vec<(&'static str, R)>,
}

/// Assembles the adaptation objective: batch depth term, mean supervised CE
/// over source replay, and the mixed-sample CE. The instance loss is
/// excluded during adaptation (frozen instance head).
pub fn adaptation_total_loss<R: Real>(
    depth: R,
    source_ce_values: &[R],
    mixed_ce: Option<R>,
) -> LossBreakdown<R> {
    let source_ce = if source_ce_values.is_empty() {
        R::zero()
    } else {
        source_ce_values.iter().cloned().sum::<R>() / R::from_usize_c(source_ce_values.len())
    };
    let mixed = mixed_ce.unwrap_or(R::zero());
    LossBreakdown {
        depth,
        source_ce,
        mixed_ce: mixed,
        total: depth + source_ce + mixed,
        terms: vec![
            ("depth", depth),
            ("source_ce", source_ce),
            ("mixed_ce", mixed),
        ],
    }
}
