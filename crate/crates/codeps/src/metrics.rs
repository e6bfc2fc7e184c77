//! Evaluation metrics: depth error/accuracy, mean IoU, and panoptic quality
//! with its SQ/RQ decomposition.

use std::collections::HashMap;

use crate::error::{CodepsError, Result};
use crate::imaging::{DepthMap, InstanceMap, LabelMap, IGNORE_ID};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics<R> {
    pub rmse: R,
    pub abs_rel: R,
    pub delta1: R,
    pub delta2: R,
    pub delta3: R,
}

/// Accumulator so per-frame depth errors aggregate over a sequence.
#[derive(Debug, Clone, Default)]
pub struct DepthAccumulator {
    sq_sum: f64,
    abs_rel_sum: f64,
    d1: u64,
    d2: u64,
    d3: u64,
    n: u64,
}

impl DepthAccumulator {
    pub fn add<R: Real>(
        &mut self,
        pred: &DepthMap<R>,
        gt: &DepthMap<R>,
        median_scaling: bool,
    ) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(CodepsError::invalid("depth_metrics: shape mismatch"));
        }
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for i in 0..pred.data.len() {
            let p = pred.data[i].as_f64();
            let g = gt.data[i].as_f64();
            if p > 0.0 && g > 0.0 && p.is_finite() && g.is_finite() {
                pairs.push((p, g));
            }
        }
        if pairs.is_empty() {
            return Err(CodepsError::invalid(
                "depth_metrics: no mutually valid pixels",
            ));
        }
        let scale = if median_scaling {
            let mut ps: Vec<f64> = pairs.iter().map(|(p, _)| *p).collect();
            let mut gs: Vec<f64> = pairs.iter().map(|(_, g)| *g).collect();
            ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            gs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            gs[gs.len() / 2] / ps[ps.len() / 2]
        } else {
            1.0
        };
        for (p, g) in pairs {
            let p = p * scale;
            self.sq_sum += (p - g) * (p - g);
            self.abs_rel_sum += (p - g).abs() / g;
            let ratio = (p / g).max(g / p);
            if ratio < 1.25 {
                self.d1 += 1;
            }
            if ratio < 1.25f64.powi(2) {
                self.d2 += 1;
            }
            if ratio < 1.25f64.powi(3) {
                self.d3 += 1;
            }
            self.n += 1;
        }
        Ok(())
    }

    pub fn finalize<R: Real>(&self) -> Result<DepthMetrics<R>> {
        if self.n == 0 {
            return Err(CodepsError::invalid("depth_metrics: empty accumulator"));
        }
        let n = self.n as f64;
        Ok(DepthMetrics {
            rmse: R::c((self.sq_sum / n).sqrt()),
            abs_rel: R::c(self.abs_rel_sum / n),
            delta1: R::c(self.d1 as f64 / n),
            delta2: R::c(self.d2 as f64 / n),
            delta3: R::c(self.d3 as f64 / n),
        })
    }
}

/// One-shot depth metrics over the mutually valid pixels of a single pair.
pub fn depth_metrics<R: Real>(
    pred: &DepthMap<R>,
    gt: &DepthMap<R>,
    median_scaling: bool,
) -> Result<DepthMetrics<R>> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt, median_scaling)?;
    acc.finalize()
}

/// Confusion-matrix accumulator for mIoU over a sequence.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>, // gt-major: counts[gt * C + pred]
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(CodepsError::invalid("mean_iou: shape mismatch"));
        }
        for (p, g) in pred.data.iter().zip(&gt.data) {
            if *g == IGNORE_ID || *p == IGNORE_ID {
                continue;
            }
            let (p, g) = (*p as usize, *g as usize);
            if p < self.num_classes && g < self.num_classes {
                self.counts[g * self.num_classes + p] += 1;
            }
        }
        Ok(())
    }

    /// Per-class IoU (`None` when a class is absent from both maps) and the
    /// mean over present classes.
    pub fn iou<R: Real>(&self) -> (Vec<Option<R>>, R) {
        let c = self.num_classes;
        let mut per_class = Vec::with_capacity(c);
        let mut sum = R::zero();
        let mut present = 0usize;
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let mut fp = 0u64;
            let mut fnn = 0u64;
            for j in 0..c {
                if j != k {
                    fp += self.counts[j * c + k];
                    fnn += self.counts[k * c + j];
                }
            }
            let union = tp + fp + fnn;
            if union == 0 {
                per_class.push(None);
            } else {
                let iou = R::c(tp as f64 / union as f64);
                per_class.push(Some(iou));
                sum += iou;
                present += 1;
            }
        }
        let mean = if present == 0 {
            R::zero()
        } else {
            sum / R::from_usize_c(present)
        };
        (per_class, mean)
    }
}

/// Single-pair mIoU.
pub fn mean_iou<R: Real>(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<R> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt)?;
    Ok(cm.iou::<R>().1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanopticMetrics<R> {
    pub pq: R,
    pub sq: R,
    pub rq: R,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Per-class TP/FP/FN and IoU sums, aggregated per class before averaging.
#[derive(Debug, Clone)]
pub struct PanopticAccumulator {
    num_classes: usize,
    things: Vec<bool>,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    iou_sum: Vec<f64>,
}

/// A panoptic segment key: (class id, instance id). Stuff classes use
/// instance 0 so each stuff class forms one segment per frame.
type SegKey = (u16, u32);

impl PanopticAccumulator {
    pub fn new(num_classes: usize, thing_classes: &[u16]) -> Self {
        let mut things = vec![false; num_classes];
        for t in thing_classes {
            if (*t as usize) < num_classes {
                things[*t as usize] = true;
            }
        }
        Self {
            num_classes,
            things,
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            iou_sum: vec![0.0; num_classes],
        }
    }

    fn segments(
        &self,
        sem: &LabelMap,
        inst: &InstanceMap,
        gt_sem: &LabelMap,
    ) -> HashMap<SegKey, u64> {
        let mut areas: HashMap<SegKey, u64> = HashMap::new();
        for i in 0..sem.data.len() {
            if gt_sem.data[i] == IGNORE_ID {
                continue; // ignore regions excluded from matching entirely
            }
            let c = sem.data[i];
            if c == IGNORE_ID || c as usize >= self.num_classes {
                continue;
            }
            let id = if self.things[c as usize] {
                inst.data[i]
            } else {
                0
            };
            if self.things[c as usize] && id == 0 {
                continue; // thing pixel without an instance forms no segment
            }
            *areas.entry((c, id)).or_insert(0) += 1;
        }
        areas
    }

    pub fn add(
        &mut self,
        pred: (&LabelMap, &InstanceMap),
        gt: (&LabelMap, &InstanceMap),
    ) -> Result<()> {
        let (pred_sem, pred_inst) = pred;
        let (gt_sem, gt_inst) = gt;
        if pred_sem.height != gt_sem.height || pred_sem.width != gt_sem.width {
            return Err(CodepsError::invalid("panoptic_quality: shape mismatch"));
        }
        let pred_areas = self.segments(pred_sem, pred_inst, gt_sem);
        let gt_areas = self.segments(gt_sem, gt_inst, gt_sem);

        // Intersections between same-class segment pairs.
        let mut inter: HashMap<(SegKey, SegKey), u64> = HashMap::new();
        for i in 0..gt_sem.data.len() {
            if gt_sem.data[i] == IGNORE_ID {
                continue;
            }
            let gc = gt_sem.data[i];
            let pc = pred_sem.data[i];
            if gc != pc || pc == IGNORE_ID || gc as usize >= self.num_classes {
                continue;
            }
            let g_id = if self.things[gc as usize] {
                gt_inst.data[i]
            } else {
                0
            };
            let p_id = if self.things[pc as usize] {
                pred_inst.data[i]
            } else {
                0
            };
            if self.things[gc as usize] && (g_id == 0 || p_id == 0) {
                continue;
            }
            *inter.entry(((gc, g_id), (pc, p_id))).or_insert(0) += 1;
        }

        let mut matched_gt: HashMap<SegKey, ()> = HashMap::new();
        let mut matched_pred: HashMap<SegKey, ()> = HashMap::new();
        for ((gk, pk), ov) in &inter {
            let union = gt_areas[gk] + pred_areas[pk] - ov;
            let iou = *ov as f64 / union as f64;
            if iou > 0.5 {
                // IoU > 0.5 matches are unique by the standard argument.
                let c = gk.0 as usize;
                self.tp[c] += 1;
                self.iou_sum[c] += iou;
                matched_gt.insert(*gk, ());
                matched_pred.insert(*pk, ());
            }
        }
        for gk in gt_areas.keys() {
            if !matched_gt.contains_key(gk) {
                self.fn_[gk.0 as usize] += 1;
            }
        }
        for pk in pred_areas.keys() {
            if !matched_pred.contains_key(pk) {
                self.fp[pk.0 as usize] += 1;
            }
        }
        Ok(())
    }

    /// Per-class PQ/SQ/RQ averaged over classes present in gt or pred.
    pub fn finalize<R: Real>(&self) -> PanopticMetrics<R> {
        let mut pq_sum = 0.0;
        let mut sq_sum = 0.0;
        let mut rq_sum = 0.0;
        let mut present = 0usize;
        let (mut tp_t, mut fp_t, mut fn_t) = (0u64, 0u64, 0u64);
        for c in 0..self.num_classes {
            let (tp, fp, fnn) = (self.tp[c], self.fp[c], self.fn_[c]);
            tp_t += tp;
            fp_t += fp;
            fn_t += fnn;
            if tp + fp + fnn == 0 {
                continue;
            }
            present += 1;
            let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fnn as f64;
            let pq = self.iou_sum[c] / denom;
            let sq = if tp > 0 {
                self.iou_sum[c] / tp as f64
            } else {
                0.0
            };
            let rq = tp as f64 / denom;
            pq_sum += pq;
            sq_sum += sq;
            rq_sum += rq;
        }
        let n = present.max(1) as f64;
        PanopticMetrics {
            pq: R::c(pq_sum / n),
            sq: R::c(sq_sum / n),
            rq: R::c(rq_sum / n),
            tp: tp_t,
            fp: fp_t,
            fn_: fn_t,
        }
    }
}

/// Single-pair panoptic quality.
pub fn panoptic_quality<R: Real>(
    pred: (&LabelMap, &InstanceMap),
    gt: (&LabelMap, &InstanceMap),
    num_classes: usize,
    thing_classes: &[u16],
) -> Result<PanopticMetrics<R>> {
    let mut acc = PanopticAccumulator::new(num_classes, thing_classes);
    acc.add(pred, gt)?;
    Ok(acc.finalize())
}
