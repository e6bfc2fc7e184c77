//! The online adaptation loop, panoptic fusion, the three evaluation
//! protocols, source pretraining, and checkpoint/config plumbing.
//!
//! Per online frame the engine (1) composes an update batch from the current
//! frame plus target and source replay, (2) builds a mixed sample with
//! teacher pseudo-labels, (3) runs one optimizer step over the unfrozen
//! arrays, (4) offers the frame to the diversity-sampled target buffer, and
//! finally nudges the EMA teacher toward the student.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::parse_kv;
use crate::error::{CodepsError, Result};
use crate::imaging::{DepthMap, InstanceMap, LabelMap};
use crate::losses::{
    adaptation_total_loss, bootstrapped_ce, instance_loss, photometric_loss, LossWeights,
};
use crate::metrics::{
    ConfusionMatrix, DepthAccumulator, DepthMetrics, PanopticAccumulator, PanopticMetrics,
};
use crate::mixing::{ema_update, generate_mixed_sample, MixConfig};
use crate::model::{
    backward, feature_embed, forward, Adam, Gradients, ModelConfig, ModelState, OutputGrads,
    Param, StepOutcome,
};
use crate::replay::{
    build_source_buffer, compose_batch, update_target_buffer, AdmissionDecision, BatchCounts,
    Sample, SourceBuffer, TargetBuffer,
};
use crate::scalar::Real;

/// Parameter-name prefixes kept frozen during online adaptation: the shared
/// encoder and the instance head.
pub const FROZEN_PREFIXES: [&str; 2] = ["enc.", "inst."];

/// Everything the adaptation loop needs to know, in plain `f64`/integer
/// form. Scalar-typed weight structs are derived on demand.
#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    pub batch: BatchCounts,
    pub source_capacity: usize,
    pub target_capacity: usize,
    pub similarity_threshold: f64,
    pub rcs_temperature: f64,
    /// EMA decay per domain transition; the last entry repeats.
    pub alpha_schedule: Vec<f64>,
    pub split_fraction: f64,
    pub lr: f64,
    pub detection_threshold: f64,
    pub lambda_pr: f64,
    pub lambda_sm: f64,
    pub lambda_center: f64,
    pub lambda_offset: f64,
    pub bootstrap_fraction: f64,
    pub motion_threshold: f64,
    pub mix: MixConfig,
    pub mixing_enabled: bool,
    pub source_ce_enabled: bool,
    /// When false, mixing falls back to pseudo-label self-training on the
    /// online frame instead of pasting into a replayed source image.
    pub source_mixing_enabled: bool,
    pub diversity_enabled: bool,
    pub median_scaling: bool,
    pub seed: u64,
    /// When set, each step's mixed image and pseudo-label map are written
    /// here as PNGs.
    pub debug_dump: Option<std::path::PathBuf>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        let w = LossWeights::<f64>::default();
        Self {
            batch: BatchCounts {
                current: 1,
                target: 2,
                source: 2,
            },
            source_capacity: 300,
            target_capacity: 300,
            similarity_threshold: 0.95,
            rcs_temperature: 0.01,
            alpha_schedule: vec![0.9, 0.7],
            split_fraction: 0.7,
            lr: 1e-4,
            detection_threshold: 0.1,
            lambda_pr: w.lambda_pr,
            lambda_sm: w.lambda_sm,
            lambda_center: w.lambda_center,
            lambda_offset: w.lambda_offset,
            bootstrap_fraction: w.bootstrap_fraction,
            motion_threshold: w.motion_threshold,
            mix: MixConfig::default(),
            mixing_enabled: true,
            source_ce_enabled: true,
            source_mixing_enabled: true,
            diversity_enabled: true,
            median_scaling: true,
            seed: 7,
            debug_dump: None,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch.current != 1 {
            return Err(CodepsError::invalid("config: batch_current must be 1"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(CodepsError::invalid("config: split_fraction outside (0,1)"));
        }
        if self.alpha_schedule.is_empty()
            || self.alpha_schedule.iter().any(|a| !(0.0..=1.0).contains(a))
        {
            return Err(CodepsError::invalid("config: bad alpha schedule"));
        }
        if self.rcs_temperature <= 0.0 {
            return Err(CodepsError::invalid("config: rcs_temperature must be > 0"));
        }
        if self.lr < 0.0 {
            return Err(CodepsError::invalid("config: negative learning rate"));
        }
        self.mix.validate()?;
        self.weights::<f64>().validate()
    }

    pub fn weights<R: Real>(&self) -> LossWeights<R> {
        LossWeights {
            lambda_pr: R::c(self.lambda_pr),
            lambda_sm: R::c(self.lambda_sm),
            lambda_center: R::c(self.lambda_center),
            lambda_offset: R::c(self.lambda_offset),
            bootstrap_fraction: R::c(self.bootstrap_fraction),
            motion_threshold: R::c(self.motion_threshold),
        }
    }

    pub fn alpha_for_transition(&self, index: usize) -> f64 {
        *self
            .alpha_schedule
            .get(index)
            .unwrap_or_else(|| self.alpha_schedule.last().unwrap())
    }
}

// --- panoptic fusion ---------------------------------------------------------

/// Fuses head outputs into a panoptic map: semantic argmax, 3x3 non-max
/// suppressed center peaks above the detection threshold, and nearest-center
/// assignment of each thing pixel shifted by its predicted offset. Thing
/// pixels with no detected center keep instance id 0.
pub fn panoptic_fuse<R: Real>(
    semantic: &[R],
    center: &[R],
    offset: &[R],
    height: usize,
    width: usize,
    num_classes: usize,
    thing_classes: &[u16],
    detection_threshold: R,
) -> Result<(LabelMap, InstanceMap)> {
    if semantic.len() != height * width * num_classes
        || center.len() != height * width
        || offset.len() != height * width * 2
    {
        return Err(CodepsError::invalid("panoptic_fuse: shape mismatch"));
    }
    let mut labels = LabelMap::filled(height, width, 0);
    for i in 0..height * width {
        let row = &semantic[i * num_classes..(i + 1) * num_classes];
        let mut best = 0usize;
        for c in 1..num_classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        labels.data[i] = best as u16;
    }

    // Center peaks: strictly above threshold, maximal in the 3x3
    // neighborhood; plateau ties resolve to the lowest linear index.
    let mut centers: Vec<(usize, usize)> = Vec::new();
    for y in 0..height {
        'pixel: for x in 0..width {
            let v = center[y * width + x];
            if v <= detection_threshold {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                        continue;
                    }
                    let nv = center[ny as usize * width + nx as usize];
                    let n_idx = ny as usize * width + nx as usize;
                    if nv > v || (nv == v && n_idx < y * width + x) {
                        continue 'pixel;
                    }
                }
            }
            centers.push((y, x));
        }
    }

    let things: HashSet<u16> = thing_classes.iter().copied().collect();
    let mut instances = InstanceMap::filled(height, width, 0);
    if !centers.is_empty() {
        for y in 0..height {
            for x in 0..width {
                if !things.contains(&labels.get(y, x)) {
                    continue;
                }
                let ty = R::from_usize_c(y) + offset[(y * width + x) * 2];
                let tx = R::from_usize_c(x) + offset[(y * width + x) * 2 + 1];
                let mut best = 0usize;
                let mut best_d = R::infinity();
                for (ci, (cy, cx)) in centers.iter().enumerate() {
                    let dy = ty - R::from_usize_c(*cy);
                    let dx = tx - R::from_usize_c(*cx);
                    let d = dy * dy + dx * dx;
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                instances.set(y, x, best as u32 + 1);
            }
        }
    }
    Ok((labels, instances))
}

// --- evaluation ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProtocolReport<R> {
    pub protocol: u8,
    pub domain: String,
    pub frames: usize,
    pub miou: R,
    pub per_class_iou: Vec<Option<R>>,
    pub panoptic: PanopticMetrics<R>,
    pub depth: Option<DepthMetrics<R>>,
}

impl<R: Real> ProtocolReport<R> {
    /// One structured text record per evaluation.
    pub fn log_line(&self) -> String {
        let d = match &self.depth {
            Some(d) => format!(
                "rmse={:.4} abs_rel={:.4} d1={:.4}",
                d.rmse.as_f64(),
                d.abs_rel.as_f64(),
                d.delta1.as_f64()
            ),
            None => "rmse=na abs_rel=na d1=na".to_string(),
        };
        format!(
            "protocol={} domain={} frames={} miou={:.4} pq={:.4} sq={:.4} rq={:.4} {}",
            self.protocol,
            self.domain,
            self.frames,
            self.miou.as_f64(),
            self.panoptic.pq.as_f64(),
            self.panoptic.sq.as_f64(),
            self.panoptic.rq.as_f64(),
            d
        )
    }
}

struct EvalAccum {
    cm: ConfusionMatrix,
    pan: PanopticAccumulator,
    depth: DepthAccumulator,
    frames: usize,
    depth_frames: usize,
}

impl EvalAccum {
    fn new(num_classes: usize, thing_classes: &[u16]) -> Self {
        Self {
            cm: ConfusionMatrix::new(num_classes),
            pan: PanopticAccumulator::new(num_classes, thing_classes),
            depth: DepthAccumulator::default(),
            frames: 0,
            depth_frames: 0,
        }
    }

    fn finalize<R: Real>(&self, protocol: u8, domain: &str) -> ProtocolReport<R> {
        let (per_class, miou) = self.cm.iou::<R>();
        ProtocolReport {
            protocol,
            domain: domain.to_string(),
            frames: self.frames,
            miou,
            per_class_iou: per_class,
            panoptic: self.pan.finalize(),
            depth: if self.depth_frames > 0 {
                self.depth.finalize().ok()
            } else {
                None
            },
        }
    }
}

fn evaluate_into<R: Real>(
    model: &ModelState<R>,
    sample: &Sample<R>,
    thing_classes: &[u16],
    cfg: &AdaptationConfig,
    acc: &mut EvalAccum,
) -> Result<()> {
    let (out, _) = forward(model, &sample.frames)?;
    let mc = &model.config;
    let (pred_sem, pred_inst) = panoptic_fuse(
        &out.semantic,
        &out.center,
        &out.offset,
        mc.height,
        mc.width,
        mc.num_classes,
        thing_classes,
        R::c(cfg.detection_threshold),
    )?;
    if let Some(gt_sem) = &sample.semantic {
        acc.cm.add(&pred_sem, gt_sem)?;
        if let Some(gt_inst) = &sample.instance {
            acc.pan.add((&pred_sem, &pred_inst), (gt_sem, gt_inst))?;
        }
        acc.frames += 1;
    }
    if let Some(gt_depth) = &sample.gt_depth {
        let pred_depth = DepthMap {
            height: mc.height,
            width: mc.width,
            data: out.depth.clone(),
        };
        acc.depth.add(&pred_depth, gt_depth, cfg.median_scaling)?;
        acc.depth_frames += 1;
    }
    Ok(())
}

/// Frozen evaluation of a set of labeled samples.
pub fn evaluate_set<R: Real>(
    model: &ModelState<R>,
    samples: &[Sample<R>],
    thing_classes: &[u16],
    cfg: &AdaptationConfig,
    protocol: u8,
    domain: &str,
) -> Result<ProtocolReport<R>> {
    if samples.is_empty() {
        return Err(CodepsError::invalid("evaluate_set: empty sample set"));
    }
    let mut acc = EvalAccum::new(model.config.num_classes, thing_classes);
    for s in samples {
        evaluate_into(model, s, thing_classes, cfg, &mut acc)?;
    }
    Ok(acc.finalize(protocol, domain))
}

/// Protocol 3: frozen evaluation on the source validation split.
pub fn eval_protocol3<R: Real>(
    model: &ModelState<R>,
    source_val: &[Sample<R>],
    thing_classes: &[u16],
    cfg: &AdaptationConfig,
) -> Result<ProtocolReport<R>> {
    let domain = source_val
        .first()
        .map(|s| s.domain_tag.clone())
        .unwrap_or_default();
    evaluate_set(model, source_val, thing_classes, cfg, 3, &domain)
}

// --- adaptation ----------------------------------------------------------------

/// Mutable adaptation state carried across steps and domains.
pub struct EngineState<R> {
    pub student: ModelState<R>,
    pub teacher: ModelState<R>,
    pub source: SourceBuffer<R>,
    pub target: TargetBuffer<R>,
    pub optimizer: Adam<R>,
    pub rng: ChaCha8Rng,
    pub steps: u64,
}

impl<R: Real> EngineState<R> {
    /// Freezes the shared encoder and instance head, duplicates the student
    /// into the EMA teacher, and fills the source buffer by rare-class
    /// sampling.
    pub fn new(
        pretrained: ModelState<R>,
        source_dataset: &[Sample<R>],
        cfg: &AdaptationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut student = pretrained;
        for prefix in FROZEN_PREFIXES {
            student.set_frozen(prefix, true);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let source = build_source_buffer(
            source_dataset,
            cfg.source_capacity,
            student.config.num_classes,
            R::c(cfg.rcs_temperature),
            &mut rng,
        )?;
        let optimizer = Adam::new(&student, R::c(cfg.lr));
        Ok(Self {
            teacher: student.clone(),
            student,
            source,
            target: TargetBuffer::new(cfg.target_capacity),
            optimizer,
            rng,
            steps: 0,
        })
    }
}

/// Per-step structured record.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub depth: f64,
    pub source_ce: f64,
    pub mixed_ce: f64,
    pub online_depth_gated: bool,
    pub admitted: bool,
    pub evicted: Option<usize>,
    pub similarity: Option<f64>,
    pub target_len: usize,
    pub batch_clamped: bool,
    pub step_applied: bool,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "step={} total={:.6} depth={:.6} source_ce={:.6} mixed_ce={:.6} gated={} \
             admitted={} evicted={} target_len={} clamped={} applied={}",
            self.step,
            self.total,
            self.depth,
            self.source_ce,
            self.mixed_ce,
            self.online_depth_gated,
            self.admitted,
            self.evicted.map_or("none".into(), |i| i.to_string()),
            self.target_len,
            self.batch_clamped,
            self.step_applied,
        )
    }
}

fn translation_norm<R: Real>(pose: &[R; 6]) -> R {
    (pose[3] * pose[3] + pose[4] * pose[4] + pose[5] * pose[5]).sqrt()
}

fn scale_vec<R: Real>(v: &mut [R], s: R) {
    for x in v {
        *x *= s;
    }
}

/// One full online adaptation step (Fig. 2): batch composition, mixing,
/// optimizer update, buffer admission, EMA update.
pub fn adapt_step<R: Real>(
    state: &mut EngineState<R>,
    online: &Sample<R>,
    cfg: &AdaptationConfig,
    alpha: f64,
) -> Result<StepRecord> {
    let weights = cfg.weights::<R>();
    let mc = state.student.config.clone();

    // (1) batch composition; with no source supervision and no source
    // mixing, source samples drop out of the batch entirely
    let counts = if cfg.source_ce_enabled || cfg.source_mixing_enabled {
        cfg.batch
    } else {
        BatchCounts {
            source: 0,
            ..cfg.batch
        }
    };
    let batch = compose_batch(online, &state.target, &mut state.source, counts, &mut state.rng)?;

    // (2) cross-domain mixing via the EMA teacher. Without source replay the
    // mixed sample degenerates to pseudo-label self-training on the online
    // frame (the "online image" ablation).
    let mixed = if cfg.mixing_enabled {
        if cfg.source_mixing_enabled {
            match batch.source_replay.first() {
                Some(src) => Some(generate_mixed_sample(
                    src,
                    online,
                    &state.teacher,
                    &cfg.mix,
                    &mut state.rng,
                )?),
                None => None,
            }
        } else {
            Some(crate::mixing::MixedSample {
                image: online.principal().clone(),
                labels: crate::model::semantic_argmax(&state.teacher, online.principal())?,
                pasted_cells: Vec::new(),
            })
        }
    } else {
        None
    };
    if let (Some(dir), Some(mx)) = (&cfg.debug_dump, &mixed) {
        crate::data::write_debug_mixed(dir, state.steps + 1, &mx.image, &mx.labels)?;
    }

    // (3) forward/loss/backward over the batch
    struct MemberEval<R> {
        trace: crate::model::ModelTrace<R>,
        phot: Option<crate::losses::PhotometricLoss<R>>,
        ce: Option<crate::losses::CeLoss<R>>,
        depth_included: bool,
    }
    let mut members: Vec<MemberEval<R>> = Vec::new();
    let mut online_gated = false;
    let all: Vec<(&Sample<R>, bool)> = std::iter::once((&batch.online, true))
        .chain(batch.target_replay.iter().map(|s| (s, false)))
        .chain(batch.source_replay.iter().map(|s| (s, false)))
        .collect();
    let n_source = batch.source_replay.len();
    for (i, (sample, is_online)) in all.iter().enumerate() {
        let (out, trace) = forward(&state.student, &sample.frames)?;
        let phot = match photometric_loss(
            &sample.frames,
            &out.depth,
            &out.pose_prev,
            &out.pose_next,
            &sample.intrinsics,
            &weights,
        ) {
            Ok(p) => Some(p),
            Err(CodepsError::UnusableFrame(_)) => None,
            Err(e) => return Err(e),
        };
        let mut depth_included = phot.is_some();
        if *is_online {
            let motion = translation_norm(&out.pose_next);
            online_gated = motion < R::c(cfg.motion_threshold);
            depth_included = depth_included && !online_gated;
        }
        // supervised CE on source replay samples
        let is_source = i >= all.len() - n_source;
        let ce = if is_source && cfg.source_ce_enabled {
            match &sample.semantic {
                Some(labels) => Some(bootstrapped_ce(
                    &out.semantic,
                    mc.height,
                    mc.width,
                    mc.num_classes,
                    labels,
                    weights.bootstrap_fraction,
                )?),
                None => None,
            }
        } else {
            None
        };
        members.push(MemberEval {
            trace,
            phot,
            ce,
            depth_included,
        });
    }

    // Eq. 8 batch depth aggregation.
    let denom = members.iter().filter(|m| m.depth_included).count();
    let depth_value: R = if denom == 0 {
        R::zero()
    } else {
        members
            .iter()
            .filter(|m| m.depth_included)
            .map(|m| m.phot.as_ref().unwrap().total)
            .sum::<R>()
            / R::from_usize_c(denom)
    };
    let ce_values: Vec<R> = members
        .iter()
        .filter_map(|m| m.ce.as_ref().map(|c| c.loss))
        .collect();
    let n_ce = ce_values.len();

    let mut grads = Gradients::zeros(&state.student);
    for m in &members {
        let mut og = OutputGrads::default();
        if m.depth_included {
            let phot = m.phot.as_ref().unwrap();
            let s = R::one() / R::from_usize_c(denom);
            let mut d_depth = phot.d_depth.clone();
            scale_vec(&mut d_depth, s);
            og.d_depth = Some(d_depth);
            og.d_pose_prev = Some(phot.d_pose_prev.map(|g| g * s));
            og.d_pose_next = Some(phot.d_pose_next.map(|g| g * s));
        }
        if let Some(ce) = &m.ce {
            let mut d = ce.d_logits.clone();
            scale_vec(&mut d, R::one() / R::from_usize_c(n_ce));
            og.d_semantic = Some(d);
        }
        if og.d_depth.is_some() || og.d_semantic.is_some() {
            grads.accumulate(&backward(&state.student, &m.trace, &og)?)?;
        }
    }

    // Mixed-sample CE against the pseudo-labels.
    let mut mixed_ce = None;
    if let Some(mx) = &mixed {
        let frames = [mx.image.clone(), mx.image.clone(), mx.image.clone()];
        let (out, trace) = forward(&state.student, &frames)?;
        match bootstrapped_ce(
            &out.semantic,
            mc.height,
            mc.width,
            mc.num_classes,
            &mx.labels,
            weights.bootstrap_fraction,
        ) {
            Ok(ce) => {
                let og = OutputGrads {
                    d_semantic: Some(ce.d_logits.clone()),
                    ..Default::default()
                };
                grads.accumulate(&backward(&state.student, &trace, &og)?)?;
                mixed_ce = Some(ce.loss);
            }
            // an all-ignore pseudo-label map contributes nothing
            Err(CodepsError::InvalidInput(_)) => {}
            Err(e) => return Err(e),
        }
    }

    let breakdown = adaptation_total_loss(depth_value, &ce_values, mixed_ce);
    let outcome = state.optimizer.step(&mut state.student, &grads)?;

    // (4) target buffer admission with the frozen-encoder embedding
    let feature = feature_embed(&state.student, online.principal())?;
    let decision = if cfg.diversity_enabled {
        update_target_buffer(
            &mut state.target,
            online.clone(),
            feature,
            R::c(cfg.similarity_threshold),
        )?
    } else {
        // ablation: admit unconditionally, evict uniformly at random
        let evicted = if state.target.is_full() {
            let i = state.rng.gen_range(0..state.target.len());
            state.target.remove(i);
            Some(i)
        } else {
            None
        };
        state.target.push_unchecked(online.clone(), feature);
        AdmissionDecision::Admitted { evicted }
    };

    ema_update(&mut state.teacher, &state.student, R::c(alpha))?;
    state.steps += 1;

    let (admitted, evicted, similarity) = match decision {
        AdmissionDecision::Admitted { evicted } => (true, evicted, None),
        AdmissionDecision::Rejected { similarity } => (false, None, Some(similarity.as_f64())),
    };
    Ok(StepRecord {
        step: state.steps,
        total: breakdown.total.as_f64(),
        depth: breakdown.depth.as_f64(),
        source_ce: breakdown.source_ce.as_f64(),
        mixed_ce: breakdown.mixed_ce.as_f64(),
        online_depth_gated: online_gated,
        admitted,
        evicted,
        similarity,
        target_len: state.target.len(),
        batch_clamped: batch.clamped,
        step_applied: outcome == StepOutcome::Applied,
    })
}

/// Evaluate-then-adapt over the first `split_fraction` of the sequence
/// (protocol 1), then frozen evaluation of the remainder (protocol 2).
pub fn run_adaptation<R: Real>(
    sequence: &[Sample<R>],
    state: &mut EngineState<R>,
    thing_classes: &[u16],
    cfg: &AdaptationConfig,
    alpha: f64,
) -> Result<(ProtocolReport<R>, ProtocolReport<R>, Vec<StepRecord>)> {
    if sequence.is_empty() {
        return Err(CodepsError::invalid("run_adaptation: empty sequence"));
    }
    let domain = sequence[0].domain_tag.clone();
    let n = sequence.len();
    let adapt_count = ((cfg.split_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut acc1 = EvalAccum::new(state.student.config.num_classes, thing_classes);
    let mut records = Vec::with_capacity(adapt_count);
    for sample in &sequence[..adapt_count] {
        evaluate_into(&state.student, sample, thing_classes, cfg, &mut acc1)?;
        let alpha_step = alpha;
        records.push(adapt_step(state, sample, cfg, alpha_step)?);
    }
    let p1 = acc1.finalize(1, &domain);
    let rest = &sequence[adapt_count..];
    let p2 = if rest.is_empty() {
        // degenerate split: report protocol 2 on an empty span
        EvalAccum::new(state.student.config.num_classes, thing_classes).finalize(2, &domain)
    } else {
        let mut acc2 = EvalAccum::new(state.student.config.num_classes, thing_classes);
        for sample in rest {
            evaluate_into(&state.student, sample, thing_classes, cfg, &mut acc2)?;
        }
        acc2.finalize(2, &domain)
    };
    Ok((p1, p2, records))
}

/// Sequential multi-domain adaptation. After each domain the engine
/// re-evaluates every previously adapted domain's protocol-2 span and the
/// source validation split, yielding a transfer table.
pub fn run_multi_domain<R: Real>(
    domains: &[Vec<Sample<R>>],
    state: &mut EngineState<R>,
    source_val: &[Sample<R>],
    thing_classes: &[u16],
    cfg: &AdaptationConfig,
) -> Result<(Vec<ProtocolReport<R>>, Vec<StepRecord>)> {
    if domains.is_empty() {
        return Err(CodepsError::invalid("run_multi_domain: empty schedule"));
    }
    let mut reports = Vec::new();
    let mut records = Vec::new();
    for (d, sequence) in domains.iter().enumerate() {
        let alpha = cfg.alpha_for_transition(d);
        let (p1, p2, r) = run_adaptation(sequence, state, thing_classes, cfg, alpha)?;
        reports.push(p1);
        reports.push(p2);
        records.extend(r);
        // revisit earlier domains' held-out spans
        for prev in domains.iter().take(d) {
            let n = prev.len();
            let split = ((cfg.split_fraction * n as f64).ceil() as usize).clamp(1, n);
            if split < n {
                reports.push(evaluate_set(
                    &state.student,
                    &prev[split..],
                    thing_classes,
                    cfg,
                    2,
                    &prev[0].domain_tag,
                )?);
            }
        }
        if !source_val.is_empty() {
            reports.push(eval_protocol3(
                &state.student,
                source_val,
                thing_classes,
                cfg,
            )?);
        }
    }
    Ok((reports, records))
}

// --- pretraining ----------------------------------------------------------------

/// Supervised source training of the full model: bootstrapped CE, instance
/// center/offset losses, and the photometric depth objective, one sample per
/// step in seeded random order.
pub fn pretrain<R: Real>(
    model_config: ModelConfig,
    dataset: &[Sample<R>],
    steps: usize,
    lr: f64,
    weights: &LossWeights<R>,
    seed: u64,
) -> Result<(ModelState<R>, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(CodepsError::invalid("pretrain: empty dataset"));
    }
    if dataset.iter().any(|s| !s.is_labeled()) {
        return Err(CodepsError::invalid("pretrain: dataset must be labeled"));
    }
    let mut state = ModelState::new(model_config)?;
    let mut adam = Adam::new(&state, R::c(lr));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mc = state.config.clone();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let sample = &dataset[rng.gen_range(0..dataset.len())];
        // style augmentation: half the steps re-color the triplet with a
        // random per-channel gamma curve so the heads tolerate the
        // histogram-matched replay styles seen during adaptation
        let mut styled;
        let sample = if rng.gen::<f64>() < 0.5 {
            let gamma: [R; 3] = std::array::from_fn(|_| R::c(rng.gen_range(0.45..2.2)));
            let gain: [R; 3] = std::array::from_fn(|_| R::c(rng.gen_range(0.9..1.1)));
            styled = sample.clone();
            for f in &mut styled.frames {
                let (h, w) = (f.height(), f.width());
                *f = crate::imaging::ImageTensor::from_fn(h, w, 3, |y, x, c| {
                    (f.get(y, x, c).max(R::zero()).powf(gamma[c]) * gain[c])
                        .min(R::one())
                });
            }
            &styled
        } else {
            sample
        };
        let (out, trace) = forward(&state, &sample.frames)?;
        let mut og = OutputGrads::default();
        let mut total = R::zero();
        let ce = bootstrapped_ce(
            &out.semantic,
            mc.height,
            mc.width,
            mc.num_classes,
            sample.semantic.as_ref().unwrap(),
            weights.bootstrap_fraction,
        )?;
        total += ce.loss;
        og.d_semantic = Some(ce.d_logits);
        if let Some(inst) = &sample.instance {
            let il = instance_loss(&out.center, &out.offset, inst, weights)?;
            total += il.loss;
            og.d_center = Some(il.d_center);
            og.d_offset = Some(il.d_offset);
        }
        match photometric_loss(
            &sample.frames,
            &out.depth,
            &out.pose_prev,
            &out.pose_next,
            &sample.intrinsics,
            weights,
        ) {
            Ok(p) => {
                total += p.total;
                og.d_depth = Some(p.d_depth);
                og.d_pose_prev = Some(p.d_pose_prev);
                og.d_pose_next = Some(p.d_pose_next);
            }
            Err(CodepsError::UnusableFrame(_)) => {}
            Err(e) => return Err(e),
        }
        let grads = backward(&state, &trace, &og)?;
        adam.step(&mut state, &grads)?;
        losses.push(total.as_f64());
    }
    Ok((state, losses))
}

// --- checkpoints ----------------------------------------------------------------

/// Hex SHA-256 over all parameter values (f32 little-endian, declaration
/// order); the determinism fingerprint.
pub fn param_hash<R: Real>(state: &ModelState<R>) -> String {
    let mut h = Sha256::new();
    h.update(state.flat_f32_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

const CKPT_MAGIC: &str = "codeps-checkpoint v1";

/// Writes the model as a single file: a key=value config header, then per
/// array a `name shape frozen` line followed by raw little-endian f32 data.
pub fn save_checkpoint<R: Real>(state: &ModelState<R>, path: &Path) -> Result<()> {
    let c = &state.config;
    let mut bytes: Vec<u8> = Vec::new();
    let header = format!(
        "{CKPT_MAGIC}\nheight={}\nwidth={}\nnum_classes={}\nenc1={}\nenc2={}\n\
         depth_min={}\ndepth_max={}\npose_scale={}\nmodel_seed={}\n--\n",
        c.height,
        c.width,
        c.num_classes,
        c.enc_channels[0],
        c.enc_channels[1],
        c.depth_min,
        c.depth_max,
        c.pose_scale,
        c.seed
    );
    bytes.extend_from_slice(header.as_bytes());
    for p in state.params() {
        let shape = p
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let line = format!(
            "{} {} {}\n",
            p.name,
            shape,
            if p.frozen { "frozen" } else { "free" }
        );
        bytes.extend_from_slice(line.as_bytes());
        for v in &p.data {
            bytes.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| CodepsError::io(path.display().to_string(), e))
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<ModelState<R>> {
    let bytes = fs::read(path).map_err(|e| CodepsError::io(path.display().to_string(), e))?;
    let perr = |m: &str| CodepsError::Parse {
        path: path.display().to_string(),
        message: m.to_string(),
    };
    let sep = b"\n--\n";
    let sep_pos = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| perr("missing header separator"))?;
    let header = std::str::from_utf8(&bytes[..sep_pos]).map_err(|_| perr("non-utf8 header"))?;
    let mut lines = header.lines();
    if lines.next() != Some(CKPT_MAGIC) {
        return Err(perr("bad magic"));
    }
    let kv = parse_kv(&lines.collect::<Vec<_>>().join("\n"), &path.display().to_string())?;
    let mut config = ModelConfig::default();
    for (k, v) in kv {
        let num = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| perr(&format!("bad number for {k}")))
        };
        match k.as_str() {
            "height" => config.height = num(&v)? as usize,
            "width" => config.width = num(&v)? as usize,
            "num_classes" => config.num_classes = num(&v)? as usize,
            "enc1" => config.enc_channels[0] = num(&v)? as usize,
            "enc2" => config.enc_channels[1] = num(&v)? as usize,
            "depth_min" => config.depth_min = num(&v)?,
            "depth_max" => config.depth_max = num(&v)?,
            "pose_scale" => config.pose_scale = num(&v)?,
            "model_seed" => config.seed = num(&v)? as u64,
            other => return Err(perr(&format!("unknown checkpoint key {other}"))),
        }
    }
    let mut state = ModelState::<R>::new(config)?;
    let mut cursor = sep_pos + sep.len();
    let mut seen = 0usize;
    while cursor < bytes.len() {
        let nl = bytes[cursor..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| perr("truncated array header"))?;
        let line = std::str::from_utf8(&bytes[cursor..cursor + nl])
            .map_err(|_| perr("non-utf8 array header"))?;
        cursor += nl + 1;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(perr(&format!("bad array header: {line}")));
        }
        let name = parts[0];
        let shape: Vec<usize> = parts[1]
            .split(',')
            .map(|d| d.parse().map_err(|_| perr("bad shape")))
            .collect::<Result<_>>()?;
        let frozen = match parts[2] {
            "frozen" => true,
            "free" => false,
            _ => return Err(perr("bad freeze flag")),
        };
        let len: usize = shape.iter().product();
        if cursor + len * 4 > bytes.len() {
            return Err(perr("truncated array data"));
        }
        let param: &mut Param<R> = state.param_mut(name)?;
        if param.shape != shape {
            return Err(perr(&format!("shape mismatch for {name}")));
        }
        for (i, v) in param.data.iter_mut().enumerate() {
            let off = cursor + i * 4;
            *v = R::c(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
        }
        param.frozen = frozen;
        cursor += len * 4;
        seen += 1;
    }
    if seen != state.params().len() {
        return Err(perr("checkpoint is missing arrays"));
    }
    Ok(state)
}

// --- run configuration --------------------------------------------------------

/// Full run configuration: model, adaptation, pretraining, and generation
/// knobs, parsed from flat key=value text. Unknown keys are rejected; the
/// `CODEPS_SEED` environment variable overrides the seed.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adapt: AdaptationConfig,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub source_frames: usize,
    pub target_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adapt: AdaptationConfig::default(),
            pretrain_steps: 600,
            pretrain_lr: 3e-3,
            source_frames: 320,
            target_frames: 120,
        }
    }
}

impl RunConfig {
    pub fn from_kv_text(text: &str, path: &str) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        for (k, v) in parse_kv(text, path)? {
            rc.apply(&k, &v, path)?;
        }
        if let Ok(seed) = std::env::var("CODEPS_SEED") {
            let seed: u64 = seed.parse().map_err(|_| {
                CodepsError::invalid(format!("CODEPS_SEED is not an integer: {seed}"))
            })?;
            rc.adapt.seed = seed;
            rc.model.seed = seed;
        }
        rc.adapt.validate()?;
        rc.model.validate()?;
        Ok(rc)
    }

    fn apply(&mut self, key: &str, value: &str, path: &str) -> Result<()> {
        let perr = |m: String| CodepsError::Parse {
            path: path.to_string(),
            message: m,
        };
        macro_rules! parse {
            ($t:ty) => {
                value
                    .parse::<$t>()
                    .map_err(|_| perr(format!("bad value for {key}: {value}")))?
            };
        }
        match key {
            "seed" => {
                self.adapt.seed = parse!(u64);
                self.model.seed = parse!(u64);
            }
            "height" => self.model.height = parse!(usize),
            "width" => self.model.width = parse!(usize),
            "num_classes" => self.model.num_classes = parse!(usize),
            "enc1" => self.model.enc_channels[0] = parse!(usize),
            "enc2" => self.model.enc_channels[1] = parse!(usize),
            "depth_min" => self.model.depth_min = parse!(f64),
            "depth_max" => self.model.depth_max = parse!(f64),
            "pose_scale" => self.model.pose_scale = parse!(f64),
            "lr" => self.adapt.lr = parse!(f64),
            "batch_current" => self.adapt.batch.current = parse!(usize),
            "batch_target" => self.adapt.batch.target = parse!(usize),
            "batch_source" => self.adapt.batch.source = parse!(usize),
            "source_capacity" => self.adapt.source_capacity = parse!(usize),
            "target_capacity" => self.adapt.target_capacity = parse!(usize),
            "similarity_threshold" => self.adapt.similarity_threshold = parse!(f64),
            "rcs_temperature" => self.adapt.rcs_temperature = parse!(f64),
            "alpha_schedule" => {
                self.adapt.alpha_schedule = value
                    .split(',')
                    .map(|a| {
                        a.trim()
                            .parse::<f64>()
                            .map_err(|_| perr(format!("bad alpha: {a}")))
                    })
                    .collect::<Result<_>>()?;
            }
            "split_fraction" => self.adapt.split_fraction = parse!(f64),
            "detection_threshold" => self.adapt.detection_threshold = parse!(f64),
            "lambda_pr" => self.adapt.lambda_pr = parse!(f64),
            "lambda_sm" => self.adapt.lambda_sm = parse!(f64),
            "lambda_center" => self.adapt.lambda_center = parse!(f64),
            "lambda_offset" => self.adapt.lambda_offset = parse!(f64),
            "bootstrap_fraction" => self.adapt.bootstrap_fraction = parse!(f64),
            "motion_threshold" => self.adapt.motion_threshold = parse!(f64),
            "mix_grid_rows" => self.adapt.mix.grid_rows = parse!(usize),
            "mix_grid_cols" => self.adapt.mix.grid_cols = parse!(usize),
            "mix_patches" => self.adapt.mix.patches = parse!(usize),
            "mixing_enabled" => self.adapt.mixing_enabled = parse!(bool),
            "source_ce_enabled" => self.adapt.source_ce_enabled = parse!(bool),
            "source_mixing_enabled" => self.adapt.source_mixing_enabled = parse!(bool),
            "diversity_enabled" => self.adapt.diversity_enabled = parse!(bool),
            "median_scaling" => self.adapt.median_scaling = parse!(bool),
            "pretrain_steps" => self.pretrain_steps = parse!(usize),
            "pretrain_lr" => self.pretrain_lr = parse!(f64),
            "source_frames" => self.source_frames = parse!(usize),
            "target_frames" => self.target_frames = parse!(usize),
            other => return Err(perr(format!("unknown config key: {other}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        frames_to_samples, generate_frames, stock_domain_a, DomainSpec, NUM_CLASSES,
        THING_CLASSES,
    };

    fn small_model_config() -> ModelConfig {
        ModelConfig {
            height: 32,
            width: 48,
            num_classes: NUM_CLASSES,
            enc_channels: [6, 8],
            seed: 5,
            ..Default::default()
        }
    }

    fn small_domain(seed: u64, frames: usize) -> DomainSpec {
        DomainSpec {
            height: 32,
            width: 48,
            fx: 40.0,
            fy: 40.0,
            cx: 24.0,
            cy: 16.0,
            num_frames: frames,
            layout_seed: seed,
            ..stock_domain_a(frames)
        }
    }

    fn small_dataset(seed: u64, frames: usize) -> Vec<Sample<f64>> {
        let spec = small_domain(seed, frames);
        let rendered = generate_frames::<f64>(&spec).unwrap();
        frames_to_samples(&rendered, spec.intrinsics().unwrap(), &spec.tag, true)
    }

    fn small_adapt_config(dataset_len: usize) -> AdaptationConfig {
        AdaptationConfig {
            source_capacity: dataset_len.min(8),
            target_capacity: 6,
            lr: 1e-3,
            ..Default::default()
        }
    }

    fn fresh_engine(dataset: &[Sample<f64>], cfg: &AdaptationConfig) -> EngineState<f64> {
        let model = ModelState::new(small_model_config()).unwrap();
        EngineState::new(model, dataset, cfg).unwrap()
    }

    #[test]
    fn zero_lr_step_updates_buffers_but_not_weights() {
        let dataset = small_dataset(1, 12);
        let mut cfg = small_adapt_config(dataset.len());
        cfg.lr = 0.0;
        let mut engine = fresh_engine(&dataset, &cfg);
        let before = param_hash(&engine.student);
        let rec = adapt_step(&mut engine, &dataset[3], &cfg, 0.9).unwrap();
        assert_eq!(param_hash(&engine.student), before);
        assert!(rec.admitted);
        assert_eq!(engine.target.len(), 1);
    }

    #[test]
    fn duplicate_frame_is_rejected_by_admission() {
        let dataset = small_dataset(2, 12);
        let cfg = small_adapt_config(dataset.len());
        let mut engine = fresh_engine(&dataset, &cfg);
        let r1 = adapt_step(&mut engine, &dataset[0], &cfg, 0.9).unwrap();
        assert!(r1.admitted);
        let r2 = adapt_step(&mut engine, &dataset[0], &cfg, 0.9).unwrap();
        assert!(!r2.admitted, "identical frame must be rejected: {r2:?}");
        assert!(r2.similarity.unwrap() > 0.95);
        assert_eq!(engine.target.len(), 1);
    }

    #[test]
    fn ten_step_run_is_deterministic() {
        let dataset = small_dataset(3, 14);
        let cfg = small_adapt_config(dataset.len());
        let run = || {
            let mut engine = fresh_engine(&dataset, &cfg);
            let mut lines = Vec::new();
            for s in dataset.iter().take(10) {
                lines.push(adapt_step(&mut engine, s, &cfg, 0.9).unwrap().log_line());
            }
            (param_hash(&engine.student), engine.target.len(), lines)
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn split_arithmetic_and_step_count() {
        let dataset = small_dataset(4, 12); // 10 samples
        assert_eq!(dataset.len(), 10);
        let cfg = small_adapt_config(dataset.len());
        let mut engine = fresh_engine(&dataset, &cfg);
        let (p1, p2, records) =
            run_adaptation(&dataset, &mut engine, &THING_CLASSES, &cfg, 0.9).unwrap();
        assert_eq!(records.len(), 7);
        assert_eq!(p1.frames, 7);
        assert_eq!(p2.frames, 3);
        assert_eq!(p1.protocol, 1);
        assert_eq!(p2.protocol, 2);
    }

    #[test]
    fn frozen_evaluations_do_not_mutate_state() {
        let dataset = small_dataset(5, 10);
        let cfg = small_adapt_config(dataset.len());
        let engine = fresh_engine(&dataset, &cfg);
        let before = param_hash(&engine.student);
        let r1 = evaluate_set(&engine.student, &dataset, &THING_CLASSES, &cfg, 2, "d").unwrap();
        let r2 = eval_protocol3(&engine.student, &dataset, &THING_CLASSES, &cfg).unwrap();
        let r3 = eval_protocol3(&engine.student, &dataset, &THING_CLASSES, &cfg).unwrap();
        assert_eq!(param_hash(&engine.student), before);
        assert_eq!(r2.log_line(), r3.log_line());
        assert_eq!(r1.frames, dataset.len());
    }

    #[test]
    fn frozen_arrays_bit_identical_after_adaptation() {
        let dataset = small_dataset(6, 12);
        let cfg = small_adapt_config(dataset.len());
        let mut engine = fresh_engine(&dataset, &cfg);
        let enc_before = engine.student.param("enc.conv1.w").unwrap().data.clone();
        let inst_before = engine.student.param("inst.center.w").unwrap().data.clone();
        for s in dataset.iter().take(6) {
            adapt_step(&mut engine, s, &cfg, 0.9).unwrap();
        }
        assert_eq!(engine.student.param("enc.conv1.w").unwrap().data, enc_before);
        assert_eq!(
            engine.student.param("inst.center.w").unwrap().data,
            inst_before
        );
        // unfrozen semantic head must have moved
        assert!(engine.steps == 6);
    }

    #[test]
    fn fuse_single_perfect_instance() {
        let (h, w, k) = (8usize, 8usize, 4usize);
        let thing = 3u16;
        let mut semantic = vec![0.0f64; h * w * k];
        let mut center = vec![0.0f64; h * w];
        let mut offset = vec![0.0f64; h * w * 2];
        // 3x3 blob of thing class around (4,4), stuff class 1 elsewhere
        for y in 0..h {
            for x in 0..w {
                let cls = if (3..6).contains(&y) && (3..6).contains(&x) {
                    thing as usize
                } else {
                    1
                };
                semantic[(y * w + x) * k + cls] = 5.0;
                if cls == thing as usize {
                    offset[(y * w + x) * 2] = 4.0 - y as f64;
                    offset[(y * w + x) * 2 + 1] = 4.0 - x as f64;
                }
            }
        }
        center[4 * w + 4] = 0.9;
        let (sem, inst) =
            panoptic_fuse(&semantic, &center, &offset, h, w, k, &[thing], 0.1).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expect = if (3..6).contains(&y) && (3..6).contains(&x) {
                    1
                } else {
                    0
                };
                assert_eq!(inst.get(y, x), expect);
                assert_eq!(
                    sem.get(y, x),
                    if expect == 1 { thing } else { 1 }
                );
            }
        }
    }

    #[test]
    fn fuse_no_centers_gives_zero_instances() {
        let (h, w, k) = (6usize, 6usize, 4usize);
        let mut semantic = vec![0.0f64; h * w * k];
        for i in 0..h * w {
            semantic[i * k + 3] = 1.0;
        }
        let center = vec![0.05f64; h * w];
        let offset = vec![0.0f64; h * w * 2];
        let (_, inst) = panoptic_fuse(&semantic, &center, &offset, h, w, k, &[3], 0.1).unwrap();
        assert!(inst.data.iter().all(|v| *v == 0));
    }

    #[test]
    fn fuse_matches_brute_force_nearest_center() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (h, w, k) = (10usize, 12usize, 5usize);
        for _ in 0..20 {
            let semantic: Vec<f64> = (0..h * w * k).map(|_| rng.gen::<f64>()).collect();
            let center: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
            let offset: Vec<f64> = (0..h * w * 2).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
            let things = [2u16, 4];
            let (sem, inst) =
                panoptic_fuse(&semantic, &center, &offset, h, w, k, &things, 0.6).unwrap();
            // brute-force reference
            let mut centers = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    let v = center[y * w + x];
                    if v <= 0.6 {
                        continue;
                    }
                    let mut is_peak = true;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dy == 0 && dx == 0 {
                                continue;
                            }
                            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let nv = center[ny as usize * w + nx as usize];
                            let ni = ny as usize * w + nx as usize;
                            if nv > v || (nv == v && ni < y * w + x) {
                                is_peak = false;
                            }
                        }
                    }
                    if is_peak {
                        centers.push((y, x));
                    }
                }
            }
            for y in 0..h {
                for x in 0..w {
                    if !things.contains(&sem.get(y, x)) {
                        assert_eq!(inst.get(y, x), 0);
                        continue;
                    }
                    if centers.is_empty() {
                        assert_eq!(inst.get(y, x), 0);
                        continue;
                    }
                    let ty = y as f64 + offset[(y * w + x) * 2];
                    let tx = x as f64 + offset[(y * w + x) * 2 + 1];
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (ci, (cy, cx)) in centers.iter().enumerate() {
                        let d = (ty - *cy as f64).powi(2) + (tx - *cx as f64).powi(2);
                        if d < best_d {
                            best_d = d;
                            best = ci;
                        }
                    }
                    assert_eq!(inst.get(y, x), best as u32 + 1);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = ModelState::<f64>::new(small_model_config()).unwrap();
        model.set_frozen("enc.", true);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.flat_f32_bytes(), model.flat_f32_bytes());
        assert_eq!(loaded.config, model.config);
        assert!(loaded.param("enc.conv1.w").unwrap().frozen);
        assert!(!loaded.param("sem.conv1.w").unwrap().frozen);
        assert_eq!(param_hash(&loaded), param_hash(&model));
    }

    #[test]
    fn run_config_parses_and_rejects_unknown_keys() {
        let rc = RunConfig::from_kv_text(
            "seed=11\nlr=0.002\nalpha_schedule=0.8,0.6\nmixing_enabled=false\n",
            "cfg",
        )
        .unwrap();
        assert_eq!(rc.adapt.seed, 11);
        assert_eq!(rc.model.seed, 11);
        assert_eq!(rc.adapt.lr, 0.002);
        assert_eq!(rc.adapt.alpha_schedule, vec![0.8, 0.6]);
        assert!(!rc.adapt.mixing_enabled);
        assert!(RunConfig::from_kv_text("no_such_key=1\n", "cfg").is_err());
        assert!(RunConfig::from_kv_text("split_fraction=1.5\n", "cfg").is_err());
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let dataset = small_dataset(7, 10);
        let w = LossWeights::<f64>::default();
        let (m1, l1) = pretrain(small_model_config(), &dataset, 30, 3e-3, &w, 9).unwrap();
        let (m2, l2) = pretrain(small_model_config(), &dataset, 30, 3e-3, &w, 9).unwrap();
        assert_eq!(param_hash(&m1), param_hash(&m2));
        assert_eq!(l1, l2);
        let head: f64 = l1[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = l1[l1.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn multi_domain_degenerate_schedule_matches_single_run() {
        let dataset = small_dataset(8, 10);
        let cfg = small_adapt_config(dataset.len());
        let target = small_dataset(9, 10);
        let mut e1 = fresh_engine(&dataset, &cfg);
        let (reports, _) =
            run_multi_domain(&[target.clone()], &mut e1, &dataset, &THING_CLASSES, &cfg).unwrap();
        // p1, p2, protocol-3
        assert_eq!(reports.len(), 3);
        assert_eq!(reports[2].protocol, 3);
        let mut e2 = fresh_engine(&dataset, &cfg);
        let (p1, _, _) = run_adaptation(&target, &mut e2, &THING_CLASSES, &cfg, 0.9).unwrap();
        assert_eq!(reports[0].log_line(), p1.log_line());
    }
}
