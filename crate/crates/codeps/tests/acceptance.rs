//! Release acceptance suite. Each test covers one numbered criterion and
//! prints a single `criterion N: PASS` line with its measured margins.
//!
//! Criteria 1-6 check the numerical core against independent oracles;
//! criteria 7-8 run the full adaptation system end to end on the synthetic
//! domains; criterion 9 checks bit-level determinism of the whole pipeline.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use codeps::data::{
    frames_to_samples, generate_domain, generate_frames, load_sequence, stock_domain_a,
    stock_domain_b, DomainSpec, NUM_CLASSES, THING_CLASSES,
};
use codeps::engine::{
    eval_protocol3, evaluate_set, param_hash, pretrain, run_adaptation, run_multi_domain,
    save_checkpoint, AdaptationConfig, EngineState, ProtocolReport,
};
use codeps::imaging::{
    histogram_match, intrinsic_warp, synthesize_view, CameraIntrinsics, ImageTensor, InstanceMap,
    LabelMap, IGNORE_ID,
};
use codeps::losses::{batch_depth_loss, photometric_loss, LossWeights};
use codeps::mixing::ema_update;
use codeps::metrics::{mean_iou, panoptic_quality, PanopticAccumulator};
use codeps::model::{gradient_check, CheckLoss, ModelConfig, ModelState};
use codeps::replay::{
    class_pixel_frequencies, eviction_index, rcs_probabilities, update_target_buffer,
    AdmissionDecision, FeatureVector, Sample, TargetBuffer,
};
use codeps::Scalar;

// --- shared helpers ----------------------------------------------------------------

/// Small renderable domain for the oracle-level criteria.
fn small_spec(height: usize, width: usize, frames: usize) -> DomainSpec {
    DomainSpec {
        height,
        width,
        fx: width as f64 * 0.8,
        fy: width as f64 * 0.8,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        num_frames: frames,
        ..stock_domain_a(frames)
    }
}

fn mean_abs_masked(
    a: &ImageTensor<f64>,
    b: &ImageTensor<f64>,
    mask: impl Fn(usize, usize) -> bool,
) -> f64 {
    let mut err = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if !mask(y, x) {
                continue;
            }
            for c in 0..a.channels() {
                err += (a.get(y, x, c) - b.get(y, x, c)).abs();
                n += 1;
            }
        }
    }
    assert!(n > 0, "empty comparison mask");
    err / n as f64
}

// --- criterion 1: gradient suite ----------------------------------------------------

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let spec = small_spec(24, 32, 5);
    let frames = generate_frames::<f64>(&spec).unwrap();
    let samples = frames_to_samples(&frames, spec.intrinsics().unwrap(), &spec.tag, true);
    let sample = &samples[0];
    let config = ModelConfig {
        height: 24,
        width: 32,
        enc_channels: [4, 6],
        seed: 3,
        ..ModelConfig::default()
    };
    let weights = LossWeights::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    // Analytic vs central finite differences for every loss head over every
    // unfrozen parameter array.
    let mut coords = 0usize;
    let mut worst = 0.0f64;
    for loss in [
        CheckLoss::Photometric,
        CheckLoss::Semantic,
        CheckLoss::Instance,
    ] {
        let mut model = ModelState::<f64>::new(config.clone()).unwrap();
        let o = gradient_check(&mut model, sample, loss, &weights, 6, 1e-6, &mut rng).unwrap();
        coords += o.coords_checked;
        worst = worst.max(o.max_rel_error);
    }

    // Batch-mean depth objective with motion gating: finite differences of
    // the aggregated value w.r.t. the depth inputs of both batch members.
    let patched = |d: &[f64]| -> Vec<f64> {
        d.iter().map(|v| if *v > 0.0 { *v } else { 8.0 }).collect()
    };
    let depth_on = patched(&frames[1].depth.data);
    let depth_re = patched(&frames[3].depth.data);
    let pose: [f64; 6] = [0.01, -0.02, 0.005, 0.02, -0.01, 0.03];
    let k = spec.intrinsics::<f64>().unwrap();
    let w = LossWeights::<f64>::default();
    let trip_on = [
        frames[0].image.clone(),
        frames[1].image.clone(),
        frames[2].image.clone(),
    ];
    let trip_re = [
        frames[2].image.clone(),
        frames[3].image.clone(),
        frames[4].image.clone(),
    ];
    let eval = |d_on: &[f64], d_re: &[f64], thr: f64| -> f64 {
        let lo = photometric_loss(&trip_on, d_on, &pose, &pose, &k, &w).unwrap();
        let lr = photometric_loss(&trip_re, d_re, &pose, &pose, &k, &w).unwrap();
        batch_depth_loss(lo.total, &[lr.total], 0.5, thr).value
    };
    for thr in [0.1, 1.0] {
        let gated = 0.5 < thr;
        let denom = if gated { 1.0 } else { 2.0 };
        let lo = photometric_loss(&trip_on, &depth_on, &pose, &pose, &k, &w).unwrap();
        let lr = photometric_loss(&trip_re, &depth_re, &pose, &pose, &k, &w).unwrap();
        // small step keeps central differences off the per-pixel min-view
        // selection boundaries, which are kinks of the objective
        let h = 1e-6;
        for _ in 0..15 {
            // online member: gradient zero when gated, 1/denom-scaled otherwise
            let i = rng.gen_range(0..depth_on.len());
            let mut dp = depth_on.clone();
            dp[i] += h;
            let mut dm = depth_on.clone();
            dm[i] -= h;
            let fd = (eval(&dp, &depth_re, thr) - eval(&dm, &depth_re, thr)) / (2.0 * h);
            let analytic = if gated { 0.0 } else { lo.d_depth[i] / denom };
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            coords += 1;

            // replay member: never gated
            let j = rng.gen_range(0..depth_re.len());
            let mut dp = depth_re.clone();
            dp[j] += h;
            let mut dm = depth_re.clone();
            dm[j] -= h;
            let fd = (eval(&depth_on, &dp, thr) - eval(&depth_on, &dm, thr)) / (2.0 * h);
            let analytic = lr.d_depth[j] / denom;
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            coords += 1;
        }
    }

    let elapsed = t0.elapsed();
    assert!(coords >= 200, "only {coords} coordinates checked");
    assert!(worst < 1e-4, "max relative gradient error {worst:.3e}");
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "criterion 1: PASS — {coords} coords, max rel error {worst:.3e}, {:.1}s",
        elapsed.as_secs_f64()
    );
}

// --- criterion 2: rare-class sampling distribution -----------------------------------

#[test]
fn criterion_2_rare_class_sampling() {
    let spec = small_spec(32, 48, 12);
    let frames = generate_frames::<f64>(&spec).unwrap();
    let samples = frames_to_samples(&frames, spec.intrinsics().unwrap(), &spec.tag, true);
    let stats = class_pixel_frequencies(&samples, NUM_CLASSES).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000usize;
    let mut worst_tv = 0.0f64;
    for t in [0.01, 0.1, 1.0] {
        let probs = rcs_probabilities::<f64>(&stats, t).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut counts = vec![0u64; probs.len()];
        for _ in 0..draws {
            let u = rng.gen::<f64>();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (c, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = c;
                    break;
                }
            }
            counts[pick] += 1;
        }
        let tv: f64 = probs
            .iter()
            .zip(&counts)
            .map(|(p, c)| (p - *c as f64 / draws as f64).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "T={t}: total variation {tv:.4}");
        worst_tv = worst_tv.max(tv);
    }
    println!("criterion 2: PASS — worst total variation {worst_tv:.4} over 100k draws, T in {{0.01, 0.1, 1}}");
}

// --- criterion 3: buffer admission and eviction oracles ------------------------------

fn dummy_sample(i: usize) -> Sample<f64> {
    Sample {
        frames: [
            ImageTensor::zeros(2, 2, 3),
            ImageTensor::zeros(2, 2, 3),
            ImageTensor::zeros(2, 2, 3),
        ],
        intrinsics: CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0).unwrap(),
        semantic: None,
        instance: None,
        gt_depth: None,
        domain_tag: "dummy".into(),
        sequence_index: i,
        rel_path: format!("rgb/{i}"),
    }
}

fn random_feature(dim: usize, rng: &mut impl Rng) -> FeatureVector<f64> {
    loop {
        let f = FeatureVector((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        if f.norm() > 1e-6 {
            return f;
        }
    }
}

/// Independent O(n^2) re-derivation of the most-redundant entry: argmax of
/// summed pairwise cosine similarity, ties to the lowest index.
fn brute_force_eviction(features: &[FeatureVector<f64>]) -> usize {
    let cos = |a: &FeatureVector<f64>, b: &FeatureVector<f64>| -> f64 {
        let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
        let na = a.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut best = 0;
    let mut best_sum = f64::NEG_INFINITY;
    for i in 0..features.len() {
        let mut sum = 0.0;
        for j in 0..features.len() {
            sum += cos(&features[i], &features[j]);
        }
        if sum > best_sum {
            best_sum = sum;
            best = i;
        }
    }
    best
}

#[test]
fn criterion_3_buffer_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // Eviction matches the brute-force oracle on 1000 random full buffers.
    for case in 0..1000 {
        let n = rng.gen_range(2..=32usize);
        let mut buffer = TargetBuffer::<f64>::new(n);
        let mut features: Vec<FeatureVector<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            // duplicates force exact sum ties, exercising the tie-break rule
            let f = if i > 0 && rng.gen::<f64>() < 0.3 {
                FeatureVector(features[rng.gen_range(0..i)].0.clone())
            } else {
                random_feature(6, &mut rng)
            };
            features.push(FeatureVector(f.0.clone()));
            buffer.push_unchecked(dummy_sample(i), f);
        }
        let got = eviction_index(&buffer).unwrap();
        let want = brute_force_eviction(&features);
        assert_eq!(got, want, "case {case}: n={n}");
    }

    // 10k-event admission stream: deterministic and capacity-bounded.
    let capacity = 16usize;
    let run_stream = || -> (Vec<String>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut buffer = TargetBuffer::<f64>::new(capacity);
        let mut decisions = Vec::with_capacity(10_000);
        for i in 0..10_000 {
            let f = random_feature(6, &mut rng);
            if buffer.is_empty() {
                buffer.push_unchecked(dummy_sample(i), f);
                decisions.push("seed".to_string());
            } else {
                let d = update_target_buffer(&mut buffer, dummy_sample(i), f, 0.6).unwrap();
                decisions.push(match d {
                    AdmissionDecision::Admitted { evicted } => format!("admit {evicted:?}"),
                    AdmissionDecision::Rejected { similarity } => {
                        format!("reject {similarity:.17e}")
                    }
                });
            }
            assert!(buffer.len() <= capacity, "capacity exceeded at event {i}");
        }
        let feats = buffer.entries().iter().map(|(_, f)| f.0.clone()).collect();
        (decisions, feats)
    };
    let (d1, f1) = run_stream();
    let (d2, f2) = run_stream();
    assert_eq!(d1, d2, "admission decisions diverged between replays");
    assert_eq!(f1, f2, "final buffer contents diverged between replays");
    let admitted = d1.iter().filter(|d| d.starts_with("admit")).count();
    println!(
        "criterion 3: PASS — 1000 eviction oracles exact, 10k-event stream deterministic ({admitted} admissions, len ≤ {capacity})"
    );
}

// --- criterion 4: geometry ------------------------------------------------------------

#[test]
fn criterion_4_geometry() {
    let (h, w) = (64usize, 96usize);
    // smooth test image so resampling error reflects the mapping, not edges
    let img = ImageTensor::<f64>::from_fn(h, w, 3, |y, x, c| {
        0.5 + 0.4 * ((x as f64 / 7.0 + c as f64).sin() * (y as f64 / 5.0).cos())
    });
    let k0 = CameraIntrinsics::new(80.0, 80.0, 48.0, 32.0).unwrap();
    let k1 = CameraIntrinsics::new(70.0, 75.0, 50.0, 30.0).unwrap();
    let k2 = CameraIntrinsics::new(60.0, 70.0, 54.0, 30.0).unwrap();

    // identity: same intrinsics map every pixel onto itself
    let (ident, mask) = intrinsic_warp(&img, &k0, &k0, h, w).unwrap();
    assert_eq!(mask.count(), h * w);
    let id_err = mean_abs_masked(&ident, &img, |_, _| true);
    assert!(id_err <= 1e-6, "identity warp error {id_err:.3e}");

    // composition: warping k2->k1 then k1->k0 matches the direct k2->k0 map
    let (direct, m_direct) = intrinsic_warp(&img, &k0, &k2, h, w).unwrap();
    let (mid, _) = intrinsic_warp(&img, &k1, &k2, h, w).unwrap();
    let (two_step, m_two) = intrinsic_warp(&mid, &k0, &k1, h, w).unwrap();
    let comp_err = mean_abs_masked(&direct, &two_step, |y, x| {
        m_direct.get(y, x) && m_two.get(y, x)
    });
    assert!(comp_err <= 0.02, "composition error {comp_err:.4}");

    // view synthesis: reconstruct a rendered frame from its neighbor using
    // ground-truth depth and relative pose
    let spec = small_spec(64, 96, 6);
    let frames = generate_frames::<f64>(&spec).unwrap();
    let k = spec.intrinsics::<f64>().unwrap();
    let (a, b) = (&frames[2], &frames[3]);
    let pose = a.cam_to_world.inverse().compose(&b.cam_to_world);
    let (recon, vmask) = synthesize_view(&a.image, &b.depth, &pose, &k).unwrap();
    let view_err = mean_abs_masked(&recon, &b.image, |y, x| vmask.get(y, x));
    assert!(view_err < 0.02, "view synthesis error {view_err:.4}");

    println!(
        "criterion 4: PASS — identity {id_err:.2e}, composition {comp_err:.4}, view synthesis {view_err:.4}"
    );
}

// --- criterion 5: teacher EMA closed form ---------------------------------------------

#[test]
fn criterion_5_ema_closed_form() {
    let config = ModelConfig {
        height: 16,
        width: 24,
        enc_channels: [4, 6],
        ..ModelConfig::default()
    };
    let mut worst = 0.0f64;
    for alpha in [0.9f64, 0.7] {
        let init = ModelState::<f64>::new(ModelConfig {
            seed: 1,
            ..config.clone()
        })
        .unwrap();
        let student = ModelState::<f64>::new(ModelConfig {
            seed: 2,
            ..config.clone()
        })
        .unwrap();
        let mut teacher = init.clone();
        let k = 40usize;
        for _ in 0..k {
            ema_update(&mut teacher, &student, alpha).unwrap();
        }
        let ak = alpha.powi(k as i32);
        for (pi, p) in teacher.params().iter().enumerate() {
            for (i, t) in p.data.iter().enumerate() {
                let expected =
                    ak * init.params()[pi].data[i] + (1.0 - ak) * student.params()[pi].data[i];
                let rel = (t - expected).abs() / expected.abs().max(1e-12);
                assert!(
                    rel <= 1e-10,
                    "alpha {alpha}, {}[{i}]: rel error {rel:.3e}",
                    p.name
                );
                worst = worst.max(rel);
            }
        }
    }
    println!("criterion 5: PASS — 40-step EMA matches alpha^k closed form, worst rel {worst:.2e}");
}

// --- criterion 6: metric oracles --------------------------------------------------------

type SegKey = (u16, u32);

struct BruteForcePq {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    iou_sum: Vec<f64>,
    things: Vec<bool>,
}

impl BruteForcePq {
    fn new(num_classes: usize, thing_classes: &[u16]) -> Self {
        let mut things = vec![false; num_classes];
        for t in thing_classes {
            things[*t as usize] = true;
        }
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            iou_sum: vec![0.0; num_classes],
            things,
        }
    }

    fn segments(&self, sem: &LabelMap, inst: &InstanceMap, gt_sem: &LabelMap) -> HashMap<SegKey, u64> {
        let mut areas = HashMap::new();
        for i in 0..sem.data.len() {
            if gt_sem.data[i] == IGNORE_ID {
                continue;
            }
            let c = sem.data[i];
            if c == IGNORE_ID || c as usize >= self.things.len() {
                continue;
            }
            let thing = self.things[c as usize];
            let id = if thing { inst.data[i] } else { 0 };
            if thing && id == 0 {
                continue;
            }
            *areas.entry((c, id)).or_insert(0u64) += 1;
        }
        areas
    }

    fn add(&mut self, pred: (&LabelMap, &InstanceMap), gt: (&LabelMap, &InstanceMap)) {
        let pred_areas = self.segments(pred.0, pred.1, gt.0);
        let gt_areas = self.segments(gt.0, gt.1, gt.0);
        // exhaustive pairwise IoU over same-class segment pairs
        let mut matched_gt: Vec<SegKey> = Vec::new();
        let mut matched_pred: Vec<SegKey> = Vec::new();
        for (gk, ga) in &gt_areas {
            for (pk, pa) in &pred_areas {
                if gk.0 != pk.0 {
                    continue;
                }
                let mut inter = 0u64;
                for i in 0..gt.0.data.len() {
                    if gt.0.data[i] == IGNORE_ID {
                        continue;
                    }
                    let thing = self.things[gk.0 as usize];
                    let g_hit = gt.0.data[i] == gk.0 && (!thing || gt.1.data[i] == gk.1);
                    let p_hit = pred.0.data[i] == pk.0 && (!thing || pred.1.data[i] == pk.1);
                    if g_hit && p_hit {
                        inter += 1;
                    }
                }
                let iou = inter as f64 / (ga + pa - inter) as f64;
                if iou > 0.5 {
                    let c = gk.0 as usize;
                    self.tp[c] += 1;
                    self.iou_sum[c] += iou;
                    matched_gt.push(*gk);
                    matched_pred.push(*pk);
                }
            }
        }
        for gk in gt_areas.keys() {
            if !matched_gt.contains(gk) {
                self.fn_[gk.0 as usize] += 1;
            }
        }
        for pk in pred_areas.keys() {
            if !matched_pred.contains(pk) {
                self.fp[pk.0 as usize] += 1;
            }
        }
    }

    /// Returns (pq, sq, rq) averaged over classes with any statistics, and
    /// verifies the per-class identity pq = sq * rq on the way.
    fn finalize(&self) -> (f64, f64, f64) {
        let (mut pq, mut sq, mut rq) = (0.0, 0.0, 0.0);
        let mut present = 0usize;
        for c in 0..self.things.len() {
            let (tp, fp, fnn) = (self.tp[c], self.fp[c], self.fn_[c]);
            if tp + fp + fnn == 0 {
                continue;
            }
            present += 1;
            let denom = tp as f64 + 0.5 * (fp + fnn) as f64;
            let pq_c = self.iou_sum[c] / denom;
            let sq_c = if tp > 0 { self.iou_sum[c] / tp as f64 } else { 0.0 };
            let rq_c = tp as f64 / denom;
            assert!(
                (pq_c - sq_c * rq_c).abs() <= 1e-12,
                "class {c}: pq != sq*rq"
            );
            pq += pq_c;
            sq += sq_c;
            rq += rq_c;
        }
        let n = present.max(1) as f64;
        (pq / n, sq / n, rq / n)
    }
}

fn brute_force_miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> f64 {
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes as u16 {
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..gt.data.len() {
            if gt.data[i] == IGNORE_ID || pred.data[i] == IGNORE_ID {
                continue;
            }
            let g = gt.data[i] == c;
            let p = pred.data[i] == c;
            if g && p {
                inter += 1;
            }
            if g || p {
                union += 1;
            }
        }
        if union > 0 {
            sum += inter as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

/// Random panoptic map built from overlaid rectangles; things carry instance
/// ids (occasionally 0 to exercise the "no segment" rule), plus ignore holes.
fn random_panoptic(
    rng: &mut impl Rng,
    num_classes: u16,
    things: &[u16],
) -> (LabelMap, InstanceMap) {
    let (h, w) = (8usize, 8usize);
    let mut sem = LabelMap::filled(h, w, 0);
    let mut inst = InstanceMap::filled(h, w, 0);
    for _ in 0..rng.gen_range(2..6) {
        let c = rng.gen_range(0..num_classes);
        let id = if things.contains(&c) {
            rng.gen_range(0..4u32)
        } else {
            0
        };
        let y0 = rng.gen_range(0..h);
        let x0 = rng.gen_range(0..w);
        let y1 = (y0 + rng.gen_range(1..6)).min(h);
        let x1 = (x0 + rng.gen_range(1..6)).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                sem.set(y, x, c);
                inst.set(y, x, id);
            }
        }
    }
    (sem, inst)
}

#[test]
fn criterion_6_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let num_classes = 5usize;
    let things = [3u16, 4];

    let mut acc = PanopticAccumulator::new(num_classes, &things);
    let mut oracle = BruteForcePq::new(num_classes, &things);
    let mut worst = 0.0f64;
    for case in 0..500 {
        let (mut gt_sem, gt_inst) = random_panoptic(&mut rng, num_classes as u16, &things);
        // pred: perturbed copy of gt plus its own random rectangles
        let (mut pred_sem, mut pred_inst) = (gt_sem.clone(), gt_inst.clone());
        let (extra_sem, extra_inst) = random_panoptic(&mut rng, num_classes as u16, &things);
        for i in 0..pred_sem.data.len() {
            if rng.gen::<f64>() < 0.25 {
                pred_sem.data[i] = extra_sem.data[i];
                pred_inst.data[i] = extra_inst.data[i];
            }
        }
        // ignore holes in gt only
        for i in 0..gt_sem.data.len() {
            if rng.gen::<f64>() < 0.05 {
                gt_sem.data[i] = IGNORE_ID;
            }
        }

        let pred = (&pred_sem, &pred_inst);
        let gt = (&gt_sem, &gt_inst);
        let got = panoptic_quality::<f64>(pred, gt, num_classes, &things).unwrap();
        let mut single = BruteForcePq::new(num_classes, &things);
        single.add(pred, gt);
        let (pq, sq, rq) = single.finalize();
        for (g, o) in [(got.pq, pq), (got.sq, sq), (got.rq, rq)] {
            let d = (g - o).abs();
            assert!(d <= 1e-12, "case {case}: metric mismatch {g} vs {o}");
            worst = worst.max(d);
        }
        acc.add(pred, gt).unwrap();
        oracle.add(pred, gt);

        let got_miou = mean_iou::<f64>(&pred_sem, &gt_sem, num_classes).unwrap();
        let want_miou = brute_force_miou(&pred_sem, &gt_sem, num_classes);
        assert!(
            (got_miou - want_miou).abs() <= 1e-12,
            "case {case}: mIoU {got_miou} vs {want_miou}"
        );

        // perfect prediction is a fixed point of both metrics
        let mut clean_inst = gt_inst.clone();
        for i in 0..gt_sem.data.len() {
            // give every thing pixel a real instance so all segments survive
            let c = gt_sem.data[i];
            if c != IGNORE_ID && things.contains(&c) && clean_inst.data[i] == 0 {
                clean_inst.data[i] = 9;
            }
        }
        let perfect =
            panoptic_quality::<f64>((&gt_sem, &clean_inst), (&gt_sem, &clean_inst), num_classes, &things)
                .unwrap();
        if perfect.tp > 0 {
            assert!((perfect.pq - 1.0).abs() <= 1e-12);
            assert!((perfect.sq - 1.0).abs() <= 1e-12);
            assert!((perfect.rq - 1.0).abs() <= 1e-12);
        }
        let self_miou = mean_iou::<f64>(&gt_sem, &gt_sem, num_classes).unwrap();
        assert!((self_miou - 1.0).abs() <= 1e-12);
    }

    // aggregate accumulation matches the oracle's running totals
    let agg = acc.finalize::<f64>();
    let (pq, sq, rq) = oracle.finalize();
    assert!((agg.pq - pq).abs() <= 1e-12);
    assert!((agg.sq - sq).abs() <= 1e-12);
    assert!((agg.rq - rq).abs() <= 1e-12);

    println!(
        "criterion 6: PASS — 500 random pairs exact (worst abs diff {worst:.2e}), aggregate PQ {pq:.4} = SQ {sq:.4} × RQ {rq:.4} per class, fixed points hold"
    );
}

// --- criteria 7-8: end-to-end adaptation ------------------------------------------------

fn base_adapt_cfg(source_capacity: usize, target_capacity: usize) -> AdaptationConfig {
    AdaptationConfig {
        source_capacity,
        target_capacity,
        lr: 7e-4,
        ..AdaptationConfig::default()
    }
}

fn pretrain_full(samples: &[Sample<Scalar>]) -> ModelState<Scalar> {
    let (model, losses) = pretrain(
        ModelConfig::default(),
        samples,
        1000,
        3e-3,
        &AdaptationConfig::default().weights(),
        7,
    )
    .unwrap();
    assert_eq!(losses.len(), 1000);
    model
}

struct AdaptOutcome {
    p1: ProtocolReport<Scalar>,
    p2: ProtocolReport<Scalar>,
    p3: ProtocolReport<Scalar>,
}

fn adapt_once(
    model: &ModelState<Scalar>,
    source_train: &[Sample<Scalar>],
    source_val: &[Sample<Scalar>],
    target: &[Sample<Scalar>],
    cfg: &AdaptationConfig,
) -> AdaptOutcome {
    let mut engine = EngineState::new(model.clone(), source_train, cfg).unwrap();
    let (p1, p2, _) =
        run_adaptation(target, &mut engine, &THING_CLASSES, cfg, cfg.alpha_for_transition(0))
            .unwrap();
    let p3 = eval_protocol3(&engine.student, source_val, &THING_CLASSES, cfg).unwrap();
    AdaptOutcome { p1, p2, p3 }
}

fn split_source(samples: &[Sample<Scalar>], fraction: f64) -> (&[Sample<Scalar>], &[Sample<Scalar>]) {
    let split = ((fraction * samples.len() as f64).ceil() as usize).clamp(1, samples.len() - 1);
    samples.split_at(split)
}

#[test]
fn criterion_7_adaptation_gains_and_retention() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let src_dir = generate_domain::<Scalar>(&stock_domain_a(120), dir.path()).unwrap();
    let tgt_dir = generate_domain::<Scalar>(&stock_domain_b(160), dir.path()).unwrap();
    let source = load_sequence::<Scalar>(&src_dir, "domain-urban-a").unwrap();
    let target = load_sequence::<Scalar>(&tgt_dir, "domain-urban-b").unwrap();

    let model = pretrain_full(&source);
    let cfg = base_adapt_cfg(80, 50);
    let (source_train, source_val) = split_source(&source, cfg.split_fraction);

    // frozen baselines on exactly the spans each protocol will report on
    let n = target.len();
    let adapt_count = ((cfg.split_fraction * n as f64).ceil() as usize).clamp(1, n);
    let base_p1 = evaluate_set(&model, &target[..adapt_count], &THING_CLASSES, &cfg, 1, "b").unwrap();
    let base_p2 = evaluate_set(&model, &target[adapt_count..], &THING_CLASSES, &cfg, 2, "b").unwrap();
    let base_p3 = eval_protocol3(&model, source_val, &THING_CLASSES, &cfg).unwrap();

    let full = adapt_once(&model, source_train, source_val, &target, &cfg);

    // ablation: no source supervision anywhere in the update
    let ablated_cfg = AdaptationConfig {
        source_ce_enabled: false,
        source_mixing_enabled: false,
        ..cfg.clone()
    };
    let ablated = adapt_once(&model, source_train, source_val, &target, &ablated_cfg);

    let gain_p1 = full.p1.miou as f64 - base_p1.miou as f64;
    let gain_p2 = full.p2.miou as f64 - base_p2.miou as f64;
    let deg_full = base_p3.miou as f64 - full.p3.miou as f64;
    let deg_ablated = base_p3.miou as f64 - ablated.p3.miou as f64;
    let elapsed = t0.elapsed();

    assert!(gain_p1 >= 0.05, "protocol-1 gain {gain_p1:.4} < 0.05");
    assert!(gain_p2 >= 0.05, "protocol-2 gain {gain_p2:.4} < 0.05");
    assert!(deg_full <= 0.02, "source degradation {deg_full:.4} > 0.02");
    assert!(
        deg_ablated > deg_full,
        "removing source replay did not worsen retention ({deg_ablated:.4} vs {deg_full:.4})"
    );
    assert!(elapsed <= Duration::from_secs(600), "took {elapsed:?}");

    println!(
        "criterion 7: PASS — p1 +{:.1}pt, p2 +{:.1}pt, source drop {:.2}pt (ablated {:.2}pt), {:.0}s",
        gain_p1 * 100.0,
        gain_p2 * 100.0,
        deg_full * 100.0,
        deg_ablated * 100.0,
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_8_capacity_and_diversity() {
    let dir = tempfile::tempdir().unwrap();
    let src_dir = generate_domain::<Scalar>(&stock_domain_a(435), dir.path()).unwrap();
    let tgt_dir = generate_domain::<Scalar>(&stock_domain_b(160), dir.path()).unwrap();
    let source = load_sequence::<Scalar>(&src_dir, "domain-urban-a").unwrap();
    let target = load_sequence::<Scalar>(&tgt_dir, "domain-urban-b").unwrap();

    let model = pretrain_full(&source);
    let fraction = AdaptationConfig::default().split_fraction;
    let (source_train, source_val) = split_source(&source, fraction);
    assert!(source_train.len() >= 300, "need ≥300 training samples");

    // replay capacity sweep: tiny buffers must forget more
    let small = adapt_once(&model, source_train, source_val, &target, &base_adapt_cfg(25, 25));
    let large = adapt_once(&model, source_train, source_val, &target, &base_adapt_cfg(300, 300));
    let p3_small = small.p3.miou as f64;
    let p3_large = large.p3.miou as f64;
    assert!(
        p3_large > p3_small + 0.02,
        "capacity 300 not better: {p3_large:.4} vs {p3_small:.4}"
    );

    // diversity-aware eviction vs random eviction, three seeds each
    let mut div = Vec::new();
    let mut rnd = Vec::new();
    for seed in [1u64, 2, 3] {
        for diversity in [true, false] {
            let cfg = AdaptationConfig {
                diversity_enabled: diversity,
                seed,
                ..base_adapt_cfg(300, 50)
            };
            let out = adapt_once(&model, source_train, source_val, &target, &cfg);
            if diversity {
                div.push(out.p2.miou as f64);
            } else {
                rnd.push(out.p2.miou as f64);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_div, m_rnd) = (mean(&div), mean(&rnd));
    assert!(
        m_div >= m_rnd - 0.01,
        "diversity eviction inferior: {m_div:.4} vs {m_rnd:.4}"
    );

    println!(
        "criterion 8: PASS — retention {:.3} (cap 300) vs {:.3} (cap 25); diversity mean p2 {:.4} vs random {:.4} over 3 seeds",
        p3_large, p3_small, m_div, m_rnd
    );
}

// --- criterion 9: end-to-end determinism -------------------------------------------------

#[test]
fn criterion_9_pipeline_determinism() {
    let run_pipeline = || -> (String, String, Vec<u8>) {
        let dir = tempfile::tempdir().unwrap();
        let src_dir = generate_domain::<Scalar>(&stock_domain_a(40), dir.path()).unwrap();
        let tgt_dir = generate_domain::<Scalar>(&stock_domain_b(40), dir.path()).unwrap();
        let source = load_sequence::<Scalar>(&src_dir, "domain-urban-a").unwrap();
        let target = load_sequence::<Scalar>(&tgt_dir, "domain-urban-b").unwrap();

        let (model, _) = pretrain(
            ModelConfig::default(),
            &source,
            80,
            3e-3,
            &AdaptationConfig::default().weights(),
            5,
        )
        .unwrap();

        let cfg = AdaptationConfig {
            source_capacity: 20,
            target_capacity: 10,
            lr: 1e-3,
            seed: 11,
            ..AdaptationConfig::default()
        };
        let (source_train, source_val) = split_source(&source, cfg.split_fraction);
        let mut engine = EngineState::new(model, source_train, &cfg).unwrap();
        let domains = vec![target];
        let (reports, records) =
            run_multi_domain(&domains, &mut engine, source_val, &THING_CLASSES, &cfg).unwrap();

        let log: String = records
            .iter()
            .map(|r| r.log_line() + "\n")
            .chain(reports.iter().map(|r| r.log_line() + "\n"))
            .collect();
        let ckpt = dir.path().join("adapted.ckpt");
        save_checkpoint(&engine.student, &ckpt).unwrap();
        let bytes = std::fs::read(&ckpt).unwrap();
        (param_hash(&engine.student), log, bytes)
    };

    let (h1, log1, b1) = run_pipeline();
    let (h2, log2, b2) = run_pipeline();
    assert_eq!(h1, h2, "parameter hashes diverged");
    assert_eq!(log1, log2, "step or report logs diverged");
    assert_eq!(b1, b2, "checkpoint bytes diverged");
    println!("criterion 9: PASS — two full pipelines bit-identical (hash {h1})");
}

// --- sanity: histogram matching is idempotent under repetition ---------------------------

#[test]
fn histogram_match_second_application_stable() {
    // supporting invariant for the replay styling path: matching an already
    // matched image to the same reference is (near-)idempotent
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = ImageTensor::<f64>::from_fn(16, 16, 3, |_, _, _| rng.gen::<f64>());
    let b = ImageTensor::<f64>::from_fn(16, 16, 3, |_, _, _| rng.gen::<f64>().powf(2.2));
    let once = histogram_match(&a, &b).unwrap();
    let twice = histogram_match(&once, &b).unwrap();
    let diff = mean_abs_masked(&once, &twice, |_, _| true);
    assert!(diff <= 1.0 / 255.0, "second match moved pixels by {diff}");
}
