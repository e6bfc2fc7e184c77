//! Fixed-size source and target replay buffers: rare-class construction,
//! cosine-similarity admission, diversity-maximizing eviction, and batch
//! composition.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{CodepsError, Result};
use crate::imaging::{
    histogram_match, CameraIntrinsics, DepthMap, ImageTensor, InstanceMap, LabelMap, IGNORE_ID,
};
use crate::scalar::Real;

/// An image triplet with optional labels, intrinsics, and domain tag: the
/// unit stored in buffers and batches.
///
/// `frames` are ordered `(t-2, t-1, t)`; the middle frame is the principal
/// frame carrying labels, features, and evaluation.
#[derive(Debug, Clone)]
pub struct Sample<R> {
    pub frames: [ImageTensor<R>; 3],
    pub intrinsics: CameraIntrinsics<R>,
    pub semantic: Option<LabelMap>,
    pub instance: Option<InstanceMap>,
    pub gt_depth: Option<DepthMap<R>>,
    pub domain_tag: String,
    pub sequence_index: usize,
    /// Relative path of the principal frame, for buffer manifests.
    pub rel_path: String,
}

impl<R: Real> Sample<R> {
    pub fn principal(&self) -> &ImageTensor<R> {
        &self.frames[1]
    }

    pub fn is_labeled(&self) -> bool {
        self.semantic.is_some() && self.instance.is_some()
    }
}

/// Per-class pixel statistics over a dataset.
#[derive(Debug, Clone)]
pub struct ClassStats {
    /// Pixel count per class id, ignore pixels excluded.
    pub pixel_counts: Vec<u64>,
    pub image_count: usize,
    pub height: usize,
    pub width: usize,
}

impl ClassStats {
    /// Class frequency per the pixel-count definition: the denominator is
    /// the full pixel budget, so frequencies need not sum to 1 when ignore
    /// pixels exist.
    pub fn frequency<R: Real>(&self, class: usize) -> R {
        let denom = (self.image_count * self.height * self.width) as f64;
        R::c(self.pixel_counts[class] as f64 / denom)
    }

    pub fn num_classes(&self) -> usize {
        self.pixel_counts.len()
    }
}

/// Counts class pixels across a labeled dataset.
pub fn class_pixel_frequencies<R: Real>(
    dataset: &[Sample<R>],
    num_classes: usize,
) -> Result<ClassStats> {
    if dataset.is_empty() {
        return Err(CodepsError::invalid("class_pixel_frequencies: empty dataset"));
    }
    let first = dataset[0]
        .semantic
        .as_ref()
        .ok_or_else(|| CodepsError::invalid("class_pixel_frequencies: unlabeled sample"))?;
    let (h, w) = (first.height, first.width);
    let mut counts = vec![0u64; num_classes];
    for s in dataset {
        let sem = s
            .semantic
            .as_ref()
            .ok_or_else(|| CodepsError::invalid("class_pixel_frequencies: unlabeled sample"))?;
        for id in &sem.data {
            if *id != IGNORE_ID && (*id as usize) < num_classes {
                counts[*id as usize] += 1;
            }
        }
    }
    Ok(ClassStats {
        pixel_counts: counts,
        image_count: dataset.len(),
        height: h,
        width: w,
    })
}

/// Temperature softmax over `(1 - f_c) / T`, max-subtracted for stability.
pub fn rcs_probabilities<R: Real>(stats: &ClassStats, temperature: R) -> Result<Vec<R>> {
    if temperature <= R::zero() {
        return Err(CodepsError::invalid("rcs_probabilities: T must be > 0"));
    }
    let logits: Vec<R> = (0..stats.num_classes())
        .map(|c| (R::one() - stats.frequency::<R>(c)) / temperature)
        .collect();
    let max = logits.iter().cloned().fold(R::neg_infinity(), R::max);
    let exps: Vec<R> = logits.iter().map(|l| (*l - max).exp()).collect();
    let sum: R = exps.iter().cloned().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

fn weighted_index<R: Real>(weights: &[R], rng: &mut impl Rng) -> usize {
    let total: R = weights.iter().cloned().sum();
    let mut target = R::c(rng.gen::<f64>()) * total;
    for (i, w) in weights.iter().enumerate() {
        target = target - *w;
        if target < R::zero() {
            return i;
        }
    }
    weights.len() - 1
}

/// Fixed source replay buffer with a no-repeat permutation cursor.
#[derive(Debug, Clone)]
pub struct SourceBuffer<R> {
    samples: Vec<Sample<R>>,
    /// Dataset indices of the selected samples, for manifests and tests.
    pub dataset_indices: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
}

impl<R: Real> SourceBuffer<R> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample<R>] {
        &self.samples
    }

    pub fn from_samples(samples: Vec<Sample<R>>, dataset_indices: Vec<usize>) -> Self {
        let order = (0..samples.len()).collect();
        Self {
            samples,
            dataset_indices,
            order,
            cursor: 0,
        }
    }

    /// Next buffer index under the no-repeat rule: a full permutation is
    /// consumed before any sample repeats.
    fn next_index(&mut self, rng: &mut impl Rng) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

const RCS_MAX_REDRAWS: usize = 50;

/// Builds the source buffer by rare-class sampling: draw a class from the
/// temperature softmax, then draw a candidate image proportional to its
/// pixel count of that class, without selecting an image twice.
pub fn build_source_buffer<R: Real>(
    dataset: &[Sample<R>],
    capacity: usize,
    num_classes: usize,
    temperature: R,
    rng: &mut impl Rng,
) -> Result<SourceBuffer<R>> {
    if capacity > dataset.len() {
        return Err(CodepsError::invalid(format!(
            "build_source_buffer: capacity {} exceeds dataset size {}",
            capacity,
            dataset.len()
        )));
    }
    let stats = class_pixel_frequencies(dataset, num_classes)?;
    let probs = rcs_probabilities(&stats, temperature)?;

    // Per-image pixel count per class.
    let per_image: Vec<Vec<u64>> = dataset
        .iter()
        .map(|s| {
            let sem = s.semantic.as_ref().unwrap();
            let mut counts = vec![0u64; num_classes];
            for id in &sem.data {
                if *id != IGNORE_ID && (*id as usize) < num_classes {
                    counts[*id as usize] += 1;
                }
            }
            counts
        })
        .collect();

    let mut selected = vec![false; dataset.len()];
    let mut indices = Vec::with_capacity(capacity);
    for _ in 0..capacity {
        let mut chosen = None;
        for _ in 0..RCS_MAX_REDRAWS {
            let class = weighted_index(&probs, rng);
            let candidates: Vec<usize> = (0..dataset.len())
                .filter(|i| !selected[*i] && per_image[*i][class] > 0)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let weights: Vec<R> = candidates
                .iter()
                .map(|i| R::c(per_image[*i][class] as f64))
                .collect();
            chosen = Some(candidates[weighted_index(&weights, rng)]);
            break;
        }
        let idx = chosen.unwrap_or_else(|| {
            // Exhausted redraws: uniform over unselected images.
            let remaining: Vec<usize> =
                (0..dataset.len()).filter(|i| !selected[*i]).collect();
            remaining[rng.gen_range(0..remaining.len())]
        });
        selected[idx] = true;
        indices.push(idx);
    }
    let samples = indices.iter().map(|i| dataset[*i].clone()).collect();
    let mut buf = SourceBuffer::from_samples(samples, indices);
    buf.order.shuffle(rng);
    Ok(buf)
}

/// Encoder embedding used for diversity admission and eviction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<R>(pub Vec<R>);

impl<R: Real> FeatureVector<R> {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> R {
        self.0.iter().map(|v| *v * *v).sum::<R>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> Result<R> {
        if self.dim() != other.dim() {
            return Err(CodepsError::invalid("cosine: dimension mismatch"));
        }
        let (na, nb) = (self.norm(), other.norm());
        if na == R::zero() || nb == R::zero() {
            return Err(CodepsError::invalid("cosine: zero-norm feature"));
        }
        let dot: R = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| *a * *b)
            .sum();
        Ok(dot / (na * nb))
    }
}

/// Fixed-capacity target replay buffer storing frozen-encoder features
/// alongside samples so admission and eviction never re-run the encoder.
#[derive(Debug, Clone)]
pub struct TargetBuffer<R> {
    capacity: usize,
    entries: Vec<(Sample<R>, FeatureVector<R>)>,
}

impl<R: Real> TargetBuffer<R> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> &[(Sample<R>, FeatureVector<R>)] {
        &self.entries
    }

    pub fn push_unchecked(&mut self, sample: Sample<R>, feature: FeatureVector<R>) {
        self.entries.push((sample, feature));
    }

    pub fn remove(&mut self, index: usize) -> (Sample<R>, FeatureVector<R>) {
        self.entries.remove(index)
    }
}

/// Max cosine similarity of `feature` against all buffer entries; an empty
/// buffer yields negative infinity so the first frame always admits.
pub fn max_cosine_similarity<R: Real>(
    feature: &FeatureVector<R>,
    buffer: &TargetBuffer<R>,
) -> Result<R> {
    if feature.norm() == R::zero() {
        return Err(CodepsError::invalid(
            "max_cosine_similarity: zero-norm feature",
        ));
    }
    let mut best = R::neg_infinity();
    for (_, f) in buffer.entries() {
        best = best.max(feature.cosine(f)?);
    }
    Ok(best)
}

/// Index of the most redundant entry: argmax over entries of the summed
/// cosine similarity to every entry (self term included for all rows alike).
/// Ties break toward the lowest index.
pub fn eviction_index<R: Real>(buffer: &TargetBuffer<R>) -> Result<usize> {
    if !buffer.is_full() {
        return Err(CodepsError::contract("eviction_index: buffer not full"));
    }
    let n = buffer.len();
    let mut best_idx = 0;
    let mut best_sum = R::neg_infinity();
    for i in 0..n {
        let mut sum = R::zero();
        for j in 0..n {
            sum += buffer.entries[i].1.cosine(&buffer.entries[j].1)?;
        }
        if sum > best_sum {
            best_sum = sum;
            best_idx = i;
        }
    }
    Ok(best_idx)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdmissionDecision<R> {
    Admitted { evicted: Option<usize> },
    Rejected { similarity: R },
}

/// Admits `sample` when its max similarity is below `threshold`. On a full
/// buffer the candidate joins first, then the most redundant of the
/// `capacity + 1` entries is evicted; the candidate itself may be the one
/// removed.
pub fn update_target_buffer<R: Real>(
    buffer: &mut TargetBuffer<R>,
    sample: Sample<R>,
    feature: FeatureVector<R>,
    threshold: R,
) -> Result<AdmissionDecision<R>> {
    let sim = max_cosine_similarity(&feature, buffer)?;
    if sim >= threshold {
        return Ok(AdmissionDecision::Rejected { similarity: sim });
    }
    let was_full = buffer.is_full();
    buffer.push_unchecked(sample, feature);
    if was_full {
        let evict = eviction_index_over(buffer)?;
        buffer.remove(evict);
        Ok(AdmissionDecision::Admitted {
            evicted: Some(evict),
        })
    } else {
        Ok(AdmissionDecision::Admitted { evicted: None })
    }
}

// Same argmax as eviction_index but without the fullness contract, used for
// the transient capacity+1 state during admission.
fn eviction_index_over<R: Real>(buffer: &TargetBuffer<R>) -> Result<usize> {
    let n = buffer.len();
    let mut best_idx = 0;
    let mut best_sum = R::neg_infinity();
    for i in 0..n {
        let mut sum = R::zero();
        for j in 0..n {
            sum += buffer.entries[i].1.cosine(&buffer.entries[j].1)?;
        }
        if sum > best_sum {
            best_sum = sum;
            best_idx = i;
        }
    }
    Ok(best_idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchCounts {
    pub current: usize,
    pub target: usize,
    pub source: usize,
}

#[derive(Debug, Clone)]
pub struct Batch<R> {
    pub online: Sample<R>,
    pub target_replay: Vec<Sample<R>>,
    pub source_replay: Vec<Sample<R>>,
    /// Set when a requested count was clamped to buffer occupancy.
    pub clamped: bool,
}

impl<R> Batch<R> {
    pub fn len(&self) -> usize {
        1 + self.target_replay.len() + self.source_replay.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Assembles an update batch: uniform target draws without replacement,
/// source draws via the no-repeat cursor, and histogram matching of every
/// source frame to the online image.
pub fn compose_batch<R: Real>(
    online: &Sample<R>,
    target_buf: &TargetBuffer<R>,
    source_buf: &mut SourceBuffer<R>,
    counts: BatchCounts,
    rng: &mut impl Rng,
) -> Result<Batch<R>> {
    let mut clamped = false;

    let n_target = if counts.target > target_buf.len() {
        clamped = clamped || counts.target > 0;
        target_buf.len()
    } else {
        counts.target
    };
    let mut target_indices: Vec<usize> = (0..target_buf.len()).collect();
    target_indices.shuffle(rng);
    let target_replay: Vec<Sample<R>> = target_indices[..n_target]
        .iter()
        .map(|i| target_buf.entries()[*i].0.clone())
        .collect();

    let n_source = if counts.source > source_buf.len() {
        clamped = true;
        source_buf.len()
    } else {
        counts.source
    };
    let reference = online.principal().clone();
    let mut source_replay = Vec::with_capacity(n_source);
    for _ in 0..n_source {
        let idx = source_buf.next_index(rng);
        let mut s = source_buf.samples[idx].clone();
        for frame in &mut s.frames {
            *frame = histogram_match(frame, &reference)?;
        }
        source_replay.push(s);
    }

    Ok(Batch {
        online: online.clone(),
        target_replay,
        source_replay,
        clamped,
    })
}
