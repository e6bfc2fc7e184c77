//! A deliberately small multi-head perception model with hand-written
//! forward/backward passes: a shared two-stage conv encoder, semantic /
//! depth / instance-center / instance-offset heads on the center frame, and
//! a pose head fed by pooled features of frame pairs.
//!
//! Everything is dense 3x3 convolutions with tanh (encoder, semantic trunk)
//! or sigmoid (depth disparity, center heatmap) nonlinearities, so the whole
//! pipeline is differentiable and checkable against finite differences.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CodepsError, Result};
use crate::imaging::ImageTensor;
use crate::losses::{bootstrapped_ce, instance_loss, photometric_loss, LossWeights};
use crate::replay::{FeatureVector, Sample};
use crate::scalar::Real;

/// Spatial downsampling factor between input and encoder features.
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Channel widths of the two encoder stages.
    pub enc_channels: [usize; 2],
    pub depth_min: f64,
    pub depth_max: f64,
    /// Output scale of the pose head (keeps initial poses near identity).
    pub pose_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 96,
            num_classes: 6,
            enc_channels: [8, 16],
            depth_min: 0.01,
            depth_max: 10.0,
            pose_scale: 0.01,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % DOWNSAMPLE != 0 || self.width % DOWNSAMPLE != 0 {
            return Err(CodepsError::invalid(
                "model: height and width must be multiples of 4",
            ));
        }
        if self.height < DOWNSAMPLE || self.width < DOWNSAMPLE {
            return Err(CodepsError::invalid("model: image too small"));
        }
        if self.num_classes < 2 {
            return Err(CodepsError::invalid("model: need at least 2 classes"));
        }
        if self.enc_channels.iter().any(|c| *c == 0) {
            return Err(CodepsError::invalid("model: zero encoder channels"));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return Err(CodepsError::invalid("model: bad depth range"));
        }
        if self.pose_scale <= 0.0 {
            return Err(CodepsError::invalid("model: pose_scale must be > 0"));
        }
        Ok(())
    }
}

/// Channel-major feature map: `data[(c*H + y)*W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatMap<R> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<R>,
}

impl<R: Real> FeatMap<R> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![R::zero(); channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> R {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: R) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    fn from_image(img: &ImageTensor<R>) -> Self {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let mut out = Self::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, y, x, img.get(y, x, ch));
                }
            }
        }
        out
    }
}

/// One named parameter array.
#[derive(Debug, Clone)]
pub struct Param<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<R>,
    pub frozen: bool,
}

/// Full model state: named arrays plus the config they were built for.
#[derive(Debug, Clone)]
pub struct ModelState<R> {
    pub config: ModelConfig,
    params: Vec<Param<R>>,
    index: HashMap<String, usize>,
}

impl<R: Real> ModelState<R> {
    /// Builds a freshly initialized model. Weight arrays get uniform
    /// `+-sqrt(1/fan_in)` entries from a seeded generator; biases start at
    /// zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let [c1, c2] = config.enc_channels;
        let k = config.num_classes;
        let specs: Vec<(&str, Vec<usize>, usize)> = vec![
            ("enc.conv1.w", vec![c1, 3, 3, 3], 3 * 9),
            ("enc.conv1.b", vec![c1], 0),
            ("enc.conv2.w", vec![c2, c1, 3, 3], c1 * 9),
            ("enc.conv2.b", vec![c2], 0),
            ("sem.conv1.w", vec![c2, c2, 3, 3], c2 * 9),
            ("sem.conv1.b", vec![c2], 0),
            ("sem.conv2.w", vec![k, c2, 3, 3], c2 * 9),
            ("sem.conv2.b", vec![k], 0),
            ("depth.conv.w", vec![1, c2, 3, 3], c2 * 9),
            ("depth.conv.b", vec![1], 0),
            ("inst.center.w", vec![1, c2, 3, 3], c2 * 9),
            ("inst.center.b", vec![1], 0),
            ("inst.offset.w", vec![2, c2, 3, 3], c2 * 9),
            ("inst.offset.b", vec![2], 0),
            ("pose.affine.w", vec![6, 2 * c2], 2 * c2),
            ("pose.affine.b", vec![6], 0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut index = HashMap::new();
        for (name, shape, fan_in) in specs {
            let len: usize = shape.iter().product();
            let data = if fan_in == 0 {
                vec![R::zero(); len]
            } else {
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..len)
                    .map(|_| R::c(rng.gen_range(-bound..bound)))
                    .collect()
            };
            index.insert(name.to_string(), params.len());
            params.push(Param {
                name: name.to_string(),
                shape,
                data,
                frozen: false,
            });
        }
        Ok(Self {
            config,
            params,
            index,
        })
    }

    pub fn params(&self) -> &[Param<R>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<R>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Param<R>> {
        self.index
            .get(name)
            .map(|i| &self.params[*i])
            .ok_or_else(|| CodepsError::contract(format!("unknown parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param<R>> {
        match self.index.get(name) {
            Some(i) => Ok(&mut self.params[*i]),
            None => Err(CodepsError::contract(format!("unknown parameter {name}"))),
        }
    }

    /// Marks every array whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Byte-exact fingerprint input: every array's values in declaration
    /// order as little-endian f32.
    pub fn flat_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_values() * 4);
        for p in &self.params {
            for v in &p.data {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        out
    }
}

/// Per-array gradients aligned with `ModelState::params`.
#[derive(Debug, Clone)]
pub struct Gradients<R> {
    pub arrays: Vec<Vec<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn zeros(state: &ModelState<R>) -> Self {
        Self {
            arrays: state.params.iter().map(|p| vec![R::zero(); p.data.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().flatten().all(|g| g.is_finite())
    }

    pub fn accumulate(&mut self, other: &Gradients<R>) -> Result<()> {
        if self.arrays.len() != other.arrays.len() {
            return Err(CodepsError::contract("gradients: arity mismatch"));
        }
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        Ok(())
    }

    pub fn array<'a>(&'a self, state: &ModelState<R>, name: &str) -> Result<&'a [R]> {
        let i = *state
            .index
            .get(name)
            .ok_or_else(|| CodepsError::contract(format!("unknown parameter {name}")))?;
        Ok(&self.arrays[i])
    }
}

// --- primitive ops -------------------------------------------------------

fn conv3x3<R: Real>(input: &FeatMap<R>, w: &[R], b: &[R], out_c: usize, stride: usize) -> FeatMap<R> {
    let in_c = input.channels;
    let oh = (input.height + 2 - 3) / stride + 1;
    let ow = (input.width + 2 - 3) / stride + 1;
    let mut out = FeatMap::zeros(out_c, oh, ow);
    for oc in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..in_c {
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy as usize >= input.height {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix as usize >= input.width {
                                continue;
                            }
                            acc += w[((oc * in_c + ic) * 3 + ky) * 3 + kx]
                                * input.get(ic, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(oc, oy, ox, acc);
            }
        }
    }
    out
}

/// Returns (d_input, d_w, d_b).
fn conv3x3_backward<R: Real>(
    input: &FeatMap<R>,
    w: &[R],
    d_out: &FeatMap<R>,
    stride: usize,
) -> (FeatMap<R>, Vec<R>, Vec<R>) {
    let in_c = input.channels;
    let out_c = d_out.channels;
    let mut d_input = FeatMap::zeros(in_c, input.height, input.width);
    let mut d_w = vec![R::zero(); w.len()];
    let mut d_b = vec![R::zero(); out_c];
    for oc in 0..out_c {
        for oy in 0..d_out.height {
            for ox in 0..d_out.width {
                let g = d_out.get(oc, oy, ox);
                if g == R::zero() {
                    continue;
                }
                d_b[oc] += g;
                for ic in 0..in_c {
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy as usize >= input.height {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix as usize >= input.width {
                                continue;
                            }
                            let wi = ((oc * in_c + ic) * 3 + ky) * 3 + kx;
                            d_w[wi] += g * input.get(ic, iy as usize, ix as usize);
                            let v = d_input.get(ic, iy as usize, ix as usize) + g * w[wi];
                            d_input.set(ic, iy as usize, ix as usize, v);
                        }
                    }
                }
            }
        }
    }
    (d_input, d_w, d_b)
}

fn tanh_inplace<R: Real>(m: &mut FeatMap<R>) {
    for v in &mut m.data {
        *v = v.tanh();
    }
}

/// Backprop through tanh using the stored activation `a = tanh(pre)`.
fn tanh_backward<R: Real>(activated: &FeatMap<R>, d_out: &mut FeatMap<R>) {
    for (g, a) in d_out.data.iter_mut().zip(&activated.data) {
        *g *= R::one() - *a * *a;
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

/// Nearest-neighbor x4 upsample from channel-major low-res to channel-last
/// full-res (`(y*W + x)*C + c`).
fn upsample_channel_last<R: Real>(low: &FeatMap<R>) -> Vec<R> {
    let (h, w, c) = (low.height * DOWNSAMPLE, low.width * DOWNSAMPLE, low.channels);
    let mut out = vec![R::zero(); h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = low.get(ch, y / DOWNSAMPLE, x / DOWNSAMPLE);
            }
        }
    }
    out
}

/// Adjoint of `upsample_channel_last`: sums full-res channel-last gradients
/// over each 4x4 block into a channel-major low-res map.
fn downsample_grad<R: Real>(d_full: &[R], h: usize, w: usize, c: usize) -> FeatMap<R> {
    let mut low = FeatMap::zeros(c, h / DOWNSAMPLE, w / DOWNSAMPLE);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = low.get(ch, y / DOWNSAMPLE, x / DOWNSAMPLE)
                    + d_full[(y * w + x) * c + ch];
                low.set(ch, y / DOWNSAMPLE, x / DOWNSAMPLE, v);
            }
        }
    }
    low
}

fn gap<R: Real>(m: &FeatMap<R>) -> Vec<R> {
    let n = R::from_usize_c(m.height * m.width);
    (0..m.channels)
        .map(|c| {
            let mut s = R::zero();
            for y in 0..m.height {
                for x in 0..m.width {
                    s += m.get(c, y, x);
                }
            }
            s / n
        })
        .collect()
}

// --- forward -------------------------------------------------------------

#[derive(Debug, Clone)]
struct EncTrace<R> {
    input: FeatMap<R>,
    f1: FeatMap<R>,
    f2: FeatMap<R>,
}

#[derive(Debug, Clone)]
pub struct ModelTrace<R> {
    enc: [EncTrace<R>; 3],
    gaps: [Vec<R>; 3],
    sem1: FeatMap<R>,
    s_depth: FeatMap<R>,
    depth_low: FeatMap<R>,
    s_center: FeatMap<R>,
}

/// Full-resolution predictions for one three-frame sample.
#[derive(Debug, Clone)]
pub struct ModelOutputs<R> {
    /// Semantic logits, `(y*W + x)*C + c`.
    pub semantic: Vec<R>,
    /// Depth in scene units, row major, in `[depth_min, depth_max]`.
    pub depth: Vec<R>,
    /// Center heatmap in `[0, 1]`, row major.
    pub center: Vec<R>,
    /// Centroid offsets `(y*W + x)*2 + {0: dy, 1: dx}`.
    pub offset: Vec<R>,
    /// Axis-angle + translation mapping center-frame camera into frame 0.
    pub pose_prev: [R; 6],
    /// Same, into frame 2.
    pub pose_next: [R; 6],
}

fn encode<R: Real>(state: &ModelState<R>, img: &ImageTensor<R>) -> Result<EncTrace<R>> {
    let input = FeatMap::from_image(img);
    let w1 = state.param("enc.conv1.w")?;
    let b1 = state.param("enc.conv1.b")?;
    let mut f1 = conv3x3(&input, &w1.data, &b1.data, b1.data.len(), 2);
    tanh_inplace(&mut f1);
    let w2 = state.param("enc.conv2.w")?;
    let b2 = state.param("enc.conv2.b")?;
    let mut f2 = conv3x3(&f1, &w2.data, &b2.data, b2.data.len(), 2);
    tanh_inplace(&mut f2);
    Ok(EncTrace { input, f1, f2 })
}

fn pose_from_gaps<R: Real>(state: &ModelState<R>, ga: &[R], gb: &[R]) -> Result<[R; 6]> {
    let w = state.param("pose.affine.w")?;
    let b = state.param("pose.affine.b")?;
    let dim = ga.len() + gb.len();
    let scale = R::c(state.config.pose_scale);
    let mut out = [R::zero(); 6];
    for (o, oo) in out.iter_mut().enumerate() {
        let mut acc = b.data[o];
        for (j, v) in ga.iter().chain(gb.iter()).enumerate() {
            acc += w.data[o * dim + j] * *v;
        }
        *oo = acc * scale;
    }
    Ok(out)
}

/// Runs the model on a three-frame window. Heads are evaluated on the center
/// frame; poses map the center frame's camera into each neighbor.
pub fn forward<R: Real>(
    state: &ModelState<R>,
    frames: &[ImageTensor<R>; 3],
) -> Result<(ModelOutputs<R>, ModelTrace<R>)> {
    let cfg = &state.config;
    for f in frames {
        if f.height() != cfg.height || f.width() != cfg.width || f.channels() != 3 {
            return Err(CodepsError::invalid("forward: frame shape mismatch"));
        }
    }
    let enc = [
        encode(state, &frames[0])?,
        encode(state, &frames[1])?,
        encode(state, &frames[2])?,
    ];
    let gaps = [gap(&enc[0].f2), gap(&enc[1].f2), gap(&enc[2].f2)];
    let f2 = &enc[1].f2;

    // Semantic head.
    let sw1 = state.param("sem.conv1.w")?;
    let sb1 = state.param("sem.conv1.b")?;
    let mut sem1 = conv3x3(f2, &sw1.data, &sb1.data, sb1.data.len(), 1);
    tanh_inplace(&mut sem1);
    let sw2 = state.param("sem.conv2.w")?;
    let sb2 = state.param("sem.conv2.b")?;
    let sem_low = conv3x3(&sem1, &sw2.data, &sb2.data, sb2.data.len(), 1);
    let semantic = upsample_channel_last(&sem_low);

    // Depth head: sigmoid disparity between 1/depth_max and 1/depth_min.
    let dw = state.param("depth.conv.w")?;
    let db = state.param("depth.conv.b")?;
    let depth_pre = conv3x3(f2, &dw.data, &db.data, 1, 1);
    let disp_lo = R::c(1.0 / cfg.depth_max);
    let disp_hi = R::c(1.0 / cfg.depth_min);
    let mut s_depth = depth_pre.clone();
    for v in &mut s_depth.data {
        *v = sigmoid(*v);
    }
    let mut depth_low = s_depth.clone();
    for v in &mut depth_low.data {
        *v = R::one() / (disp_lo + (disp_hi - disp_lo) * *v);
    }
    let depth = upsample_channel_last(&depth_low);

    // Center head.
    let cw = state.param("inst.center.w")?;
    let cb = state.param("inst.center.b")?;
    let center_pre = conv3x3(f2, &cw.data, &cb.data, 1, 1);
    let mut s_center = center_pre;
    for v in &mut s_center.data {
        *v = sigmoid(*v);
    }
    let center = upsample_channel_last(&s_center);

    // Offset head (linear).
    let ow = state.param("inst.offset.w")?;
    let ob = state.param("inst.offset.b")?;
    let offset_low = conv3x3(f2, &ow.data, &ob.data, 2, 1);
    let offset = upsample_channel_last(&offset_low);

    let pose_prev = pose_from_gaps(state, &gaps[1], &gaps[0])?;
    let pose_next = pose_from_gaps(state, &gaps[1], &gaps[2])?;

    Ok((
        ModelOutputs {
            semantic,
            depth,
            center,
            offset,
            pose_prev,
            pose_next,
        },
        ModelTrace {
            enc,
            gaps,
            sem1,
            s_depth,
            depth_low,
            s_center,
        },
    ))
}

/// Gradients of a scalar loss w.r.t. the model outputs. Absent entries
/// contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<R> {
    pub d_semantic: Option<Vec<R>>,
    pub d_depth: Option<Vec<R>>,
    pub d_center: Option<Vec<R>>,
    pub d_offset: Option<Vec<R>>,
    pub d_pose_prev: Option<[R; 6]>,
    pub d_pose_next: Option<[R; 6]>,
}

/// Backpropagates output gradients to every parameter array. Frozen arrays
/// come back with exactly zero gradient.
pub fn backward<R: Real>(
    state: &ModelState<R>,
    trace: &ModelTrace<R>,
    grads: &OutputGrads<R>,
) -> Result<Gradients<R>> {
    let cfg = &state.config;
    let (h, w) = (cfg.height, cfg.width);
    let mut out = Gradients::zeros(state);
    let f2 = &trace.enc[1].f2;
    let mut d_f2 = [
        FeatMap::zeros(f2.channels, f2.height, f2.width),
        FeatMap::zeros(f2.channels, f2.height, f2.width),
        FeatMap::zeros(f2.channels, f2.height, f2.width),
    ];

    let add_grad = |out: &mut Gradients<R>, name: &str, g: &[R]| -> Result<()> {
        let i = *state
            .index
            .get(name)
            .ok_or_else(|| CodepsError::contract(format!("unknown parameter {name}")))?;
        for (a, b) in out.arrays[i].iter_mut().zip(g) {
            *a += *b;
        }
        Ok(())
    };

    if let Some(ds) = &grads.d_semantic {
        if ds.len() != h * w * cfg.num_classes {
            return Err(CodepsError::contract("backward: d_semantic shape"));
        }
        let d_low = downsample_grad(ds, h, w, cfg.num_classes);
        let sw2 = state.param("sem.conv2.w")?;
        let (mut d_sem1, d_w2, d_b2) = conv3x3_backward(&trace.sem1, &sw2.data, &d_low, 1);
        add_grad(&mut out, "sem.conv2.w", &d_w2)?;
        add_grad(&mut out, "sem.conv2.b", &d_b2)?;
        tanh_backward(&trace.sem1, &mut d_sem1);
        let sw1 = state.param("sem.conv1.w")?;
        let (d_f2_sem, d_w1, d_b1) = conv3x3_backward(f2, &sw1.data, &d_sem1, 1);
        add_grad(&mut out, "sem.conv1.w", &d_w1)?;
        add_grad(&mut out, "sem.conv1.b", &d_b1)?;
        for (a, b) in d_f2[1].data.iter_mut().zip(&d_f2_sem.data) {
            *a += *b;
        }
    }

    if let Some(dd) = &grads.d_depth {
        if dd.len() != h * w {
            return Err(CodepsError::contract("backward: d_depth shape"));
        }
        let mut d_low = downsample_grad(dd, h, w, 1);
        // depth = 1 / (lo + span * sigmoid(pre))
        let span = R::c(1.0 / cfg.depth_min - 1.0 / cfg.depth_max);
        for i in 0..d_low.data.len() {
            let s = trace.s_depth.data[i];
            let depth = trace.depth_low.data[i];
            d_low.data[i] *= -depth * depth * span * s * (R::one() - s);
        }
        let dw = state.param("depth.conv.w")?;
        let (d_f2_depth, d_w, d_b) = conv3x3_backward(f2, &dw.data, &d_low, 1);
        add_grad(&mut out, "depth.conv.w", &d_w)?;
        add_grad(&mut out, "depth.conv.b", &d_b)?;
        for (a, b) in d_f2[1].data.iter_mut().zip(&d_f2_depth.data) {
            *a += *b;
        }
    }

    if let Some(dc) = &grads.d_center {
        if dc.len() != h * w {
            return Err(CodepsError::contract("backward: d_center shape"));
        }
        let mut d_low = downsample_grad(dc, h, w, 1);
        for i in 0..d_low.data.len() {
            let s = trace.s_center.data[i];
            d_low.data[i] *= s * (R::one() - s);
        }
        let cw = state.param("inst.center.w")?;
        let (d_f2_c, d_w, d_b) = conv3x3_backward(f2, &cw.data, &d_low, 1);
        add_grad(&mut out, "inst.center.w", &d_w)?;
        add_grad(&mut out, "inst.center.b", &d_b)?;
        for (a, b) in d_f2[1].data.iter_mut().zip(&d_f2_c.data) {
            *a += *b;
        }
    }

    if let Some(doff) = &grads.d_offset {
        if doff.len() != h * w * 2 {
            return Err(CodepsError::contract("backward: d_offset shape"));
        }
        let d_low = downsample_grad(doff, h, w, 2);
        let ow = state.param("inst.offset.w")?;
        let (d_f2_o, d_w, d_b) = conv3x3_backward(f2, &ow.data, &d_low, 1);
        add_grad(&mut out, "inst.offset.w", &d_w)?;
        add_grad(&mut out, "inst.offset.b", &d_b)?;
        for (a, b) in d_f2[1].data.iter_mut().zip(&d_f2_o.data) {
            *a += *b;
        }
    }

    // Pose head: gradients flow into the pooled features of both frames.
    let pw = state.param("pose.affine.w")?;
    let dim = 2 * cfg.enc_channels[1];
    let scale = R::c(cfg.pose_scale);
    let mut d_gaps = [
        vec![R::zero(); cfg.enc_channels[1]],
        vec![R::zero(); cfg.enc_channels[1]],
        vec![R::zero(); cfg.enc_channels[1]],
    ];
    let mut d_pw = vec![R::zero(); pw.data.len()];
    let mut d_pb = vec![R::zero(); 6];
    for (d_pose, other) in [(&grads.d_pose_prev, 0usize), (&grads.d_pose_next, 2usize)] {
        let d_pose = match d_pose {
            Some(d) => d,
            None => continue,
        };
        let x: Vec<R> = trace.gaps[1]
            .iter()
            .chain(trace.gaps[other].iter())
            .cloned()
            .collect();
        for o in 0..6 {
            let g = d_pose[o] * scale;
            d_pb[o] += g;
            for j in 0..dim {
                d_pw[o * dim + j] += g * x[j];
                let dx = g * pw.data[o * dim + j];
                if j < cfg.enc_channels[1] {
                    d_gaps[1][j] += dx;
                } else {
                    d_gaps[other][j - cfg.enc_channels[1]] += dx;
                }
            }
        }
    }
    add_grad(&mut out, "pose.affine.w", &d_pw)?;
    add_grad(&mut out, "pose.affine.b", &d_pb)?;

    // Spread pooled gradients over the spatial extent and run the encoder
    // backward for each frame.
    let spatial = R::from_usize_c(f2.height * f2.width);
    for fi in 0..3 {
        for c in 0..f2.channels {
            let g = d_gaps[fi][c] / spatial;
            if g == R::zero() {
                continue;
            }
            for y in 0..f2.height {
                for x in 0..f2.width {
                    let v = d_f2[fi].get(c, y, x) + g;
                    d_f2[fi].set(c, y, x, v);
                }
            }
        }
    }
    let w2 = state.param("enc.conv2.w")?;
    let w1 = state.param("enc.conv1.w")?;
    for fi in 0..3 {
        if d_f2[fi].data.iter().all(|g| *g == R::zero()) {
            continue;
        }
        let enc = &trace.enc[fi];
        let mut d = d_f2[fi].clone();
        tanh_backward(&enc.f2, &mut d);
        let (mut d_f1, d_w2, d_b2) = conv3x3_backward(&enc.f1, &w2.data, &d, 2);
        add_grad(&mut out, "enc.conv2.w", &d_w2)?;
        add_grad(&mut out, "enc.conv2.b", &d_b2)?;
        tanh_backward(&enc.f1, &mut d_f1);
        let (_, d_w1, d_b1) = conv3x3_backward(&enc.input, &w1.data, &d_f1, 2);
        add_grad(&mut out, "enc.conv1.w", &d_w1)?;
        add_grad(&mut out, "enc.conv1.b", &d_b1)?;
    }

    for (p, g) in state.params.iter().zip(&mut out.arrays) {
        if p.frozen {
            for v in g.iter_mut() {
                *v = R::zero();
            }
        }
    }
    Ok(out)
}

/// Semantic argmax prediction for a single frame (the frame is replicated
/// into a static three-frame window; only the center frame feeds the head).
pub fn semantic_argmax<R: Real>(
    state: &ModelState<R>,
    frame: &ImageTensor<R>,
) -> Result<crate::imaging::LabelMap> {
    let frames = [frame.clone(), frame.clone(), frame.clone()];
    let (out, _) = forward(state, &frames)?;
    let (h, w, k) = (state.config.height, state.config.width, state.config.num_classes);
    let mut labels = crate::imaging::LabelMap::filled(h, w, 0);
    for i in 0..h * w {
        let row = &out.semantic[i * k..(i + 1) * k];
        let mut best = 0usize;
        for c in 1..k {
            if row[c] > row[best] {
                best = c;
            }
        }
        labels.data[i] = best as u16;
    }
    Ok(labels)
}

/// Pooled encoder features of a single frame, used as the replay-buffer
/// embedding.
pub fn feature_embed<R: Real>(
    state: &ModelState<R>,
    frame: &ImageTensor<R>,
) -> Result<FeatureVector<R>> {
    let enc = encode(state, frame)?;
    Ok(FeatureVector(gap(&enc.f2)))
}

// --- optimizer -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Adam<R> {
    pub lr: R,
    pub beta1: R,
    pub beta2: R,
    pub eps: R,
    t: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

/// Whether an optimizer step was applied or rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    RejectedNonFinite,
}

impl<R: Real> Adam<R> {
    pub fn new(state: &ModelState<R>, lr: R) -> Self {
        Self {
            lr,
            beta1: R::c(0.9),
            beta2: R::c(0.999),
            eps: R::c(1e-8),
            t: 0,
            m: state.params.iter().map(|p| vec![R::zero(); p.data.len()]).collect(),
            v: state.params.iter().map(|p| vec![R::zero(); p.data.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One Adam update over all unfrozen arrays. Rejects the whole step
    /// (leaving parameters and moments untouched) if any gradient entry is
    /// non-finite.
    pub fn step(&mut self, state: &mut ModelState<R>, grads: &Gradients<R>) -> Result<StepOutcome> {
        if grads.arrays.len() != state.params.len() {
            return Err(CodepsError::contract("adam: gradient arity mismatch"));
        }
        if !grads.is_finite() {
            return Ok(StepOutcome::RejectedNonFinite);
        }
        self.t += 1;
        let tf = R::c(self.t as f64);
        let bc1 = R::one() - self.beta1.powf(tf);
        let bc2 = R::one() - self.beta2.powf(tf);
        for (pi, p) in state.params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let g = &grads.arrays[pi];
            for i in 0..p.data.len() {
                let m = &mut self.m[pi][i];
                let v = &mut self.v[pi][i];
                *m = self.beta1 * *m + (R::one() - self.beta1) * g[i];
                *v = self.beta2 * *v + (R::one() - self.beta2) * g[i] * g[i];
                let mh = *m / bc1;
                let vh = *v / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

// --- gradient checking ---------------------------------------------------

/// Which scalar objective to differentiate end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckLoss {
    Photometric,
    Semantic,
    Instance,
}

#[derive(Debug, Clone)]
pub struct GradCheckOutcome<R> {
    pub max_rel_error: R,
    pub coords_checked: usize,
    pub worst_param: String,
}

fn scalar_loss<R: Real>(
    state: &ModelState<R>,
    sample: &Sample<R>,
    loss: CheckLoss,
    weights: &LossWeights<R>,
) -> Result<(R, OutputGrads<R>, ModelTrace<R>)> {
    let (out, trace) = forward(state, &sample.frames)?;
    let cfg = &state.config;
    let mut grads = OutputGrads::default();
    let value = match loss {
        CheckLoss::Photometric => {
            let r = photometric_loss(
                &sample.frames,
                &out.depth,
                &out.pose_prev,
                &out.pose_next,
                &sample.intrinsics,
                weights,
            )?;
            grads.d_depth = Some(r.d_depth);
            grads.d_pose_prev = Some(r.d_pose_prev);
            grads.d_pose_next = Some(r.d_pose_next);
            r.total
        }
        CheckLoss::Semantic => {
            let labels = sample
                .semantic
                .as_ref()
                .ok_or_else(|| CodepsError::invalid("gradient_check: unlabeled sample"))?;
            let r = bootstrapped_ce(
                &out.semantic,
                cfg.height,
                cfg.width,
                cfg.num_classes,
                labels,
                weights.bootstrap_fraction,
            )?;
            grads.d_semantic = Some(r.d_logits);
            r.loss
        }
        CheckLoss::Instance => {
            let inst = sample
                .instance
                .as_ref()
                .ok_or_else(|| CodepsError::invalid("gradient_check: no instance map"))?;
            let r = instance_loss(&out.center, &out.offset, inst, weights)?;
            grads.d_center = Some(r.d_center);
            grads.d_offset = Some(r.d_offset);
            r.loss
        }
    };
    Ok((value, grads, trace))
}

/// Compares analytic parameter gradients of the chosen objective against
/// central finite differences at randomly sampled coordinates of every
/// unfrozen array. Relative error uses a small noise floor so that
/// coordinates with genuinely zero gradient do not produce spurious failures.
pub fn gradient_check<R: Real>(
    state: &mut ModelState<R>,
    sample: &Sample<R>,
    loss: CheckLoss,
    weights: &LossWeights<R>,
    coords_per_array: usize,
    step: R,
    rng: &mut impl Rng,
) -> Result<GradCheckOutcome<R>> {
    let (_, out_grads, trace) = scalar_loss(state, sample, loss, weights)?;
    let analytic = backward(state, &trace, &out_grads)?;
    let floor = R::c(1e-6);
    let mut worst = R::zero();
    let mut worst_param = String::new();
    let mut coords = 0usize;
    for pi in 0..state.params.len() {
        if state.params[pi].frozen {
            continue;
        }
        let len = state.params[pi].data.len();
        let name = state.params[pi].name.clone();
        for _ in 0..coords_per_array.min(len) {
            let i = rng.gen_range(0..len);
            let orig = state.params[pi].data[i];
            state.params[pi].data[i] = orig + step;
            let lp = scalar_loss(state, sample, loss, weights)?.0;
            state.params[pi].data[i] = orig - step;
            let lm = scalar_loss(state, sample, loss, weights)?.0;
            state.params[pi].data[i] = orig;
            let fd = (lp - lm) / (step + step);
            let a = analytic.arrays[pi][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > worst {
                worst = rel;
                worst_param = name.clone();
            }
            coords += 1;
        }
    }
    Ok(GradCheckOutcome {
        max_rel_error: worst,
        coords_checked: coords,
        worst_param,
    })
}
