//! Dense image containers and the geometric/photometric primitives used by
//! the losses and the cross-domain mixing pipeline.

use crate::error::{CodepsError, Result};
use crate::scalar::Real;

/// Reserved label id for pixels excluded from supervision and metrics.
pub const IGNORE_ID: u16 = 255;

/// Row-major dense image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<R> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<R>,
}

impl<R: Real> ImageTensor<R> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![R::zero(); height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(CodepsError::invalid(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CodepsError::invalid("image contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> R,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> R {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: R) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Clamps every value into `[0, 1]`, used after resampling.
    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.max(R::zero()).min(R::one());
        }
    }

    /// Mean over channels at a pixel, used for gray-level comparisons.
    pub fn mean_channel(&self, y: usize, x: usize) -> R {
        let mut s = R::zero();
        for c in 0..self.channels {
            s += self.get(y, x, c);
        }
        s / R::from_usize_c(self.channels)
    }
}

/// Per-pixel semantic class ids. `IGNORE_ID` marks unsupervised pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, id: u16) -> Self {
        Self {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, id: u16) {
        self.data[y * self.width + x] = id;
    }
}

/// Per-pixel instance ids; 0 means "no instance" (stuff).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl InstanceMap {
    pub fn filled(height: usize, width: usize, id: u32) -> Self {
        Self {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, id: u32) {
        self.data[y * self.width + x] = id;
    }
}

/// Metric depth per pixel; 0 marks invalid measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<R> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<R>,
}

impl<R: Real> DepthMap<R> {
    pub fn filled(height: usize, width: usize, v: R) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> R {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: R) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        let v = self.get(y, x);
        v > R::zero() && v.is_finite()
    }

    pub fn count_valid(&self) -> usize {
        self.data
            .iter()
            .filter(|v| **v > R::zero() && v.is_finite())
            .count()
    }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<R> {
    pub fx: R,
    pub fy: R,
    pub cx: R,
    pub cy: R,
}

impl<R: Real> CameraIntrinsics<R> {
    pub fn new(fx: R, fy: R, cx: R, cy: R) -> Result<Self> {
        if fx <= R::zero() || fy <= R::zero() {
            return Err(CodepsError::invalid("focal lengths must be positive"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Normalized ray through pixel `(u, v)`, z component fixed to 1.
    #[inline]
    pub fn unproject(&self, u: R, v: R) -> [R; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, R::one()]
    }

    /// Projects a camera-frame point; caller checks `p[2] > 0`.
    #[inline]
    pub fn project(&self, p: [R; 3]) -> (R, R) {
        (
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        )
    }
}

/// Rigid transform: rotation (orthonormal, det +1) plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTransform<R> {
    pub rotation: [[R; 3]; 3],
    pub translation: [R; 3],
}

impl<R: Real> PoseTransform<R> {
    pub fn identity() -> Self {
        let mut rotation = [[R::zero(); 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            row[i] = R::one();
        }
        Self {
            rotation,
            translation: [R::zero(); 3],
        }
    }

    pub fn new(rotation: [[R; 3]; 3], translation: [R; 3]) -> Result<Self> {
        let tol = R::c(1e-6);
        // R R^T = I check.
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = R::zero();
                for k in 0..3 {
                    dot += rotation[i][k] * rotation[j][k];
                }
                let expect = if i == j { R::one() } else { R::zero() };
                if (dot - expect).abs() > tol {
                    return Err(CodepsError::invalid("rotation is not orthonormal"));
                }
            }
        }
        if (mat3_det(&rotation) - R::one()).abs() > tol {
            return Err(CodepsError::invalid("rotation determinant is not +1"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_axis_angle(axis_angle: [R; 3], translation: [R; 3]) -> Self {
        Self {
            rotation: rotation_from_axis_angle(axis_angle),
            translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: [R; 3]) -> [R; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Inverse transform: `R^T (p - t)`.
    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let mut rt = [[R::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let t = self.translation;
        let nt = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Self {
            rotation: rt,
            translation: nt,
        }
    }

    /// `self` after `other`: maps p through `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let mut rotation = [[R::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    rotation[i][j] += self.rotation[i][k] * other.rotation[k][j];
                }
            }
        }
        let translation = self.apply(other.translation);
        Self {
            rotation,
            translation,
        }
    }
}

fn mat3_det<R: Real>(m: &[[R; 3]; 3]) -> R {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rodrigues rotation from an axis-angle vector.
pub fn rotation_from_axis_angle<R: Real>(w: [R; 3]) -> [[R; 3]; 3] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let theta = theta2.sqrt();
    // sin(t)/t and (1-cos(t))/t^2 with series fallback near zero.
    let (a, b) = if theta > R::c(1e-5) {
        (theta.sin() / theta, (R::one() - theta.cos()) / theta2)
    } else {
        (
            R::one() - theta2 / R::c(6.0),
            R::c(0.5) - theta2 / R::c(24.0),
        )
    };
    let k = skew(w);
    let k2 = mat3_mul(&k, &k);
    let mut r = [[R::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { R::one() } else { R::zero() };
            r[i][j] = id + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Derivative of the Rodrigues rotation w.r.t. each axis-angle component
/// (Gallego & Yezzi closed form), returned as three 3x3 matrices.
pub fn rotation_jacobian_axis_angle<R: Real>(w: [R; 3]) -> [[[R; 3]; 3]; 3] {
    let r = rotation_from_axis_angle(w);
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let mut out = [[[R::zero(); 3]; 3]; 3];
    if theta2.sqrt() <= R::c(1e-5) {
        // dR/dw_i -> [e_i]_x at the identity.
        for i in 0..3 {
            let mut e = [R::zero(); 3];
            e[i] = R::one();
            out[i] = skew(e);
        }
        return out;
    }
    for i in 0..3 {
        let mut e = [R::zero(); 3];
        e[i] = R::one();
        // v = (I - R) e_i
        let v = [
            e[0] - (r[0][0] * e[0] + r[0][1] * e[1] + r[0][2] * e[2]),
            e[1] - (r[1][0] * e[0] + r[1][1] * e[1] + r[1][2] * e[2]),
            e[2] - (r[2][0] * e[0] + r[2][1] * e[1] + r[2][2] * e[2]),
        ];
        let wxv = cross(w, v);
        let m = skew(wxv);
        let kw = skew(w);
        let mut num = [[R::zero(); 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                num[a][b] = w[i] * kw[a][b] + m[a][b];
            }
        }
        let scaled = mat3_scale(&num, R::one() / theta2);
        out[i] = mat3_mul(&scaled, &r);
    }
    out
}

fn skew<R: Real>(v: [R; 3]) -> [[R; 3]; 3] {
    [
        [R::zero(), -v[2], v[1]],
        [v[2], R::zero(), -v[0]],
        [-v[1], v[0], R::zero()],
    ]
}

fn cross<R: Real>(a: [R; 3], b: [R; 3]) -> [R; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn mat3_mul<R: Real>(a: &[[R; 3]; 3], b: &[[R; 3]; 3]) -> [[R; 3]; 3] {
    let mut c = [[R::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

fn mat3_scale<R: Real>(a: &[[R; 3]; 3], s: R) -> [[R; 3]; 3] {
    let mut c = *a;
    for row in &mut c {
        for v in row.iter_mut() {
            *v = *v * s;
        }
    }
    c
}

/// Boolean per-pixel validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, v: bool) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Per-pixel sampling coordinates `(u, v)` in pixel units of some image.
#[derive(Debug, Clone)]
pub struct CoordGrid<R> {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<(R, R)>,
}

impl<R: Real> CoordGrid<R> {
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (R, R)) -> Self {
        let mut coords = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                coords.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            coords,
        }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            (R::from_usize_c(x), R::from_usize_c(y))
        })
    }
}

/// Bilinear interpolation of one channel at real coordinates.
///
/// Caller guarantees `0 <= u <= W-1` and `0 <= v <= H-1`.
#[inline]
pub fn sample_bilinear_at<R: Real>(image: &ImageTensor<R>, u: R, v: R, c: usize) -> R {
    sample_bilinear_with_grad(image, u, v, c).0
}

/// Bilinear interpolation plus its derivative w.r.t. `(u, v)`.
#[inline]
pub fn sample_bilinear_with_grad<R: Real>(
    image: &ImageTensor<R>,
    u: R,
    v: R,
    c: usize,
) -> (R, R, R) {
    let w = image.width();
    let h = image.height();
    let x0 = u.floor().max(R::zero()).min(R::from_usize_c(w - 1));
    let y0 = v.floor().max(R::zero()).min(R::from_usize_c(h - 1));
    let x0i = x0.as_f64() as usize;
    let y0i = y0.as_f64() as usize;
    let x1i = (x0i + 1).min(w - 1);
    let y1i = (y0i + 1).min(h - 1);
    let fu = u - x0;
    let fv = v - y0;
    let v00 = image.get(y0i, x0i, c);
    let v01 = image.get(y0i, x1i, c);
    let v10 = image.get(y1i, x0i, c);
    let v11 = image.get(y1i, x1i, c);
    let one = R::one();
    let value = v00 * (one - fu) * (one - fv)
        + v01 * fu * (one - fv)
        + v10 * (one - fu) * fv
        + v11 * fu * fv;
    let du = (v01 - v00) * (one - fv) + (v11 - v10) * fv;
    let dv = (v10 - v00) * (one - fu) + (v11 - v01) * fu;
    (value, du, dv)
}

#[inline]
pub fn in_bounds<R: Real>(image_h: usize, image_w: usize, u: R, v: R) -> bool {
    u >= R::zero()
        && v >= R::zero()
        && u <= R::from_usize_c(image_w - 1)
        && v <= R::from_usize_c(image_h - 1)
}

/// Samples `image` at every grid coordinate; out-of-bounds pixels are
/// filled with 0 and flagged invalid.
pub fn bilinear_sample<R: Real>(
    image: &ImageTensor<R>,
    grid: &CoordGrid<R>,
) -> Result<(ImageTensor<R>, Mask)> {
    if image.is_empty() {
        return Err(CodepsError::invalid("bilinear_sample: empty image"));
    }
    let mut out = ImageTensor::zeros(grid.height, grid.width, image.channels());
    let mut mask = Mask::filled(grid.height, grid.width, false);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let (u, v) = grid.coords[y * grid.width + x];
            if in_bounds(image.height(), image.width(), u, v) {
                mask.set(y, x, true);
                for c in 0..image.channels() {
                    out.set(y, x, c, sample_bilinear_at(image, u, v, c));
                }
            }
        }
    }
    out.clamp01();
    Ok((out, mask))
}

const HIST_BINS: usize = 256;

fn channel_cdf<R: Real>(image: &ImageTensor<R>, c: usize) -> [f64; HIST_BINS] {
    let mut hist = [0u64; HIST_BINS];
    let mut n = 0u64;
    for y in 0..image.height() {
        for x in 0..image.width() {
            let v = image.get(y, x, c).as_f64().clamp(0.0, 1.0);
            let bin = ((v * 255.0).round() as usize).min(HIST_BINS - 1);
            hist[bin] += 1;
            n += 1;
        }
    }
    let mut cdf = [0.0f64; HIST_BINS];
    let mut acc = 0u64;
    for (i, h) in hist.iter().enumerate() {
        acc += h;
        cdf[i] = acc as f64 / n as f64;
    }
    cdf
}

/// Monotone per-channel CDF matching with 256-bin quantization.
pub fn histogram_match<R: Real>(
    source: &ImageTensor<R>,
    reference: &ImageTensor<R>,
) -> Result<ImageTensor<R>> {
    if source.channels() != reference.channels() {
        return Err(CodepsError::invalid(
            "histogram_match: channel count mismatch",
        ));
    }
    if source.is_empty() || reference.is_empty() {
        return Err(CodepsError::invalid("histogram_match: empty image"));
    }
    let mut out = source.clone();
    for c in 0..source.channels() {
        let cdf_src = channel_cdf(source, c);
        let cdf_ref = channel_cdf(reference, c);
        // Monotone lookup: lowest reference bin whose CDF reaches the source CDF.
        let mut lut = [0u8; HIST_BINS];
        let mut r = 0usize;
        for (b, lut_b) in lut.iter_mut().enumerate() {
            while r < HIST_BINS - 1 && cdf_ref[r] < cdf_src[b] {
                r += 1;
            }
            *lut_b = r as u8;
        }
        for y in 0..source.height() {
            for x in 0..source.width() {
                let v = source.get(y, x, c).as_f64().clamp(0.0, 1.0);
                let bin = ((v * 255.0).round() as usize).min(HIST_BINS - 1);
                out.set(y, x, c, R::c(lut[bin] as f64 / 255.0));
            }
        }
    }
    Ok(out)
}

/// Remaps `target` into the pixel grid of a source-intrinsics camera.
///
/// Under a constant depth distribution the projection algebra is
/// depth-independent, so the map reduces to `K_T K_S^{-1}` applied to
/// homogeneous pixel coordinates.
pub fn intrinsic_warp<R: Real>(
    target: &ImageTensor<R>,
    k_source: &CameraIntrinsics<R>,
    k_target: &CameraIntrinsics<R>,
    out_height: usize,
    out_width: usize,
) -> Result<(ImageTensor<R>, Mask)> {
    if out_height == 0 || out_width == 0 {
        return Err(CodepsError::invalid("intrinsic_warp: zero output shape"));
    }
    let grid = CoordGrid::from_fn(out_height, out_width, |y, x| {
        let ray = k_source.unproject(R::from_usize_c(x), R::from_usize_c(y));
        k_target.project(ray)
    });
    bilinear_sample(target, &grid)
}

/// Back-projects each pixel with its depth, transforms by `pose`, reprojects
/// with `k`, and samples `src` bilinearly.
///
/// `pose` maps points from the depth frame's camera into `src`'s camera.
pub fn synthesize_view<R: Real>(
    src: &ImageTensor<R>,
    depth: &DepthMap<R>,
    pose: &PoseTransform<R>,
    k: &CameraIntrinsics<R>,
) -> Result<(ImageTensor<R>, Mask)> {
    if src.height() != depth.height || src.width() != depth.width {
        return Err(CodepsError::invalid("synthesize_view: shape mismatch"));
    }
    if depth.count_valid() == 0 {
        return Err(CodepsError::UnusableFrame(
            "synthesize_view: no valid depth".into(),
        ));
    }
    let h = depth.height;
    let w = depth.width;
    let mut out = ImageTensor::zeros(h, w, src.channels());
    let mut mask = Mask::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            if !depth.is_valid(y, x) {
                continue;
            }
            let d = depth.get(y, x);
            let ray = k.unproject(R::from_usize_c(x), R::from_usize_c(y));
            let p = [ray[0] * d, ray[1] * d, ray[2] * d];
            let q = pose.apply(p);
            if q[2] <= R::c(1e-6) {
                continue;
            }
            let (u, v) = k.project(q);
            if in_bounds(h, w, u, v) {
                mask.set(y, x, true);
                for c in 0..src.channels() {
                    out.set(y, x, c, sample_bilinear_at(src, u, v, c));
                }
            }
        }
    }
    out.clamp01();
    Ok((out, mask))
}
