//! Cross-domain sample mixing and the exponential-moving-average teacher.
//!
//! A mixed sample starts from a labeled source image restyled to the target
//! domain, intrinsically rewarps the target image into the source camera
//! grid, and pastes a random grid cell of it. Pseudo-labels come from the
//! source ground truth outside the pasted cell and from the teacher's
//! prediction inside it, with invalid warp pixels marked ignore.

use rand::Rng;

use crate::error::{CodepsError, Result};
use crate::imaging::{histogram_match, intrinsic_warp, ImageTensor, LabelMap, Mask, IGNORE_ID};
use crate::model::{semantic_argmax, ModelState};
use crate::replay::Sample;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Number of distinct grid cells pasted from the target.
    pub patches: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            grid_rows: 2,
            grid_cols: 2,
            patches: 1,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_rows * self.grid_cols < 2 {
            return Err(CodepsError::invalid("mix: grid must have at least 2 cells"));
        }
        if self.patches == 0 || self.patches >= self.grid_rows * self.grid_cols {
            return Err(CodepsError::invalid(
                "mix: patches must be in 1..grid_rows*grid_cols",
            ));
        }
        Ok(())
    }

    /// Pixel bounds `(y0, y1, x0, x1)` of cell `index` (row major) on an
    /// `h` x `w` image. Remainder pixels go to the last row/column of cells.
    pub fn cell_bounds(&self, index: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let (r, c) = (index / self.grid_cols, index % self.grid_cols);
        let ch = h / self.grid_rows;
        let cw = w / self.grid_cols;
        let y0 = r * ch;
        let x0 = c * cw;
        let y1 = if r + 1 == self.grid_rows { h } else { y0 + ch };
        let x1 = if c + 1 == self.grid_cols { w } else { x0 + cw };
        (y0, y1, x0, x1)
    }
}

#[derive(Debug, Clone)]
pub struct MixedSample<R> {
    pub image: ImageTensor<R>,
    /// Pseudo-label map; pixels with unusable supervision carry `IGNORE_ID`.
    pub labels: LabelMap,
    /// Row-major indices of the pasted grid cells.
    pub pasted_cells: Vec<usize>,
}

/// Builds one mixed training sample from a labeled source sample and the
/// current target-domain sample. The teacher provides pseudo-labels for the
/// pasted target content.
pub fn generate_mixed_sample<R: Real>(
    source: &Sample<R>,
    target: &Sample<R>,
    teacher: &ModelState<R>,
    cfg: &MixConfig,
    rng: &mut impl Rng,
) -> Result<MixedSample<R>> {
    cfg.validate()?;
    let src_img = source.principal();
    let tgt_img = target.principal();
    let (h, w) = (src_img.height(), src_img.width());
    let src_labels = source
        .semantic
        .as_ref()
        .ok_or_else(|| CodepsError::invalid("mix: source sample has no semantic labels"))?;
    if src_labels.height != h || src_labels.width != w {
        return Err(CodepsError::contract("mix: source label shape"));
    }

    let styled = histogram_match(src_img, tgt_img)?;
    let (warped, valid): (ImageTensor<R>, Mask) =
        intrinsic_warp(tgt_img, &source.intrinsics, &target.intrinsics, h, w)?;
    let teacher_labels = semantic_argmax(teacher, &warped)?;

    // Draw distinct cells.
    let total = cfg.grid_rows * cfg.grid_cols;
    let mut cells: Vec<usize> = Vec::with_capacity(cfg.patches);
    while cells.len() < cfg.patches {
        let c = rng.gen_range(0..total);
        if !cells.contains(&c) {
            cells.push(c);
        }
    }

    let mut image = styled;
    let mut labels = src_labels.clone();
    for cell in &cells {
        let (y0, y1, x0, x1) = cfg.cell_bounds(*cell, h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..image.channels() {
                    image.set(y, x, c, warped.get(y, x, c));
                }
                labels.set(
                    y,
                    x,
                    if valid.get(y, x) {
                        teacher_labels.get(y, x)
                    } else {
                        IGNORE_ID
                    },
                );
            }
        }
    }
    Ok(MixedSample {
        image,
        labels,
        pasted_cells: cells,
    })
}

/// In-place exponential moving average: `teacher <- alpha*teacher +
/// (1-alpha)*student`, applied to every value of every array.
pub fn ema_update<R: Real>(
    teacher: &mut ModelState<R>,
    student: &ModelState<R>,
    alpha: R,
) -> Result<()> {
    if alpha < R::zero() || alpha > R::one() {
        return Err(CodepsError::invalid("ema: alpha must be in [0,1]"));
    }
    if teacher.params().len() != student.params().len() {
        return Err(CodepsError::contract("ema: parameter arity mismatch"));
    }
    let beta = R::one() - alpha;
    for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
        if t.name != s.name || t.data.len() != s.data.len() {
            return Err(CodepsError::contract("ema: parameter layout mismatch"));
        }
        for (tv, sv) in t.data.iter_mut().zip(&s.data) {
            *tv = alpha * *tv + beta * *sv;
        }
    }
    Ok(())
}
