//! Sliding-patch extraction (unfold) and its averaging inverse (fold).
//!
//! Patch `p = row·gw + col` has its top-left corner at `(row·s, col·s)`. Each
//! patch is flattened channel-major, then patch row, then patch column. No
//! implicit padding is applied: pixels beyond the last grid position are simply
//! not covered.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride: usize,
}

impl PatchGeometry {
    pub fn new(channels: usize, height: usize, width: usize, patch_h: usize, patch_w: usize, stride: usize) -> Result<Self> {
        let g = Self { channels, height, width, patch_h, patch_w, stride };
        if channels == 0 || height == 0 || width == 0 || patch_h == 0 || patch_w == 0 || stride == 0 {
            return Err(shape_err!("patch geometry has a zero extent: {g:?}"));
        }
        if patch_h > height || patch_w > width {
            return Err(shape_err!("patch {patch_h}×{patch_w} larger than image {height}×{width}"));
        }
        Ok(g)
    }

    /// Square patches of side `patch` at the given stride.
    pub fn square(channels: usize, height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        Self::new(channels, height, width, patch, patch, stride)
    }

    pub fn grid_h(&self) -> usize {
        (self.height - self.patch_h) / self.stride + 1
    }

    pub fn grid_w(&self) -> usize {
        (self.width - self.patch_w) / self.stride + 1
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_h * self.patch_w
    }

    /// True when every pixel lies in at least one patch.
    pub fn covers_fully(&self) -> bool {
        (self.height - self.patch_h) % self.stride == 0 && (self.width - self.patch_w) % self.stride == 0
    }

    pub(crate) fn check_image(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if (c, h, w) != (self.channels, self.height, self.width) {
            return Err(shape_err!(
                "image {c}×{h}×{w} does not match geometry {}×{}×{}",
                self.channels,
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    /// How many patches touch each pixel of one H×W plane.
    pub fn coverage_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.height * self.width];
        for r in 0..self.grid_h() {
            for c in 0..self.grid_w() {
                let (top, left) = (r * self.stride, c * self.stride);
                for y in top..top + self.patch_h {
                    let row = &mut counts[y * self.width + left..y * self.width + left + self.patch_w];
                    row.iter_mut().for_each(|v| *v += 1);
                }
            }
        }
        counts
    }

    /// Same geometry on a differently sized image.
    pub fn with_size(&self, height: usize, width: usize) -> Result<Self> {
        Self::new(self.channels, height, width, self.patch_h, self.patch_w, self.stride)
    }
}

/// Smallest size ≥ `n` (and ≥ `patch`) at which a stride-`stride` grid of
/// `patch`-wide windows ends exactly on the border.
pub fn covering_size(n: usize, patch: usize, stride: usize) -> usize {
    if n <= patch {
        return patch;
    }
    let excess = (n - patch) % stride;
    if excess == 0 {
        n
    } else {
        n + stride - excess
    }
}

/// The unfolded form of one image: one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T = f32> {
    pub geometry: PatchGeometry,
    /// N_patches × (C·patch_h·patch_w).
    pub patches: Tensor<T>,
}

/// Result of [`fold`]: the averaged image plus which pixels any patch covered.
#[derive(Clone, Debug)]
pub struct Folded<T = f32> {
    pub image: Tensor<T>,
    pub coverage: Vec<bool>,
}

/// Extract all patches of a 1×C×H×W tensor.
pub fn unfold<T: Real>(input: &Tensor<T>, geometry: PatchGeometry) -> Result<PatchSet<T>> {
    let (n, c, h, w) = input.dims4()?;
    if n != 1 {
        return Err(shape_err!("unfold works on one image at a time, got batch {n}"));
    }
    geometry.check_image(c, h, w)?;
    let mut out = vec![T::zero(); geometry.num_patches() * geometry.patch_len()];
    unfold_into(input.data(), &geometry, &mut out);
    let patches = Tensor::new(&[geometry.num_patches(), geometry.patch_len()], out)?;
    Ok(PatchSet { geometry, patches })
}

/// Reassemble patches, averaging where they overlap. Uncovered pixels are 0.
pub fn fold<T: Real>(set: &PatchSet<T>) -> Result<Folded<T>> {
    let g = set.geometry;
    if set.patches.shape() != [g.num_patches(), g.patch_len()] {
        return Err(shape_err!("patch tensor {:?} does not match geometry {g:?}", set.patches.shape()));
    }
    let mut out = vec![T::zero(); g.channels * g.height * g.width];
    fold_mean_into(set.patches.data(), &g, &mut out);
    let coverage = g.coverage_counts().into_iter().map(|c| c > 0).collect();
    Ok(Folded { image: Tensor::new(&[1, g.channels, g.height, g.width], out)?, coverage })
}

pub(crate) fn unfold_into<T: Real>(x: &[T], g: &PatchGeometry, out: &mut [T]) {
    let (gw, plen) = (g.grid_w(), g.patch_len());
    for r in 0..g.grid_h() {
        for c in 0..gw {
            let dst = &mut out[(r * gw + c) * plen..(r * gw + c + 1) * plen];
            let (top, left) = (r * g.stride, c * g.stride);
            let mut i = 0;
            for ch in 0..g.channels {
                for y in top..top + g.patch_h {
                    let base = (ch * g.height + y) * g.width + left;
                    dst[i..i + g.patch_w].copy_from_slice(&x[base..base + g.patch_w]);
                    i += g.patch_w;
                }
            }
        }
    }
}

/// Scatter-add patches into an image without normalizing (adjoint of unfold).
pub(crate) fn fold_sum_into<T: Real>(p: &[T], g: &PatchGeometry, out: &mut [T]) {
    let (gw, plen) = (g.grid_w(), g.patch_len());
    for r in 0..g.grid_h() {
        for c in 0..gw {
            let src = &p[(r * gw + c) * plen..(r * gw + c + 1) * plen];
            let (top, left) = (r * g.stride, c * g.stride);
            let mut i = 0;
            for ch in 0..g.channels {
                for y in top..top + g.patch_h {
                    let base = (ch * g.height + y) * g.width + left;
                    out[base..base + g.patch_w].iter_mut().zip(&src[i..i + g.patch_w]).for_each(|(o, &v)| *o += v);
                    i += g.patch_w;
                }
            }
        }
    }
}

pub(crate) fn fold_mean_into<T: Real>(p: &[T], g: &PatchGeometry, out: &mut [T]) {
    fold_sum_into(p, g, out);
    let counts = g.coverage_counts();
    let hw = g.height * g.width;
    for plane in out.chunks_mut(hw) {
        for (v, &c) in plane.iter_mut().zip(&counts) {
            if c > 1 {
                *v /= T::lit(c as f64);
            }
        }
    }
}
