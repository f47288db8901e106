//! Lossless conversion between `T x H x W x C` arrays and patch tokens.
//!
//! Tokens are ordered row-major over the `(t, h, w)` patch grid; inside a
//! token, elements run `(dt, dy, dx, c)`.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSize {
    pub temporal: usize,
    pub spatial: usize,
}

impl PatchSize {
    pub fn volume(&self) -> usize {
        self.temporal * self.spatial * self.spatial
    }

    pub fn check(&self, t: usize, h: usize, w: usize) -> Result<()> {
        if self.temporal == 0 || self.spatial == 0 {
            return Err(Error::invalid("patch", "patch sizes must be positive"));
        }
        if !t.is_multiple_of(self.temporal) || !h.is_multiple_of(self.spatial) || !w.is_multiple_of(self.spatial) {
            return Err(Error::invalid(
                "patch",
                format!(
                    "{}x{}x{} does not tile {t}x{h}x{w}",
                    self.temporal, self.spatial, self.spatial
                ),
            ));
        }
        Ok(())
    }

    /// Patch-grid extent `(T / p_t, H / p, W / p)`.
    pub fn grid(&self, t: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (t / self.temporal, h / self.spatial, w / self.spatial)
    }
}

pub fn patchify<A: Copy + num_traits::Zero>(x: ArrayView4<'_, A>, patch: PatchSize) -> Result<Array2<A>> {
    let (t, h, w, c) = x.dim();
    patch.check(t, h, w)?;
    let (gt, gh, gw) = patch.grid(t, h, w);
    let (pt, p) = (patch.temporal, patch.spatial);
    let mut out = Array2::zeros((gt * gh * gw, patch.volume() * c));
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                let row = (it * gh + ih) * gw + iw;
                let mut col = 0;
                for dt in 0..pt {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                out[[row, col]] = x[[it * pt + dt, ih * p + dy, iw * p + dx, ch]];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify<A: Copy + num_traits::Zero>(
    tokens: ArrayView2<'_, A>,
    patch: PatchSize,
    dims: (usize, usize, usize, usize),
) -> Result<Array4<A>> {
    let (t, h, w, c) = dims;
    patch.check(t, h, w)?;
    let (gt, gh, gw) = patch.grid(t, h, w);
    if tokens.dim() != (gt * gh * gw, patch.volume() * c) {
        return Err(Error::shape(format!(
            "tokens {:?} do not unpatchify to {t}x{h}x{w}x{c}",
            tokens.dim()
        )));
    }
    let (pt, p) = (patch.temporal, patch.spatial);
    let mut out = Array4::zeros(dims);
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                let row = (it * gh + ih) * gw + iw;
                let mut col = 0;
                for dt in 0..pt {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                out[[it * pt + dt, ih * p + dy, iw * p + dx, ch]] = tokens[[row, col]];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
