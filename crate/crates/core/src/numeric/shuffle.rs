//! Sub-pixel rearrangement between channel depth and spatial resolution.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

fn chw(t: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return shape_err(format!("{op} expects (C,H,W), got {:?}", t.shape()));
    }
    Ok((t.dim(0), t.dim(1), t.dim(2)))
}

/// `(C·r², H, W) -> (C, H·r, W·r)`; channel `c·r² + i·r + j` lands on the
/// sub-pixel `(i, j)` of each `r × r` output cell.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (cr, h, w) = chw(input, "pixel_shuffle")?;
    if r == 0 || cr % (r * r) != 0 {
        return invalid(format!("pixel_shuffle: {cr} channels not divisible by {r}²"));
    }
    let c = cr / (r * r);
    let (ho, wo) = (h * r, w * r);
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for co in 0..c {
        for i in 0..r {
            for j in 0..r {
                let ci = co * r * r + i * r + j;
                for y in 0..h {
                    let srow = &src[(ci * h + y) * w..(ci * h + y + 1) * w];
                    let orow = (co * ho + y * r + i) * wo;
                    for (x, &v) in srow.iter().enumerate() {
                        out[orow + x * r + j] = v;
                    }
                }
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// Inverse of [`pixel_shuffle`]: `(C, H, W) -> (C·r², H/r, W/r)`.
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (c, h, w) = chw(input, "pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return invalid(format!("pixel_unshuffle: {h}×{w} not divisible by {r}"));
    }
    let (ho, wo) = (h / r, w / r);
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for ci in 0..c {
        for i in 0..r {
            for j in 0..r {
                let co = ci * r * r + i * r + j;
                for y in 0..ho {
                    let srow = (ci * h + y * r + i) * w;
                    let orow = &mut out[(co * ho + y) * wo..(co * ho + y + 1) * wo];
                    for (x, o) in orow.iter_mut().enumerate() {
                        *o = src[srow + x * r + j];
                    }
                }
            }
        }
    }
    Tensor::new(&[c * r * r, ho, wo], out)
}
