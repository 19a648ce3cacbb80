//! Foreground-masked reconstruction loss in pixel space.

use super::DiffusionError;
use crate::tensor::{Tape, Tensor, TensorRef};

/// Binary foreground mask, shape [1, H, W]. Foreground is wherever depth is
/// nonbackground.
#[derive(Debug, Clone)]
pub struct MaskGrid {
    m: Tensor,
}

impl MaskGrid {
    pub fn new(m: Tensor) -> Result<Self, DiffusionError> {
        if m.shape.len() != 3 || m.shape[0] != 1 {
            return Err(DiffusionError::Dimension {
                what: "mask volume",
                expected: vec![1],
                got: m.shape.clone(),
            });
        }
        for (i, &v) in m.data.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(DiffusionError::MaskNotBinary { value: v, index: i });
            }
        }
        Ok(MaskGrid { m })
    }

    /// Foreground = strictly positive depth; 0 is the background sentinel.
    pub fn from_depth(depth: &Tensor) -> Result<Self, DiffusionError> {
        if depth.shape.len() != 3 || depth.shape[0] != 1 {
            return Err(DiffusionError::Dimension {
                what: "depth volume",
                expected: vec![1],
                got: depth.shape.clone(),
            });
        }
        let data = depth.data.iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect();
        Ok(MaskGrid { m: Tensor::new(data, depth.shape.clone()) })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        MaskGrid { m: Tensor::new(vec![1.0; h * w], vec![1, h, w]) }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.m
    }

    pub fn height(&self) -> usize {
        self.m.shape[1]
    }

    pub fn width(&self) -> usize {
        self.m.shape[2]
    }

    /// Number of foreground pixels.
    pub fn coverage(&self) -> usize {
        self.m.data.iter().filter(|&&v| v == 1.0).count()
    }
}

/// w_t times the mean squared error over masked pixel-channels. Predictions
/// arrive as patch tokens and are unpatchified first, so the mask acts at
/// exact pixel resolution. An all-zero mask yields 0 by definition.
pub fn masked_diff_loss(
    tape: &mut Tape,
    eps_pred: TensorRef,
    eps: &Tensor,
    mask: &MaskGrid,
    w_t: f32,
    patch: usize,
) -> Result<TensorRef, DiffusionError> {
    let (c, h, w) = match eps.shape[..] {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(DiffusionError::Dimension {
                what: "noise target",
                expected: vec![3],
                got: eps.shape.clone(),
            })
        }
    };
    if mask.height() != h || mask.width() != w {
        return Err(DiffusionError::Dimension {
            what: "mask extents",
            expected: vec![h, w],
            got: vec![mask.height(), mask.width()],
        });
    }
    let denom = c * mask.coverage();
    if denom == 0 {
        return Ok(tape.constant_from(vec![0.0], vec![1]));
    }
    let pred_px = tape.unpatchify(eps_pred, c, h, w, patch)?;
    let target = tape.constant(eps);
    let diff = tape.sub(pred_px, target)?;
    let mut mdata = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        mdata.extend_from_slice(&mask.tensor().data);
    }
    let mref = tape.constant_from(mdata, vec![c, h, w]);
    let masked = tape.mul(diff, mref)?;
    let sq = tape.mul(masked, masked)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, w_t / denom as f32)?)
}
