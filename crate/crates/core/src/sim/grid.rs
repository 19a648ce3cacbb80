//! 2x2 panel grids. Panels map to ring views in reading order: top-left and
//! top-right take the first two azimuths, bottom-left and bottom-right the
//! last two.

use super::SimError;
use crate::tensor::Tensor;

/// Compose four equally sized [C,H,W] panels into one [C,2H,2W] grid.
pub fn compose_grid(panels: &[Tensor; 4]) -> Result<Tensor, SimError> {
    let shape = panels[0].shape.clone();
    if shape.len() != 3 {
        return Err(SimError::PanelShape { expected: shape.clone(), got: shape });
    }
    for p in panels.iter().skip(1) {
        if p.shape != shape {
            return Err(SimError::PanelShape { expected: shape.clone(), got: p.shape.clone() });
        }
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = vec![0.0f32; c * 4 * h * w];
    for (idx, panel) in panels.iter().enumerate() {
        let (row0, col0) = (idx / 2 * h, idx % 2 * w);
        for ch in 0..c {
            for j in 0..h {
                let src = ch * h * w + j * w;
                let dst = ch * 4 * h * w + (row0 + j) * 2 * w + col0;
                data[dst..dst + w].copy_from_slice(&panel.data[src..src + w]);
            }
        }
    }
    Ok(Tensor::new(data, vec![c, 2 * h, 2 * w]))
}

/// Split a [C,2H,2W] grid back into its four panels.
pub fn split_grid(grid: &Tensor) -> Result<[Tensor; 4], SimError> {
    let s = &grid.shape;
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(SimError::PanelShape { expected: vec![s[0], 2, 2], got: s.clone() });
    }
    let (c, h, w) = (s[0], s[1] / 2, s[2] / 2);
    let mut out: Vec<Tensor> = Vec::with_capacity(4);
    for idx in 0..4 {
        let (row0, col0) = (idx / 2 * h, idx % 2 * w);
        let mut data = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for j in 0..h {
                let src = ch * 4 * h * w + (row0 + j) * 2 * w + col0;
                let dst = ch * h * w + j * w;
                data[dst..dst + w].copy_from_slice(&grid.data[src..src + w]);
            }
        }
        out.push(Tensor::new(data, vec![c, h, w]));
    }
    Ok(out.try_into().expect("four panels"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_panel(r: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor {
        let data: Vec<f32> = (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::new(data, vec![c, h, w])
    }

    #[test]
    fn compose_then_split_is_lossless() {
        let mut r = rng::stream(3, "grid.roundtrip");
        let panels: [Tensor; 4] = std::array::from_fn(|_| random_panel(&mut r, 3, 5, 7));
        let grid = compose_grid(&panels).unwrap();
        assert_eq!(grid.shape, vec![3, 10, 14]);
        let back = split_grid(&grid).unwrap();
        for (orig, got) in panels.iter().zip(back.iter()) {
            assert_eq!(orig.data, got.data);
        }
    }

    #[test]
    fn panels_land_in_reading_order() {
        let panels: [Tensor; 4] =
            std::array::from_fn(|i| Tensor::new(vec![i as f32; 4], vec![1, 2, 2]));
        let grid = compose_grid(&panels).unwrap();
        // rows: [0 0 1 1 / 0 0 1 1 / 2 2 3 3 / 2 2 3 3]
        assert_eq!(grid.data[0], 0.0);
        assert_eq!(grid.data[2], 1.0);
        assert_eq!(grid.data[8], 2.0);
        assert_eq!(grid.data[10], 3.0);
    }

    #[test]
    fn mismatched_panels_are_rejected() {
        let a = Tensor::new(vec![0.0; 4], vec![1, 2, 2]);
        let b = Tensor::new(vec![0.0; 8], vec![2, 2, 2]);
        let err = compose_grid(&[a.clone(), a.clone(), a, b]).unwrap_err();
        assert!(matches!(err, SimError::PanelShape { .. }));
        let odd = Tensor::new(vec![0.0; 6], vec![1, 2, 3]);
        assert!(split_grid(&odd).is_err());
    }
}
