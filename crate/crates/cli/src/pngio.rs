//! PNG image and depth-map files.
//!
//! Color goes out as 8-bit RGB, depth as 16-bit grayscale with
//! `value = round(depth * 65535)`, both from planar [C,H,W] tensors holding
//! [0,1] floats. Encoding is deterministic, so identical tensors give
//! identical files.

use std::path::Path;

use image::ImageReader;
use mvicl_core::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PngError {
    #[error("png io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("expected a [{want},H,W] tensor, got shape {got:?}")]
    Shape { want: usize, got: Vec<usize> },
    #[error("{path} is not a {want} image")]
    Format { path: String, want: &'static str },
}

fn check_shape(t: &Tensor, channels: usize) -> Result<(usize, usize), PngError> {
    if t.shape.len() != 3 || t.shape[0] != channels {
        return Err(PngError::Shape { want: channels, got: t.shape.clone() });
    }
    Ok((t.shape[1], t.shape[2]))
}

pub fn save_rgb(path: &Path, t: &Tensor) -> Result<(), PngError> {
    let (h, w) = check_shape(t, 3)?;
    let mut buf = vec![0u8; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            buf[3 * i + c] = (t.data[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    Ok(img.save(path)?)
}

pub fn load_rgb(path: &Path) -> Result<Tensor, PngError> {
    let dynimg = ImageReader::open(path)?.decode()?;
    let img = dynimg.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = f32::from(raw[3 * i + c]) / 255.0;
        }
    }
    Ok(Tensor::new(data, vec![3, h, w]))
}

pub fn save_depth16(path: &Path, t: &Tensor) -> Result<(), PngError> {
    let (h, w) = check_shape(t, 1)?;
    let buf: Vec<u16> = t
        .data
        .iter()
        .map(|&d| (f64::from(d.clamp(0.0, 1.0)) * 65535.0).round() as u16)
        .collect();
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    Ok(img.save(path)?)
}

pub fn load_depth16(path: &Path) -> Result<Tensor, PngError> {
    let dynimg = ImageReader::open(path)?.decode()?;
    let img = match dynimg {
        image::DynamicImage::ImageLuma16(img) => img,
        _ => {
            return Err(PngError::Format {
                path: path.display().to_string(),
                want: "16-bit grayscale",
            })
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| (f64::from(v) / 65535.0) as f32).collect();
    Ok(Tensor::new(data, vec![1, h, w]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn rgb_round_trip_stays_within_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.png");
        let t = Tensor::new(
            (0..3 * 5 * 4).map(|i| (i as f32 * 37.0).sin().abs()).collect(),
            vec![3, 5, 4],
        );
        save_rgb(&path, &t).unwrap();
        let back = load_rgb(&path).unwrap();
        assert_eq!(back.shape, t.shape);
        for (a, b) in t.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn depth_round_trip_preserves_the_16_bit_code() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.png");
        let t = Tensor::new(vec![0.0, 0.25, 0.5004, 0.99, 1.0, 0.3333], vec![1, 2, 3]);
        save_depth16(&path, &t).unwrap();
        let back = load_depth16(&path).unwrap();
        for (a, b) in t.data.iter().zip(&back.data) {
            let code = (f64::from(*a) * 65535.0).round();
            assert_eq!(code, (f64::from(*b) * 65535.0).round(), "{a} vs {b}");
        }
        // encoding again from the decoded values reproduces the file
        let path2 = dir.path().join("d2.png");
        save_depth16(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn identical_tensors_write_identical_bytes() {
        let dir = tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let t = Tensor::new((0..3 * 8 * 8).map(|i| (i % 11) as f32 / 10.0).collect(), vec![3, 8, 8]);
        save_rgb(&p1, &t).unwrap();
        save_rgb(&p2, &t).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn out_of_range_values_clamp() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.png");
        let t = Tensor::new(vec![-0.5, 1.5, 0.5, 0.0, 1.0, 0.25], vec![1, 2, 3]);
        save_depth16(&path, &t).unwrap();
        let back = load_depth16(&path).unwrap();
        assert_eq!(back.data[0], 0.0);
        assert_eq!(back.data[1], 1.0);
    }

    #[test]
    fn wrong_channel_count_is_refused() {
        let dir = tempdir().unwrap();
        let t = Tensor::new(vec![0.0; 4], vec![2, 2, 1]);
        assert!(matches!(save_rgb(&dir.path().join("x.png"), &t), Err(PngError::Shape { .. })));
    }
}
