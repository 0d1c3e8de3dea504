//! PNG import/export and resizing for [3, H, W] float images in [0, 1].

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

fn check_chw(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        other => Err(Error::ShapeMismatch(format!(
            "expected [3, h, w] image, got {other:?}"
        ))),
    }
}

/// Bilinear resize with half-pixel centers. Identity when sizes match.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = check_chw(img)?;
    if h == out_h && w == out_w {
        return Ok(img.clone());
    }
    let src = img.data();
    let mut out = vec![0.0f32; 3 * out_h * out_w];
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, h as f32 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, w as f32 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for c in 0..3 {
                let plane = &src[c * h * w..(c + 1) * h * w];
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                out[c * out_h * out_w + oy * out_w + ox] = top + (bot - top) * ty;
            }
        }
    }
    Ok(Tensor::from_vec(vec![3, out_h, out_w], out))
}

pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = check_chw(img)?;
    let data = img.data();
    let n = h * w;
    let mut bytes = vec![0u8; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            bytes[3 * i + c] = (data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let file = File::create(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("png header: {e}")))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(format!("png payload: {e}")))?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png read: {e}")))?;
    let mut buf = vec![
        0u8;
        reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format("png dimensions overflow".to_string()))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png frame: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::Format(format!("unsupported png color type {other:?}"))),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "unsupported png bit depth {:?}",
            info.bit_depth
        )));
    }
    let n = h * w;
    let mut out = vec![0.0f32; 3 * n];
    for i in 0..n {
        let px = &buf[i * channels..i * channels + channels];
        let rgb = match channels {
            1 | 2 => [px[0], px[0], px[0]],
            _ => [px[0], px[1], px[2]],
        };
        for c in 0..3 {
            out[c * n + i] = rgb[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(vec![3, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_is_identity_at_same_size() {
        let img = Tensor::from_vec(vec![3, 2, 2], (0..12).map(|i| i as f32 / 12.0).collect());
        let out = resize_bilinear(&img, 2, 2).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Tensor::full(&[3, 5, 7], 0.25);
        let out = resize_bilinear(&img, 16, 9).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn png_round_trip_is_lossless_for_byte_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Tensor::from_vec(
            vec![3, 4, 4],
            (0..48).map(|i| (i * 5) as f32 / 255.0).collect(),
        );
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), &[3, 4, 4]);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1.0 / 255.0 / 2.0 + 1e-6);
        }
    }
}
