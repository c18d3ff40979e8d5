//! 8-bit sRGB PNG reading and writing for [`ImageTensor`]s.

use std::path::Path;

use candle_core::Device;

use crate::domain::ImageTensor;
use crate::error::{Error, Result};

fn quantize(v: f32) -> u8 {
    ((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8
}

fn dequantize(q: u8) -> f32 {
    q as f32 / 255.0 * 2.0 - 1.0
}

pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let r = img.resolution();
    encode_png_raw(r, r, &img.to_hwc_vec()?)
}

/// Encodes interleaved RGB values in `[-1, 1]` of any size.
pub fn encode_png_raw(width: usize, height: usize, hwc: &[f32]) -> Result<Vec<u8>> {
    if hwc.len() != width * height * 3 {
        return Err(Error::Dimension(format!("{} values cannot fill {width}x{height} RGB", hwc.len())));
    }
    let data: Vec<u8> = hwc.iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        w.write_image_data(&data).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_png_raw(path: &Path, width: usize, height: usize, hwc: &[f32]) -> Result<()> {
    let bytes = encode_png_raw(width, height, hwc)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_png(bytes: &[u8], device: &Device) -> Result<ImageTensor> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w != h {
        return Err(Error::Dimension(format!("image must be square, got {w}x{h}")));
    }
    let channels = info.color_type.samples();
    let buf = &buf[..info.buffer_size()];
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in buf.chunks(channels) {
        match channels {
            1 | 2 => rgb.extend([dequantize(px[0]); 3]),
            _ => rgb.extend(px[..3].iter().map(|&q| dequantize(q))),
        }
    }
    ImageTensor::from_hwc(h, w, 3, &rgb, device)
}

pub fn read_png(path: &Path, device: &Device) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, device).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn round_trip_is_within_one_level() {
        let vals: Vec<f32> = (0..8 * 8 * 3).map(|i| (i as f32 / 191.0) * 2.0 - 1.0).collect();
        let img = ImageTensor::from_hwc(8, 8, 3, &vals, &Device::Cpu).unwrap();
        let bytes = encode_png(&img).unwrap();
        assert_eq!(bytes, encode_png(&img).unwrap());
        let back = decode_png(&bytes, &Device::Cpu).unwrap().to_hwc_vec().unwrap();
        for (a, b) in vals.iter().zip(back) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn extremes_are_exact() {
        let img = ImageTensor::filled(4, 1.0, DType::F32, &Device::Cpu).unwrap();
        let back = decode_png(&encode_png(&img).unwrap(), &Device::Cpu).unwrap();
        assert!(back.to_hwc_vec().unwrap().iter().all(|&v| v == 1.0));
    }
}
