//! Raw tensor files, checksums and heatmap images.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TENSOR_DTYPE: &str = "f32le";

/// Shape sidecar written next to every raw tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub dtype: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn f32_bytes(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn bytes_to_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Invalid(format!("{} bytes is not a whole number of f32 values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes `path` (raw little-endian f32) and `path.json` (shape sidecar).
/// Returns the SHA-256 of the raw bytes.
pub fn write_tensor(path: &Path, shape: &[usize], data: &[f64]) -> Result<String> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!("shape {shape:?} holds {n} values, got {}", data.len())));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::file(dir))?;
    }
    let bytes = f32_bytes(data);
    fs::write(path, &bytes).map_err(Error::file(path))?;
    let meta = TensorMeta {
        shape: shape.to_vec(),
        dtype: TENSOR_DTYPE.into(),
    };
    let side = sidecar(path);
    fs::write(&side, serde_json::to_vec(&meta)?).map_err(Error::file(&side))?;
    Ok(sha256_hex(&bytes))
}

/// Reads a tensor written by [`write_tensor`], verifying its checksum, shape
/// and finiteness.
pub fn read_tensor(path: &Path, expected_sha: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(Error::file(path))?;
    let sha = sha256_hex(&bytes);
    if sha != expected_sha {
        return Err(Error::Invalid(format!("{}: checksum mismatch", path.display())));
    }
    let side = sidecar(path);
    let meta: TensorMeta = serde_json::from_slice(&fs::read(&side).map_err(Error::file(&side))?)?;
    if meta.dtype != TENSOR_DTYPE {
        return Err(Error::Invalid(format!("{}: unsupported dtype {}", path.display(), meta.dtype)));
    }
    let data = bytes_to_f64(&bytes)?;
    if meta.shape.iter().product::<usize>() != data.len() {
        return Err(Error::Shape(format!("{}: sidecar shape {:?} vs {} values", path.display(), meta.shape, data.len())));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("{}: non-finite value", path.display())));
    }
    Ok((meta.shape, data))
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Writes a grayscale PNG of a `rows x cols` matrix, `scale` pixels per cell.
/// Cell intensity is `round(255 * (v - min) / (max - min))`, row 0 at the top.
/// `text` entries are stored as tEXt chunks.
pub fn write_heatmap(path: &Path, rows: usize, cols: usize, values: &[f64], scale: u32, text: &[(&str, String)]) -> Result<()> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("heatmap {rows}x{cols} with {} values", values.len())));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let cells: Vec<u8> = values.iter().map(|v| (255.0 * (v - min) / span).round() as u8).collect();
    let s = scale.max(1) as usize;
    let (w, h) = (cols * s, rows * s);
    let mut pixels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            pixels[y * w + x] = cells[(y / s) * cols + x / s];
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::file(dir))?;
    }
    let file = fs::File::create(path).map_err(Error::file(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.clone()).map_err(|e| Error::Png(e.to_string()))?;
    }
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(&pixels).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

/// Decodes a grayscale PNG written by [`write_heatmap`] back to cell values
/// (top-left pixel of each cell).
pub fn read_heatmap_cells(path: &Path, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let file = fs::File::open(path).map_err(Error::file(path))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w % cols != 0 || h % rows != 0 {
        return Err(Error::Shape(format!("{w}x{h} image is not a {rows}x{cols} grid")));
    }
    let (sx, sy) = (w / cols, h / rows);
    Ok((0..rows * cols)
        .map(|k| buf[(k / cols) * sy * w + (k % cols) * sx])
        .collect())
}

/// Writes `text` atomically enough for our purposes: a temp file then rename.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::file(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(Error::file(&tmp))?;
    f.write_all(text.as_bytes()).map_err(Error::file(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(Error::file(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        let data = vec![0.5, -1.25, 3.0, 7.0, 0.0, 1e-3 as f32 as f64];
        let sha = write_tensor(&p, &[2, 3], &data).unwrap();
        let (shape, back) = read_tensor(&p, &sha).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(back, data);
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(read_tensor(&p, &sha).is_err());
        // a NaN with a matching checksum is still rejected
        let nan = f32_bytes(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]);
        fs::write(&p, &nan).unwrap();
        assert!(read_tensor(&p, &sha256_hex(&nan)).is_err());
    }

    #[test]
    fn heatmap_cells_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        let v = vec![0.0, 1.0, 2.0, 4.0];
        write_heatmap(&p, 2, 2, &v, 3, &[("title", "t".into())]).unwrap();
        assert_eq!(read_heatmap_cells(&p, 2, 2).unwrap(), vec![0, 64, 128, 255]);
    }
}
