//! Binary file formats and PNG export.
//!
//! Images and sinograms share one layout: a 16-byte header (4-byte magic,
//! `u32` version, two `u32` dimensions, all little endian) followed by
//! row-major little-endian `f32` values.
//!
//! | magic  | dims                      |
//! |--------|---------------------------|
//! | `TIMG` | rows, cols                |
//! | `TSIN` | views, detectors          |
//!
//! Checkpoints (`RSCN`) carry the version, the model configuration as six
//! `u32` fields, the parameter count, and then for each parameter: name
//! length (`u16`), UTF-8 name, rank (`u8`), dims (`u32` each) and `f32` data.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::projector::{uniform_angles, Grid, Image, ProjectionGeometry, Sinogram};
use crate::redscan::{RedscanConfig, RedscanModel, CA_REDUCTION, DENSE_LAYERS};
use crate::tensor::{Parameter, Tensor};

pub const IMAGE_MAGIC: &[u8; 4] = b"TIMG";
pub const SINOGRAM_MAGIC: &[u8; 4] = b"TSIN";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSCN";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;

/// Largest element count accepted from a file header.
const MAX_ELEMENTS: u64 = 1 << 31;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return format_err(format!("truncated file: needed {n} bytes at offset {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return format_err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return format_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            ));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return format_err(format!("unsupported version {version}"));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, data: impl IntoIterator<Item = f32>) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_2d(magic: &[u8; 4], rows: usize, cols: usize, data: &[f64]) -> Result<Vec<u8>> {
    let (r, c) = (u32::try_from(rows), u32::try_from(cols));
    let (Ok(r), Ok(c)) = (r, c) else {
        return format_err("dimension does not fit in u32");
    };
    let mut out = Vec::with_capacity(HEADER_BYTES + data.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&r.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    put_f32s(&mut out, data.iter().map(|&v| v as f32));
    Ok(out)
}

fn decode_2d(magic: &[u8; 4], bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = Reader::new(bytes);
    r.header(magic)?;
    let rows = r.u32()? as u64;
    let cols = r.u32()? as u64;
    let n = rows * cols;
    if n > MAX_ELEMENTS {
        return format_err(format!("dimensions {rows}x{cols} too large"));
    }
    let data = r.f32s(n as usize)?.into_iter().map(f64::from).collect();
    r.finish()?;
    Ok((rows as usize, cols as usize, data))
}

pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    encode_2d(IMAGE_MAGIC, img.grid.ny, img.grid.nx, &img.data)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let (rows, cols, data) = decode_2d(IMAGE_MAGIC, bytes)?;
    Image::from_data(Grid::new(cols, rows, 1.0)?, data)
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    Ok(fs::write(path, encode_image(img)?)?)
}

pub fn load_image(path: &Path) -> Result<Image> {
    decode_image(&fs::read(path)?)
}

pub fn encode_sinogram(sino: &Sinogram) -> Result<Vec<u8>> {
    encode_2d(SINOGRAM_MAGIC, sino.n_views(), sino.n_detectors(), &sino.data)
}

/// Decodes a sinogram; the geometry is taken as uniform over [0, 180) with
/// unit detector spacing.
pub fn decode_sinogram(bytes: &[u8]) -> Result<Sinogram> {
    let (views, dets, data) = decode_2d(SINOGRAM_MAGIC, bytes)?;
    let geometry = ProjectionGeometry::new(uniform_angles(views), dets, 1.0)?;
    Sinogram::from_data(geometry, data)
}

pub fn save_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    Ok(fs::write(path, encode_sinogram(sino)?)?)
}

pub fn load_sinogram(path: &Path) -> Result<Sinogram> {
    decode_sinogram(&fs::read(path)?)
}

/// Loads a sinogram and attaches `geometry`, which must match its shape.
pub fn load_sinogram_with(path: &Path, geometry: &ProjectionGeometry) -> Result<Sinogram> {
    let (views, dets, data) = decode_2d(SINOGRAM_MAGIC, &fs::read(path)?)?;
    if views != geometry.n_views() || dets != geometry.n_detectors() {
        return Err(Error::Shape(format!(
            "{} holds {views}x{dets}, geometry is {}x{}",
            path.display(),
            geometry.n_views(),
            geometry.n_detectors()
        )));
    }
    Sinogram::from_data(geometry.clone(), data)
}

pub fn encode_checkpoint(model: &RedscanModel<f32>) -> Result<Vec<u8>> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let flags = u32::from(cfg.use_ca) | (u32::from(cfg.use_sa) << 1);
    for v in [
        cfg.n_blocks as u32,
        cfg.base_channels as u32,
        cfg.growth as u32,
        DENSE_LAYERS as u32,
        CA_REDUCTION as u32,
        flags,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        let name = p.name.as_bytes();
        let Ok(len) = u16::try_from(name.len()) else {
            return format_err(format!("parameter name {:?} too long", p.name));
        };
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.tensor.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, p.tensor.data().iter().copied());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RedscanModel<f32>> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC)?;
    let n_blocks = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let growth = r.u32()? as usize;
    let dense = r.u32()? as usize;
    let reduction = r.u32()? as usize;
    let flags = r.u32()?;
    if dense != DENSE_LAYERS || reduction != CA_REDUCTION {
        return format_err(format!(
            "unsupported block layout: {dense} dense layers, reduction {reduction}"
        ));
    }
    let config = RedscanConfig {
        n_blocks,
        base_channels,
        growth,
        use_ca: flags & 1 != 0,
        use_sa: flags & 2 != 0,
    };
    config.validate()?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return format_err(format!("duplicate parameter {name:?}"));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut n: u64 = 1;
        for _ in 0..ndim {
            let d = r.u32()?;
            n = n.saturating_mul(d as u64);
            shape.push(d as usize);
        }
        if n > MAX_ELEMENTS {
            return format_err(format!("parameter {name:?} too large"));
        }
        let data = r.f32s(n as usize)?;
        params.push(Parameter::new(name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    RedscanModel::from_params(config, params)
}

pub fn save_checkpoint(model: &RedscanModel<f32>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RedscanModel<f32>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and requires it to match `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &RedscanConfig) -> Result<RedscanModel<f32>> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(Error::Config(format!(
            "checkpoint config {:?} differs from expected {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}

/// Linear window `[lo, hi]` to 8-bit grey with clipping.
pub fn window_to_u8(img: &Image, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(lo < hi) {
        return Err(Error::Config(format!("display window [{lo}, {hi}] is empty")));
    }
    Ok(img
        .data
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

pub fn export_png(img: &Image, path: &Path, window: (f64, f64)) -> Result<()> {
    let pixels = window_to_u8(img, window.0, window.1)?;
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.grid.nx as u32, img.grid.ny as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_image_data(&pixels)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_from(n: usize, vals: &[f32]) -> Image {
        Image::from_data(Grid::square(n).unwrap(), vals.iter().map(|&v| v as f64).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn image_bytes_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 16)) {
            let img = image_from(4, &vals);
            let bytes = encode_image(&img).unwrap();
            let back = decode_image(&bytes).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode_image(&back).unwrap(), bytes);
        }

        #[test]
        fn sinogram_bytes_round_trip(vals in proptest::collection::vec(-1e3f32..1e3, 3 * 8)) {
            let geom = ProjectionGeometry::new(uniform_angles(3), 8, 1.0).unwrap();
            let s = Sinogram::from_data(geom, vals.iter().map(|&v| v as f64).collect()).unwrap();
            let bytes = encode_sinogram(&s).unwrap();
            prop_assert_eq!(decode_sinogram(&bytes).unwrap(), s);
        }
    }

    #[test]
    fn image_file_size() {
        let img = Image::zeros(Grid::square(64).unwrap());
        assert_eq!(encode_image(&img).unwrap().len(), 16 + 16384);
    }

    #[test]
    fn header_errors() {
        let img = Image::zeros(Grid::square(4).unwrap());
        let mut bytes = encode_image(&img).unwrap();
        assert!(matches!(decode_sinogram(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_image(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        bytes[4] = 2;
        assert!(matches!(decode_image(&bytes), Err(Error::Format(_))));
        let mut huge = encode_image(&img).unwrap();
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_image(&huge), Err(Error::Format(_))));
    }

    #[test]
    fn png_windowing() {
        let grid = Grid::square(4).unwrap();
        let at = |v: f64| window_to_u8(&Image::from_data(grid, vec![v; 16]).unwrap(), 0.0, 1.0).unwrap();
        assert!(at(0.0).iter().all(|&p| p == 0));
        assert!(at(1.0).iter().all(|&p| p == 255));
        assert!(at(0.5).iter().all(|&p| (127..=129).contains(&p)));
        assert!(at(-3.0).iter().all(|&p| p == 0));
        assert!(window_to_u8(&Image::zeros(grid), 1.0, 1.0).is_err());
    }
}
