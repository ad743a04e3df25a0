//! File formats: TIFF masks and float images, JSON sidecars, atomic writes.
//!
//! 3D volumes are stored as multi-page TIFFs, one page per `z` slice.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};

use crate::tensor::{validate_shape, ImageTensor, LabelMask, ValueRange};
use crate::{Error, Result};

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partially written file. Parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    if let Err(e) = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn tiff_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Tiff {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// `(pages, height, width)` of a rank-2 or rank-3 shape.
fn pages(shape: &[usize]) -> Result<(usize, u32, u32)> {
    validate_shape(shape)?;
    let (d, h, w) = match *shape {
        [h, w] => (1, h, w),
        [d, h, w] => (d, h, w),
        _ => unreachable!("validated rank"),
    };
    let to32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::InvalidParameter(format!("edge {v} too large for TIFF")))
    };
    Ok((d, to32(h)?, to32(w)?))
}

fn encode<C>(path: &Path, shape: &[usize], data: &[C::Inner]) -> Result<()>
where
    C: colortype::ColorType,
    [C::Inner]: tiff::encoder::TiffValue,
{
    let (d, h, w) = pages(shape)?;
    let plane = h as usize * w as usize;
    let mut buf = Cursor::new(Vec::new());
    {
        let mut enc = TiffEncoder::new(&mut buf).map_err(|e| tiff_err(path, e))?;
        for z in 0..d {
            enc.write_image::<C>(w, h, &data[z * plane..(z + 1) * plane])
                .map_err(|e| tiff_err(path, e))?;
        }
    }
    write_atomic(path, buf.get_ref())
}

/// 16-bit unsigned label TIFF.
pub fn write_mask_tiff(path: &Path, mask: &LabelMask) -> Result<()> {
    encode::<colortype::Gray16>(path, mask.shape(), mask.labels())
}

/// 32-bit float TIFF.
pub fn write_float_tiff(path: &Path, image: &ImageTensor) -> Result<()> {
    let data: Vec<f32> = image.data().iter().map(|&v| v as f32).collect();
    encode::<colortype::Gray32Float>(path, image.shape(), &data)
}

/// Decoded single-channel TIFF stack.
#[derive(Debug, Clone, PartialEq)]
pub enum TiffData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TiffData {
    pub fn dtype(&self) -> &'static str {
        match self {
            TiffData::U8(_) => "u8",
            TiffData::U16(_) => "u16",
            TiffData::F32(_) => "f32",
            TiffData::F64(_) => "f64",
        }
    }

    fn to_f64(&self) -> Vec<f64> {
        match self {
            TiffData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TiffData::U16(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TiffData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TiffData::F64(v) => v.clone(),
        }
    }
}

/// Reads every page of a grayscale TIFF. One page gives a 2D shape, several
/// equally sized pages a 3D shape.
pub fn read_tiff(path: &Path) -> Result<(Vec<usize>, TiffData)> {
    let file = fs::File::open(path)?;
    let mut dec = Decoder::new(std::io::BufReader::new(file))
        .map_err(|e| tiff_err(path, e))?
        .with_limits(Limits::unlimited());
    let mut data: Option<TiffData> = None;
    let mut dims = None;
    let mut count = 0usize;
    loop {
        let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
        if *dims.get_or_insert((w, h)) != (w, h) {
            return Err(tiff_err(path, "pages differ in size"));
        }
        let page = dec.read_image().map_err(|e| tiff_err(path, e))?;
        let expected = w as usize * h as usize;
        let mismatch = || tiff_err(path, "mixed sample types or multi-channel data");
        match (&mut data, page) {
            (None, DecodingResult::U8(v)) if v.len() == expected => data = Some(TiffData::U8(v)),
            (None, DecodingResult::U16(v)) if v.len() == expected => data = Some(TiffData::U16(v)),
            (None, DecodingResult::F32(v)) if v.len() == expected => data = Some(TiffData::F32(v)),
            (None, DecodingResult::F64(v)) if v.len() == expected => data = Some(TiffData::F64(v)),
            (Some(TiffData::U8(a)), DecodingResult::U8(v)) if v.len() == expected => a.extend(v),
            (Some(TiffData::U16(a)), DecodingResult::U16(v)) if v.len() == expected => a.extend(v),
            (Some(TiffData::F32(a)), DecodingResult::F32(v)) if v.len() == expected => a.extend(v),
            (Some(TiffData::F64(a)), DecodingResult::F64(v)) if v.len() == expected => a.extend(v),
            (None, _) => return Err(tiff_err(path, "unsupported sample type (need single-channel u8/u16/f32/f64)")),
            _ => return Err(mismatch()),
        }
        count += 1;
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| tiff_err(path, e))?;
    }
    let (w, h) = dims.expect("at least one page");
    let shape = if count == 1 {
        vec![h as usize, w as usize]
    } else {
        vec![count, h as usize, w as usize]
    };
    Ok((shape, data.expect("at least one page")))
}

/// Reads an integer label TIFF (u8 or u16).
pub fn read_mask_tiff(path: &Path) -> Result<LabelMask> {
    let (shape, data) = read_tiff(path)?;
    let labels = match data {
        TiffData::U16(v) => v,
        TiffData::U8(v) => v.into_iter().map(u16::from).collect(),
        other => {
            return Err(tiff_err(
                path,
                format!("label masks must be u8 or u16, found {}", other.dtype()),
            ))
        }
    };
    LabelMask::new(shape, labels)
}

/// Reads any supported TIFF as a float image without rescaling.
pub fn read_image_tiff(path: &Path, range: ValueRange) -> Result<ImageTensor> {
    let (shape, data) = read_tiff(path)?;
    ImageTensor::new(shape, data.to_f64(), range).map_err(|e| tiff_err(path, e))
}
