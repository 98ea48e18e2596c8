//! Little-endian binary raster formats.
//!
//! Every file opens with a 4-byte magic and `u32` dimensions:
//!
//! | magic  | header after magic                  | payload                                      |
//! |--------|-------------------------------------|----------------------------------------------|
//! | `GLR1` | width, height, channels (= 3)       | depth f32, reflectivity f32, rgb u8×3        |
//! | `GLC1` | width, height, num_gates, max_count | u16 counts `[gate][row][col]`                |
//! | `GLM1` | width, height, channels (= 1)       | u8 mask (0/1)                                |
//! | `GLW1` | width, height, field_side           | f32 weights `[row][col][offset]`             |
//! | `GLF1` | width, height, planes               | `planes` f32 rasters                         |
//! | `GLS1` | width, height, num_gates, bitplanes | f32 samples `[gate][row][col]`, u8 validity  |
//!
//! Readers reject truncated files and trailing bytes.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::acquisition::CountCube;
use crate::error::{Error, Result};
use crate::fusion::weights::{FieldGeometry, WeightField};
use crate::preprocess::CleanedCube;
use crate::scene::GroundTruthScene;
use crate::Real;

const SCENE: &[u8; 4] = b"GLR1";
const CUBE: &[u8; 4] = b"GLC1";
const MASK: &[u8; 4] = b"GLM1";
const WEIGHTS: &[u8; 4] = b"GLW1";
const FLOATS: &[u8; 4] = b"GLF1";
const SAMPLES: &[u8; 4] = b"GLS1";

fn fmt_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format { format, reason: reason.into() }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: &'static [u8; 4]) -> Result<(Self, [u32; 3])> {
        let format = std::str::from_utf8(magic).expect("ascii magic");
        let mut r = Reader { cur: Cursor::new(bytes), format };
        let mut m = [0u8; 4];
        r.cur.read_exact(&mut m).map_err(|_| fmt_err(format, "file shorter than header"))?;
        if &m != magic {
            return Err(fmt_err(format, format!("bad magic {:?}", String::from_utf8_lossy(&m))));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?];
        Ok((r, dims))
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LE>().map_err(|_| fmt_err(self.format, "truncated header"))
    }

    /// Fails unless exactly `len` payload bytes remain.
    fn expect_remaining(&self, len: usize) -> Result<()> {
        let have = self.cur.get_ref().len() - self.cur.position() as usize;
        if have != len {
            return Err(fmt_err(
                self.format,
                format!("payload is {have} bytes, header implies {len}"),
            ));
        }
        Ok(())
    }

    fn f32s<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let mut buf = vec![0f32; n];
        self.cur.read_f32_into::<LE>(&mut buf).map_err(|_| fmt_err(self.format, "truncated payload"))?;
        Ok(buf.into_iter().map(|v| T::lit(v as f64)).collect())
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.cur.read_exact(&mut buf).map_err(|_| fmt_err(self.format, "truncated payload"))?;
        Ok(buf)
    }
}

fn header(magic: &[u8; 4], fields: &[u32]) -> Vec<u8> {
    let mut out = magic.to_vec();
    for &f in fields {
        out.write_u32::<LE>(f).expect("vec write");
    }
    out
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::dims(format!("dimension {v} exceeds u32")))
}

fn push_f32s<'a, T: Real>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a T>) {
    for v in values {
        out.write_f32::<LE>(v.to_f32().unwrap_or(f32::NAN)).expect("vec write");
    }
}

fn checked_len(format: &'static str, parts: &[usize]) -> Result<usize> {
    parts
        .iter()
        .try_fold(1usize, |acc, &p| acc.checked_mul(p))
        .ok_or_else(|| fmt_err(format, "header dimensions overflow"))
}

pub fn encode_scene<T: Real>(scene: &GroundTruthScene<T>) -> Result<Vec<u8>> {
    scene.validate()?;
    let (h, w) = scene.dims();
    let mut out = header(SCENE, &[dim_u32(w)?, dim_u32(h)?, 3]);
    push_f32s(&mut out, scene.depth_m.iter());
    push_f32s(&mut out, scene.reflectivity.iter());
    out.extend(scene.rgb.iter());
    Ok(out)
}

pub fn decode_scene<T: Real>(bytes: &[u8]) -> Result<GroundTruthScene<T>> {
    let (mut r, [w, h, ch]) = Reader::open(bytes, SCENE)?;
    if ch != 3 {
        return Err(fmt_err("GLR1", format!("expected 3 channels, header says {ch}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = checked_len("GLR1", &[w, h])?;
    r.expect_remaining(n * 11)?;
    let depth = Array2::from_shape_vec((h, w), r.f32s(n)?).expect("shape");
    let refl = Array2::from_shape_vec((h, w), r.f32s(n)?).expect("shape");
    let rgb = Array3::from_shape_vec((h, w, 3), r.bytes(n * 3)?).expect("shape");
    GroundTruthScene::new(depth, refl, rgb)
}

pub fn encode_cube(cube: &CountCube) -> Result<Vec<u8>> {
    let (k, h, w) = cube.counts.dim();
    let mut out = header(CUBE, &[dim_u32(w)?, dim_u32(h)?, dim_u32(k)?, cube.bitplanes]);
    for &v in cube.counts.iter() {
        out.write_u16::<LE>(v).expect("vec write");
    }
    Ok(out)
}

pub fn decode_cube(bytes: &[u8]) -> Result<CountCube> {
    let (mut r, [w, h, k]) = Reader::open(bytes, CUBE)?;
    let max_count = r.u32()?;
    let (w, h, k) = (w as usize, h as usize, k as usize);
    let n = checked_len("GLC1", &[w, h, k])?;
    r.expect_remaining(n * 2)?;
    let mut counts = vec![0u16; n];
    r.cur.read_u16_into::<LE>(&mut counts).map_err(|_| fmt_err("GLC1", "truncated payload"))?;
    if let Some(bad) = counts.iter().find(|&&c| c as u32 > max_count) {
        return Err(fmt_err("GLC1", format!("count {bad} exceeds max_count {max_count}")));
    }
    Ok(CountCube { counts: Array3::from_shape_vec((k, h, w), counts).expect("shape"), bitplanes: max_count })
}

pub fn encode_mask(mask: &Array2<bool>) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    let mut out = header(MASK, &[dim_u32(w)?, dim_u32(h)?, 1]);
    out.extend(mask.iter().map(|&m| m as u8));
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Array2<bool>> {
    let (mut r, [w, h, ch]) = Reader::open(bytes, MASK)?;
    if ch != 1 {
        return Err(fmt_err("GLM1", format!("expected 1 channel, header says {ch}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = checked_len("GLM1", &[w, h])?;
    r.expect_remaining(n)?;
    let raw = r.bytes(n)?;
    if raw.iter().any(|&b| b > 1) {
        return Err(fmt_err("GLM1", "mask values must be 0 or 1"));
    }
    Ok(Array2::from_shape_vec((h, w), raw.into_iter().map(|b| b == 1).collect()).expect("shape"))
}

pub fn encode_weights<T: Real>(weights: &WeightField<T>) -> Result<Vec<u8>> {
    let (h, w) = weights.dims();
    let mut out = header(WEIGHTS, &[dim_u32(w)?, dim_u32(h)?, dim_u32(weights.field.side())?]);
    push_f32s(&mut out, weights.weights.iter());
    Ok(out)
}

pub fn decode_weights<T: Real>(bytes: &[u8]) -> Result<WeightField<T>> {
    let (mut r, [w, h, side]) = Reader::open(bytes, WEIGHTS)?;
    let field = FieldGeometry::new(side as usize).map_err(|_| fmt_err("GLW1", format!("field side {side} is even")))?;
    let (w, h) = (w as usize, h as usize);
    let n = checked_len("GLW1", &[w, h, field.len()])?;
    r.expect_remaining(n * 4)?;
    let weights = Array3::from_shape_vec((h, w, field.len()), r.f32s(n)?).expect("shape");
    Ok(WeightField { field, weights })
}

/// Stacks same-sized f32 rasters, e.g. depth, intensity and validity.
pub fn encode_planes<T: Real>(planes: &[&Array2<T>]) -> Result<Vec<u8>> {
    let dims = planes.first().map_or((0, 0), |p| p.dim());
    if planes.iter().any(|p| p.dim() != dims) {
        return Err(Error::dims("planes must share one shape"));
    }
    let mut out = header(FLOATS, &[dim_u32(dims.1)?, dim_u32(dims.0)?, dim_u32(planes.len())?]);
    for p in planes {
        push_f32s(&mut out, p.iter());
    }
    Ok(out)
}

pub fn decode_planes<T: Real>(bytes: &[u8]) -> Result<Vec<Array2<T>>> {
    let (mut r, [w, h, count]) = Reader::open(bytes, FLOATS)?;
    let (w, h) = (w as usize, h as usize);
    let n = checked_len("GLF1", &[w, h])?;
    r.expect_remaining(checked_len("GLF1", &[n, count as usize, 4])?)?;
    (0..count).map(|_| Ok(Array2::from_shape_vec((h, w), r.f32s(n)?).expect("shape"))).collect()
}

pub fn encode_cleaned<T: Real>(cube: &CleanedCube<T>, bitplanes: u32) -> Result<Vec<u8>> {
    let (k, h, w) = cube.samples.dim();
    let mut out = header(SAMPLES, &[dim_u32(w)?, dim_u32(h)?, dim_u32(k)?, bitplanes]);
    push_f32s(&mut out, cube.samples.iter());
    out.extend(cube.valid.iter().map(|&v| v as u8));
    Ok(out)
}

/// Returns the cube and the bit-plane count it was acquired with.
pub fn decode_cleaned<T: Real>(bytes: &[u8]) -> Result<(CleanedCube<T>, u32)> {
    let (mut r, [w, h, k]) = Reader::open(bytes, SAMPLES)?;
    let bitplanes = r.u32()?;
    let (w, h, k) = (w as usize, h as usize, k as usize);
    let n = checked_len("GLS1", &[w, h, k])?;
    r.expect_remaining(n * 4 + w * h)?;
    let samples = Array3::from_shape_vec((k, h, w), r.f32s(n)?).expect("shape");
    let valid = Array2::from_shape_vec((h, w), r.bytes(w * h)?.into_iter().map(|b| b != 0).collect()).expect("shape");
    Ok((CleanedCube { samples, valid }, bitplanes))
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn save_scene<T: Real>(scene: &GroundTruthScene<T>, path: &Path) -> Result<()> {
    write_file(path, &encode_scene(scene)?)
}

pub fn load_scene<T: Real>(path: &Path) -> Result<GroundTruthScene<T>> {
    decode_scene(&fs::read(path)?)
}

pub fn save_cube(cube: &CountCube, path: &Path) -> Result<()> {
    write_file(path, &encode_cube(cube)?)
}

pub fn load_cube(path: &Path) -> Result<CountCube> {
    decode_cube(&fs::read(path)?)
}

pub fn save_mask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    write_file(path, &encode_mask(mask)?)
}

pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    decode_mask(&fs::read(path)?)
}
