//! Bit-exact volume file I/O.
//!
//! Two uncompressed little-endian formats are supported:
//!
//! * Minimal NIfTI-1 (`.nii`): single-file, float32 or uint8, no scaling,
//!   no compression. Payload is in NIfTI's native order (first axis
//!   fastest). Gzip and big-endian files are rejected with a clear error.
//! * Raw format (any other extension, conventionally `.sgh`): 32-byte
//!   header `magic "SGH1" | 3 x u32 shape | 3 x f32 spacing | u32 dtype
//!   (0 = float32, 1 = uint8)` followed by the row-major payload (last
//!   axis fastest).
//!
//! `load_volume(write_volume(v))` is the identity on data, spacing and
//! dtype for both formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};
use crate::volume::{Dtype, Volume3D};

const RAW_MAGIC: &[u8; 4] = b"SGH1";
const NIFTI1_HEADER_SIZE: usize = 348;
const NIFTI1_VOX_OFFSET: usize = 352;

/// Load a volume, picking the format from the file contents.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 4];
    file.read_exact(&mut head)
        .map_err(|e| Error::format(path, format!("file shorter than 4 bytes: {e}")))?;

    if &head == RAW_MAGIC {
        return load_raw(path, file);
    }
    if head[0] == 0x1f && head[1] == 0x8b {
        return Err(Error::unsupported(
            path,
            "gzip-compressed volumes are not supported; store uncompressed",
        ));
    }
    if LittleEndian::read_i32(&head) == NIFTI1_HEADER_SIZE as i32 {
        return load_nifti1(path, file);
    }
    if byteorder::BigEndian::read_i32(&head) == NIFTI1_HEADER_SIZE as i32 {
        return Err(Error::unsupported(
            path,
            "big-endian NIfTI-1 is not supported; only little-endian files",
        ));
    }
    Err(Error::format(
        path,
        "unrecognized header (expected SGH1 raw or little-endian NIfTI-1)",
    ))
}

/// Write a volume; `.nii` selects NIfTI-1, anything else the raw format.
pub fn write_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => write_nifti1(v, path),
        Some("gz") => Err(Error::unsupported(
            path,
            "gzip-compressed output is not supported",
        )),
        _ => write_raw(v, path),
    }
}

fn validate_loaded(path: &Path, v: Volume3D) -> Result<Volume3D> {
    if let Some(bad) = v.data.iter().find(|x| !x.is_finite()) {
        return Err(Error::Validation(format!(
            "{}: payload contains non-finite value {bad}",
            path.display()
        )));
    }
    if v.dtype == Dtype::Uint8 && !v.is_binary() {
        return Err(Error::Validation(format!(
            "{}: uint8 mask contains values other than 0 and 1",
            path.display()
        )));
    }
    Ok(v)
}

// ---------------------------------------------------------------- raw format

fn load_raw(path: &Path, file: File) -> Result<Volume3D> {
    let mut r = BufReader::new(file);
    let mut shape = [0usize; 3];
    for s in &mut shape {
        *s = r
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::format(path, format!("truncated raw header: {e}")))?
            as usize;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = r
            .read_f32::<LittleEndian>()
            .map_err(|e| Error::format(path, format!("truncated raw header: {e}")))?;
    }
    let dtype_code = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::format(path, format!("truncated raw header: {e}")))?;
    let dtype = Dtype::from_code(dtype_code)
        .ok_or_else(|| Error::unsupported(path, format!("unknown dtype code {dtype_code}")))?;

    let n = shape[0]
        .checked_mul(shape[1])
        .and_then(|p| p.checked_mul(shape[2]))
        .ok_or_else(|| Error::format(path, "shape product overflows"))?;
    if n == 0 {
        return Err(Error::format(path, "zero-sized volume"));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::format(path, format!("invalid spacing {spacing:?}")));
    }

    let data = read_payload(path, &mut r, n, dtype)?;
    let arr = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
        .expect("length checked against shape");
    validate_loaded(
        path,
        Volume3D {
            data: arr,
            spacing,
            dtype,
        },
    )
}

fn write_raw(v: &Volume3D, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(RAW_MAGIC).map_err(io)?;
    for &s in &v.shape() {
        w.write_u32::<LittleEndian>(s as u32).map_err(io)?;
    }
    for &s in &v.spacing {
        w.write_f32::<LittleEndian>(s).map_err(io)?;
    }
    w.write_u32::<LittleEndian>(v.dtype.code()).map_err(io)?;
    write_values(&mut w, v.data.iter().copied(), v.dtype).map_err(io)?;
    w.flush().map_err(io)
}

// ------------------------------------------------------------------- NIfTI-1

fn nifti_dtype_code(dtype: Dtype) -> i16 {
    match dtype {
        Dtype::Uint8 => 2,
        Dtype::Float32 => 16,
    }
}

fn load_nifti1(path: &Path, mut file: File) -> Result<Volume3D> {
    let mut header = vec![0u8; NIFTI1_HEADER_SIZE];
    header[..4].copy_from_slice(&(NIFTI1_HEADER_SIZE as i32).to_le_bytes());
    file.read_exact(&mut header[4..])
        .map_err(|e| Error::format(path, format!("truncated NIfTI-1 header: {e}")))?;

    let magic = &header[344..348];
    if magic != b"n+1\0" {
        return Err(Error::format(
            path,
            format!("bad NIfTI-1 magic {magic:?}; only single-file n+1 supported"),
        ));
    }

    let ndim = LittleEndian::read_i16(&header[40..42]);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("ndim {ndim} outside 1..=7")));
    }
    let mut dim = [1usize; 7];
    for (i, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let raw = LittleEndian::read_i16(&header[42 + 2 * i..44 + 2 * i]);
        if raw < 1 {
            return Err(Error::format(path, format!("dimension {i} is {raw}")));
        }
        *d = raw as usize;
    }
    if dim[3..].iter().any(|&d| d != 1) {
        return Err(Error::unsupported(
            path,
            "only 3D volumes supported (higher dimensions must be 1)",
        ));
    }
    let shape = [dim[0], dim[1], dim[2]];

    let dt_code = LittleEndian::read_i16(&header[70..72]);
    let dtype = match dt_code {
        2 => Dtype::Uint8,
        16 => Dtype::Float32,
        other => {
            return Err(Error::unsupported(
                path,
                format!("NIfTI datatype {other}; only uint8 (2) and float32 (16)"),
            ))
        }
    };

    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = LittleEndian::read_f32(&header[80 + 4 * i..84 + 4 * i]);
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::format(path, format!("invalid pixdim {spacing:?}")));
    }

    let scl_slope = LittleEndian::read_f32(&header[112..116]);
    let scl_inter = LittleEndian::read_f32(&header[116..120]);
    if !(scl_slope == 0.0 || scl_slope == 1.0) || scl_inter != 0.0 {
        return Err(Error::unsupported(
            path,
            format!("data scaling (slope {scl_slope}, inter {scl_inter}) not supported"),
        ));
    }

    let vox_offset = LittleEndian::read_f32(&header[108..112]);
    if !vox_offset.is_finite() || vox_offset < NIFTI1_HEADER_SIZE as f32 || vox_offset.fract() != 0.0
    {
        return Err(Error::format(path, format!("bad vox_offset {vox_offset}")));
    }
    let skip = vox_offset as usize - NIFTI1_HEADER_SIZE;
    let mut r = BufReader::new(file);
    if skip > 0 {
        let mut gap = vec![0u8; skip];
        r.read_exact(&mut gap)
            .map_err(|e| Error::format(path, format!("truncated before payload: {e}")))?;
    }

    let n = shape[0] * shape[1] * shape[2];
    let data = read_payload(path, &mut r, n, dtype)?;
    // NIfTI payload has the first axis fastest.
    let arr = Array3::from_shape_vec((shape[0], shape[1], shape[2]).f(), data)
        .expect("length checked against shape")
        .as_standard_layout()
        .to_owned();
    validate_loaded(
        path,
        Volume3D {
            data: arr,
            spacing,
            dtype,
        },
    )
}

fn write_nifti1(v: &Volume3D, path: &Path) -> Result<()> {
    let mut header = vec![0u8; NIFTI1_VOX_OFFSET];
    LittleEndian::write_i32(&mut header[0..4], NIFTI1_HEADER_SIZE as i32);
    let shape = v.shape();
    LittleEndian::write_i16(&mut header[40..42], 3);
    for (i, &d) in shape.iter().enumerate() {
        if d > i16::MAX as usize {
            return Err(Error::Validation(format!(
                "dimension {d} exceeds NIfTI-1 limit {}",
                i16::MAX
            )));
        }
        LittleEndian::write_i16(&mut header[42 + 2 * i..44 + 2 * i], d as i16);
    }
    for i in shape.len()..7 {
        LittleEndian::write_i16(&mut header[42 + 2 * i..44 + 2 * i], 1);
    }
    LittleEndian::write_i16(&mut header[70..72], nifti_dtype_code(v.dtype));
    let bitpix: i16 = match v.dtype {
        Dtype::Uint8 => 8,
        Dtype::Float32 => 32,
    };
    LittleEndian::write_i16(&mut header[72..74], bitpix);
    LittleEndian::write_f32(&mut header[76..80], 1.0); // qfac
    for (i, &s) in v.spacing.iter().enumerate() {
        LittleEndian::write_f32(&mut header[80 + 4 * i..84 + 4 * i], s);
    }
    LittleEndian::write_f32(&mut header[108..112], NIFTI1_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut header[112..116], 1.0); // scl_slope
    header[123] = 2; // spatial units: mm
    LittleEndian::write_i16(&mut header[254..256], 1); // sform_code
    LittleEndian::write_f32(&mut header[280..284], v.spacing[0]);
    LittleEndian::write_f32(&mut header[300..304], v.spacing[1]);
    LittleEndian::write_f32(&mut header[320..324], v.spacing[2]);
    header[344..348].copy_from_slice(b"n+1\0");

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&header).map_err(io)?;
    // First axis fastest on disk.
    let (nx, ny, nz) = v.data.dim();
    let values = (0..nz).flat_map(move |k| {
        (0..ny).flat_map(move |j| (0..nx).map(move |i| v.data[[i, j, k]]))
    });
    write_values(&mut w, values, v.dtype).map_err(io)?;
    w.flush().map_err(io)
}

// ------------------------------------------------------------------ payloads

fn read_payload(
    path: &Path,
    r: &mut impl Read,
    n: usize,
    dtype: Dtype,
) -> Result<Vec<f32>> {
    let elem = match dtype {
        Dtype::Float32 => 4,
        Dtype::Uint8 => 1,
    };
    let mut bytes = vec![0u8; n * elem];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format(path, format!("payload shorter than {n} voxels: {e}")))?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::format(
                path,
                format!("trailing bytes after {n}-voxel payload"),
            ))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    let data = match dtype {
        Dtype::Float32 => bytes
            .chunks_exact(4)
            .map(LittleEndian::read_f32)
            .collect::<Vec<_>>(),
        Dtype::Uint8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    Ok(data)
}

fn write_values(
    w: &mut impl Write,
    values: impl Iterator<Item = f32>,
    dtype: Dtype,
) -> std::io::Result<()> {
    match dtype {
        Dtype::Float32 => {
            for v in values {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Dtype::Uint8 => {
            for v in values {
                debug_assert!(v == 0.0 || v == 1.0);
                w.write_u8(v as u8)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    fn sample(dtype: Dtype) -> Volume3D {
        let data = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| match dtype {
            Dtype::Float32 => (i as f32 * 0.37 + j as f32 * 1.21 - k as f32 * 0.05).sin(),
            Dtype::Uint8 => ((i + j + k) % 2) as f32,
        });
        Volume3D {
            data,
            spacing: [1.0, 0.75, 1.25],
            dtype,
        }
    }

    #[test]
    fn raw_roundtrip_is_bit_identical() {
        let dir = tempdir().unwrap();
        for dtype in [Dtype::Float32, Dtype::Uint8] {
            let v = sample(dtype);
            let path = dir.path().join("v.sgh");
            write_volume(&v, &path).unwrap();
            let back = load_volume(&path).unwrap();
            assert_eq!(back.dtype, v.dtype);
            assert_eq!(back.spacing, v.spacing);
            assert_eq!(back.data, v.data);
        }
    }

    #[test]
    fn nifti_roundtrip_is_bit_identical() {
        let dir = tempdir().unwrap();
        for dtype in [Dtype::Float32, Dtype::Uint8] {
            let v = sample(dtype);
            let path = dir.path().join("v.nii");
            write_volume(&v, &path).unwrap();
            let back = load_volume(&path).unwrap();
            assert_eq!(back.dtype, v.dtype);
            assert_eq!(back.spacing, v.spacing);
            assert_eq!(back.data, v.data);
        }
    }

    #[test]
    fn uint8_mask_of_ones_loads_as_ones() {
        let dir = tempdir().unwrap();
        let v = Volume3D {
            data: Array3::from_elem((4, 4, 4), 1.0),
            spacing: [2.0, 2.0, 2.0],
            dtype: Dtype::Uint8,
        };
        let path = dir.path().join("ones.nii");
        write_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.num_voxels(), 64);
        assert!(back.data.iter().all(|&x| x == 1.0));
        assert_eq!(back.spacing, [2.0, 2.0, 2.0]);
    }

    #[test]
    fn nan_payload_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.sgh");
        // Bypass Volume3D validation by writing bytes directly.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(RAW_MAGIC);
        for d in [2u32, 1, 1] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for s in [1.0f32, 1.0, 1.0] {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn gzip_is_rejected_with_unsupported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.nii");
        std::fs::write(&path, [0x1f, 0x8b, 0x08, 0x00, 0, 0, 0, 0]).unwrap();
        assert!(matches!(
            load_volume(&path),
            Err(Error::UnsupportedFormat { .. })
        ));
    }

    #[test]
    fn garbage_header_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.bin");
        std::fs::write(&path, b"not a volume at all").unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn unsupported_nifti_datatype() {
        let dir = tempdir().unwrap();
        let v = sample(Dtype::Float32);
        let path = dir.path().join("v.nii");
        write_volume(&v, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        LittleEndian::write_i16(&mut bytes[70..72], 64); // float64
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_volume(&path),
            Err(Error::UnsupportedFormat { .. })
        ));
    }
}
