//! Minimal single-file NIfTI-1 reader and writer.
//!
//! Covers what the BraTS distribution uses: 3D volumes (a trailing
//! singleton 4th dimension is accepted), scalar voxel types, either byte
//! order on read, optional gzip compression, and sform/qform affines.
//! Files are always written little-endian with an sform affine.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// Voxel payload in file order (first index fastest).
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

/// A decoded 3D NIfTI image.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Voxel index to world (mm) mapping, row-major 4x4.
    pub affine: [[f64; 4]; 4],
    /// Scaled voxel values in file order (first index fastest).
    pub values: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl HeaderReader<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[at..at + N]);
        if let Endian::Big = self.endian {
            out.reverse();
        }
        out
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.raw(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.raw(at))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn quaternion_affine(h: &HeaderReader<'_>, pixdim: &[f64; 8]) -> [[f64; 4]; 4] {
    let b = h.f32(256) as f64;
    let c = h.f32(260) as f64;
    let d = h.f32(264) as f64;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let r = [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        ],
    ];
    let scale = [pixdim[1], pixdim[2], pixdim[3] * qfac];
    let offset = [h.f32(268) as f64, h.f32(272) as f64, h.f32(276) as f64];
    let mut m = [[0.0; 4]; 4];
    for row in 0..3 {
        for col in 0..3 {
            m[row][col] = r[row][col] * scale[col];
        }
        m[row][3] = offset[row];
    }
    m[3][3] = 1.0;
    m
}

/// Reads a `.nii` or `.nii.gz` file.
pub fn read(path: &Path) -> Result<NiftiImage> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::nifti(path, "file shorter than a NIfTI-1 header"));
    }
    let endian = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => Endian::Little,
        (_, 348) => Endian::Big,
        _ => return Err(Error::nifti(path, "sizeof_hdr is not 348")),
    };
    let h = HeaderReader {
        bytes: &bytes,
        endian,
    };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::nifti(path, "missing single-file magic n+1"));
    }

    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::nifti(path, format!("invalid dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (i, dim) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = h.i16(42 + 2 * i as usize);
        if v < 1 {
            return Err(Error::nifti(path, format!("invalid dim[{}] = {v}", i + 1)));
        }
        *dim = v as usize;
    }
    if dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::nifti(path, format!("not a 3D volume: dims {dims:?}")));
    }
    let shape = [dims[0], dims[1], dims[2]];

    let mut pixdim = [0.0f64; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = h.f32(76 + 4 * i) as f64;
    }
    let spacing = [
        pixdim[1].abs().max(f64::MIN_POSITIVE),
        pixdim[2].abs().max(f64::MIN_POSITIVE),
        pixdim[3].abs().max(f64::MIN_POSITIVE),
    ];

    let sform_code = h.i16(254);
    let qform_code = h.i16(252);
    let affine = if sform_code > 0 {
        let mut m = [[0.0; 4]; 4];
        for (row, base) in [280usize, 296, 312].into_iter().enumerate() {
            for col in 0..4 {
                m[row][col] = h.f32(base + 4 * col) as f64;
            }
        }
        m[3][3] = 1.0;
        m
    } else if qform_code > 0 {
        quaternion_affine(&h, &pixdim)
    } else {
        let mut m = [[0.0; 4]; 4];
        for (axis, s) in spacing.iter().enumerate() {
            m[axis][axis] = *s;
        }
        m[3][3] = 1.0;
        m
    };

    let datatype = h.i16(70);
    let vox_offset = h.f32(108) as usize;
    let (slope, inter) = {
        let s = h.f32(112) as f64;
        let i = h.f32(116) as f64;
        if s == 0.0 || !s.is_finite() {
            (1.0, 0.0)
        } else {
            (s, if i.is_finite() { i } else { 0.0 })
        }
    };
    let count = shape.iter().product::<usize>();
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::nifti(
                path,
                format!("unsupported datatype code {other}"),
            ))
        }
    };
    let start = vox_offset.max(HEADER_SIZE);
    let end = start + count * width;
    if bytes.len() < end {
        return Err(Error::nifti(
            path,
            format!("truncated voxel data: need {end} bytes, have {}", bytes.len()),
        ));
    }
    let raw = &bytes[start..end];
    let little = matches!(endian, Endian::Little);
    macro_rules! decode {
        ($t:ty, $n:expr) => {
            raw.chunks_exact($n)
                .map(|c| {
                    let arr: [u8; $n] = c.try_into().unwrap();
                    let v = if little {
                        <$t>::from_le_bytes(arr)
                    } else {
                        <$t>::from_be_bytes(arr)
                    };
                    v as f64
                })
                .collect::<Vec<f64>>()
        };
    }
    let mut values = match datatype {
        DT_UINT8 => raw.iter().map(|&b| b as f64).collect(),
        DT_INT8 => raw.iter().map(|&b| b as i8 as f64).collect(),
        DT_INT16 => decode!(i16, 2),
        DT_UINT16 => decode!(u16, 2),
        DT_INT32 => decode!(i32, 4),
        DT_UINT32 => decode!(u32, 4),
        DT_FLOAT32 => decode!(f32, 4),
        _ => decode!(f64, 8),
    };
    if slope != 1.0 || inter != 0.0 {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage {
        shape,
        spacing,
        affine,
        values,
    })
}

fn put<const N: usize>(buf: &mut [u8], at: usize, bytes: [u8; N]) {
    buf[at..at + N].copy_from_slice(&bytes);
}

/// Writes a 3D image. Gzip compression is used when the file name ends in `.gz`.
pub fn write(
    path: &Path,
    shape: [usize; 3],
    spacing: [f64; 3],
    affine: &[[f64; 4]; 4],
    data: &VoxelData,
) -> Result<()> {
    let count: usize = shape.iter().product();
    let (datatype, bitpix, payload): (i16, i16, Vec<u8>) = match data {
        VoxelData::U8(v) => {
            assert_eq!(v.len(), count);
            (DT_UINT8, 8, v.clone())
        }
        VoxelData::F32(v) => {
            assert_eq!(v.len(), count);
            (
                DT_FLOAT32,
                32,
                v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            )
        }
    };
    for (axis, &n) in shape.iter().enumerate() {
        if n == 0 || n > i16::MAX as usize {
            return Err(Error::nifti(
                path,
                format!("dimension {axis} of size {n} cannot be stored"),
            ));
        }
    }

    let mut header = vec![0u8; DATA_OFFSET];
    put(&mut header, 0, 348i32.to_le_bytes());
    put(&mut header, 38, [b'r']);
    put(&mut header, 40, 3i16.to_le_bytes());
    for (i, &n) in shape.iter().enumerate() {
        put(&mut header, 42 + 2 * i, (n as i16).to_le_bytes());
    }
    for i in 3..7 {
        put(&mut header, 42 + 2 * i, 1i16.to_le_bytes());
    }
    put(&mut header, 70, datatype.to_le_bytes());
    put(&mut header, 72, bitpix.to_le_bytes());
    put(&mut header, 76, 1f32.to_le_bytes());
    for (i, &s) in spacing.iter().enumerate() {
        put(&mut header, 80 + 4 * i, (s as f32).to_le_bytes());
    }
    put(&mut header, 108, (DATA_OFFSET as f32).to_le_bytes());
    put(&mut header, 112, 1f32.to_le_bytes());
    // spatial units: millimetres
    put(&mut header, 123, [2u8]);
    let descrip = b"cascade-unet";
    header[148..148 + descrip.len()].copy_from_slice(descrip);
    put(&mut header, 254, 1i16.to_le_bytes());
    for (row, base) in [280usize, 296, 312].into_iter().enumerate() {
        for col in 0..4 {
            put(&mut header, base + 4 * col, (affine[row][col] as f32).to_le_bytes());
        }
    }
    header[344..348].copy_from_slice(b"n+1\0");

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let result = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(&header)
            .and_then(|_| enc.write_all(&payload))
            .and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&header)
            .and_then(|_| w.write_all(&payload))
            .and_then(|_| w.flush())
    };
    result.map_err(|e| Error::io(path, e))
}
