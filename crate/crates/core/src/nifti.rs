//! Minimal single-file NIfTI-1 I/O.
//!
//! Covers exactly what the pipeline needs: little-endian `.nii` volumes with a
//! 348-byte header, scalar 3D data, and the `scl_slope`/`scl_inter` scaling
//! applied on read. Images are written as float32, masks as uint8. Arrays are
//! indexed `[x, y, z]` and stored in the file with `x` fastest, as the format
//! prescribes, so round-trips through other tools preserve orientation.
//!
//! Out of scope (rejected with a clear error rather than misread): big-endian
//! files, `.hdr`/`.img` pairs, gzip compression, and non-scalar datatypes.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352; // header + 4-byte extension flag

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn check_plain_nii(path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz")) {
        return Err(Error::format(path, "gzip-compressed NIfTI is not supported; store plain .nii"));
    }
    Ok(())
}

fn header(shape: [usize; 3], datatype: i16, bitpix: i16) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    put_i32(&mut h, 0, HEADER_LEN as i32);
    put_i16(&mut h, 40, 3); // dim[0]: three spatial dimensions
    for (i, &n) in shape.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, n as i16);
    }
    for i in 4..8 {
        put_i16(&mut h, 40 + 2 * i, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0); // pixdim[0] = qfac
    for i in 1..4 {
        put_f32(&mut h, 76 + 4 * i, 1.0); // isotropic unit spacing
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    put_f32(&mut h, 116, 0.0); // scl_inter
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_raw(path: &Path, shape: [usize; 3], datatype: i16, bitpix: i16, data: &[u8]) -> Result<()> {
    check_plain_nii(path)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&header(shape, datatype, bitpix)).map_err(|e| Error::file(path, e))?;
    f.write_all(&[0u8; 4]).map_err(|e| Error::file(path, e))?; // no extensions
    f.write_all(data).map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// Write a float32 image volume.
pub fn write_image(path: &Path, vol: &Array3<f32>) -> Result<()> {
    let (nx, ny, nz) = vol.dim();
    let mut data = Vec::with_capacity(nx * ny * nz * 4);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data.extend_from_slice(&vol[[x, y, z]].to_le_bytes());
            }
        }
    }
    write_raw(path, [nx, ny, nz], DT_FLOAT32, 32, &data)
}

/// Write a uint8 mask volume.
pub fn write_mask(path: &Path, vol: &Array3<u8>) -> Result<()> {
    let (nx, ny, nz) = vol.dim();
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data.push(vol[[x, y, z]]);
            }
        }
    }
    write_raw(path, [nx, ny, nz], DT_UINT8, 8, &data)
}

struct Parsed {
    shape: [usize; 3],
    datatype: i16,
    slope: f32,
    inter: f32,
    data: Vec<u8>,
}

fn parse(path: &Path) -> Result<Parsed> {
    check_plain_nii(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    if bytes.len() < VOX_OFFSET {
        return Err(Error::format(path, format!("file too short ({} bytes)", bytes.len())));
    }
    let size = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if size != HEADER_LEN as i32 {
        if size.swap_bytes() == HEADER_LEN as i32 {
            return Err(Error::format(path, "big-endian NIfTI is not supported"));
        }
        return Err(Error::format(path, format!("not a NIfTI-1 header (sizeof_hdr = {size})")));
    }
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(Error::format(path, ".hdr/.img pairs are not supported")),
        other => {
            return Err(Error::format(path, format!("bad magic {:?}", other)));
        }
    }
    let ndim = get_i16(&bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("bad dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = get_i16(&bytes, 42 + 2 * i);
        if v < 1 {
            return Err(Error::format(path, format!("bad dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::format(path, "volume has more than three non-trivial dimensions"));
    }
    let datatype = get_i16(&bytes, 70);
    let slope = get_f32(&bytes, 112);
    let inter = get_f32(&bytes, 116);
    let vox_offset = get_f32(&bytes, 108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_LEN as f32) {
        return Err(Error::format(path, format!("bad vox_offset {vox_offset}")));
    }
    let off = vox_offset as usize;
    let bpv = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::format(path, format!("unsupported datatype {other}")));
        }
    };
    let n = dims[0] * dims[1] * dims[2];
    if bytes.len() < off + n * bpv {
        return Err(Error::format(
            path,
            format!("truncated data: need {} bytes, have {}", off + n * bpv, bytes.len()),
        ));
    }
    Ok(Parsed {
        shape: [dims[0], dims[1], dims[2]],
        datatype,
        slope,
        inter,
        data: bytes[off..off + n * bpv].to_vec(),
    })
}

/// Read any supported scalar volume as float32, applying `scl_slope`/`scl_inter`.
pub fn read_image(path: &Path) -> Result<Array3<f32>> {
    let p = parse(path)?;
    let [nx, ny, nz] = p.shape;
    let slope = if p.slope == 0.0 { 1.0 } else { p.slope };
    let raw: Vec<f32> = match p.datatype {
        DT_UINT8 => p.data.iter().map(|&b| b as f32).collect(),
        DT_INT16 => p
            .data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        DT_INT32 => p
            .data
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f32)
            .collect(),
        DT_FLOAT32 => p
            .data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DT_FLOAT64 => p
            .data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32)
            .collect(),
        _ => unreachable!("parse() rejects other datatypes"),
    };
    let mut vol = Array3::zeros((nx, ny, nz));
    let mut it = raw.into_iter();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                vol[[x, y, z]] = it.next().unwrap() * slope + p.inter;
            }
        }
    }
    Ok(vol)
}

/// Read a binary mask. Values must be (numerically) 0 or 1 after scaling.
pub fn read_mask(path: &Path) -> Result<Array3<u8>> {
    let img = read_image(path)?;
    let mut out = Array3::zeros(img.dim());
    for (o, &v) in out.iter_mut().zip(img.iter()) {
        if (v - 0.0).abs() < 1e-3 {
            *o = 0;
        } else if (v - 1.0).abs() < 1e-3 {
            *o = 1;
        } else {
            return Err(Error::NonBinaryLabel(v as f64));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn image_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vol.nii");
        let v = Array3::from_shape_fn((5, 4, 3), |(x, y, z)| {
            (x as f32 * 0.37 - y as f32 * 1.25 + z as f32 * 9.5).sin()
        });
        write_image(&p, &v).unwrap();
        let r = read_image(&p).unwrap();
        assert_eq!(v, r);
    }

    #[test]
    fn mask_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.nii");
        let v = Array3::from_shape_fn((4, 5, 6), |(x, y, z)| ((x + y + z) % 2) as u8);
        write_mask(&p, &v).unwrap();
        assert_eq!(read_mask(&p).unwrap(), v);
    }

    #[test]
    fn file_layout_is_x_fastest() {
        // The voxel at [1, 0, 0] must be the second element of the data
        // section; [0, 1, 0] comes nx elements in.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("order.nii");
        let mut v = Array3::<f32>::zeros((3, 3, 3));
        v[[1, 0, 0]] = 1.0;
        v[[0, 1, 0]] = 2.0;
        v[[0, 0, 1]] = 3.0;
        write_image(&p, &v).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let at = |i: usize| {
            let o = 352 + 4 * i;
            f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
        };
        assert_eq!(at(1), 1.0);
        assert_eq!(at(3), 2.0);
        assert_eq!(at(9), 3.0);
    }

    #[test]
    fn scl_scaling_applied_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scaled.nii");
        let v = Array3::from_elem((2, 2, 2), 3.0f32);
        write_image(&p, &v).unwrap();
        // Patch slope/inter in place: slope=2 at 112, inter=-1 at 116.
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        let r = read_image(&p).unwrap();
        assert!(r.iter().all(|&x| x == 5.0));
    }

    #[test]
    fn rejects_garbage_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.nii");
        std::fs::write(&p, b"not a nifti file at all").unwrap();
        assert!(read_image(&p).is_err());
        let gz = dir.path().join("vol.nii.gz");
        let v = Array3::<f32>::zeros((2, 2, 2));
        assert!(write_image(&gz, &v).is_err());
    }

    #[test]
    fn rejects_nonbinary_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.nii");
        let v = Array3::from_elem((2, 2, 2), 0.5f32);
        write_image(&p, &v).unwrap();
        assert!(matches!(read_mask(&p), Err(Error::NonBinaryLabel(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn roundtrip_random_volumes(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..6, seed in 0u32..1000
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.nii");
            let v = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
                let mut h = seed as u64;
                for k in [x, y, z] {
                    h = h.wrapping_mul(6364136223846793005).wrapping_add(k as u64 + 1442695040888963407);
                }
                (h >> 11) as f32 / (1u64 << 53) as f32
            });
            write_image(&p, &v).unwrap();
            prop_assert_eq!(read_image(&p).unwrap(), v);
        }
    }
}
