//! Single-file NIfTI-1 reader/writer.
//!
//! Supports the subset the pipeline ingests: `.nii` with float32 or int16
//! data, either endianness, `scl_slope`/`scl_inter` applied on load. The
//! writer always emits little-endian float32 with identity scaling, so a
//! save/load round trip is bit-exact.
//!
//! In-memory order is (X, Y, Z, Q) with Q fastest; NIfTI files store X
//! fastest, so IO transposes.

use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::Volume4;

const HEADER_SIZE: usize = 348;
const MAGIC_OFFSET: usize = 344;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Loads a 3D or 4D volume; 3D files come back with Q = 1.
pub fn load_nifti(path: &Path) -> Result<Volume4> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < HEADER_SIZE + 4 {
        return Err(Error::Format(format!(
            "{}: file too small for a NIfTI-1 header",
            path.display()
        )));
    }
    let magic = &bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4];
    if magic != b"n+1\0" {
        return Err(Error::Format(format!(
            "{}: magic 'n+1\\0' absent (single-file NIfTI-1 required)",
            path.display()
        )));
    }
    let sizeof_hdr_le = LittleEndian::read_i32(&bytes[0..4]);
    let big_endian = match sizeof_hdr_le {
        348 => false,
        _ if BigEndian::read_i32(&bytes[0..4]) == 348 => true,
        other => {
            return Err(Error::Format(format!(
                "{}: sizeof_hdr = {other}, expected 348 in either byte order",
                path.display()
            )))
        }
    };
    let rd_i16 = |off: usize| -> i16 {
        if big_endian {
            BigEndian::read_i16(&bytes[off..off + 2])
        } else {
            LittleEndian::read_i16(&bytes[off..off + 2])
        }
    };
    let rd_f32 = |off: usize| -> f32 {
        if big_endian {
            BigEndian::read_f32(&bytes[off..off + 4])
        } else {
            LittleEndian::read_f32(&bytes[off..off + 4])
        }
    };

    let ndim = rd_i16(40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::Unsupported(format!(
            "{}: {ndim}-dimensional image, expected 3 or 4",
            path.display()
        )));
    }
    let nx = rd_i16(42).max(1) as usize;
    let ny = rd_i16(44).max(1) as usize;
    let nz = rd_i16(46).max(1) as usize;
    let nq = if ndim == 4 { rd_i16(48).max(1) as usize } else { 1 };

    let datatype = rd_i16(70);
    let scl_slope = rd_f32(112) as f64;
    let scl_inter = rd_f32(116) as f64;
    let vox_offset = rd_f32(108) as usize;
    let data_start = vox_offset.max(HEADER_SIZE + 4);

    let n_voxels = nx * ny * nz * nq;
    let elem_size = match datatype {
        DT_FLOAT32 => 4,
        DT_INT16 => 2,
        other => {
            return Err(Error::Unsupported(format!(
                "{}: datatype {other} (only float32 and int16 are supported)",
                path.display()
            )))
        }
    };
    if bytes.len() < data_start + n_voxels * elem_size {
        return Err(Error::Format(format!(
            "{}: data section truncated ({} voxels expected)",
            path.display(),
            n_voxels
        )));
    }
    let raw = &bytes[data_start..data_start + n_voxels * elem_size];
    let apply_scaling = scl_slope != 0.0 && !(scl_slope == 1.0 && scl_inter == 0.0);
    let scaled = |v: f64| -> f64 {
        if apply_scaling {
            scl_slope * v + scl_inter
        } else {
            v
        }
    };

    // file order: x fastest, then y, z, q
    let mut data = vec![0f64; n_voxels];
    let mut file_idx = 0usize;
    for q in 0..nq {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = match (datatype, big_endian) {
                        (DT_FLOAT32, false) => {
                            scaled(LittleEndian::read_f32(&raw[file_idx * 4..]) as f64)
                        }
                        (DT_FLOAT32, true) => {
                            scaled(BigEndian::read_f32(&raw[file_idx * 4..]) as f64)
                        }
                        (DT_INT16, false) => {
                            scaled(LittleEndian::read_i16(&raw[file_idx * 2..]) as f64)
                        }
                        (DT_INT16, true) => {
                            scaled(BigEndian::read_i16(&raw[file_idx * 2..]) as f64)
                        }
                        _ => unreachable!(),
                    };
                    data[((x * ny + y) * nz + z) * nq + q] = v;
                    file_idx += 1;
                }
            }
        }
    }
    Volume4::new([nx, ny, nz, nq], data)
}

/// Writes little-endian float32 with identity scaling and `vox_offset` 352.
pub fn save_nifti(vol: &Volume4, path: &Path) -> Result<()> {
    let [nx, ny, nz, nq] = vol.shape;
    let mut header = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut header[0..4], 348);
    header[38] = b'r'; // regular
    let ndim: i16 = if nq > 1 { 4 } else { 3 };
    let dims = [ndim, nx as i16, ny as i16, nz as i16, nq as i16, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut header[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut header[70..], DT_FLOAT32);
    LittleEndian::write_i16(&mut header[72..], 32); // bitpix
    for i in 0..8 {
        LittleEndian::write_f32(&mut header[76 + 4 * i..], 1.0); // pixdim
    }
    LittleEndian::write_f32(&mut header[108..], 352.0); // vox_offset
    LittleEndian::write_f32(&mut header[112..], 1.0); // scl_slope
    LittleEndian::write_f32(&mut header[116..], 0.0); // scl_inter
    header[MAGIC_OFFSET..MAGIC_OFFSET + 4].copy_from_slice(b"n+1\0");

    let mut body = vec![0u8; nx * ny * nz * nq * 4];
    let mut file_idx = 0usize;
    for q in 0..nq {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = vol.data[((x * ny + y) * nz + z) * nq + q] as f32;
                    LittleEndian::write_f32(&mut body[file_idx * 4..], v);
                    file_idx += 1;
                }
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&header)?;
    f.write_all(&[0u8; 4])?; // extension indicator
    f.write_all(&body)?;
    Ok(())
}
