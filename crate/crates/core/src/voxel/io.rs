//! VOX1 container, little-endian:
//!
//! | bytes  | content                                         |
//! |--------|-------------------------------------------------|
//! | 0..4   | magic `VOX1`                                    |
//! | 4..8   | `u32` resolution R                              |
//! | 8..12  | `u32` flags, bit 0 set for a binary payload     |
//! | 12..16 | reserved, zero                                  |
//! | 16..   | R³ bytes (binary, 0/1) or R³ `f32` (real)       |
//!
//! Cells are stored x-fastest: index `x + R·y + R²·z`.

use std::path::Path;

use super::VoxelGrid;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const VOX_MAGIC: &[u8; 4] = b"VOX1";
pub const VOX_HEADER_LEN: usize = 16;
const FLAG_BINARY: u32 = 1;

impl VoxelGrid {
    /// Binary grids are written with one byte per cell, others as `f32`.
    pub fn to_vox_bytes(&self) -> Vec<u8> {
        let binary = self.is_binary();
        let n = self.len();
        let mut out = Vec::with_capacity(VOX_HEADER_LEN + if binary { n } else { 4 * n });
        out.extend_from_slice(VOX_MAGIC);
        out.extend_from_slice(&(self.resolution() as u32).to_le_bytes());
        out.extend_from_slice(&(if binary { FLAG_BINARY } else { 0 }).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        if binary {
            out.extend(self.values().iter().map(|&v| v as u8));
        } else {
            for &v in self.values() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_vox_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < VOX_HEADER_LEN {
            return Err(Error::Truncated {
                expected: VOX_HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[0..4] != VOX_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?} ({:02x?}), expected \"VOX1\"",
                String::from_utf8_lossy(&bytes[0..4]),
                &bytes[0..4]
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let resolution = word(4) as usize;
        let flags = word(8);
        if word(12) != 0 {
            return Err(Error::Format("reserved header word is nonzero".into()));
        }
        if resolution == 0 || resolution > 1024 {
            return Err(Error::Format(format!("implausible resolution {resolution}")));
        }
        let binary = flags & FLAG_BINARY != 0;
        let cells = resolution.pow(3);
        let expected = VOX_HEADER_LEN + if binary { cells } else { 4 * cells };
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "payload of {} bytes does not match header resolution {resolution} ({} expected)",
                bytes.len() - VOX_HEADER_LEN,
                expected - VOX_HEADER_LEN
            )));
        }
        let payload = &bytes[VOX_HEADER_LEN..];
        let values: Vec<Real> = if binary {
            payload
                .iter()
                .map(|&b| match b {
                    0 => Ok(0.0),
                    1 => Ok(1.0),
                    other => Err(Error::Format(format!("binary cell value {other}"))),
                })
                .collect::<Result<_>>()?
        } else {
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect()
        };
        VoxelGrid::from_values(resolution, values)
            .map_err(|e| Error::Format(format!("invalid cell values: {e}")))
    }
}

pub fn write_vox(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, grid.to_vox_bytes())?;
    Ok(())
}

pub fn read_vox(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    VoxelGrid::from_vox_bytes(&bytes)
}
