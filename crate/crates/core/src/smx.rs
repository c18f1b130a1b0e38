//! `SMX1` binary matrix container.
//!
//! Layout: the 4-byte magic `SMX1`, three little-endian `u32` values
//! (`nx`, `nz`, `n_columns`), then `nx·nz·n_columns` little-endian `f64`
//! values stored column by column. Each column is one field on the grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, RomError};

pub const MAGIC: &[u8; 4] = b"SMX1";

/// Column-major stack of grid fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SmxMatrix {
    pub nx: u32,
    pub nz: u32,
    pub columns: Vec<Vec<f64>>,
}

impl SmxMatrix {
    pub fn new(nx: u32, nz: u32, columns: Vec<Vec<f64>>) -> Result<Self> {
        let len = nx as usize * nz as usize;
        if let Some(c) = columns.iter().find(|c| c.len() != len) {
            return Err(RomError::InvalidInput(format!(
                "column of length {} does not match grid {nx}x{nz}",
                c.len()
            )));
        }
        Ok(Self { nx, nz, columns })
    }

    pub fn rows(&self) -> usize {
        self.nx as usize * self.nz as usize
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.nx.to_le_bytes())?;
        w.write_all(&self.nz.to_le_bytes())?;
        let n = u32::try_from(self.columns.len())
            .map_err(|_| RomError::InvalidInput("too many columns for SMX".into()))?;
        w.write_all(&n.to_le_bytes())?;
        for col in &self.columns {
            for v in col {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, origin: &str) -> Result<Self> {
        let bad = |reason: &str| RomError::Format {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(word))
        };
        let nx = next_u32(&mut r)?;
        let nz = next_u32(&mut r)?;
        let n = next_u32(&mut r)?;
        let rows = nx as usize * nz as usize;
        let mut columns = Vec::with_capacity(n as usize);
        let mut buf = vec![0u8; rows * 8];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
            columns.push(
                buf.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect(),
            );
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self { nx, nz, columns })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(
            BufReader::new(File::open(path)?),
            &path.display().to_string(),
        )
    }
}
