//! SGF1, a little binary container for grid functions.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! bytes 0..4    magic "SGF1"
//! u32           N    spatial dimension
//! u32           M    components
//! u32 * N       dims index box extents, axis 0 first
//! f64           h    cell spacing
//! bytes         mask bitset, one bit per box cell in row-major order,
//!               LSB-first within each byte, padded to a whole byte
//! f64 * (#masked * M)   values of masked cells in row-major cell order,
//!                       components interleaved per cell
//! ```
//!
//! The header carries no physical origin; readers supply one (or center the
//! box on the coordinate origin), and pipelines that need exact placement
//! keep a JSON sidecar with the domain description.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{DomainSpec, GridDomain, GridError, GridFunction};

pub const MAGIC: [u8; 4] = *b"SGF1";

#[derive(Debug, Error)]
pub enum Sgf1Error {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"SGF1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported dimension {0}")]
    BadDimension(u32),
    #[error("component count must be positive")]
    NoComponents,
    #[error("trailing bytes after the value block")]
    TrailingData,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("origin has {got} coordinates, dimension is {expected}")]
    OriginLength { got: usize, expected: usize },
}

/// Decoded file prior to domain reconstruction.
#[derive(Debug, Clone)]
pub struct RawSgf1 {
    pub dims: Vec<usize>,
    pub m: usize,
    pub h: f64,
    pub mask: Vec<bool>,
    pub masked_values: Vec<f64>,
}

pub fn write(out: &mut impl Write, u: &GridFunction) -> io::Result<()> {
    let dom = u.domain();
    out.write_all(&MAGIC)?;
    out.write_all(&(dom.dim() as u32).to_le_bytes())?;
    out.write_all(&(u.components() as u32).to_le_bytes())?;
    for &d in dom.dims() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    out.write_all(&dom.spacing().to_le_bytes())?;
    let cells = dom.cells();
    let mut bits = vec![0u8; cells.div_ceil(8)];
    for c in 0..cells {
        if dom.is_masked(c) {
            bits[c / 8] |= 1 << (c % 8);
        }
    }
    out.write_all(&bits)?;
    for c in 0..cells {
        if dom.is_masked(c) {
            for k in 0..u.components() {
                out.write_all(&u.value(c, k).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read(inp: &mut impl Read) -> Result<RawSgf1, Sgf1Error> {
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Sgf1Error::BadMagic(magic));
    }
    let n = read_u32(inp)?;
    if n == 0 || n > 3 {
        return Err(Sgf1Error::BadDimension(n));
    }
    let m = read_u32(inp)? as usize;
    if m == 0 {
        return Err(Sgf1Error::NoComponents);
    }
    let mut dims = Vec::with_capacity(n as usize);
    for _ in 0..n {
        dims.push(read_u32(inp)? as usize);
    }
    let h = read_f64(inp)?;
    let cells: usize = dims.iter().product();
    let mut bits = vec![0u8; cells.div_ceil(8)];
    inp.read_exact(&mut bits)?;
    let mask: Vec<bool> = (0..cells).map(|c| bits[c / 8] >> (c % 8) & 1 == 1).collect();
    let masked = mask.iter().filter(|&&b| b).count();
    let mut masked_values = Vec::with_capacity(masked * m);
    for _ in 0..masked * m {
        masked_values.push(read_f64(inp)?);
    }
    let mut probe = [0u8; 1];
    match inp.read(&mut probe)? {
        0 => Ok(RawSgf1 { dims, m, h, mask, masked_values }),
        _ => Err(Sgf1Error::TrailingData),
    }
}

impl RawSgf1 {
    /// Rebuild the function on a custom-mask domain anchored at `origin`
    /// (physical coordinate of the low corner of the index box). Domain
    /// invariants are re-validated on load.
    pub fn into_function(self, origin: Vec<f64>) -> Result<GridFunction, Sgf1Error> {
        if origin.len() != self.dims.len() {
            return Err(Sgf1Error::OriginLength {
                got: origin.len(),
                expected: self.dims.len(),
            });
        }
        let dom = GridDomain::build(&DomainSpec::Custom {
            origin,
            h: self.h,
            dims: self.dims.clone(),
            mask: self.mask.clone(),
        })?;
        let dom = Arc::new(dom);
        let mut values = vec![0.0; dom.cells() * self.m];
        let mut it = self.masked_values.iter();
        for c in 0..dom.cells() {
            if dom.is_masked(c) {
                for k in 0..self.m {
                    values[c * self.m + k] = *it.next().expect("value count checked on read");
                }
            }
        }
        Ok(GridFunction::from_values(dom, self.m, values)?)
    }

    /// Rebuild with the index box centered on the coordinate origin.
    pub fn into_function_centered(self) -> Result<GridFunction, Sgf1Error> {
        let origin: Vec<f64> =
            self.dims.iter().map(|&d| -0.5 * d as f64 * self.h).collect();
        self.into_function(origin)
    }
}

pub fn write_file(path: impl AsRef<Path>, u: &GridFunction) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write(&mut out, u)?;
    out.flush()
}

pub fn read_file(path: impl AsRef<Path>) -> Result<RawSgf1, Sgf1Error> {
    read(&mut BufReader::new(File::open(path)?))
}

fn read_u32(inp: &mut impl Read) -> Result<u32, Sgf1Error> {
    let mut b = [0u8; 4];
    inp.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(inp: &mut impl Read) -> Result<f64, Sgf1Error> {
    let mut b = [0u8; 8];
    inp.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_domain;

    #[test]
    fn header_bytes_are_frozen() {
        let dom = build_domain(&DomainSpec::Box { lo: vec![0.0], hi: vec![1.0], h: 0.5 })
            .unwrap();
        let u = GridFunction::from_fn(dom, 1, |x, out| out[0] = x[0]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &u).unwrap();
        // magic, N=1, M=1, dims=[4], h=0.5
        assert_eq!(&buf[0..4], b"SGF1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &4u32.to_le_bytes());
        assert_eq!(&buf[16..24], &0.5f64.to_le_bytes());
        // cells 1 and 2 masked: bits 1,2 of the first byte.
        assert_eq!(buf[24], 0b0000_0110);
        // two masked cells, one component each
        assert_eq!(buf.len(), 25 + 2 * 8);
        assert_eq!(&buf[25..33], &0.25f64.to_le_bytes());
        assert_eq!(&buf[33..41], &0.75f64.to_le_bytes());
    }

    #[test]
    fn roundtrip_preserves_geometry_and_values() {
        let dom = build_domain(&DomainSpec::ExteriorOfBall {
            lo: vec![-3.0, -3.0],
            hi: vec![3.0, 3.0],
            h: 0.5,
            radius: 1.0,
        })
        .unwrap();
        let u = GridFunction::from_fn(dom.clone(), 2, |x, out| {
            out[0] = (x[0] - 0.3 * x[1]).sin();
            out[1] = 1.0 / (1.0 + x[0] * x[0]);
        })
        .unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &u).unwrap();
        let raw = read(&mut buf.as_slice()).unwrap();
        let v = raw.into_function(dom.origin().to_vec()).unwrap();
        assert_eq!(v.components(), 2);
        assert_eq!(v.domain().dims(), dom.dims());
        assert_eq!(v.domain().mask(), dom.mask());
        assert_eq!(v.values(), u.values());
        // Re-serialization is byte-identical.
        let mut buf2 = Vec::new();
        write(&mut buf2, &v).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn centered_load_places_box_symmetrically() {
        let dom = build_domain(&DomainSpec::Box {
            lo: vec![-1.25, -1.25],
            hi: vec![1.25, 1.25],
            h: 0.5,
        })
        .unwrap();
        let u = GridFunction::from_fn(dom, 1, |x, out| out[0] = x[0] + 2.0 * x[1]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &u).unwrap();
        let v = read(&mut buf.as_slice()).unwrap().into_function_centered().unwrap();
        assert_eq!(v.domain().origin(), u.domain().origin());
        assert_eq!(v.values(), u.values());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"SGFX\x01\x00\x00\x00".to_vec();
        assert!(matches!(read(&mut buf.as_slice()), Err(Sgf1Error::BadMagic(_))));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dom = build_domain(&DomainSpec::Box { lo: vec![0.0], hi: vec![1.0], h: 0.5 })
            .unwrap();
        let u = GridFunction::zeros(dom, 1);
        let mut buf = Vec::new();
        write(&mut buf, &u).unwrap();
        buf.push(0);
        assert!(matches!(read(&mut buf.as_slice()), Err(Sgf1Error::TrailingData)));
    }
}
