//! WMPC v1 tract files.
//!
//! Little-endian layout:
//!
//! ```text
//! "WMPC"            4 bytes magic
//! u16 version = 1
//! u16 reserved = 0
//! u32 streamline_count
//! per streamline:
//!     u32 point_count
//!     point_count × (f32 x, f32 y, f32 z, f32 fa)
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const TRACT_MAGIC: &[u8; 4] = b"WMPC";
pub const TRACT_VERSION: u16 = 1;

/// Number of per-point input channels: x, y, z, FA, NoS.
pub const POINT_CHANNELS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Streamline {
    /// Coordinates in millimeters.
    pub points: Vec<[f32; 3]>,
    pub fa: Vec<f32>,
}

impl Streamline {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One subject's tract. The streamline count is the subject's NoS.
#[derive(Clone, Debug, PartialEq)]
pub struct Tract {
    pub subject_id: String,
    pub streamlines: Vec<Streamline>,
}

impl Tract {
    pub fn new(subject_id: impl Into<String>, streamlines: Vec<Streamline>) -> Result<Self> {
        let t = Self {
            subject_id: subject_id.into(),
            streamlines,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn nos(&self) -> usize {
        self.streamlines.len()
    }

    pub fn point_count(&self) -> usize {
        self.streamlines.iter().map(Streamline::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.streamlines.is_empty() {
            return Err(Error::Validation(format!(
                "tract {} has no streamlines",
                self.subject_id
            )));
        }
        let mut row = 0usize;
        for (s, sl) in self.streamlines.iter().enumerate() {
            if sl.points.len() != sl.fa.len() {
                return Err(Error::Validation(format!(
                    "streamline {s}: {} points but {} fa values",
                    sl.points.len(),
                    sl.fa.len()
                )));
            }
            if sl.points.len() < 2 {
                return Err(Error::Validation(format!(
                    "streamline {s} has {} point(s); at least 2 are required",
                    sl.points.len()
                )));
            }
            for (p, (&fa, xyz)) in sl.fa.iter().zip(&sl.points).enumerate() {
                if !(0.0..=1.0).contains(&fa) {
                    return Err(Error::Validation(format!(
                        "fa = {fa} outside [0,1] at streamline {s} point {p} (point row {})",
                        row + p
                    )));
                }
                if xyz.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Validation(format!(
                        "non-finite coordinate at streamline {s} point {p} (point row {})",
                        row + p
                    )));
                }
            }
            row += sl.len();
        }
        Ok(())
    }
}

pub fn encode_tract(tract: &Tract) -> Result<Vec<u8>> {
    tract.validate()?;
    let mut buf = Vec::with_capacity(12 + tract.nos() * 4 + tract.point_count() * 16);
    buf.extend_from_slice(TRACT_MAGIC);
    buf.write_u16::<LittleEndian>(TRACT_VERSION).unwrap();
    buf.write_u16::<LittleEndian>(0).unwrap();
    buf.write_u32::<LittleEndian>(count_u32(tract.nos())?).unwrap();
    for sl in &tract.streamlines {
        buf.write_u32::<LittleEndian>(count_u32(sl.len())?).unwrap();
        for (xyz, fa) in sl.points.iter().zip(&sl.fa) {
            for c in xyz {
                buf.write_f32::<LittleEndian>(*c).unwrap();
            }
            buf.write_f32::<LittleEndian>(*fa).unwrap();
        }
    }
    Ok(buf)
}

fn count_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Validation(format!("count {n} exceeds u32")))
}

/// Parses WMPC bytes; `origin` only labels errors.
pub fn decode_tract(bytes: &[u8], subject_id: &str, origin: &Path) -> Result<Tract> {
    let truncated = |_: std::io::Error| Error::format(origin, "file is truncated");
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(truncated)?;
    if &magic != TRACT_MAGIC {
        return Err(Error::format(origin, format!("bad magic {magic:?}, expected \"WMPC\"")));
    }
    let version = cur.read_u16::<LittleEndian>().map_err(truncated)?;
    if version != TRACT_VERSION {
        return Err(Error::Version {
            what: "WMPC tract",
            found: version,
            supported: TRACT_VERSION,
        });
    }
    let reserved = cur.read_u16::<LittleEndian>().map_err(truncated)?;
    if reserved != 0 {
        return Err(Error::format(origin, format!("reserved field is {reserved}, expected 0")));
    }
    let count = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut streamlines = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let remaining = bytes.len() - cur.position() as usize;
        if n.saturating_mul(16) > remaining {
            return Err(Error::format(origin, "file is truncated"));
        }
        let mut points = Vec::with_capacity(n);
        let mut fa = Vec::with_capacity(n);
        for _ in 0..n {
            let mut rec = [0f32; 4];
            cur.read_f32_into::<LittleEndian>(&mut rec).map_err(truncated)?;
            points.push([rec[0], rec[1], rec[2]]);
            fa.push(rec[3]);
        }
        streamlines.push(Streamline { points, fa });
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(Error::format(
            origin,
            format!("{} trailing bytes", bytes.len() - cur.position() as usize),
        ));
    }
    Tract::new(subject_id, streamlines)
}

/// Reads a WMPC file; the subject id is taken from the file stem.
pub fn read_tract(path: impl AsRef<Path>) -> Result<Tract> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_tract(&bytes, &id, path)
}

pub fn write_tract(tract: &Tract, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tract(tract)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Flattened `P×5` view of a tract with per-row provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTable {
    /// Rows of `(x, y, z, fa, nos)`.
    pub rows: Vec<[f64; POINT_CHANNELS]>,
    /// `(streamline_id, point_index)` of each row.
    pub provenance: Vec<(u32, u32)>,
}

impl PointTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Streamlines in file order, points in sequence order; NoS replicated on every row.
pub fn flatten_points(tract: &Tract) -> Result<PointTable> {
    tract.validate()?;
    let nos = tract.nos() as f64;
    let p = tract.point_count();
    let mut rows = Vec::with_capacity(p);
    let mut provenance = Vec::with_capacity(p);
    for (s, sl) in tract.streamlines.iter().enumerate() {
        for (i, (xyz, &fa)) in sl.points.iter().zip(&sl.fa).enumerate() {
            rows.push([
                f64::from(xyz[0]),
                f64::from(xyz[1]),
                f64::from(xyz[2]),
                f64::from(fa),
                nos,
            ]);
            provenance.push((s as u32, i as u32));
        }
    }
    Ok(PointTable { rows, provenance })
}
