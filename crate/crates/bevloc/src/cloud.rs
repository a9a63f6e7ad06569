//! Point clouds in the sensor frame and their on-disk format.
//!
//! File layout (`.pitc`): magic `PITC`, u32 version (=1), u64 point count,
//! then `count` records of four little-endian IEEE-754 f32 values
//! (x, y, z, intensity).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PITC_MAGIC: &[u8; 4] = b"PITC";
pub const PITC_VERSION: u32 = 1;

/// One LiDAR return: metres in the sensor frame plus intensity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Point {
            x,
            y,
            z,
            intensity: intensity.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(PITC_MAGIC).map_err(io)?;
    w.write_all(&PITC_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(cloud.points.len() as u64).to_le_bytes())
        .map_err(io)?;
    for p in &cloud.points {
        w.write_all(&p.x.to_le_bytes()).map_err(io)?;
        w.write_all(&p.y.to_le_bytes()).map_err(io)?;
        w.write_all(&p.z.to_le_bytes()).map_err(io)?;
        w.write_all(&p.intensity.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != PITC_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "PITC",
        });
    }
    let version = read_u32(&mut r, path)?;
    if version != PITC_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: PITC_VERSION,
        });
    }
    let count = read_u64(&mut r, path)? as usize;
    let mut points = Vec::with_capacity(count.min(1 << 24));
    let mut buf = [0u8; 16];
    for i in 0..count {
        r.read_exact(&mut buf).map_err(|_| {
            Error::malformed(path, format!("truncated at point {i} of {count}"))
        })?;
        points.push(Point {
            x: f32::from_le_bytes(buf[0..4].try_into().unwrap()),
            y: f32::from_le_bytes(buf[4..8].try_into().unwrap()),
            z: f32::from_le_bytes(buf[8..12].try_into().unwrap()),
            intensity: f32::from_le_bytes(buf[12..16].try_into().unwrap()),
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::malformed(path, "trailing bytes after point records"));
    }
    Ok(PointCloud::new(points))
}

pub(crate) fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::malformed(path, "truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::malformed(path, "truncated header"))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::malformed(path, "truncated record"))?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f32(r: &mut impl Read, path: &Path) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::malformed(path, "truncated record"))?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_cloud_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.pitc");
        let cloud = PointCloud::new(vec![
            Point::new(1.0, 2.0, 3.0, 0.5),
            Point::new(-4.25, 0.0, 1e-3, 1.0),
        ]);
        write_point_cloud(&path, &cloud).unwrap();
        assert_eq!(read_point_cloud(&path).unwrap(), cloud);
    }

    #[test]
    fn empty_cloud_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.pitc");
        write_point_cloud(&path, &PointCloud::default()).unwrap();
        assert!(read_point_cloud(&path).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pitc");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_point_cloud(&path),
            Err(Error::BadMagic { .. })
        ));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PITC");
        bytes.extend_from_slice(&7u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_point_cloud(&path),
            Err(Error::VersionMismatch { found: 7, .. })
        ));
    }

    #[test]
    fn intensity_clamped_on_construction() {
        assert_eq!(Point::new(0.0, 0.0, 0.0, 1.5).intensity, 1.0);
        assert_eq!(Point::new(0.0, 0.0, 0.0, -0.5).intensity, 0.0);
    }
}
