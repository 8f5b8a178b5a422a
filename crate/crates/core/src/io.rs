//! Point cloud files.
//!
//! * `.xyz`: one `x y z` line per point (a fourth column is accepted and
//!   ignored); blank lines and `#` comments are skipped.
//! * `.bin`: little-endian `f32` quadruples `x y z reflectance`. Reflectance
//!   is ignored on read and written as 0.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::cloud::{Point, PointCloud};
use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Xyz,
    Bin,
}

fn kind(path: &Path) -> Result<Kind> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") => Ok(Kind::Xyz),
        Some("bin") => Ok(Kind::Bin),
        _ => Err(Error::Argument(format!(
            "{}: unsupported extension (expected .xyz or .bin)",
            path.display()
        ))),
    }
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let k = kind(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let points = match k {
        Kind::Xyz => parse_xyz(path, &bytes)?,
        Kind::Bin => parse_bin(path, &bytes)?,
    };
    if points.is_empty() {
        return Err(Error::Format {
            path: path.into(),
            offset: 0,
            line: None,
            msg: "file contains no points".into(),
        });
    }
    PointCloud::new(points)
}

fn parse_xyz(path: &Path, bytes: &[u8]) -> Result<Vec<Point>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format {
        path: path.into(),
        offset: e.valid_up_to() as u64,
        line: None,
        msg: "not valid UTF-8".into(),
    })?;
    let mut points = Vec::new();
    let mut offset = 0u64;
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let line_start = offset;
        offset += raw.len() as u64;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |msg: String| Error::Format {
            path: path.into(),
            offset: line_start,
            line: Some(i + 1),
            msg,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 && tokens.len() != 4 {
            return Err(fail(format!("expected 3 coordinates, found {} fields", tokens.len())));
        }
        let mut p = [0.0; 3];
        for (d, tok) in tokens[..3].iter().enumerate() {
            p[d] = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| fail(format!("{tok:?} is not a finite number")))?;
        }
        points.push(p);
    }
    Ok(points)
}

fn parse_bin(path: &Path, bytes: &[u8]) -> Result<Vec<Point>> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format {
            path: path.into(),
            offset: (bytes.len() - bytes.len() % 16) as u64,
            line: None,
            msg: format!("{} bytes is not a whole number of 16-byte records", bytes.len()),
        });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    let points: Vec<Point> = bytes.chunks_exact(16).map(|r| [f(&r[0..4]), f(&r[4..8]), f(&r[8..12])]).collect();
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Format {
            path: path.into(),
            offset: 16 * i as u64,
            line: None,
            msg: "non-finite coordinate".into(),
        });
    }
    Ok(points)
}

/// Writes `pc`; `.xyz` uses the shortest decimal form that reads back exactly.
pub fn write_cloud(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    match kind(path)? {
        Kind::Xyz => {
            for p in &pc.points {
                writeln!(buf, "{} {} {}", p[0], p[1], p[2]).expect("writing to memory");
            }
        }
        Kind::Bin => {
            buf.reserve(pc.len() * 16);
            for p in &pc.points {
                for v in [p[0] as f32, p[1] as f32, p[2] as f32, 0.0] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let pc = PointCloud::new(vec![[1.5, -2.25, 1e-3f32 as f64], [3.0e7, 0.1f32 as f64, -0.0]]).unwrap();
        write_cloud(&path, &pc).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 32);
        let back = read_cloud(&path).unwrap();
        for (a, b) in back.points.iter().zip(&pc.points) {
            for d in 0..3 {
                assert_eq!(a[d].to_bits(), b[d].to_bits());
            }
        }
    }

    #[test]
    fn xyz_round_trip_and_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.xyz");
        let pc = PointCloud::new(vec![[0.1, 1.0 / 3.0, -7.123456789e-5], [1e10, 2.0, 3.0], [0.0, 0.0, 0.0]]).unwrap();
        write_cloud(&path, &pc).unwrap();
        let back = read_cloud(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.points.iter().zip(&pc.points) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() <= 1e-9 * b[d].abs());
            }
        }
        fs::write(&path, "# header\n1 2 3\n\n4 5 6 0.5\n").unwrap();
        assert_eq!(read_cloud(&path).unwrap().points, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn malformed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("t.bin");
        fs::write(&bin, [0u8; 17]).unwrap();
        let err = read_cloud(&bin).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 16, .. }), "{err}");

        let xyz = dir.path().join("t.xyz");
        fs::write(&xyz, "1 2 3\n4 five 6\n").unwrap();
        match read_cloud(&xyz).unwrap_err() {
            Error::Format { line, offset, .. } => {
                assert_eq!(line, Some(2));
                assert_eq!(offset, 6);
            }
            e => panic!("{e}"),
        }
        assert!(matches!(read_cloud(dir.path().join("missing.xyz")), Err(Error::Io { .. })));
        assert!(matches!(read_cloud(dir.path().join("a.ply")), Err(Error::Argument(_))));
    }
}
