//! OFF meshes and XYZ point files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Mesh, PointCloud, Point3};
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses ASCII OFF. Polygons with more than three corners are fan-triangulated.
pub fn parse_off(text: &str, path: &Path) -> Result<Mesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (ln, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    // Some writers put the counts on the header line: "OFF 8 6 0".
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| parse_err(path, ln, "missing OFF header"))?
        .trim()
        .to_string();
    let (ln, counts) = if rest.is_empty() {
        lines.next().ok_or_else(|| parse_err(path, ln, "missing counts line"))?
    } else {
        (ln, rest.as_str())
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(path, ln, format!("bad count {t:?}"))))
        .collect::<Result<_>>()?;
    if counts.len() < 2 {
        return Err(parse_err(path, ln, "counts line needs vertex and face counts"));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, ln, "unexpected end of vertex list"))?;
        let v: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(|t| t.parse().map_err(|_| parse_err(path, ln, format!("bad coordinate {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 3 || v.iter().any(|c| !c.is_finite()) {
            return Err(parse_err(path, ln, "vertex needs three finite coordinates"));
        }
        vertices.push([v[0], v[1], v[2]]);
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, ln, "unexpected end of face list"))?;
        let f: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(path, ln, format!("bad index {t:?}"))))
            .collect::<Result<_>>()?;
        let n = *f.first().ok_or_else(|| parse_err(path, ln, "empty face"))?;
        if n < 3 || f.len() < n + 1 {
            return Err(parse_err(path, ln, "face needs at least three vertex indices"));
        }
        let idx = &f[1..=n];
        if let Some(bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(parse_err(path, ln, format!("vertex index {bad} out of range")));
        }
        for j in 1..n - 1 {
            triangles.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Mesh::new(vertices, triangles)
}

pub fn read_off(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_off(&text, path)
}

pub fn write_off(path: &Path, mesh: &Mesh) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "OFF").unwrap();
    writeln!(s, "{} {} 0", mesh.vertices().len(), mesh.triangles().len()).unwrap();
    for v in mesh.vertices() {
        writeln!(s, "{} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for t in mesh.triangles() {
        writeln!(s, "3 {} {} {}", t[0], t[1], t[2]).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// One `x y z` triple per line. Values are read as f32, the precision files
/// are written at.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.is_empty() {
            continue;
        }
        let v: Vec<f32> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(path, i + 1, format!("bad number {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 3 || v.iter().any(|c| !c.is_finite()) {
            return Err(parse_err(path, i + 1, "expected three finite numbers"));
        }
        points.push([v[0] as f64, v[1] as f64, v[2] as f64]);
    }
    if points.is_empty() {
        return Err(Error::Format(format!("{} contains no points", path.display())));
    }
    PointCloud::new(points)
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

pub fn format_xyz(points: &[Point3]) -> String {
    let mut s = String::with_capacity(points.len() * 30);
    for p in points {
        writeln!(s, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32).unwrap();
    }
    s
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_xyz(cloud.points())).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn off_parses_with_comments_and_quads() {
        let text = "OFF\n# a quad\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let m = parse_off(text, Path::new("q.off")).unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2], [0, 2, 3]]);
        assert_eq!(m.total_area(), 1.0);
    }

    #[test]
    fn off_errors_carry_line_numbers() {
        let err = parse_off("OFF\n3 1 0\n0 0 0\n1 0 x\n0 1 0\n3 0 1 2\n", Path::new("m.off")).unwrap_err();
        assert!(err.to_string().contains("m.off:4"), "{err}");
        let err = parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", Path::new("m.off")).unwrap_err();
        assert!(err.to_string().contains(":6"), "{err}");
        assert!(parse_off("PLY\n", Path::new("m.off")).is_err());
    }

    #[test]
    fn xyz_errors_carry_line_numbers() {
        let err = parse_xyz("0 0 0\n1 2\n", Path::new("p.xyz")).unwrap_err();
        assert!(err.to_string().contains("p.xyz:2"), "{err}");
        assert!(parse_xyz("\n\n", Path::new("p.xyz")).is_err());
    }

    proptest! {
        #[test]
        fn xyz_round_trip_is_f32_exact(pts in prop::collection::vec(prop::array::uniform3(-1e4f64..1e4), 1..50)) {
            let text = format_xyz(&pts);
            let back = parse_xyz(&text, Path::new("x")).unwrap();
            for (a, b) in back.points().iter().zip(&pts) {
                for k in 0..3 {
                    prop_assert_eq!(a[k], b[k] as f32 as f64);
                }
            }
            // a second pass is lossless
            let again = parse_xyz(&format_xyz(back.points()), Path::new("x")).unwrap();
            prop_assert_eq!(again, back);
        }
    }
}
