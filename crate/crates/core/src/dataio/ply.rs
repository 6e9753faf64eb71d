//! ASCII PLY point clouds (vertex positions only).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, ParseErrorKind, Result};
use crate::geometry::PointSet;

const HEADER_LINES: usize = 7;

/// Shortest fixed or exponent rendering with 9 significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.8e}")
    }
}

pub fn ply_string(cloud: &PointSet) -> String {
    let mut s = String::with_capacity(32 * cloud.len() + 128);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", format_sig9(p[0]), format_sig9(p[1]), format_sig9(p[2]));
    }
    s
}

pub fn save_ply(path: impl AsRef<Path>, cloud: &PointSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ply_string(cloud)).map_err(|e| Error::io(path, e))
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

/// Parses PLY text; `path` is only used in error messages.
pub fn parse_ply(text: &str, path: &Path) -> Result<PointSet> {
    let err = |line: usize, kind| Error::Parse {
        path: path.to_path_buf(),
        line,
        kind,
    };
    let header = |line: usize, msg: &str| err(line, ParseErrorKind::MalformedHeader(msg.into()));
    let lines: Vec<&str> = text.lines().collect();
    let expect = |i: usize, want: &str| -> Result<()> {
        match lines.get(i) {
            Some(l) if l.trim() == want => Ok(()),
            _ => Err(header(i + 1, &format!("expected `{want}`"))),
        }
    };
    expect(0, "ply")?;
    expect(1, "format ascii 1.0")?;
    let count = lines
        .get(2)
        .and_then(|l| l.trim().strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse::<usize>().ok())
        .ok_or_else(|| header(3, "expected `element vertex <count>`"))?;
    for (i, axis) in ["x", "y", "z"].into_iter().enumerate() {
        expect(3 + i, &format!("property float {axis}"))?;
    }
    expect(6, "end_header")?;
    if count == 0 {
        return Err(header(3, "vertex count must be positive"));
    }

    let body: Vec<(usize, &str)> = lines[HEADER_LINES..]
        .iter()
        .enumerate()
        .map(|(i, l)| (HEADER_LINES + i + 1, *l))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    if body.len() != count {
        // the first row past the data, or the first expected row that is missing
        let line = if body.len() > count {
            body[count].0
        } else {
            body.last().map_or(HEADER_LINES, |r| r.0) + 1
        };
        return Err(err(
            line,
            ParseErrorKind::CountMismatch {
                declared: count,
                found: body.len(),
            },
        ));
    }
    let mut pts = Vec::with_capacity(count);
    for (line, row) in body {
        let toks: Vec<&str> = row.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(err(
                line,
                ParseErrorKind::CountMismatch {
                    declared: 3,
                    found: toks.len(),
                },
            ));
        }
        let mut p = [0.0; 3];
        for (v, t) in p.iter_mut().zip(&toks) {
            *v = t
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, ParseErrorKind::NonNumeric((*t).into())))?;
        }
        pts.push(p);
    }
    PointSet::from_points(&pts)
}
