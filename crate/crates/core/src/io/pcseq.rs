//! PCSEQ: a line-oriented text format for labeled point cloud sequences.
//!
//! ```text
//! PCSEQ 1 <T> [label]
//! <m_1>
//! x y z        (m_1 lines)
//! ...
//! <m_T>
//! x y z        (m_T lines)
//! ```
//!
//! A file may hold several records back to back. Blank lines and lines
//! starting with `#` are skipped. Coordinates are written with the shortest
//! representation that parses back to the same float.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{CloudSequence, Point3};

pub const PCSEQ_MAGIC: &str = "PCSEQ";
pub const PCSEQ_VERSION: u32 = 1;

/// Appends one record to `out`.
pub fn write_record(out: &mut String, seq: &CloudSequence) {
    let _ = write!(out, "{PCSEQ_MAGIC} {PCSEQ_VERSION} {}", seq.len());
    if let Some(y) = seq.label() {
        let _ = write!(out, " {y}");
    }
    out.push('\n');
    for f in seq.frames() {
        let _ = writeln!(out, "{}", f.len());
        for p in f.coords() {
            let _ = writeln!(out, "{} {} {}", Coord(p[0]), Coord(p[1]), Coord(p[2]));
        }
    }
}

/// Shortest round-trip digits, in exponent form only for extreme magnitudes.
struct Coord(f64);

impl std::fmt::Display for Coord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let a = self.0.abs();
        if a != 0.0 && !(1e-5..1e16).contains(&a) {
            write!(f, "{:e}", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

pub fn to_string(seqs: &[CloudSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        write_record(&mut out, s);
    }
    out
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Parses every record of `text`; an empty file yields no records.
pub fn parse(text: &str) -> Result<Vec<CloudSequence>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut out = Vec::new();
    while let Some((ln, header)) = lines.next() {
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.first() != Some(&PCSEQ_MAGIC) {
            return Err(err(ln, format!("expected a {PCSEQ_MAGIC} header, found {header:?}")));
        }
        if toks.len() < 3 || toks.len() > 4 {
            return Err(err(ln, "header must be `PCSEQ 1 <T> [label]`"));
        }
        if toks[1] != PCSEQ_VERSION.to_string() {
            return Err(err(ln, format!("unsupported version {}", toks[1])));
        }
        let t: usize = parse_count(toks[2], ln, "frame count")?;
        let label = toks
            .get(3)
            .map(|s| s.parse::<usize>().map_err(|_| err(ln, format!("bad label {s:?}"))))
            .transpose()?;
        let mut frames: Vec<Vec<Point3>> = Vec::with_capacity(t);
        for f in 0..t {
            let (ln, count) = lines
                .next()
                .ok_or_else(|| err(text.lines().count() + 1, format!("missing point count of frame {}", f + 1)))?;
            let m = parse_count(count, ln, "point count")?;
            let mut pts = Vec::with_capacity(m);
            for _ in 0..m {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| err(text.lines().count() + 1, format!("frame {} ends early", f + 1)))?;
                pts.push(parse_point(row, ln)?);
            }
            frames.push(pts);
        }
        out.push(CloudSequence::from_coords(frames, label).map_err(|e| err(ln, e.to_string()))?);
    }
    Ok(out)
}

fn parse_count(tok: &str, line: usize, what: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(err(line, format!("{what} must be a positive integer, found {tok:?}"))),
    }
}

fn parse_point(row: &str, line: usize) -> Result<Point3> {
    let vals: Vec<&str> = row.split_whitespace().collect();
    if vals.len() != 3 {
        return Err(err(line, format!("expected `x y z`, found {row:?}")));
    }
    let mut p = [0.0; 3];
    for (k, v) in vals.iter().enumerate() {
        p[k] = v
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| err(line, format!("bad coordinate {v:?}")))?;
    }
    Ok(p)
}

pub fn read_file(path: &Path) -> Result<Vec<CloudSequence>> {
    parse(&std::fs::read_to_string(path)?)
}

pub fn write_file(path: &Path, seqs: &[CloudSequence]) -> Result<()> {
    std::fs::write(path, to_string(seqs))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> CloudSequence {
        CloudSequence::from_coords(
            vec![vec![[0.1, -2.0, 3.5]], vec![[1e-300, 0.3, -0.0], [4.0, 5.0, 6.0]]],
            Some(3),
        )
        .unwrap()
    }

    #[test]
    fn writes_the_documented_layout() {
        assert_eq!(
            to_string(&[sample()]),
            "PCSEQ 1 2 3\n1\n0.1 -2 3.5\n2\n1e-300 0.3 -0\n4 5 6\n"
        );
    }

    #[test]
    fn multi_record_round_trip() {
        let unlabeled = sample().with_label(None);
        let seqs = vec![sample(), unlabeled];
        assert_eq!(parse(&to_string(&seqs)).unwrap(), seqs);
    }

    #[test]
    fn skips_comments_and_blank_lines() {
        let text = "# header\n\nPCSEQ 1 1\n\n1\n1 2 3\n";
        let seqs = parse(text).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].label(), None);
    }

    fn line_of(text: &str) -> usize {
        match parse(text) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_line() {
        assert_eq!(line_of("PCSEQ 1 1\n1\n1 2\n"), 3);
        assert_eq!(line_of("PCSEQ 1 1\n2\n1 2 3\n1 2 x\n"), 4);
        assert_eq!(line_of("PCSEQ 2 1\n1\n1 2 3\n"), 1);
        assert_eq!(line_of("PCSEQ 1 1\n0\n"), 2);
        assert_eq!(line_of("hello\n"), 1);
        assert_eq!(line_of("PCSEQ 1 1\n1\n1 2 nan\n"), 3);
        assert_eq!(line_of("PCSEQ 1 2\n1\n1 2 3\n"), 4);
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            frames in prop::collection::vec(
                prop::collection::vec(prop::array::uniform3(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO), 1..6), 1..5),
            label in prop::option::of(0usize..10),
        ) {
            let seq = CloudSequence::from_coords(frames, label).unwrap();
            let back = parse(&to_string(std::slice::from_ref(&seq))).unwrap();
            prop_assert_eq!(back, vec![seq]);
        }
    }
}
