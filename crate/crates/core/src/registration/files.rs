use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::CorrespondenceSet;
use crate::error::{Error, Result};

const FEATURE_MAGIC: [u8; 4] = *b"VFTR";

/// Writes a `V x f` feature matrix: `VFTR`, `u32 V`, `u32 f`, then `V*f`
/// little-endian `f32` values, row-major.
pub fn write_features(path: impl AsRef<Path>, feats: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let (v, f) = feats.shape();
    let mut buf = Vec::with_capacity(12 + 4 * v * f);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&(v as u32).to_le_bytes());
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    for r in 0..v {
        for c in 0..f {
            buf.extend_from_slice(&(feats[(r, c)] as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            context: ctx,
            expected: 12,
        });
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            context: ctx,
            expected: FEATURE_MAGIC,
            found: bytes[..4].try_into().unwrap(),
        });
    }
    let v = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 4 * v * f;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            context: ctx,
            expected,
        });
    }
    let mut feats = DMatrix::zeros(v, f);
    for (k, chunk) in bytes[12..expected].chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !x.is_finite() {
            return Err(Error::format(
                &ctx,
                format!("non-finite feature at row {}", k / f.max(1)),
            ));
        }
        feats[(k / f, k % f)] = x;
    }
    Ok(feats)
}

/// Text format:
///
/// ```text
/// delta_d <f64>
/// source_vertices <usize>
/// pairs <n>
/// <src> <dst> <loop_distance> <confidence>   (n lines)
/// ```
///
/// Lines starting with `#` are comments.
pub fn write_correspondences(path: impl AsRef<Path>, set: &CorrespondenceSet) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "# flowmorph correspondences")?;
        writeln!(w, "delta_d {:e}", set.delta_d)?;
        writeln!(w, "source_vertices {}", set.source_vertex_count)?;
        writeln!(w, "pairs {}", set.pairs.len())?;
        for (k, &(s, d)) in set.pairs.iter().enumerate() {
            writeln!(
                w,
                "{s} {d} {:e} {:e}",
                set.loop_distance[k], set.confidence[k]
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_correspondences(path: impl AsRef<Path>) -> Result<CorrespondenceSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let mut header = |key: &str| -> Result<String> {
        let (no, line) = lines
            .next()
            .ok_or_else(|| Error::format(&ctx, format!("missing `{key}` header")))?;
        match line.split_once(char::is_whitespace) {
            Some((k, v)) if k == key => Ok(v.trim().to_string()),
            _ => Err(Error::format(
                &ctx,
                format!("line {no}: expected `{key} <value>`"),
            )),
        }
    };
    let delta_d: f64 = header("delta_d")?
        .parse()
        .map_err(|_| Error::format(&ctx, "bad delta_d"))?;
    let source_vertex_count: usize = header("source_vertices")?
        .parse()
        .map_err(|_| Error::format(&ctx, "bad source_vertices"))?;
    let n: usize = header("pairs")?
        .parse()
        .map_err(|_| Error::format(&ctx, "bad pairs"))?;

    let mut set = CorrespondenceSet::empty(delta_d, source_vertex_count);
    for (no, line) in lines {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(Error::format(
                &ctx,
                format!("line {no}: expected 4 columns, found {}", cols.len()),
            ));
        }
        let bad = |what: &str| Error::format(&ctx, format!("line {no}: bad {what}"));
        let s: usize = cols[0].parse().map_err(|_| bad("source index"))?;
        let d: usize = cols[1].parse().map_err(|_| bad("target index"))?;
        let dist: f64 = cols[2].parse().map_err(|_| bad("loop distance"))?;
        let conf: f64 = cols[3].parse().map_err(|_| bad("confidence"))?;
        set.pairs.push((s, d));
        set.loop_distance.push(dist);
        set.confidence.push(conf);
    }
    if set.pairs.len() != n {
        return Err(Error::format(
            &ctx,
            format!("header declares {n} pairs, found {}", set.pairs.len()),
        ));
    }
    set.validate()
        .map_err(|e| Error::format(&ctx, e.to_string()))?;
    Ok(set)
}
