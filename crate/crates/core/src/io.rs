//! File formats: field dumps, fit manifests and atomic writes.
//!
//! Binary field dump: the text header
//! `VISMFIELD v1\ndims nx ny nz\norigin ox oy oz\nspacing h\n` followed by
//! the values as little-endian `f64` in index order (z fastest). Header
//! numbers use the shortest representation that parses back to the same bits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fitting::{FitDataset, FitEntry};
use crate::grid::{Grid, ScalarField};
use crate::molecule::Molecule;

const MAGIC: &str = "VISMFIELD v1";

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let err = |e| Error::io(path.display().to_string(), e);
    let mut f = fs::File::create(&tmp).map_err(err)?;
    let written = f.write_all(bytes).and_then(|_| f.sync_all());
    drop(f);
    if let Err(e) = written.and_then(|_| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(err(e));
    }
    Ok(())
}

pub fn field_to_bytes(field: &ScalarField) -> Vec<u8> {
    let g = field.grid();
    let [nx, ny, nz] = g.dims();
    let [ox, oy, oz] = g.origin();
    let header = format!("{MAGIC}\ndims {nx} {ny} {nz}\norigin {ox:?} {oy:?} {oz:?}\nspacing {:?}\n", g.spacing());
    let mut out = Vec::with_capacity(header.len() + 8 * g.len());
    out.extend_from_slice(header.as_bytes());
    for v in field.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn field_from_bytes(bytes: &[u8], source: &str) -> Result<ScalarField> {
    let mut pos = 0;
    let mut line = |n: usize| -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Parse {
            path: source.into(),
            line: n,
            message: "truncated header".into(),
        })?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Parse {
            path: source.into(),
            line: n,
            message: "header is not text".into(),
        })
    };
    let perr = |n: usize, message: String| Error::Parse {
        path: source.into(),
        line: n,
        message,
    };
    if line(1)? != MAGIC {
        return Err(perr(1, format!("expected `{MAGIC}`")));
    }
    fn numbers<T: std::str::FromStr>(text: &str, key: &str) -> Option<Vec<T>> {
        let mut it = text.split_whitespace();
        if it.next()? != key {
            return None;
        }
        it.map(|s| s.parse().ok()).collect()
    }
    let dims: Vec<usize> = numbers(line(2)?, "dims")
        .filter(|v: &Vec<usize>| v.len() == 3)
        .ok_or_else(|| perr(2, "expected `dims nx ny nz`".into()))?;
    let origin: Vec<f64> = numbers(line(3)?, "origin")
        .filter(|v: &Vec<f64>| v.len() == 3)
        .ok_or_else(|| perr(3, "expected `origin ox oy oz`".into()))?;
    let h: Vec<f64> = numbers(line(4)?, "spacing")
        .filter(|v: &Vec<f64>| v.len() == 1)
        .ok_or_else(|| perr(4, "expected `spacing h`".into()))?;
    let grid = Grid::new([origin[0], origin[1], origin[2]], [dims[0], dims[1], dims[2]], h[0])?;
    let body = &bytes[pos..];
    if body.len() != 8 * grid.len() {
        return Err(Error::Input(format!(
            "{source}: expected {} value bytes, found {}",
            8 * grid.len(),
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ScalarField::from_values(grid, values)
}

pub fn write_field(path: &Path, field: &ScalarField) -> Result<()> {
    write_atomic(path, &field_to_bytes(field))
}

pub fn read_field(path: &Path) -> Result<ScalarField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    field_from_bytes(&bytes, &path.display().to_string())
}

/// `i j k value` lines.
pub fn field_to_csv(field: &ScalarField) -> String {
    let g = field.grid();
    let mut s = String::with_capacity(32 * g.len());
    s.push_str("i j k value\n");
    for (idx, v) in field.values().iter().enumerate() {
        let [i, j, k] = g.coords(idx);
        s.push_str(&format!("{i} {j} {k} {v:?}\n"));
    }
    s
}

/// Fit manifest: `molecule_path experimental_dG` per line, `#` comments, and
/// an optional `@nonpolar` line. Relative paths are taken from `base`.
pub fn parse_manifest(text: &str, source: &str, base: &Path) -> Result<FitDataset> {
    let mut ds = FitDataset::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |message: String| Error::Parse {
            path: source.into(),
            line: n + 1,
            message,
        };
        if line == "@nonpolar" {
            ds.nonpolar = true;
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 {
            return Err(perr(format!("expected `molecule_path dG`, found {} fields", f.len())));
        }
        let dg: f64 = f[1]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| perr(format!("`{}` is not a finite number", f[1])))?;
        let path = base.join(f[0]);
        let molecule = Molecule::from_file(&path).map_err(|e| perr(e.to_string()))?;
        ds.entries.push(FitEntry {
            name: f[0].to_string(),
            molecule,
            experimental: dg,
        });
    }
    if ds.entries.is_empty() {
        return Err(Error::Fit(format!("{source}: manifest lists no molecules")));
    }
    Ok(ds)
}

pub fn read_manifest(path: &Path) -> Result<FitDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, &path.display().to_string(), base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field() -> ScalarField {
        let g = Grid::new([-1.25, 0.1, 3.0], [3, 4, 5], 0.3).unwrap();
        ScalarField::from_fn(g, |x| (x[0] * 1.7).sin() + x[1] / 3.0 - x[2] * 1e-9)
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let f = field();
        let bytes = field_to_bytes(&f);
        assert!(bytes.starts_with(b"VISMFIELD v1\ndims 3 4 5\norigin -1.25 0.1 3.0\nspacing 0.3\n"));
        let back = field_from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.grid(), f.grid());
        for (a, b) in back.values().iter().zip(f.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupt_dumps_rejected() {
        let bytes = field_to_bytes(&field());
        assert!(field_from_bytes(&bytes[..bytes.len() - 3], "x").is_err());
        assert!(field_from_bytes(b"VISMFIELD v2\n", "x").is_err());
        let mut bad = bytes.clone();
        bad[17] = b'x';
        assert!(field_from_bytes(&bad, "x").is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.field");
        write_field(&p, &field()).unwrap();
        let f2 = ScalarField::constant(*field().grid(), 2.0);
        write_field(&p, &f2).unwrap();
        assert_eq!(read_field(&p).unwrap(), f2);
        // no temporaries left behind
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn csv_lists_every_node() {
        let f = field();
        let csv = field_to_csv(&f);
        assert_eq!(csv.lines().count(), 1 + f.grid().len());
        let last = csv.lines().last().unwrap();
        assert!(last.starts_with("2 3 4 "));
        let v: f64 = last.split(' ').nth(3).unwrap().parse().unwrap();
        assert_eq!(v.to_bits(), f.values().last().unwrap().to_bits());
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.mol"), "0 0 0 0 1.9 C\n").unwrap();
        let ds = parse_manifest("# set\n@nonpolar\na.mol 1.5\n", "m", dir.path()).unwrap();
        assert!(ds.nonpolar);
        assert_eq!(ds.entries.len(), 1);
        assert_eq!(ds.entries[0].experimental, 1.5);
        match parse_manifest("a.mol\n", "m", dir.path()) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_manifest("a.mol 1\nmissing.mol 2\n", "m", dir.path()) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_manifest("# nothing\n", "m", dir.path()).is_err());
    }

    proptest! {
        #[test]
        fn any_values_round_trip(vals in proptest::collection::vec(-1e300f64..1e300, 27), h in 1e-3f64..10.0) {
            let g = Grid::new([0.5, -2.0, 1e-7], [3, 3, 3], h).unwrap();
            let f = ScalarField::from_values(g, vals).unwrap();
            let back = field_from_bytes(&field_to_bytes(&f), "p").unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
