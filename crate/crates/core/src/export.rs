//! CSV dumps and append-only output files.
//!
//! Floats are written with 17 significant digits so they round-trip exactly.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::measure::ConvergenceTable;
use crate::{Vec3, C64};

/// Opens `dir/stem.ext` for writing without ever touching an existing file:
/// on a name clash `stem-1.ext`, `stem-2.ext`, ... are tried in turn.
pub fn create_fresh(dir: &Path, stem: &str, ext: &str) -> io::Result<(File, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    for k in 0.. {
        let name = if k == 0 {
            format!("{stem}.{ext}")
        } else {
            format!("{stem}-{k}.{ext}")
        };
        let path = dir.join(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => return Ok((f, path)),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!("the suffix search is unbounded")
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_rows<W: Write>(
    mut out: W,
    header: &str,
    rows: impl Iterator<Item = Vec<f64>>,
) -> io::Result<()> {
    writeln!(out, "{header}")?;
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt_f64).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()
}

/// `x,y,z,value`
pub fn write_scalar_field<W: Write>(out: W, rows: &[(Vec3, f64)]) -> io::Result<()> {
    write_rows(
        BufWriter::new(out),
        "x,y,z,value",
        rows.iter().map(|(r, v)| vec![r.x, r.y, r.z, *v]),
    )
}

/// `x,y,z,vx,vy,vz`
pub fn write_vector_field<W: Write>(out: W, rows: &[(Vec3, Vec3)]) -> io::Result<()> {
    write_rows(
        BufWriter::new(out),
        "x,y,z,vx,vy,vz",
        rows.iter().map(|(r, v)| vec![r.x, r.y, r.z, v.x, v.y, v.z]),
    )
}

/// `rx,ry,rz,sx,sy,sz,re,im`
pub fn write_kernel_samples<W: Write>(out: W, rows: &[(Vec3, Vec3, C64)]) -> io::Result<()> {
    write_rows(
        BufWriter::new(out),
        "rx,ry,rz,sx,sy,sz,re,im",
        rows.iter()
            .map(|(r, s, z)| vec![r.x, r.y, r.z, s.x, s.y, s.z, z.re, z.im]),
    )
}

/// `index,eigenvalue`; the index is written as an integer.
pub fn write_spectrum<W: Write>(out: W, eigenvalues: &[f64]) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "index,eigenvalue")?;
    for (i, e) in eigenvalues.iter().enumerate() {
        writeln!(out, "{i},{}", fmt_f64(*e))?;
    }
    out.flush()
}

/// `epsilon,value,abs_error`
pub fn write_convergence<W: Write>(out: W, table: &ConvergenceTable) -> io::Result<()> {
    write_rows(
        BufWriter::new(out),
        "epsilon,value,abs_error",
        table
            .rows
            .iter()
            .map(|r| vec![r.epsilon, r.value, r.abs_error]),
    )
}
