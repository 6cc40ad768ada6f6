//! Text output shared by every artifact: CSV float formatting and atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::mesh::Mesh;

/// 17 significant digits in scientific notation, `.` as decimal separator.
pub fn fmt_f64(x: f64) -> String {
    // adding 0.0 maps -0.0 to 0.0
    format!("{:.16e}", x + 0.0)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Nodal field as CSV: `vertex_id,x[,y],value`.
pub fn nodal_csv(mesh: &Mesh, values: &[f64]) -> String {
    let mut out = String::from(if mesh.dim() == 1 { "vertex_id,x,value\n" } else { "vertex_id,x,y,value\n" });
    for (v, (p, val)) in mesh.vertices().iter().zip(values).enumerate() {
        if mesh.dim() == 1 {
            out.push_str(&format!("{},{},{}\n", v, fmt_f64(p[0]), fmt_f64(*val)));
        } else {
            out.push_str(&format!("{},{},{},{}\n", v, fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*val)));
        }
    }
    out
}

/// Per-cell field as CSV: `cell_id,x[,y],value` at barycenters.
pub fn cell_csv(mesh: &Mesh, values: &[f64]) -> String {
    let mut out = String::from(if mesh.dim() == 1 { "cell_id,x,value\n" } else { "cell_id,x,y,value\n" });
    for (t, (p, val)) in mesh.barycenters().iter().zip(values).enumerate() {
        if mesh.dim() == 1 {
            out.push_str(&format!("{},{},{}\n", t, fmt_f64(p[0]), fmt_f64(*val)));
        } else {
            out.push_str(&format!("{},{},{},{}\n", t, fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*val)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.5), "-2.5000000000000000e0");
        let x = 1.0 / 3.0;
        assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = std::env::temp_dir().join(format!("anisopt-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert!(!dir.join(".a.csv.tmp").exists());
        fs::remove_dir_all(&dir).unwrap();
    }
}
