//! Legacy ASCII VTK output of nodal fields and sensor overlays.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{OedError, Result};
use crate::mesh::Mesh;

/// Triangle mesh with one POINT_DATA scalar per named field.
pub fn write_mesh_fields(path: impl AsRef<Path>, mesh: &Mesh, fields: &[(&str, &[f64])]) -> Result<()> {
    let n = mesh.num_nodes();
    for (name, f) in fields {
        if f.len() != n {
            return Err(OedError::InvalidArgument(format!(
                "field '{name}' has {} values for {n} nodes",
                f.len()
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "aoed field output")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {n} double")?;
    for p in mesh.nodes() {
        writeln!(w, "{:?} {:?} 0", p[0], p[1])?;
    }
    let nt = mesh.num_triangles();
    writeln!(w, "CELLS {nt} {}", 4 * nt)?;
    for t in mesh.triangles() {
        writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    writeln!(w, "CELL_TYPES {nt}")?;
    for _ in 0..nt {
        writeln!(w, "5")?;
    }
    write_point_data(&mut w, n, fields)?;
    w.flush()?;
    Ok(())
}

/// Sensor locations as vertices carrying their weights.
pub fn write_sensor_overlay(path: impl AsRef<Path>, points: &[[f64; 2]], weights: &[f64]) -> Result<()> {
    if points.len() != weights.len() {
        return Err(OedError::DimensionMismatch {
            what: "sensor weights",
            expected: points.len(),
            got: weights.len(),
        });
    }
    let n = points.len();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "aoed sensor design")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET POLYDATA")?;
    writeln!(w, "POINTS {n} double")?;
    for p in points {
        writeln!(w, "{:?} {:?} 0", p[0], p[1])?;
    }
    writeln!(w, "VERTICES {n} {}", 2 * n)?;
    for i in 0..n {
        writeln!(w, "1 {i}")?;
    }
    write_point_data(&mut w, n, &[("w", weights)])?;
    w.flush()?;
    Ok(())
}

fn write_point_data(w: &mut impl Write, n: usize, fields: &[(&str, &[f64])]) -> Result<()> {
    if fields.is_empty() {
        return Ok(());
    }
    writeln!(w, "POINT_DATA {n}")?;
    for (name, f) in fields {
        let name: String = name.chars().map(|c| if c.is_whitespace() { '_' } else { c }).collect();
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for v in f.iter() {
            writeln!(w, "{v:?}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_rect_mesh, MarkerRule, Rect};

    #[test]
    fn writes_counts() {
        let mesh = build_rect_mesh(2, 1, Rect::unit_square(), MarkerRule::TopBottomDirichlet).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.vtk");
        let f = vec![1.0; mesh.num_nodes()];
        write_mesh_fields(&p, &mesh, &[("m", &f)]).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert!(s.contains("POINTS 6 double") && s.contains("CELLS 4 16") && s.contains("POINT_DATA 6"));
        assert!(write_mesh_fields(&p, &mesh, &[("m", &f[..3])]).is_err());
    }
}
