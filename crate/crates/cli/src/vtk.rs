//! Legacy ASCII VTK output of discrete fields and per-element switch data.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use cipstab::space::{Field, Space};
use cipstab::stabilization::SwitchField;

const VTK_TRIANGLE: u32 = 5;

/// Sub-triangles of the degree-`k` Lagrange lattice, as local node indices.
fn lattice_cells(space: &Space) -> Vec<[usize; 3]> {
    let basis = space.basis();
    let k = basis.degree();
    let mut index = vec![vec![usize::MAX; k + 1]; k + 1];
    for i in 0..basis.n_local() {
        let b = basis.node_barycentric(i);
        let (p, q) = ((b[1] * k as f64).round() as usize, (b[2] * k as f64).round() as usize);
        index[p][q] = i;
    }
    let mut cells = Vec::with_capacity(k * k);
    for p in 0..k {
        for q in 0..k - p {
            cells.push([index[p][q], index[p + 1][q], index[p][q + 1]]);
            if p + q + 1 < k {
                cells.push([index[p + 1][q], index[p + 1][q + 1], index[p][q + 1]]);
            }
        }
    }
    cells
}

/// Writes `fields` as point data on a piecewise-linear refinement of every
/// element; element points are duplicated so periodic seams stay open.
/// `switch` adds `varpi` and `r_t` as cell data.
pub fn write_vtk(path: &Path, space: &Space, title: &str, fields: &[(&str, &Field)], switch: Option<&SwitchField>) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let n_el = space.n_elements();
    let nl = space.n_local();
    let cells = lattice_cells(space);
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "{title}")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {} double", n_el * nl)?;
    for t in 0..n_el {
        let geo = space.geometry(t);
        for i in 0..nl {
            let x = geo.point(space.basis().node_barycentric(i));
            writeln!(out, "{} {} 0", x.x, x.y)?;
        }
    }
    let n_cells = n_el * cells.len();
    writeln!(out, "CELLS {} {}", n_cells, 4 * n_cells)?;
    for t in 0..n_el {
        for c in &cells {
            writeln!(out, "3 {} {} {}", t * nl + c[0], t * nl + c[1], t * nl + c[2])?;
        }
    }
    writeln!(out, "CELL_TYPES {n_cells}")?;
    for _ in 0..n_cells {
        writeln!(out, "{VTK_TRIANGLE}")?;
    }
    if let Some(sw) = switch {
        writeln!(out, "CELL_DATA {n_cells}")?;
        for (name, data) in [("varpi", &sw.varpi), ("r_t", &sw.r_t)] {
            writeln!(out, "SCALARS {name} double 1")?;
            writeln!(out, "LOOKUP_TABLE default")?;
            for v in data.iter() {
                for _ in 0..cells.len() {
                    writeln!(out, "{v}")?;
                }
            }
        }
    }
    if !fields.is_empty() {
        writeln!(out, "POINT_DATA {}", n_el * nl)?;
        let mut local = vec![0.0; nl];
        for (name, field) in fields {
            writeln!(out, "SCALARS {name} double 1")?;
            writeln!(out, "LOOKUP_TABLE default")?;
            for t in 0..n_el {
                space.gather(&field.coefficients, t, &mut local);
                for v in &local {
                    writeln!(out, "{v}")?;
                }
            }
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cipstab::mesh::{build_structured_mesh, Periodicity, Rect};
    use std::sync::Arc;

    #[test]
    fn lattice_covers_the_reference_triangle() {
        for k in 1..=3 {
            let m = Arc::new(build_structured_mesh(1, 1, Rect::unit_square(), Periodicity::NONE).unwrap());
            let s = Space::new(m, k).unwrap();
            let cells = lattice_cells(&s);
            assert_eq!(cells.len(), k * k);
            let area: f64 = cells
                .iter()
                .map(|c| {
                    let p = c.map(|i| s.basis().node_barycentric(i));
                    0.5 * ((p[1][1] - p[0][1]) * (p[2][2] - p[0][2]) - (p[2][1] - p[0][1]) * (p[1][2] - p[0][2]))
                })
                .sum();
            assert!((area - 0.5).abs() < 1e-14, "orientation or coverage broken for k={k}");
        }
    }

    #[test]
    fn writes_counts_and_sections() {
        let m = Arc::new(build_structured_mesh(2, 2, Rect::unit_square(), Periodicity::BOTH).unwrap());
        let s = Space::new(m, 2).unwrap();
        let f = s.interpolate_nodal(|p| p.x).unwrap();
        let sw = SwitchField::constant(s.n_elements(), 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.vtk");
        write_vtk(&path, &s, "test", &[("u", &f)], Some(&sw)).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.contains("POINTS 48 double"));
        assert!(text.contains("CELLS 32 128"));
        assert!(text.contains("CELL_DATA 32"));
        assert!(text.contains("SCALARS varpi double 1"));
        assert!(text.contains("POINT_DATA 48"));
    }
}
