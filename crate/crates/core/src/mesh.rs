//! Structured triangulations of axis-aligned rectangles.
//!
//! Every grid cell is split along its lower-left to upper-right diagonal into
//! two counter-clockwise triangles:
//!
//! - lower triangle `[v00, v10, v11]`
//! - upper triangle `[v00, v11, v01]`
//!
//! Local edge `e` of a triangle runs from local vertex `e` to `(e + 1) % 3`.
//! Periodic identification is done on vertices (slave -> master); triangles
//! keep their geometric vertices so element geometry is never wrapped.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = nalgebra::Vector2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryTag {
    Left,
    Right,
    Bottom,
    Top,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn unit_square() -> Self {
        Self::new(0.0, 1.0, 0.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }
}

impl Default for Rect {
    fn default() -> Self {
        Self::unit_square()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Periodicity {
    pub x: bool,
    pub y: bool,
}

impl Periodicity {
    pub const NONE: Periodicity = Periodicity { x: false, y: false };
    pub const BOTH: Periodicity = Periodicity { x: true, y: true };

    pub fn is_fully_periodic(&self) -> bool {
        self.x && self.y
    }
}

/// One side of a facet: an element and its local edge index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ElementEdge {
    pub element: usize,
    pub edge: usize,
}

#[derive(Clone, Debug)]
pub struct Facet {
    /// Geometric endpoints in the direction of the left element's edge.
    pub vertices: [usize; 2],
    pub left: ElementEdge,
    /// `None` on the physical boundary.
    pub right: Option<ElementEdge>,
    /// Whether the right element traverses the facet opposite to the left one.
    pub reversed: bool,
    pub boundary: Option<BoundaryTag>,
}

impl Facet {
    pub fn is_interior(&self) -> bool {
        self.right.is_some()
    }

    /// The element on the other side of `element`, if any.
    pub fn neighbor_of(&self, element: usize) -> Option<ElementEdge> {
        let right = self.right?;
        if self.left.element == element {
            Some(right)
        } else if right.element == element {
            Some(self.left)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Vec<Vec2>,
    pub triangles: Vec<[usize; 3]>,
    pub facets: Vec<Facet>,
    /// Facet index per local edge.
    pub element_facets: Vec<[usize; 3]>,
    /// Longest edge of each triangle.
    pub element_diameter: Vec<f64>,
    pub global_h: f64,
    /// Master vertex for every vertex (identity without periodicity).
    pub periodic_map: Vec<usize>,
    /// Maximum of `h_T / inradius(T)` over all elements.
    pub shape_regularity: f64,
    pub domain: Rect,
    pub periodicity: Periodicity,
    pub nx: usize,
    pub ny: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum EdgeKey {
    Horizontal(usize, usize),
    Vertical(usize, usize),
    Diagonal(usize, usize),
}

/// Builds the diagonal-split triangulation of `domain` with `nx * ny` cells.
pub fn build_structured_mesh(
    nx: usize,
    ny: usize,
    domain: Rect,
    periodic: Periodicity,
) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidMesh(format!(
            "element counts must be positive, got {nx} x {ny}"
        )));
    }
    if !(domain.width() > 0.0 && domain.height() > 0.0) {
        return Err(Error::InvalidMesh(format!(
            "degenerate domain {domain:?}"
        )));
    }
    // One cell across a periodic axis would identify both ends of an edge.
    if periodic.x && nx < 2 {
        return Err(Error::InvalidMesh(
            "periodic x axis needs at least 2 cells".into(),
        ));
    }
    if periodic.y && ny < 2 {
        return Err(Error::InvalidMesh(
            "periodic y axis needs at least 2 cells".into(),
        ));
    }

    let dx = domain.width() / nx as f64;
    let dy = domain.height() / ny as f64;
    let vid = |i: usize, j: usize| j * (nx + 1) + i;

    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    let mut periodic_map = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            // Exact endpoints avoid round-off in boundary coordinates.
            let x = if i == nx { domain.x1 } else { domain.x0 + i as f64 * dx };
            let y = if j == ny { domain.y1 } else { domain.y0 + j as f64 * dy };
            vertices.push(Vec2::new(x, y));
            let mi = if periodic.x { i % nx } else { i };
            let mj = if periodic.y { j % ny } else { j };
            periodic_map.push(vid(mi, mj));
        }
    }

    let mut triangles = Vec::with_capacity(2 * nx * ny);
    let mut keys = Vec::with_capacity(2 * nx * ny);
    let hkey = |i: usize, j: usize| {
        EdgeKey::Horizontal(i, if periodic.y { j % ny } else { j })
    };
    let vkey = |i: usize, j: usize| {
        EdgeKey::Vertical(if periodic.x { i % nx } else { i }, j)
    };
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v11, v01) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
            triangles.push([v00, v10, v11]);
            keys.push([hkey(i, j), vkey(i + 1, j), EdgeKey::Diagonal(i, j)]);
            triangles.push([v00, v11, v01]);
            keys.push([EdgeKey::Diagonal(i, j), hkey(i, j + 1), vkey(i, j)]);
        }
    }

    let mut facets: Vec<Facet> = Vec::with_capacity(3 * nx * ny + nx + ny);
    let mut lookup: HashMap<EdgeKey, usize> = HashMap::with_capacity(3 * nx * ny + nx + ny);
    let mut element_facets = vec![[usize::MAX; 3]; triangles.len()];
    for (t, tri) in triangles.iter().enumerate() {
        for e in 0..3 {
            let key = keys[t][e];
            let a = tri[e];
            let b = tri[(e + 1) % 3];
            match lookup.get(&key) {
                Some(&f) => {
                    let facet = &mut facets[f];
                    if facet.right.is_some() {
                        return Err(Error::InvalidMesh(format!(
                            "facet {f} has more than two incident elements"
                        )));
                    }
                    facet.right = Some(ElementEdge { element: t, edge: e });
                    let [la, lb] = facet.vertices;
                    let (ma, mb) = (periodic_map[la], periodic_map[lb]);
                    facet.reversed = periodic_map[a] == mb && periodic_map[b] == ma;
                    element_facets[t][e] = f;
                }
                None => {
                    let f = facets.len();
                    lookup.insert(key, f);
                    facets.push(Facet {
                        vertices: [a, b],
                        left: ElementEdge { element: t, edge: e },
                        right: None,
                        reversed: false,
                        boundary: None,
                    });
                    element_facets[t][e] = f;
                }
            }
        }
    }
    for facet in facets.iter_mut().filter(|f| f.right.is_none()) {
        let [a, b] = facet.vertices;
        let (pa, pb) = (vertices[a], vertices[b]);
        facet.boundary = Some(if pa.y == pb.y {
            if pa.y == domain.y0 {
                BoundaryTag::Bottom
            } else {
                BoundaryTag::Top
            }
        } else if pa.x == domain.x0 {
            BoundaryTag::Left
        } else {
            BoundaryTag::Right
        });
    }

    let mut element_diameter = Vec::with_capacity(triangles.len());
    let mut shape_regularity: f64 = 0.0;
    for tri in &triangles {
        let p = tri.map(|v| vertices[v]);
        let lengths = [(p[1] - p[0]).norm(), (p[2] - p[1]).norm(), (p[0] - p[2]).norm()];
        let h = lengths.iter().cloned().fold(0.0, f64::max);
        let area = 0.5 * (p[1] - p[0]).perp(&(p[2] - p[0]));
        if area <= 0.0 {
            return Err(Error::InvalidMesh("non-positive triangle orientation".into()));
        }
        let inradius = 2.0 * area / lengths.iter().sum::<f64>();
        shape_regularity = shape_regularity.max(h / inradius);
        element_diameter.push(h);
    }
    let global_h = element_diameter.iter().cloned().fold(0.0, f64::max);

    Ok(Mesh {
        vertices,
        triangles,
        facets,
        element_facets,
        element_diameter,
        global_h,
        periodic_map,
        shape_regularity,
        domain,
        periodicity: periodic,
        nx,
        ny,
    })
}

impl Mesh {
    pub fn n_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn min_h(&self) -> f64 {
        self.element_diameter.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn element_vertices(&self, t: usize) -> [Vec2; 3] {
        self.triangles[t].map(|v| self.vertices[v])
    }

    pub fn element_area(&self, t: usize) -> f64 {
        let p = self.element_vertices(t);
        0.5 * (p[1] - p[0]).perp(&(p[2] - p[0]))
    }

    pub fn centroid(&self, t: usize) -> Vec2 {
        let p = self.element_vertices(t);
        (p[0] + p[1] + p[2]) / 3.0
    }

    /// Number of distinct vertices once periodic copies are merged.
    pub fn n_distinct_vertices(&self) -> usize {
        self.periodic_map
            .iter()
            .enumerate()
            .filter(|(v, m)| *v == **m)
            .count()
    }

    pub fn n_interior_facets(&self) -> usize {
        self.facets.iter().filter(|f| f.is_interior()).count()
    }

    pub fn n_boundary_facets(&self) -> usize {
        self.facets.len() - self.n_interior_facets()
    }

    /// Elements whose closure meets the vertical line `x = line_x`.
    pub fn elements_touching_vertical_line(&self, line_x: f64) -> Vec<usize> {
        (0..self.n_elements())
            .filter(|&t| {
                let p = self.element_vertices(t);
                let lo = p.iter().map(|v| v.x).fold(f64::INFINITY, f64::min);
                let hi = p.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max);
                lo <= line_x && line_x <= hi
            })
            .collect()
    }
}

/// Boolean per-element selection with a label describing where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub elements: Vec<bool>,
    pub provenance: String,
}

impl RegionMask {
    pub fn new(elements: Vec<bool>, provenance: impl Into<String>) -> Self {
        Self { elements, provenance: provenance.into() }
    }

    pub fn all(mesh: &Mesh, provenance: impl Into<String>) -> Self {
        Self::new(vec![true; mesh.n_elements()], provenance)
    }

    pub fn none(mesh: &Mesh, provenance: impl Into<String>) -> Self {
        Self::new(vec![false; mesh.n_elements()], provenance)
    }

    pub fn from_fn(mesh: &Mesh, provenance: impl Into<String>, f: impl Fn(usize) -> bool) -> Self {
        Self::new((0..mesh.n_elements()).map(f).collect(), provenance)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn count(&self) -> usize {
        self.elements.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.elements[t]
    }

    pub fn complement(&self, provenance: impl Into<String>) -> Self {
        Self::new(self.elements.iter().map(|b| !b).collect(), provenance)
    }

    pub fn check_len(&self, mesh: &Mesh) -> Result<()> {
        if self.len() != mesh.n_elements() {
            return Err(Error::LengthMismatch { expected: mesh.n_elements(), got: self.len() });
        }
        Ok(())
    }
}

/// Drops every element of `region` whose closure touches the closure of the
/// complement. Vertex contact counts, periodic copies included.
pub fn peel_boundary_layer(mesh: &Mesh, region: &RegionMask) -> Result<RegionMask> {
    region.check_len(mesh)?;
    let mut touched = vec![false; mesh.vertices.len()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        if !region.contains(t) {
            for &v in tri {
                touched[mesh.periodic_map[v]] = true;
            }
        }
    }
    let elements = mesh
        .triangles
        .iter()
        .enumerate()
        .map(|(t, tri)| region.contains(t) && tri.iter().all(|&v| !touched[mesh.periodic_map[v]]))
        .collect();
    Ok(RegionMask::new(elements, format!("{}_minus", region.provenance)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_cell_counts() {
        let m = build_structured_mesh(1, 1, Rect::unit_square(), Periodicity::NONE).unwrap();
        assert_eq!(m.n_elements(), 2);
        assert_eq!(m.n_interior_facets(), 1);
        assert_eq!(m.n_boundary_facets(), 4);
        let tags: Vec<_> = m.facets.iter().filter_map(|f| f.boundary).collect();
        for tag in [BoundaryTag::Left, BoundaryTag::Right, BoundaryTag::Bottom, BoundaryTag::Top] {
            assert_eq!(tags.iter().filter(|&&t| t == tag).count(), 1);
        }
    }

    #[test]
    fn periodic_two_by_two() {
        let m = build_structured_mesh(2, 2, Rect::unit_square(), Periodicity::BOTH).unwrap();
        assert_eq!(m.n_elements(), 8);
        assert_eq!(m.n_boundary_facets(), 0);
        // 24 element sides pair up into 12 distinct facets.
        assert_eq!(m.facets.len(), 12);
        assert_eq!(m.vertices.len(), 9);
        assert_eq!(m.n_distinct_vertices(), 4);

        // Enumeration oracle: (i, j) ~ (i mod 2, j mod 2).
        let mut classes = std::collections::BTreeSet::new();
        for j in 0..=2usize {
            for i in 0..=2usize {
                classes.insert((i % 2, j % 2));
            }
        }
        assert_eq!(classes.len(), 4);
        assert!(m.facets.iter().all(|f| f.reversed));
    }

    #[test]
    fn global_h_is_cell_diagonal() {
        let m = build_structured_mesh(3, 3, Rect::unit_square(), Periodicity::NONE).unwrap();
        assert_relative_eq!(m.global_h, 2f64.sqrt() / 3.0, epsilon = 1e-15);
        // Right isosceles triangle: h / r = sqrt(2) / (1 - 1/sqrt(2)) = 2 + 2 sqrt(2).
        assert_relative_eq!(m.shape_regularity, 2.0 + 2.0 * 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_structured_mesh(0, 3, Rect::unit_square(), Periodicity::NONE).is_err());
        assert!(build_structured_mesh(3, 0, Rect::unit_square(), Periodicity::NONE).is_err());
        let px = Periodicity { x: true, y: false };
        assert!(build_structured_mesh(1, 3, Rect::unit_square(), px).is_err());
        assert!(build_structured_mesh(2, 1, Rect::unit_square(), px).is_ok());
    }

    #[test]
    fn facet_handshake_and_orientation() {
        for per in [Periodicity::NONE, Periodicity { x: true, y: false }, Periodicity::BOTH] {
            let m = build_structured_mesh(5, 4, Rect::new(0.0, 2.0, -1.0, 0.5), per).unwrap();
            assert_eq!(3 * m.n_elements(), 2 * m.n_interior_facets() + m.n_boundary_facets());
            assert!((0..m.n_elements()).all(|t| m.element_area(t) > 0.0));
            for (f, facet) in m.facets.iter().enumerate() {
                assert_eq!(m.element_facets[facet.left.element][facet.left.edge], f);
                if let Some(r) = facet.right {
                    assert_eq!(m.element_facets[r.element][r.edge], f);
                    assert!(facet.reversed);
                }
            }
        }
    }

    #[test]
    fn peel_trivial_masks() {
        let m = build_structured_mesh(4, 4, Rect::unit_square(), Periodicity::NONE).unwrap();
        let all = RegionMask::all(&m, "all");
        assert_eq!(peel_boundary_layer(&m, &all).unwrap().elements, all.elements);
        let none = RegionMask::none(&m, "none");
        assert_eq!(peel_boundary_layer(&m, &none).unwrap().elements, none.elements);
        let short = RegionMask::new(vec![true; 3], "short");
        assert!(peel_boundary_layer(&m, &short).is_err());
    }

    #[test]
    fn peel_matches_vertex_scan() {
        let m = build_structured_mesh(4, 4, Rect::unit_square(), Periodicity::NONE).unwrap();
        let region = RegionMask::from_fn(&m, "smooth", |t| {
            m.element_vertices(t).iter().all(|p| p.x < 0.75)
        });
        let peeled = peel_boundary_layer(&m, &region).unwrap();

        // Brute force: an element survives if no vertex coincides with a
        // vertex of any element outside the region.
        for t in 0..m.n_elements() {
            let mut touches = false;
            for s in 0..m.n_elements() {
                if region.contains(s) {
                    continue;
                }
                for p in m.element_vertices(t) {
                    for q in m.element_vertices(s) {
                        if (p - q).norm() < 1e-12 {
                            touches = true;
                        }
                    }
                }
            }
            assert_eq!(peeled.contains(t), region.contains(t) && !touches, "element {t}");
        }
        // Region is the two left columns; only the first survives.
        assert_eq!(region.count(), 16);
        assert_eq!(peeled.count(), 8);
    }

    #[test]
    fn peel_twice_leaves_interface_layers() {
        let m = build_structured_mesh(6, 6, Rect::unit_square(), Periodicity::NONE).unwrap();
        let s = RegionMask::from_fn(&m, "S", |t| m.centroid(t).x < 0.5);
        let r = s.complement("R");
        let s_minus = peel_boundary_layer(&m, &s).unwrap();
        let r_minus = peel_boundary_layer(&m, &r).unwrap();
        for t in 0..m.n_elements() {
            assert!(!(s_minus.contains(t) && r_minus.contains(t)));
        }
        let missed: Vec<_> = (0..m.n_elements())
            .filter(|&t| !s_minus.contains(t) && !r_minus.contains(t))
            .collect();
        // Every missed element sits in the single-layer band next to x = 0.5.
        assert!(!missed.is_empty());
        for t in missed {
            let xs = m.element_vertices(t).map(|p| p.x);
            assert!(xs.iter().any(|&x| (x - 0.5).abs() < 1e-12), "element {t}");
        }
    }
}
