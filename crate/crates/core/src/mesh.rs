//! Laminate macro meshes (intervals in 1D, triangles in 2D) and radial particle grids.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParameterSet, SubdomainTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryTag {
    GammaN,
    GammaP,
    Insulated,
}

/// An exterior facet: one vertex in 1D, an edge in 2D.
#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    pub vertices: Vec<usize>,
    pub tag: BoundaryTag,
    /// Length in 2D; unit point weight in 1D.
    pub measure: f64,
}

/// A facet shared by elements of two different subdomains.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceFacet {
    pub vertices: Vec<usize>,
    pub sides: (SubdomainTag, SubdomainTag),
}

/// Layer thicknesses along the through-cell axis and, in 2D, the cell height (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub negative: f64,
    pub separator: f64,
    pub positive: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
}

impl Geometry {
    pub fn extents(&self) -> [f64; 3] {
        [self.negative, self.separator, self.positive]
    }

    pub fn dim(&self) -> usize {
        if self.height.is_some() {
            2
        } else {
            1
        }
    }
}

/// Element counts per layer along x, and the number of element rows along y in 2D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub negative: usize,
    pub separator: usize,
    pub positive: usize,
    #[serde(default = "one")]
    pub vertical: usize,
}

fn one() -> usize {
    1
}

impl Resolution {
    pub fn counts(&self) -> [usize; 3] {
        [self.negative, self.separator, self.positive]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMesh {
    dim: usize,
    /// Stride `dim`.
    coords: Vec<f64>,
    /// Stride `dim + 1`.
    cells: Vec<usize>,
    tags: Vec<SubdomainTag>,
    boundary: Vec<Facet>,
    interfaces: Vec<InterfaceFacet>,
}

impl CellMesh {
    /// Builds a mesh from raw tables and derives facet tags from topology.
    ///
    /// Exterior facets on the smallest x are `GammaN`, on the largest x `GammaP`,
    /// everything else is insulated.
    pub fn from_parts(dim: usize, coords: Vec<f64>, cells: Vec<usize>, tags: Vec<SubdomainTag>) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::Mesh(format!("unsupported dimension {dim}")));
        }
        if !coords.len().is_multiple_of(dim)
            || !cells.len().is_multiple_of(dim + 1)
            || cells.len() / (dim + 1) != tags.len()
        {
            return Err(Error::Mesh("inconsistent table sizes".into()));
        }
        let nv = coords.len() / dim;
        if cells.iter().any(|&v| v >= nv) {
            return Err(Error::Mesh("element references a missing vertex".into()));
        }
        let mut mesh = CellMesh {
            dim,
            coords,
            cells,
            tags,
            boundary: Vec::new(),
            interfaces: Vec::new(),
        };
        for e in 0..mesh.n_elements() {
            let m = mesh.element_measure(e);
            if !(m > 0.0) {
                return Err(Error::Mesh(format!("element {e} has non-positive measure {m}")));
            }
        }
        mesh.classify_facets();
        Ok(mesh)
    }

    fn classify_facets(&mut self) {
        let nloc = self.dim + 1;
        let mut owners: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
        let mut order = Vec::new();
        for e in 0..self.n_elements() {
            let cell = self.element(e);
            for skip in 0..nloc {
                let mut key: Vec<usize> = (0..nloc).filter(|&i| i != skip).map(|i| cell[i]).collect();
                key.sort_unstable();
                let entry = owners.entry(key.clone()).or_default();
                if entry.is_empty() {
                    order.push(key);
                }
                entry.push(e);
            }
        }
        let (xmin, xmax) = self.x_range();
        let tol = 1e-9 * (xmax - xmin);
        self.boundary.clear();
        self.interfaces.clear();
        for key in order {
            let elems = &owners[&key];
            if elems.len() == 1 {
                let xs: Vec<f64> = key.iter().map(|&v| self.vertex(v)[0]).collect();
                let tag = if xs.iter().all(|x| (x - xmin).abs() <= tol) {
                    BoundaryTag::GammaN
                } else if xs.iter().all(|x| (x - xmax).abs() <= tol) {
                    BoundaryTag::GammaP
                } else {
                    BoundaryTag::Insulated
                };
                let measure = if self.dim == 1 {
                    1.0
                } else {
                    distance(self.vertex(key[0]), self.vertex(key[1]))
                };
                self.boundary.push(Facet {
                    vertices: key,
                    tag,
                    measure,
                });
            } else if elems.len() == 2 {
                let (a, b) = (self.tags[elems[0]], self.tags[elems[1]]);
                if a != b {
                    self.interfaces.push(InterfaceFacet {
                        vertices: key,
                        sides: (a.min(b), a.max(b)),
                    });
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn n_elements(&self) -> usize {
        self.tags.len()
    }

    pub fn vertex(&self, v: usize) -> &[f64] {
        &self.coords[v * self.dim..(v + 1) * self.dim]
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let n = self.dim + 1;
        &self.cells[e * n..(e + 1) * n]
    }

    pub fn tag(&self, e: usize) -> SubdomainTag {
        self.tags[e]
    }

    pub fn tags(&self) -> &[SubdomainTag] {
        &self.tags
    }

    pub fn boundary_facets(&self) -> &[Facet] {
        &self.boundary
    }

    pub fn interface_facets(&self) -> &[InterfaceFacet] {
        &self.interfaces
    }

    pub fn x_range(&self) -> (f64, f64) {
        (0..self.n_vertices())
            .map(|v| self.vertex(v)[0])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
    }

    /// Signed measure: length in 1D, area in 2D.
    pub fn element_measure(&self, e: usize) -> f64 {
        let c = self.element(e);
        match self.dim {
            1 => self.vertex(c[1])[0] - self.vertex(c[0])[0],
            _ => {
                let (a, b, d) = (self.vertex(c[0]), self.vertex(c[1]), self.vertex(c[2]));
                0.5 * ((b[0] - a[0]) * (d[1] - a[1]) - (d[0] - a[0]) * (b[1] - a[1]))
            }
        }
    }

    pub fn diameter(&self, e: usize) -> f64 {
        let c = self.element(e);
        let mut h: f64 = 0.0;
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                h = h.max(distance(self.vertex(c[i]), self.vertex(c[j])));
            }
        }
        h
    }

    pub fn max_diameter(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.diameter(e)).fold(0.0, f64::max)
    }

    /// Diameter over inscribed-circle diameter; 1 for intervals.
    pub fn shape_ratio(&self, e: usize) -> f64 {
        if self.dim == 1 {
            return 1.0;
        }
        let c = self.element(e);
        let perimeter: f64 = (0..3)
            .map(|i| distance(self.vertex(c[i]), self.vertex(c[(i + 1) % 3])))
            .sum();
        let inradius = 2.0 * self.element_measure(e) / perimeter;
        self.diameter(e) / (2.0 * inradius)
    }

    pub fn max_shape_ratio(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.shape_ratio(e)).fold(0.0, f64::max)
    }

    pub fn centroid(&self, e: usize) -> Vec<f64> {
        let c = self.element(e);
        let mut x = vec![0.0; self.dim];
        for &v in c {
            for (xi, vi) in x.iter_mut().zip(self.vertex(v)) {
                *xi += vi / c.len() as f64;
            }
        }
        x
    }

    pub fn subdomain_volume(&self, tag: SubdomainTag) -> f64 {
        (0..self.n_elements())
            .filter(|&e| self.tags[e] == tag)
            .map(|e| self.element_measure(e))
            .sum()
    }

    pub fn gamma_measure(&self, tag: BoundaryTag) -> f64 {
        self.boundary.iter().filter(|f| f.tag == tag).map(|f| f.measure).sum()
    }

    /// Fails if any element's shape ratio exceeds `limit`.
    pub fn check_shape(&self, limit: f64) -> Result<()> {
        let worst = self.max_shape_ratio();
        if worst > limit {
            return Err(Error::Mesh(format!("shape ratio {worst} exceeds {limit}")));
        }
        Ok(())
    }

    /// Uniform refinement: intervals split in two, triangles in four (red).
    /// Coarse vertices keep their indices; midpoints are appended.
    pub fn refine_uniform(&self, levels: usize) -> CellMesh {
        let mut mesh = self.clone();
        for _ in 0..levels {
            mesh = mesh.refine_once();
        }
        mesh
    }

    fn refine_once(&self) -> CellMesh {
        let dim = self.dim;
        let mut coords = self.coords.clone();
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, coords: &mut Vec<f64>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let id = coords.len() / dim;
                for k in 0..dim {
                    let x = 0.5 * (coords[key.0 * dim + k] + coords[key.1 * dim + k]);
                    coords.push(x);
                }
                id
            })
        };
        let mut cells = Vec::with_capacity(self.cells.len() * (1 << dim));
        let mut tags = Vec::with_capacity(self.tags.len() * (1 << dim));
        for e in 0..self.n_elements() {
            let c = self.element(e);
            let t = self.tags[e];
            if dim == 1 {
                let m = mid(c[0], c[1], &mut coords);
                cells.extend_from_slice(&[c[0], m, m, c[1]]);
                tags.extend_from_slice(&[t, t]);
            } else {
                let m01 = mid(c[0], c[1], &mut coords);
                let m12 = mid(c[1], c[2], &mut coords);
                let m20 = mid(c[2], c[0], &mut coords);
                cells.extend_from_slice(&[c[0], m01, m20, m01, c[1], m12, m20, m12, c[2], m01, m12, m20]);
                tags.extend_from_slice(&[t; 4]);
            }
        }
        CellMesh::from_parts(dim, coords, cells, tags).expect("refinement preserves validity")
    }

    /// Plain-text dump: header, vertex table, element table with tags.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dfn-mesh 1\ndim {}\nvertices {}", self.dim, self.n_vertices());
        for v in 0..self.n_vertices() {
            let row: Vec<String> = self.vertex(v).iter().map(|x| format!("{x:e}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let _ = writeln!(s, "elements {}", self.n_elements());
        for e in 0..self.n_elements() {
            let row: Vec<String> = self.element(e).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{} {}", row.join(" "), self.tags[e]);
        }
        s
    }

    pub fn restore(text: &str) -> Result<CellMesh> {
        let bad = |what: &str| Error::Mesh(format!("malformed mesh dump: {what}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("dfn-mesh 1") {
            return Err(bad("header"));
        }
        let mut field = |name: &str| -> Result<usize> {
            let line = lines.next().ok_or_else(|| bad(name))?;
            line.strip_prefix(name)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| bad(name))
        };
        let dim = field("dim")?;
        let nv = field("vertices")?;
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty()).skip(3);
        let mut coords = Vec::with_capacity(nv * dim);
        for _ in 0..nv {
            let line = lines.next().ok_or_else(|| bad("vertex table"))?;
            for tok in line.split_whitespace() {
                coords.push(tok.parse::<f64>().map_err(|_| bad("coordinate"))?);
            }
        }
        let ne: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("elements"))
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| bad("elements"))?;
        let mut cells = Vec::with_capacity(ne * (dim + 1));
        let mut tags = Vec::with_capacity(ne);
        for _ in 0..ne {
            let line = lines.next().ok_or_else(|| bad("element table"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != dim + 2 {
                return Err(bad("element row"));
            }
            for t in &toks[..dim + 1] {
                cells.push(t.parse::<usize>().map_err(|_| bad("vertex index"))?);
            }
            tags.push(match toks[dim + 1] {
                "negative" => SubdomainTag::Negative,
                "separator" => SubdomainTag::Separator,
                "positive" => SubdomainTag::Positive,
                _ => return Err(bad("tag")),
            });
        }
        CellMesh::from_parts(dim, coords, cells, tags)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Structured laminate mesh: layers n|s|p along x starting at x = 0.
pub fn build_laminate(geometry: &Geometry, resolution: &Resolution) -> Result<CellMesh> {
    let extents = geometry.extents();
    let counts = resolution.counts();
    for (tag, (&w, &n)) in SubdomainTag::ALL.iter().zip(extents.iter().zip(&counts)) {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Mesh(format!("{tag} extent must be positive, got {w}")));
        }
        if n == 0 {
            return Err(Error::Mesh(format!("{tag} element count must be positive")));
        }
    }
    let mut xs = vec![0.0];
    let mut layer_of_cell = Vec::new();
    let mut start = 0.0;
    for (k, (&w, &n)) in extents.iter().zip(&counts).enumerate() {
        let end = start + w;
        for i in 1..=n {
            xs.push(if i == n { end } else { start + w * i as f64 / n as f64 });
            layer_of_cell.push(SubdomainTag::ALL[k]);
        }
        start = end;
    }
    match geometry.height {
        None => {
            let cells: Vec<usize> = (0..layer_of_cell.len()).flat_map(|i| [i, i + 1]).collect();
            CellMesh::from_parts(1, xs, cells, layer_of_cell)
        }
        Some(height) => {
            if !(height > 0.0 && height.is_finite()) {
                return Err(Error::Mesh(format!("height must be positive, got {height}")));
            }
            let ny = resolution.vertical;
            if ny == 0 {
                return Err(Error::Mesh("vertical element count must be positive".into()));
            }
            let nx = xs.len();
            let mut coords = Vec::with_capacity(2 * nx * (ny + 1));
            for j in 0..=ny {
                let y = if j == ny { height } else { height * j as f64 / ny as f64 };
                for &x in &xs {
                    coords.push(x);
                    coords.push(y);
                }
            }
            let id = |i: usize, j: usize| j * nx + i;
            let mut cells = Vec::new();
            let mut tags = Vec::new();
            for j in 0..ny {
                for (i, &t) in layer_of_cell.iter().enumerate() {
                    cells.extend_from_slice(&[id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                    cells.extend_from_slice(&[id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
                    tags.extend_from_slice(&[t, t]);
                }
            }
            CellMesh::from_parts(2, coords, cells, tags)
        }
    }
}

/// How a radial grid is laid out on `[0, 1]` before scaling by the particle radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RadialSpec {
    Uniform {
        intervals: usize,
    },
    /// Explicit ascending nodes from 0 to 1.
    Nodes {
        nodes: Vec<f64>,
    },
    /// `{0} ∪ {1 - 2^-n : n = 1..=levels} ∪ {1}`, clustered towards the surface.
    Graded {
        levels: usize,
    },
}

impl RadialSpec {
    pub fn unit_nodes(&self) -> Vec<f64> {
        match self {
            RadialSpec::Uniform { intervals } => (0..=*intervals)
                .map(|i| {
                    if i == *intervals {
                        1.0
                    } else {
                        i as f64 / *intervals as f64
                    }
                })
                .collect(),
            RadialSpec::Nodes { nodes } => nodes.clone(),
            RadialSpec::Graded { levels } => {
                let mut v = vec![0.0];
                v.extend((1..=*levels as i32).map(|n| 1.0 - 0.5f64.powi(n)));
                v.push(1.0);
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    pub nodes: Vec<f64>,
    pub tag: SubdomainTag,
}

impl RadialGrid {
    pub fn new(nodes: Vec<f64>, tag: SubdomainTag) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Mesh("radial grid needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::Mesh("radial grid must start at 0".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Mesh("radial nodes must be strictly increasing".into()));
        }
        Ok(Self { nodes, tag })
    }

    pub fn radius(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn max_spacing(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Bisects every interval `levels` times.
    pub fn refine(&self, levels: usize) -> RadialGrid {
        let mut nodes = self.nodes.clone();
        for _ in 0..levels {
            let mut next = Vec::with_capacity(2 * nodes.len() - 1);
            for w in nodes.windows(2) {
                next.push(w[0]);
                next.push(0.5 * (w[0] + w[1]));
            }
            next.push(*nodes.last().unwrap());
            nodes = next;
        }
        RadialGrid { nodes, tag: self.tag }
    }

    /// Interval containing `r` (clamped to the grid).
    pub fn locate(&self, r: f64) -> usize {
        let i = self.nodes.partition_point(|&x| x <= r);
        i.clamp(1, self.n_intervals()) - 1
    }
}

pub fn build_radial(ps: &ParameterSet, tag: SubdomainTag, spec: &RadialSpec) -> Result<RadialGrid> {
    let electrode = ps.electrode(tag)?;
    let unit = spec.unit_nodes();
    if unit.last() != Some(&1.0) {
        return Err(Error::Mesh("radial node list must end at 1".into()));
    }
    let rs = electrode.radius;
    RadialGrid::new(unit.iter().map(|x| x * rs).collect(), tag)
}
