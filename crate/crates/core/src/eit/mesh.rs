use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{EkiError, Result};

/// A boundary edge between two consecutive nodes on the unit circle, with
/// the polar angles of its end points (`theta[1] > theta[0]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub theta: [f64; 2],
}

/// Triangulation of the unit disc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscMesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary: Vec<BoundaryEdge>,
}

fn signed_area(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

impl DiscMesh {
    /// Polar mesh with `rings` concentric rings; ring k carries 4k nodes at
    /// radius k/rings, giving 4·rings² triangles.
    pub fn polar(rings: usize) -> Result<Self> {
        Self::polar_scaled(rings, 1)
    }

    /// As [`DiscMesh::polar`] with 4·s·k nodes on ring k and 4·s·rings²
    /// triangles.
    pub fn polar_scaled(rings: usize, s: usize) -> Result<Self> {
        if rings < 1 || s < 1 {
            return Err(EkiError::Mesh("need at least one ring".into()));
        }
        let mut nodes = vec![[0.0, 0.0]];
        let mut ring_start = vec![0usize];
        for k in 1..=rings {
            ring_start.push(nodes.len());
            let r = k as f64 / rings as f64;
            let m = 4 * s * k;
            for i in 0..m {
                let t = 2.0 * PI * i as f64 / m as f64;
                nodes.push([r * t.cos(), r * t.sin()]);
            }
        }
        let ring_len = |k: usize| if k == 0 { 1 } else { 4 * s * k };
        let angle = |k: usize, i: usize| if k == 0 { 0.0 } else { 2.0 * PI * i as f64 / ring_len(k) as f64 };

        let mut triangles = Vec::with_capacity(4 * rings * rings);
        for k in 1..=rings {
            let (inner, outer) = (ring_len(k - 1), ring_len(k));
            let inner_edges = if k == 1 { 0 } else { inner };
            let (si, so) = (ring_start[k - 1], ring_start[k]);
            // Merge the two rings by angle; each step advances one pointer.
            let (mut a, mut b) = (0usize, 0usize);
            while a < inner_edges || b < outer {
                let ta = if k == 1 { f64::INFINITY } else { angle(k - 1, a + 1) };
                let tb = angle(k, b + 1);
                let advance_outer = a >= inner_edges || (b < outer && tb <= ta);
                let ia = si + if k == 1 { 0 } else { a % inner };
                let ib = so + b % outer;
                if advance_outer {
                    let ib2 = so + (b + 1) % outer;
                    triangles.push([ia, ib, ib2]);
                    b += 1;
                } else {
                    let ia2 = si + (a + 1) % inner;
                    triangles.push([ia, ib, ia2]);
                    a += 1;
                }
            }
        }
        for t in triangles.iter_mut() {
            if signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]) < 0.0 {
                t.swap(1, 2);
            }
        }

        let m = ring_len(rings);
        let start = ring_start[rings];
        let boundary = (0..m)
            .map(|i| BoundaryEdge {
                nodes: [start + i, start + (i + 1) % m],
                theta: [angle(rings, i), angle(rings, i) + 2.0 * PI / m as f64],
            })
            .collect();
        let mesh = DiscMesh {
            nodes,
            triangles,
            boundary,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t];
        let (p, q, r) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        [(p[0] + q[0] + r[0]) / 3.0, (p[1] + q[1] + r[1]) / 3.0]
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_triangles()).map(|t| self.area(t)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= self.nodes.len()) {
                return Err(EkiError::Mesh(format!("triangle {t} references a missing node")));
            }
            let a = self.area(t);
            if !(a > 1e-12) {
                return Err(EkiError::Mesh(format!("triangle {t} has area {a:e}")));
            }
        }
        let nb = self.boundary.len();
        if nb < 3 {
            return Err(EkiError::Mesh("boundary has fewer than three edges".into()));
        }
        for (i, e) in self.boundary.iter().enumerate() {
            if e.nodes[1] != self.boundary[(i + 1) % nb].nodes[0] {
                return Err(EkiError::Mesh(format!("boundary edge {i} does not connect to its successor")));
            }
            if !(e.theta[1] > e.theta[0]) {
                return Err(EkiError::Mesh(format!("boundary edge {i} has a non-increasing angle")));
            }
            let p = self.nodes[e.nodes[0]];
            if ((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() > 1e-12 {
                return Err(EkiError::Mesh(format!("boundary node {} is off the unit circle", e.nodes[0])));
            }
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let m: DiscMesh = serde_json::from_reader(r)?;
        m.validate()?;
        Ok(m)
    }
}

/// Polar mesh with about `target_elements` triangles. Small targets use
/// more nodes per ring so the boundary polygon keeps at least 32 edges.
pub fn build_disc_mesh(target_elements: usize) -> Result<DiscMesh> {
    if target_elements < 64 {
        return Err(EkiError::Mesh(format!("target of {target_elements} elements is below 64")));
    }
    let target = target_elements as f64;
    for s in 1..=target_elements / 16 {
        let rings = (target / (4.0 * s as f64)).sqrt().round().max(1.0) as usize;
        let count = (4 * s * rings * rings) as f64;
        if 4 * s * rings >= 32 && (count / target - 1.0).abs() <= 0.15 {
            return DiscMesh::polar_scaled(rings, s);
        }
    }
    Err(EkiError::Mesh(format!("no polar layout fits {target_elements} elements")))
}
