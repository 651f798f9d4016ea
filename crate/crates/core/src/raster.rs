//! Software z-buffer for triangle meshes.

use crate::geometry::{Intrinsics, Vec3};

/// Faces with any vertex closer than this are not rasterized.
pub const NEAR_PLANE: f64 = 1e-6;

pub const NO_FACE: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct DepthBuffer {
    pub width: usize,
    pub height: usize,
    /// Nearest depth per pixel center, `+inf` where uncovered.
    pub depth: Vec<f64>,
    pub face: Vec<u32>,
}

impl DepthBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![f64::INFINITY; width * height],
            face: vec![NO_FACE; width * height],
        }
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.depth[row * self.width + col]
    }

    pub fn covered(&self) -> usize {
        self.face.iter().filter(|&&f| f != NO_FACE).count()
    }
}

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Rasterizes every face at pixel centers with perspective-correct depth.
pub fn rasterize(vertices: &[Vec3], faces: &[[usize; 3]], k: &Intrinsics, width: usize, height: usize) -> DepthBuffer {
    let mut buf = DepthBuffer::new(width, height);
    for (fi, f) in faces.iter().enumerate() {
        let v = [vertices[f[0]], vertices[f[1]], vertices[f[2]]];
        if v.iter().any(|p| !(p[2] > NEAR_PLANE)) {
            continue;
        }
        let uv = v.map(|p| k.project_unchecked(&p));
        let area = edge(uv[0], uv[1], uv[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let umin = uv.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let umax = uv.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let vmin = uv.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let vmax = uv.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let c0 = (umin - 0.5).ceil().max(0.0);
        let c1 = (umax - 0.5).floor().min(width as f64 - 1.0);
        let r0 = (vmin - 0.5).ceil().max(0.0);
        let r1 = (vmax - 0.5).floor().min(height as f64 - 1.0);
        if c0 > c1 || r0 > r1 {
            continue;
        }
        let inv_z = v.map(|p| 1.0 / p[2]);
        for row in r0 as usize..=r1 as usize {
            for col in c0 as usize..=c1 as usize {
                let p = [col as f64 + 0.5, row as f64 + 0.5];
                let l0 = edge(uv[1], uv[2], p) / area;
                let l1 = edge(uv[2], uv[0], p) / area;
                let l2 = edge(uv[0], uv[1], p) / area;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let z = 1.0 / (l0 * inv_z[0] + l1 * inv_z[1] + l2 * inv_z[2]);
                let idx = row * width + col;
                if z < buf.depth[idx] {
                    buf.depth[idx] = z;
                    buf.face[idx] = fi as u32;
                }
            }
        }
    }
    buf
}

/// Depth map of the mesh: nearest surface depth per pixel, `None` if uncovered.
pub fn render_depth(vertices: &[Vec3], faces: &[[usize; 3]], k: &Intrinsics, width: usize, height: usize) -> Vec<Option<f64>> {
    rasterize(vertices, faces, k, width, height)
        .depth
        .into_iter()
        .map(|d| d.is_finite().then_some(d))
        .collect()
}
