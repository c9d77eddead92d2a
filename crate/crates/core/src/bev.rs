//! Bird's-eye-view grids: packet voxelization, map rasterization, stride-aligned
//! packet regions and ego-motion realignment.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{LidarPoint, Pose2};
use crate::sim::MapSpec;
use crate::tensor::{ops, Tensor};

/// Geometry of an ego-centered BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    /// Frame-local coordinates of the (0, 0) cell corner.
    pub origin_x: f64,
    pub origin_y: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub z_step: f64,
}

impl Default for GridSpec {
    /// 144 m x 144 m at 0.2 m, 30 height bins over [-2, 4) m.
    fn default() -> Self {
        GridSpec {
            resolution: 0.2,
            width: 720,
            height: 720,
            origin_x: -72.0,
            origin_y: -72.0,
            z_min: -2.0,
            z_max: 4.0,
            z_step: 0.2,
        }
    }
}

impl GridSpec {
    /// Square ego-centered grid of `cells` x `cells`.
    pub fn centered(cells: usize, resolution: f64, z_min: f64, z_max: f64, z_step: f64) -> Self {
        let half = cells as f64 * resolution * 0.5;
        GridSpec {
            resolution,
            width: cells,
            height: cells,
            origin_x: -half,
            origin_y: -half,
            z_min,
            z_max,
            z_step,
        }
    }

    pub fn z_bins(&self) -> usize {
        ((self.z_max - self.z_min) / self.z_step).round() as usize
    }

    /// Continuous cell coordinates (not floored) of a frame-local point.
    pub fn cell_coords(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin_x) / self.resolution, (y - self.origin_y) / self.resolution)
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (cx, cy) = self.cell_coords(x, y);
        let (ix, iy) = (cx.floor(), cy.floor());
        if ix < 0.0 || iy < 0.0 || ix >= self.width as f64 || iy >= self.height as f64 {
            return None;
        }
        Some((ix as usize, iy as usize))
    }

    /// Frame-local center of cell (ix, iy).
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin_x + (ix as f64 + 0.5) * self.resolution,
            self.origin_y + (iy as f64 + 0.5) * self.resolution,
        )
    }

    /// The same footprint at `2^scale` coarser resolution.
    pub fn downscaled(&self, scale: u32) -> GridSpec {
        let f = 1usize << scale;
        GridSpec {
            resolution: self.resolution * f as f64,
            width: self.width / f,
            height: self.height / f,
            ..*self
        }
    }
}

/// Channel-major grid `[c][y][x]` axis-aligned to `frame_pose`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub spec: GridSpec,
    pub channels: usize,
    pub frame_pose: Pose2,
    pub data: Vec<f32>,
}

impl BevGrid {
    pub fn zeros(spec: GridSpec, channels: usize, frame_pose: Pose2) -> Self {
        BevGrid { spec, channels, frame_pose, data: vec![0.0; channels * spec.width * spec.height] }
    }

    pub fn index(&self, c: usize, iy: usize, ix: usize) -> usize {
        (c * self.spec.height + iy) * self.spec.width + ix
    }

    pub fn get(&self, c: usize, iy: usize, ix: usize) -> f32 {
        self.data[self.index(c, iy, ix)]
    }

    pub fn set(&mut self, c: usize, iy: usize, ix: usize, v: f32) {
        let i = self.index(c, iy, ix);
        self.data[i] = v;
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(vec![self.channels, self.spec.height, self.spec.width], self.data.clone())
            .expect("grid size is consistent")
    }

    pub fn from_tensor(t: Tensor<f32>, spec: GridSpec, frame_pose: Pose2) -> Self {
        let channels = t.shape()[0];
        BevGrid { spec, channels, frame_pose, data: t.into_data() }
    }

    /// (ix, iy) of every cell with any non-zero channel.
    pub fn occupied_cells(&self) -> Vec<(usize, usize)> {
        let plane = self.spec.width * self.spec.height;
        let mut occ = vec![false; plane];
        for c in 0..self.channels {
            for (o, v) in occ.iter_mut().zip(&self.data[c * plane..(c + 1) * plane]) {
                *o |= *v != 0.0;
            }
        }
        occ.iter()
            .enumerate()
            .filter(|(_, o)| **o)
            .map(|(i, _)| (i % self.spec.width, i / self.spec.width))
            .collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Debug dump: magic `STRBG`, dims, geometry, then raw little-endian f32 data.
    pub fn write_debug<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"STRBG")?;
        for d in [self.channels, self.spec.height, self.spec.width] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in [
            self.spec.resolution,
            self.spec.origin_x,
            self.spec.origin_y,
            self.frame_pose.x,
            self.frame_pose.y,
            self.frame_pose.yaw,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// `(z bin, iy, ix)` of every point that lands inside the grid and height range.
pub fn packet_voxels(points: &[LidarPoint], frame_pose: Pose2, spec: &GridSpec) -> Vec<(usize, usize, usize)> {
    let bins = spec.z_bins();
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let (lx, ly) = frame_pose.inverse_transform_point(p.x as f64, p.y as f64);
        let Some((ix, iy)) = spec.cell_of(lx, ly) else { continue };
        let iz = ((p.z as f64 - spec.z_min) / spec.z_step).floor();
        if iz < 0.0 || iz >= bins as f64 {
            continue;
        }
        out.push((iz as usize, iy, ix));
    }
    out
}

/// Binary occupancy voxelization of world-frame points into the ego frame.
pub fn voxelize_packet(points: &[LidarPoint], frame_pose: Pose2, spec: &GridSpec) -> BevGrid {
    let mut grid = BevGrid::zeros(*spec, spec.z_bins(), frame_pose);
    for (iz, iy, ix) in packet_voxels(points, frame_pose, spec) {
        grid.set(iz, iy, ix, 1.0);
    }
    grid
}

/// Occupancy restricted to `rect`, as a `bins x h x w` tensor.
pub fn voxel_window(voxels: &[(usize, usize, usize)], bins: usize, rect: &RegionRect) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[bins, rect.height(), rect.width()]);
    for &(iz, iy, ix) in voxels {
        if rect.contains(ix, iy) {
            t.set3(iz, iy - rect.y0, ix - rect.x0, 1.0);
        }
    }
    t
}

fn point_in_polygon(px: f64, py: f64, poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (poly[i][0], poly[i][1]);
        let (xj, yj) = (poly[j][0], poly[j][1]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub const MAP_CHANNELS: usize = 2;

/// Road (channel 0) and crosswalk (channel 1) occupancy at cell centers.
pub fn rasterize_map(map: &MapSpec, frame_pose: Pose2, spec: &GridSpec) -> BevGrid {
    let t = rasterize_map_window(map, frame_pose, spec, &RegionRect::full(spec.width, spec.height));
    BevGrid::from_tensor(t, *spec, frame_pose)
}

/// [`rasterize_map`] restricted to `rect`.
pub fn rasterize_map_window(map: &MapSpec, frame_pose: Pose2, spec: &GridSpec, rect: &RegionRect) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[MAP_CHANNELS, rect.height(), rect.width()]);
    let layers = [&map.roads, &map.crosswalks];
    for (c, polys) in layers.iter().enumerate() {
        if polys.is_empty() {
            continue;
        }
        // world-frame bounds let us skip cells far from every polygon
        let (mut bx0, mut by0, mut bx1, mut by1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in polys.iter().flatten() {
            bx0 = bx0.min(p[0]);
            by0 = by0.min(p[1]);
            bx1 = bx1.max(p[0]);
            by1 = by1.max(p[1]);
        }
        for iy in rect.y0..rect.y1 {
            for ix in rect.x0..rect.x1 {
                let (lx, ly) = spec.cell_center(ix, iy);
                let (wx, wy) = frame_pose.transform_point(lx, ly);
                if wx < bx0 || wx > bx1 || wy < by0 || wy > by1 {
                    continue;
                }
                if polys.iter().any(|poly| point_in_polygon(wx, wy, poly)) {
                    t.set3(c, iy - rect.y0, ix - rect.x0, 1.0);
                }
            }
        }
    }
    t
}

/// Stride-aligned cell rectangle, end-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RegionRect {
    pub fn full(width: usize, height: usize) -> Self {
        RegionRect { x0: 0, y0: 0, x1: width, y1: height }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, ix: usize, iy: usize) -> bool {
        ix >= self.x0 && ix < self.x1 && iy >= self.y0 && iy < self.y1
    }

    /// The rectangle at `2^scale` coarser resolution. Exact when aligned.
    pub fn downscaled(&self, scale: u32) -> RegionRect {
        let f = 1usize << scale;
        RegionRect { x0: self.x0 / f, y0: self.y0 / f, x1: self.x1.div_ceil(f), y1: self.y1.div_ceil(f) }
    }

    /// Grows by `halo` on each side, clamped to `[0, width) x [0, height)`.
    pub fn expanded(&self, halo: usize, width: usize, height: usize) -> RegionRect {
        RegionRect {
            x0: self.x0.saturating_sub(halo),
            y0: self.y0.saturating_sub(halo),
            x1: (self.x1 + halo).min(width),
            y1: (self.y1 + halo).min(height),
        }
    }

    pub fn union(&self, other: &RegionRect) -> RegionRect {
        RegionRect {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

/// Minimal rectangle around `cells`, grown by `halo`, snapped outward to
/// multiples of `stride` and clamped to the grid. `None` when there are no cells.
pub fn compute_region(
    cells: &[(usize, usize)],
    halo: usize,
    stride: usize,
    width: usize,
    height: usize,
) -> Option<RegionRect> {
    let (first, rest) = cells.split_first()?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.0, first.1, first.0, first.1);
    for &(x, y) in rest {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let stride = stride.max(1);
    let lo = |v: usize| (v.saturating_sub(halo) / stride) * stride;
    let hi = |v: usize, limit: usize| ((v + 1 + halo).div_ceil(stride) * stride).min(limit);
    Some(RegionRect { x0: lo(x0), y0: lo(y0), x1: hi(x1, width), y1: hi(y1, height) })
}

/// Affine map from output cell indices (grid aligned to `to`) to input cell
/// indices (grid aligned to `from`), in cell-center coordinates.
pub fn realign_affine(spec: &GridSpec, from: &Pose2, to: &Pose2) -> [[f64; 3]; 2] {
    let rel = from.relative_to(to);
    let (s, c) = rel.yaw.sin_cos();
    let r = spec.resolution;
    let (cx0, cy0) = (spec.origin_x + 0.5 * r, spec.origin_y + 0.5 * r);
    [
        [c, -s, (rel.x + (c - 1.0) * cx0 - s * cy0) / r],
        [s, c, (rel.y + s * cx0 + (c - 1.0) * cy0) / r],
    ]
}

/// Resamples `grid` into the frame of `new_pose` by inverse bilinear sampling.
/// Sources outside the old grid read as zero.
pub fn realign_grid(grid: &BevGrid, new_pose: Pose2) -> BevGrid {
    if new_pose == grid.frame_pose {
        return BevGrid { frame_pose: new_pose, ..grid.clone() };
    }
    let affine = realign_affine(&grid.spec, &grid.frame_pose, &new_pose);
    let out = ops::bilinear_warp(&grid.to_tensor(), &affine);
    BevGrid::from_tensor(out, grid.spec, new_pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Timestamp;

    fn pt(x: f32, y: f32, z: f32) -> LidarPoint {
        LidarPoint { x, y, z, t: Timestamp(0) }
    }

    #[test]
    fn voxelize_example() {
        let spec = GridSpec::default();
        assert_eq!(spec.z_bins(), 30);
        let g = voxelize_packet(&[pt(1.0, 2.0, 0.0)], Pose2::IDENTITY, &spec);
        assert_eq!(g.get(10, 370, 365), 1.0);
        assert_eq!(g.sum(), 1.0);
        let g2 = voxelize_packet(&[pt(1.0, 2.0, 0.0), pt(1.05, 2.05, 0.05)], Pose2::IDENTITY, &spec);
        assert_eq!(g2.get(10, 370, 365), 1.0);
        assert_eq!(g2.sum(), 1.0);
        let empty = voxelize_packet(&[], Pose2::IDENTITY, &spec);
        assert_eq!(empty.sum(), 0.0);
        assert!(empty.occupied_cells().is_empty());
    }

    #[test]
    fn voxelize_drops_out_of_range() {
        let spec = GridSpec::default();
        let g = voxelize_packet(&[pt(100.0, 0.0, 0.0), pt(0.0, 0.0, 5.0), pt(0.0, 0.0, -3.0)], Pose2::IDENTITY, &spec);
        assert_eq!(g.sum(), 0.0);
    }

    #[test]
    fn voxelize_uses_ego_frame() {
        let spec = GridSpec::default();
        let pose = Pose2::new(10.0, 5.0, std::f64::consts::FRAC_PI_2);
        // ego-frame (1, 2) maps to world (8, 6)
        let g = voxelize_packet(&[pt(8.0, 6.0, 0.1)], pose, &spec);
        assert_eq!(g.get(10, 370, 365), 1.0);
    }

    #[test]
    fn map_examples() {
        let spec = GridSpec::centered(40, 0.5, -2.0, 4.0, 0.2);
        let empty = rasterize_map(&MapSpec::default(), Pose2::IDENTITY, &spec);
        assert_eq!(empty.sum(), 0.0);
        let road = vec![[-10.0, -2.0], [10.0, -2.0], [10.0, 2.0], [-10.0, 2.0]];
        let cross = vec![[-1.0, -5.0], [1.0, -5.0], [1.0, 5.0], [-1.0, 5.0]];
        let map = MapSpec { roads: vec![road], crosswalks: vec![cross] };
        let g = rasterize_map(&map, Pose2::IDENTITY, &spec);
        let (ix, iy) = spec.cell_of(5.1, 0.1).unwrap();
        assert_eq!((g.get(0, iy, ix), g.get(1, iy, ix)), (1.0, 0.0));
        let (ix, iy) = spec.cell_of(0.1, 0.1).unwrap();
        assert_eq!((g.get(0, iy, ix), g.get(1, iy, ix)), (1.0, 1.0));
        let (ix, iy) = spec.cell_of(0.1, 4.1).unwrap();
        assert_eq!((g.get(0, iy, ix), g.get(1, iy, ix)), (0.0, 1.0));
    }

    #[test]
    fn region_examples() {
        let cells = [(37, 12), (88, 61), (50, 30)];
        // a 96-cell-wide grid clamps the right edge
        assert_eq!(
            compute_region(&cells, 8, 8, 96, 720),
            Some(RegionRect { x0: 24, y0: 0, x1: 96, y1: 72 })
        );
        assert_eq!(
            compute_region(&cells, 8, 8, 720, 720),
            Some(RegionRect { x0: 24, y0: 0, x1: 104, y1: 72 })
        );
        assert_eq!(compute_region(&[(20, 20)], 8, 8, 64, 64), Some(RegionRect { x0: 8, y0: 8, x1: 32, y1: 32 }));
        assert_eq!(compute_region(&[(0, 0), (63, 63)], 8, 8, 64, 64), Some(RegionRect::full(64, 64)));
        assert_eq!(compute_region(&[], 8, 8, 64, 64), None);
    }

    fn spike_grid(spec: GridSpec, ix: usize, iy: usize) -> BevGrid {
        let mut g = BevGrid::zeros(spec, 1, Pose2::IDENTITY);
        g.set(0, iy, ix, 1.0);
        g
    }

    #[test]
    fn realign_identity_exact() {
        let spec = GridSpec::centered(16, 0.2, 0.0, 1.0, 1.0);
        let mut g = spike_grid(spec, 3, 4);
        g.frame_pose = Pose2::new(1.0, 2.0, 0.7);
        g.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32).sin());
        let out = realign_grid(&g, g.frame_pose);
        assert_eq!(out, g);
    }

    #[test]
    fn realign_integer_shift() {
        let spec = GridSpec::centered(16, 0.2, 0.0, 1.0, 1.0);
        let g = spike_grid(spec, 5, 7);
        // ego moves +2 cells in x: content moves -2 cells
        let out = realign_grid(&g, Pose2::new(0.4, 0.0, 0.0));
        assert_eq!(out.get(0, 7, 3), 1.0);
        assert_eq!(out.sum(), 1.0);
        let edge = spike_grid(spec, 15, 7);
        let out = realign_grid(&edge, Pose2::new(-0.4, 0.0, 0.0));
        assert_eq!(out.sum(), 0.0);
        // trailing edge is zero-filled
        let full = BevGrid { data: vec![1.0; 256], ..g.clone() };
        let out = realign_grid(&full, Pose2::new(0.4, 0.0, 0.0));
        for iy in 0..16 {
            assert_eq!(out.get(0, iy, 14), 0.0);
            assert_eq!(out.get(0, iy, 15), 0.0);
            assert_eq!(out.get(0, iy, 13), 1.0);
        }
    }

    #[test]
    fn realign_half_cell() {
        let spec = GridSpec::centered(16, 0.2, 0.0, 1.0, 1.0);
        let g = spike_grid(spec, 8, 8);
        let out = realign_grid(&g, Pose2::new(0.1, 0.1, 0.0));
        for (ix, iy) in [(7, 7), (8, 7), (7, 8), (8, 8)] {
            assert!((out.get(0, iy, ix) - 0.25).abs() < 1e-6);
        }
        assert!((out.sum() - 1.0).abs() < 1e-6);
    }
}
