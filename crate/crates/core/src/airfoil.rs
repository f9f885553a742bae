//! NACA 4-digit geometry, structured O-grid meshes and shape/flow sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, Domain};

/// Reference point for the outer boundary and for domain cropping.
pub const MID_CHORD: [f64; 2] = [0.5, 0.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AirfoilError {
    #[error("invalid NACA parameters: {0}")]
    InvalidShape(String),
    #[error("invalid flow conditions: {0}")]
    InvalidConditions(String),
    #[error("contour needs at least 16 points per side, got {0}")]
    TooFewPoints(usize),
    #[error("invalid mesh parameters: {0}")]
    InvalidMesh(String),
    #[error("degenerate mesh: cell {cell} has signed area {area:e}")]
    DegenerateCell { cell: usize, area: f64 },
    #[error("grid of {around}×{radial} cells cannot be halved {levels} times")]
    Indivisible {
        around: usize,
        radial: usize,
        levels: usize,
    },
}

pub type Result<T> = std::result::Result<T, AirfoilError>;

/// Camber `C`, camber position `P` and thickness `T`, all as chord fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NacaParams {
    pub camber: f64,
    pub camber_position: f64,
    pub thickness: f64,
}

impl NacaParams {
    pub fn new(camber: f64, camber_position: f64, thickness: f64) -> Result<NacaParams> {
        let p = NacaParams {
            camber,
            camber_position,
            thickness,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let NacaParams {
            camber: c,
            camber_position: p,
            thickness: t,
        } = *self;
        if !(0.0..=0.12).contains(&c) {
            return Err(AirfoilError::InvalidShape(format!("camber {c} outside [0, 0.12]")));
        }
        if c > 0.0 && !(0.05..=0.95).contains(&p) {
            return Err(AirfoilError::InvalidShape(format!(
                "camber position {p} outside [0.05, 0.95]"
            )));
        }
        if !(0.03..=0.35).contains(&t) {
            return Err(AirfoilError::InvalidShape(format!(
                "thickness {t} outside [0.03, 0.35]"
            )));
        }
        Ok(())
    }

    /// Mean camber line height and slope at chord station `x`.
    pub fn camber_line(&self, x: f64) -> (f64, f64) {
        let (c, p) = (self.camber, self.camber_position);
        if c == 0.0 {
            return (0.0, 0.0);
        }
        if x < p {
            let k = c / (p * p);
            (k * (2.0 * p * x - x * x), 2.0 * k * (p - x))
        } else {
            let k = c / ((1.0 - p) * (1.0 - p));
            (
                k * ((1.0 - 2.0 * p) + 2.0 * p * x - x * x),
                2.0 * k * (p - x),
            )
        }
    }

    /// Half-thickness with the closed trailing-edge coefficient.
    pub fn half_thickness(&self, x: f64) -> f64 {
        5.0 * self.thickness
            * (0.2969 * x.sqrt() - 0.1260 * x - 0.3516 * x * x + 0.2843 * x.powi(3)
                - 0.1036 * x.powi(4))
    }
}

/// Angle of attack (degrees) and freestream Mach number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConditions {
    pub aoa_deg: f64,
    pub mach: f64,
}

impl FlowConditions {
    pub fn new(aoa_deg: f64, mach: f64) -> Result<FlowConditions> {
        let c = FlowConditions { aoa_deg, mach };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.aoa_deg > -30.0 && self.aoa_deg < 30.0) {
            return Err(AirfoilError::InvalidConditions(format!(
                "angle of attack {} outside (-30, 30)",
                self.aoa_deg
            )));
        }
        if !(self.mach > 0.0 && self.mach < 0.7) {
            return Err(AirfoilError::InvalidConditions(format!(
                "Mach {} outside (0, 0.7)",
                self.mach
            )));
        }
        Ok(())
    }

    /// Freestream velocity in units of the speed of sound.
    pub fn freestream(&self) -> [f64; 2] {
        let a = self.aoa_deg.to_radians();
        [self.mach * a.cos(), self.mach * a.sin()]
    }
}

/// Closed counterclockwise polygon starting at the trailing edge.
#[derive(Debug, Clone, PartialEq)]
pub struct AirfoilContour {
    points: Vec<[f64; 2]>,
}

impl AirfoilContour {
    /// Wraps an arbitrary closed polygon (last point connects back to the first).
    pub fn from_points(points: Vec<[f64; 2]>) -> AirfoilContour {
        AirfoilContour { points }
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Shoelace area; positive for counterclockwise ordering.
    pub fn signed_area(&self) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (a, b) = (self.points[i], self.points[(i + 1) % n]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            * 0.5
    }

    /// True when no two non-adjacent edges intersect.
    pub fn is_simple(&self) -> bool {
        let n = self.points.len();
        for i in 0..n {
            let (a, b) = (self.points[i], self.points[(i + 1) % n]);
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (c, d) = (self.points[j], self.points[(j + 1) % n]);
                if segments_cross(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, q: [f64; 2]) -> bool {
        let n = self.points.len();
        let mut inside = false;
        for i in 0..n {
            let (a, b) = (self.points[i], self.points[(i + 1) % n]);
            if (a[1] > q[1]) != (b[1] > q[1]) {
                let x = a[0] + (q[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if q[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Unit outward normal at each vertex (average of the adjacent edge normals).
    pub fn vertex_normals(&self) -> Vec<[f64; 2]> {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let prev = self.points[(i + n - 1) % n];
                let next = self.points[(i + 1) % n];
                let cur = self.points[i];
                let e1 = normalize(sub(cur, prev));
                let e2 = normalize(sub(next, cur));
                normalize([e1[1] + e2[1], -(e1[0] + e2[0])])
            })
            .collect()
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn normalize(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    [v[0] / n, v[1] / n]
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    ((d1 > 0.0) != (d2 > 0.0)) && ((d3 > 0.0) != (d4 > 0.0)) && d1 != 0.0 && d2 != 0.0
}

/// NACA 4-digit contour with cosine spacing: `2·n_per_side` points,
/// trailing edge first, upper surface toward the leading edge, then lower.
pub fn naca4_contour(p: &NacaParams, n_per_side: usize) -> Result<AirfoilContour> {
    p.validate()?;
    if n_per_side < 16 {
        return Err(AirfoilError::TooFewPoints(n_per_side));
    }
    let n = n_per_side;
    let station = |i: usize| 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / n as f64).cos());
    let surface = |x: f64, upper: bool| {
        let (yc, slope) = p.camber_line(x);
        let yt = p.half_thickness(x);
        let th = slope.atan();
        let s = if upper { 1.0 } else { -1.0 };
        [x - s * yt * th.sin(), yc + s * yt * th.cos()]
    };
    let mut points = Vec::with_capacity(2 * n);
    points.push([1.0, 0.0]);
    for i in (0..n).rev() {
        points.push(surface(station(i), true));
    }
    for i in 1..n {
        points.push(surface(station(i), false));
    }
    Ok(AirfoilContour { points })
}

/// One structured level: `around` cells in the periodic direction,
/// `radial` cells outward, vertices indexed `k·around + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshLevel {
    pub around: usize,
    pub radial: usize,
    pub vertices: Vec<[f64; 2]>,
    pub centroids: Vec<[f64; 2]>,
    pub areas: Vec<f64>,
    /// Shared-edge neighbours of each cell, ascending.
    pub adjacency: Vec<Vec<u32>>,
    /// Cell index in the next coarser level, when one exists.
    pub parent: Option<Vec<u32>>,
}

impl MeshLevel {
    fn from_vertices(around: usize, radial: usize, vertices: Vec<[f64; 2]>) -> MeshLevel {
        let mut centroids = Vec::with_capacity(around * radial);
        let mut areas = Vec::with_capacity(around * radial);
        let mut adjacency = Vec::with_capacity(around * radial);
        for k in 0..radial {
            for i in 0..around {
                let quad = quad_vertices(around, i, k).map(|v| vertices[v]);
                let (a, c) = polygon_area_centroid(&quad);
                areas.push(a);
                centroids.push(c);
                let mut nb = vec![
                    (k * around + (i + around - 1) % around) as u32,
                    (k * around + (i + 1) % around) as u32,
                ];
                if k > 0 {
                    nb.push(((k - 1) * around + i) as u32);
                }
                if k + 1 < radial {
                    nb.push(((k + 1) * around + i) as u32);
                }
                nb.sort_unstable();
                nb.dedup();
                adjacency.push(nb);
            }
        }
        MeshLevel {
            around,
            radial,
            vertices,
            centroids,
            areas,
            adjacency,
            parent: None,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.around * self.radial
    }

    /// Counterclockwise vertex indices of cell `(i, k)`.
    pub fn cell_vertices(&self, cell: usize) -> [usize; 4] {
        quad_vertices(self.around, cell % self.around, cell / self.around)
    }

    /// Largest vertex-to-vertex distance of a cell.
    pub fn cell_diameter(&self, cell: usize) -> f64 {
        let q = self.cell_vertices(cell).map(|v| self.vertices[v]);
        let mut d: f64 = 0.0;
        for a in 0..4 {
            for b in a + 1..4 {
                d = d.max(dist(q[a], q[b]));
            }
        }
        d
    }
}

fn quad_vertices(around: usize, i: usize, k: usize) -> [usize; 4] {
    let i1 = (i + 1) % around;
    [
        k * around + i,
        (k + 1) * around + i,
        (k + 1) * around + i1,
        k * around + i1,
    ]
}

fn polygon_area_centroid(q: &[[f64; 2]]) -> (f64, [f64; 2]) {
    let n = q.len();
    let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (p0, p1) = (q[i], q[(i + 1) % n]);
        let w = p0[0] * p1[1] - p1[0] * p0[1];
        a += w;
        cx += (p0[0] + p1[0]) * w;
        cy += (p0[1] + p1[1]) * w;
    }
    a *= 0.5;
    (a, [cx / (6.0 * a), cy / (6.0 * a)])
}

/// Levels of a mesh around one airfoil, level 0 finest.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshHierarchy {
    pub levels: Vec<MeshLevel>,
    pub outer_radius: f64,
}

/// Parameters of the algebraic O-grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OgridParams {
    pub radial_layers: usize,
    pub outer_radius: f64,
    /// Height of the wall-adjacent layer, in chords.
    pub first_layer_height: f64,
}

impl Default for OgridParams {
    fn default() -> Self {
        OgridParams {
            radial_layers: 16,
            outer_radius: 10.0,
            first_layer_height: 0.01,
        }
    }
}

/// Sum of `r^m` for `m < n`.
fn geometric_sum(r: f64, n: usize) -> f64 {
    let mut s = 0.0;
    let mut t = 1.0;
    for _ in 0..n {
        s += t;
        t *= r;
    }
    s
}

/// Growth ratio such that `n` layers starting at `h0` span `length`.
pub fn growth_ratio(h0: f64, n: usize, length: f64) -> f64 {
    let target = length / h0;
    let (mut lo, mut hi) = (1e-6, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if geometric_sum(mid, n) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Level-0 O-grid with the default first-layer height.
pub fn build_ogrid(
    contour: &AirfoilContour,
    radial_layers: usize,
    outer_radius: f64,
) -> Result<MeshHierarchy> {
    build_ogrid_with(
        contour,
        &OgridParams {
            radial_layers,
            outer_radius,
            ..OgridParams::default()
        },
    )
}

/// Level-0 O-grid: each surface point is joined to a point on the outer
/// circle by a curve that leaves the wall along the surface normal and turns
/// toward the outer point; radial spacing grows geometrically from the wall.
pub fn build_ogrid_with(contour: &AirfoilContour, params: &OgridParams) -> Result<MeshHierarchy> {
    let layers = params.radial_layers;
    if layers < 4 {
        return Err(AirfoilError::InvalidMesh(format!(
            "radial_layers {layers} < 4"
        )));
    }
    if params.outer_radius < 5.0 {
        return Err(AirfoilError::InvalidMesh(format!(
            "outer_radius {} < 5",
            params.outer_radius
        )));
    }
    if params.first_layer_height <= 0.0 {
        return Err(AirfoilError::InvalidMesh(
            "first layer height must be positive".into(),
        ));
    }
    let pts = contour.points();
    let around = pts.len();
    if around < 3 {
        return Err(AirfoilError::InvalidMesh("contour has fewer than 3 points".into()));
    }
    let normals = contour.vertex_normals();
    let mut vertices = vec![[0.0; 2]; around * (layers + 1)];
    for (i, (&s, &nrm)) in pts.iter().zip(&normals).enumerate() {
        let phi = 2.0 * std::f64::consts::PI * i as f64 / around as f64;
        let outer = [
            MID_CHORD[0] + params.outer_radius * phi.cos(),
            MID_CHORD[1] + params.outer_radius * phi.sin(),
        ];
        let span = dist(s, outer);
        let ray = normalize(sub(outer, s));
        let r = growth_ratio(params.first_layer_height, layers, span);
        let mut d = 0.0;
        let mut h = params.first_layer_height;
        for k in 0..=layers {
            let t = if k == layers { 1.0 } else { d / span };
            let w = t.powf(0.2);
            let dir = normalize([
                (1.0 - w) * nrm[0] + w * ray[0],
                (1.0 - w) * nrm[1] + w * ray[1],
            ]);
            vertices[k * around + i] = if k == layers {
                outer
            } else {
                [s[0] + d * dir[0], s[1] + d * dir[1]]
            };
            d += h;
            h *= r;
        }
    }
    let level = MeshLevel::from_vertices(around, layers, vertices);
    if let Some((cell, &area)) = level
        .areas
        .iter()
        .enumerate()
        .find(|(_, a)| !(**a > 0.0))
    {
        return Err(AirfoilError::DegenerateCell { cell, area });
    }
    Ok(MeshHierarchy {
        levels: vec![level],
        outer_radius: params.outer_radius,
    })
}

/// Builds `n_levels` coarser levels from level 0 by merging 2×2 cell blocks.
pub fn coarsen(h: &MeshHierarchy, n_levels: usize) -> Result<MeshHierarchy> {
    let base = &h.levels[0];
    let f = 1usize << n_levels;
    if !base.around.is_multiple_of(f) || !base.radial.is_multiple_of(f) {
        return Err(AirfoilError::Indivisible {
            around: base.around,
            radial: base.radial,
            levels: n_levels,
        });
    }
    let mut levels = vec![MeshLevel {
        parent: None,
        ..base.clone()
    }];
    for _ in 0..n_levels {
        let fine = levels.last().unwrap();
        let (around, radial) = (fine.around / 2, fine.radial / 2);
        let mut vertices = Vec::with_capacity(around * (radial + 1));
        for k in 0..=radial {
            for i in 0..around {
                vertices.push(fine.vertices[2 * k * fine.around + 2 * i]);
            }
        }
        let parent: Vec<u32> = (0..fine.n_cells())
            .map(|c| {
                let (i, k) = (c % fine.around, c / fine.around);
                ((k / 2) * around + i / 2) as u32
            })
            .collect();
        let coarse = MeshLevel::from_vertices(around, radial, vertices);
        levels.last_mut().unwrap().parent = Some(parent);
        levels.push(coarse);
    }
    Ok(MeshHierarchy {
        levels,
        outer_radius: h.outer_radius,
    })
}

/// Which parameter box shapes are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeDistribution {
    Train,
    Interp,
    Ood,
}

impl ShapeDistribution {
    /// `(C range, P range, T range)`.
    pub fn ranges(self) -> ([f64; 2], [f64; 2], [f64; 2]) {
        match self {
            ShapeDistribution::Train | ShapeDistribution::Interp => {
                ([0.0, 0.09], [0.4, 0.6], [0.1, 0.3])
            }
            ShapeDistribution::Ood => ([0.0, 0.09], [0.2, 0.8], [0.05, 0.10]),
        }
    }

    fn domain(self) -> Domain {
        match self {
            ShapeDistribution::Train => Domain::TrainShapes,
            ShapeDistribution::Interp => Domain::InterpShapes,
            ShapeDistribution::Ood => Domain::OodShapes,
        }
    }
}

/// Shape `index` of a deterministic per-distribution sequence.
pub fn sample_shape(dist: ShapeDistribution, seed: u64, index: u64) -> NacaParams {
    let (c, p, t) = dist.ranges();
    let mut rng = stream(seed, dist.domain(), index);
    NacaParams {
        camber: rng.gen_range(c[0]..=c[1]),
        camber_position: rng.gen_range(p[0]..=p[1]),
        thickness: rng.gen_range(t[0]..=t[1]),
    }
}

pub fn sample_shapes(dist: ShapeDistribution, n: usize, seed: u64) -> Vec<NacaParams> {
    (0..n as u64).map(|i| sample_shape(dist, seed, i)).collect()
}

/// AoA uniform in [-22.5, 22.5] degrees, Mach uniform in [0.03, 0.3].
pub fn sample_condition(seed: u64, index: u64) -> FlowConditions {
    let mut rng = stream(seed, Domain::Conditions, index);
    FlowConditions {
        aoa_deg: rng.gen_range(-22.5..=22.5),
        mach: rng.gen_range(0.03..=0.3),
    }
}

pub fn sample_conditions(n: usize, seed: u64) -> Vec<FlowConditions> {
    (0..n as u64).map(|i| sample_condition(seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naca0012() -> NacaParams {
        NacaParams::new(0.0, 0.5, 0.12).unwrap()
    }

    #[test]
    fn symmetric_profile_is_mirror_symmetric() {
        for n in [16, 25, 40] {
            let c = naca4_contour(&naca0012(), n).unwrap();
            let pts = c.points();
            let m = pts.len();
            for i in 1..n {
                let (u, l) = (pts[i], pts[m - i]);
                assert!((u[0] - l[0]).abs() < 1e-12 && (u[1] + l[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn naca0012_max_thickness_near_thirty_percent() {
        // Dense evaluation of the thickness polynomial as the oracle.
        let p = naca0012();
        let (mut best_x, mut best_t) = (0.0, 0.0);
        for i in 0..=200_000 {
            let x = i as f64 / 200_000.0;
            let t = 2.0 * p.half_thickness(x);
            if t > best_t {
                best_t = t;
                best_x = x;
            }
        }
        assert!((best_t - 0.12).abs() < 1e-3);
        assert!((best_x - 0.30).abs() < 1e-2);
        // The contour sampled at 120 points per side resolves it as well.
        let c = naca4_contour(&p, 120).unwrap();
        let pts = c.points();
        let thick = (1..120)
            .map(|i| pts[i][1] - pts[pts.len() - i][1])
            .fold(0.0, f64::max);
        assert!((thick - 0.12).abs() < 1e-3, "{thick}");
    }

    #[test]
    fn camber_line_peaks_at_position() {
        let p = NacaParams::new(0.04, 0.4, 0.12).unwrap();
        assert_eq!(p.camber_line(0.4).0, 0.04);
        assert!(p.camber_line(0.39).0 < 0.04 && p.camber_line(0.41).0 < 0.04);
        assert_eq!(p.camber_line(1.0).0, 0.0);
    }

    #[test]
    fn contour_layout() {
        let c = naca4_contour(&NacaParams::new(0.02, 0.4, 0.12).unwrap(), 16).unwrap();
        assert_eq!(c.len(), 32);
        assert!((c.points()[0][0] - 1.0).abs() < 1e-9 && c.points()[0][1].abs() < 1e-9);
        assert!(c.signed_area() > 0.0);
        assert!(c.is_simple());
        assert!(c.points()[1][1] > 0.0, "upper surface follows the trailing edge");
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(matches!(
            naca4_contour(&naca0012(), 15),
            Err(AirfoilError::TooFewPoints(15))
        ));
        assert!(NacaParams::new(0.2, 0.5, 0.12).is_err());
        assert!(NacaParams::new(0.02, 0.01, 0.12).is_err());
        assert!(NacaParams::new(0.0, 0.01, 0.12).is_ok());
        assert!(NacaParams::new(0.02, 0.5, 0.5).is_err());
        assert!(FlowConditions::new(31.0, 0.1).is_err());
        assert!(FlowConditions::new(5.0, 0.8).is_err());
        assert!(FlowConditions::new(5.0, 0.0).is_err());
    }

    fn unit_circle(n: usize) -> AirfoilContour {
        AirfoilContour::from_points(
            (0..n)
                .map(|i| {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    [0.5 + a.cos(), a.sin()]
                })
                .collect(),
        )
    }

    #[test]
    fn ogrid_cell_count_and_topology() {
        let h = build_ogrid(&unit_circle(24), 4, 5.0).unwrap();
        let l = &h.levels[0];
        assert_eq!(l.n_cells(), 24 * 4);
        for (c, nb) in l.adjacency.iter().enumerate() {
            let k = c / l.around;
            let expect = if k == 0 || k == l.radial - 1 { 3 } else { 4 };
            assert_eq!(nb.len(), expect, "cell {c}");
            for &o in nb {
                assert!(l.adjacency[o as usize].contains(&(c as u32)));
            }
        }
    }

    #[test]
    fn naca0012_ogrid_has_positive_areas() {
        let c = naca4_contour(&naca0012(), 32).unwrap();
        let h = build_ogrid(&c, 16, 10.0).unwrap();
        let l = &h.levels[0];
        // brute-force shoelace over every cell
        for cell in 0..l.n_cells() {
            let q = l.cell_vertices(cell).map(|v| l.vertices[v]);
            let a: f64 = (0..4)
                .map(|i| q[i][0] * q[(i + 1) % 4][1] - q[(i + 1) % 4][0] * q[i][1])
                .sum::<f64>()
                * 0.5;
            assert!(a > 0.0, "cell {cell} area {a}");
        }
        // the wall layer has the requested height
        for i in 0..l.around {
            let h0 = dist(l.vertices[l.around + i], l.vertices[i]);
            assert!((h0 - 0.01).abs() < 1e-12);
        }
        // the last ring sits on the outer circle
        for i in 0..l.around {
            let v = l.vertices[l.radial * l.around + i];
            assert!((dist(v, MID_CHORD) - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ogrid_rejects_bad_parameters() {
        let c = naca4_contour(&naca0012(), 16).unwrap();
        assert!(build_ogrid(&c, 3, 10.0).is_err());
        assert!(build_ogrid(&c, 8, 4.0).is_err());
    }

    #[test]
    fn growth_ratio_reaches_span() {
        let r = growth_ratio(0.01, 29, 10.0);
        assert!((0.01 * geometric_sum(r, 29) - 10.0).abs() < 1e-9);
        assert!((r - 1.2).abs() < 0.01);
    }

    #[test]
    fn coarsening_halves_each_direction() {
        let c = naca4_contour(&naca0012(), 16).unwrap();
        let h = coarsen(&build_ogrid(&c, 16, 10.0).unwrap(), 3).unwrap();
        let dims: Vec<_> = h.levels.iter().map(|l| (l.around, l.radial)).collect();
        assert_eq!(dims, vec![(32, 16), (16, 8), (8, 4), (4, 2)]);
        for w in h.levels.windows(2) {
            assert_eq!(w[0].n_cells(), 4 * w[1].n_cells());
            assert!(w[0].parent.is_some());
        }
        assert!(h.levels[3].parent.is_none());
        assert!(matches!(
            coarsen(&build_ogrid(&c, 12, 10.0).unwrap(), 3),
            Err(AirfoilError::Indivisible { .. })
        ));
    }

    #[test]
    fn coarse_centroids_stay_in_annulus() {
        let p = NacaParams::new(0.02, 0.4, 0.12).unwrap();
        let c = naca4_contour(&p, 16).unwrap();
        let h = coarsen(&build_ogrid(&c, 16, 10.0).unwrap(), 3).unwrap();
        for l in &h.levels[1..] {
            for &q in &l.centroids {
                assert!(dist(q, MID_CHORD) < 10.0);
                assert!(!c.contains(q));
            }
        }
    }

    #[test]
    fn coarse_centroids_have_nearby_fine_neighbours() {
        let p = NacaParams::new(0.02, 0.4, 0.12).unwrap();
        let c = naca4_contour(&p, 16).unwrap();
        let h = coarsen(&build_ogrid(&c, 16, 10.0).unwrap(), 3).unwrap();
        for w in 0..3 {
            let (fine, coarse) = (&h.levels[w], &h.levels[w + 1]);
            for (ci, &q) in coarse.centroids.iter().enumerate() {
                let mut d: Vec<f64> = fine.centroids.iter().map(|&f| dist(f, q)).collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let diam = coarse.cell_diameter(ci);
                assert!(d[5] <= 4.0 * diam, "level {w} cell {ci}: {} > 4×{diam}", d[5]);
            }
        }
    }

    #[test]
    fn shape_sampling_boxes_and_determinism() {
        let train = sample_shapes(ShapeDistribution::Train, 80, 7);
        assert_eq!(train.len(), 80);
        for s in &train {
            assert!((0.0..=0.09).contains(&s.camber));
            assert!((0.4..=0.6).contains(&s.camber_position));
            assert!((0.1..=0.3).contains(&s.thickness));
            s.validate().unwrap();
        }
        let ood = sample_shapes(ShapeDistribution::Ood, 20, 7);
        let thinnest_train = train.iter().map(|s| s.thickness).fold(1.0, f64::min);
        for s in &ood {
            assert!((0.05..=0.10).contains(&s.thickness));
            assert!(s.thickness <= thinnest_train);
            assert!((0.2..=0.8).contains(&s.camber_position));
        }
        assert_eq!(train, sample_shapes(ShapeDistribution::Train, 80, 7));
        assert_ne!(train[..6], sample_shapes(ShapeDistribution::Interp, 6, 7)[..]);
        // prefix-stable: the i-th shape does not depend on n
        assert_eq!(train[..5], sample_shapes(ShapeDistribution::Train, 5, 7)[..]);
    }

    #[test]
    fn condition_sampling() {
        let c = sample_conditions(40, 3);
        assert_eq!(c.len(), 40);
        for f in &c {
            assert!((-22.5..=22.5).contains(&f.aoa_deg) && (0.03..=0.3).contains(&f.mach));
            f.validate().unwrap();
        }
        assert_eq!(c, sample_conditions(40, 3));
        // law of large numbers, averaged over a few seeds
        let means: Vec<f64> = (0..3)
            .map(|s| sample_conditions(10_000, s).iter().map(|f| f.aoa_deg).sum::<f64>() / 1e4)
            .collect();
        for m in means {
            assert!(m.abs() < 0.5, "mean AoA {m}");
        }
    }

    #[test]
    fn freestream_components() {
        let f = FlowConditions::new(0.0, 0.1).unwrap().freestream();
        assert_eq!(f, [0.1, 0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn contours_valid_over_sampling_box(
            c in 0.0f64..0.09, p in 0.4f64..0.6, t in 0.1f64..0.3, ood in any::<bool>(),
            layers in prop::sample::select(vec![8usize, 16, 32]),
            radius in prop::sample::select(vec![5.0f64, 10.0, 20.0]),
            n_side in prop::sample::select(vec![16usize, 32, 64]),
        ) {
            let params = if ood {
                NacaParams::new(c, 0.2 + (p - 0.4) * 3.0, 0.05 + (t - 0.1) * 0.25).unwrap()
            } else {
                NacaParams::new(c, p, t).unwrap()
            };
            let contour = naca4_contour(&params, n_side).unwrap();
            prop_assert!(contour.is_simple());
            prop_assert!(contour.signed_area() > 0.0);
            prop_assert!(contour.len().is_multiple_of(2));
            let xs: Vec<f64> = contour.points().iter().map(|q| q[0]).collect();
            let xmax = xs.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!((xmax - 1.0).abs() < 1e-9);
            prop_assert!(dist(contour.points()[0], [1.0, 0.0]) < 1e-9);
            let h = build_ogrid(&contour, layers, radius).unwrap();
            prop_assert!(h.levels[0].areas.iter().all(|&a| a > 0.0));
        }
    }
}
