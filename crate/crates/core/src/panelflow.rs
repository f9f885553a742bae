//! Linear-strength vortex panel method with a Kutta condition and a
//! Prandtl-Glauert pressure correction.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::airfoil::{AirfoilContour, FlowConditions};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanelError {
    #[error("contour needs at least 3 points, got {0}")]
    TooFewPanels(usize),
    #[error("panel {0} has zero length")]
    ZeroLengthPanel(usize),
    #[error("influence matrix is singular (degenerate contour)")]
    Singular,
    #[error("invalid flow conditions: {0}")]
    Conditions(String),
    #[error("query point {index} at ({x}, {y}) lies inside the airfoil")]
    InsideBody { index: usize, x: f64, y: f64 },
    #[error("freestream magnitude must be positive")]
    ZeroFreestream,
}

pub type Result<T> = std::result::Result<T, PanelError>;

/// Solved vortex strengths at the contour nodes. The trailing-edge node
/// appears twice: `gamma[0]` (start of the first panel) and `gamma[n]`
/// (end of the last one).
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSolution {
    pub gamma: Vec<f64>,
    pub u0: [f64; 2],
    pub mach: f64,
    pub cl: f64,
    contour: AirfoilContour,
    kutta_residual: f64,
    matrix_norm: f64,
}

impl PanelSolution {
    pub fn contour(&self) -> &AirfoilContour {
        &self.contour
    }

    /// `|γ_first + γ_last|` after the solve.
    pub fn kutta_residual(&self) -> f64 {
        self.kutta_residual
    }

    /// Frobenius norm of the assembled system matrix.
    pub fn matrix_norm(&self) -> f64 {
        self.matrix_norm
    }

    /// Counterclockwise circulation around the body.
    pub fn circulation(&self) -> f64 {
        let pts = self.contour.points();
        let n = pts.len();
        (0..n)
            .map(|j| {
                let l = crate::airfoil::dist(pts[j], pts[(j + 1) % n]);
                0.5 * l * (self.gamma[j] + self.gamma[j + 1])
            })
            .sum()
    }
}

/// Velocity and pressure at query points.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub velocity: Vec<[f64; 2]>,
    pub pressure: Vec<f64>,
}

/// Prandtl-Glauert factor `1/√(1−M²)`.
pub fn prandtl_glauert(mach: f64) -> f64 {
    1.0 / (1.0 - mach * mach).sqrt()
}

/// Velocity induced at local coordinates `(xi, eta)` by a panel of length
/// `len` along the local x axis, split into the contributions of unit
/// strength at its start and end nodes. Returns `[[u_start, v_start], [u_end, v_end]]`.
pub fn panel_influence(xi: f64, eta: f64, len: f64) -> [[f64; 2]; 2] {
    let th1 = eta.atan2(xi);
    let th2 = eta.atan2(xi - len);
    let i0 = th2 - th1;
    let r1 = xi * xi + eta * eta;
    let r2 = (xi - len) * (xi - len) + eta * eta;
    let j0 = 0.5 * (r1 / r2).ln();
    let a = (xi * i0 - eta * j0) / len;
    let b = (xi * j0 - len + eta * i0) / len;
    [
        [-(i0 - a) / TWO_PI, (j0 - b) / TWO_PI],
        [-a / TWO_PI, b / TWO_PI],
    ]
}

struct Panel {
    start: [f64; 2],
    t: [f64; 2],
    len: f64,
}

impl Panel {
    /// Global-frame influence of the start and end node strengths at `p`.
    fn influence(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        let d = [p[0] - self.start[0], p[1] - self.start[1]];
        let xi = d[0] * self.t[0] + d[1] * self.t[1];
        let eta = -d[0] * self.t[1] + d[1] * self.t[0];
        let loc = panel_influence(xi, eta, self.len);
        loc.map(|[u, v]| [u * self.t[0] - v * self.t[1], u * self.t[1] + v * self.t[0]])
    }
}

fn panels(contour: &AirfoilContour) -> Result<Vec<Panel>> {
    let pts = contour.points();
    let n = pts.len();
    if n < 3 {
        return Err(PanelError::TooFewPanels(n));
    }
    (0..n)
        .map(|j| {
            let (a, b) = (pts[j], pts[(j + 1) % n]);
            let len = crate::airfoil::dist(a, b);
            if !(len > 0.0) {
                return Err(PanelError::ZeroLengthPanel(j));
            }
            Ok(Panel {
                start: a,
                t: [(b[0] - a[0]) / len, (b[1] - a[1]) / len],
                len,
            })
        })
        .collect()
}

/// Flow tangency at every panel midpoint plus the Kutta condition.
pub fn solve_panels(contour: &AirfoilContour, cond: &FlowConditions) -> Result<PanelSolution> {
    cond.validate()
        .map_err(|e| PanelError::Conditions(e.to_string()))?;
    let panels = panels(contour)?;
    let n = panels.len();
    let u0 = cond.freestream();
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut rhs = DVector::<f64>::zeros(n + 1);
    for (i, pi) in panels.iter().enumerate() {
        let mid = [
            pi.start[0] + 0.5 * pi.len * pi.t[0],
            pi.start[1] + 0.5 * pi.len * pi.t[1],
        ];
        let normal = [pi.t[1], -pi.t[0]];
        for (j, pj) in panels.iter().enumerate() {
            let [s, e] = pj.influence(mid);
            a[(i, j)] += s[0] * normal[0] + s[1] * normal[1];
            a[(i, j + 1)] += e[0] * normal[0] + e[1] * normal[1];
        }
        rhs[i] = -(u0[0] * normal[0] + u0[1] * normal[1]);
    }
    a[(n, 0)] = 1.0;
    a[(n, n)] = 1.0;
    let matrix_norm = a.norm();
    let gamma = a.clone().lu().solve(&rhs).ok_or(PanelError::Singular)?;
    if gamma.iter().any(|g| !g.is_finite()) {
        return Err(PanelError::Singular);
    }
    let gamma: Vec<f64> = gamma.iter().copied().collect();
    let kutta_residual = (gamma[0] + gamma[n]).abs();
    let mut sol = PanelSolution {
        gamma,
        u0,
        mach: cond.mach,
        cl: 0.0,
        contour: contour.clone(),
        kutta_residual,
        matrix_norm,
    };
    sol.cl = -2.0 * sol.circulation() / cond.mach;
    Ok(sol)
}

/// Velocity and corrected pressure at points outside the body.
pub fn evaluate_field(sol: &PanelSolution, points: &[[f64; 2]]) -> Result<FlowField> {
    let panels = panels(&sol.contour)?;
    let pg = prandtl_glauert(sol.mach);
    let q0 = sol.u0[0] * sol.u0[0] + sol.u0[1] * sol.u0[1];
    let mut velocity = Vec::with_capacity(points.len());
    let mut pressure = Vec::with_capacity(points.len());
    for (index, &p) in points.iter().enumerate() {
        if sol.contour.contains(p) {
            return Err(PanelError::InsideBody {
                index,
                x: p[0],
                y: p[1],
            });
        }
        let mut u = sol.u0;
        for (j, pj) in panels.iter().enumerate() {
            let [s, e] = pj.influence(p);
            let (g1, g2) = (sol.gamma[j], sol.gamma[j + 1]);
            u[0] += g1 * s[0] + g2 * e[0];
            u[1] += g1 * s[1] + g2 * e[1];
        }
        pressure.push(0.5 * (q0 - u[0] * u[0] - u[1] * u[1]) * pg);
        velocity.push(u);
    }
    Ok(FlowField { velocity, pressure })
}

/// `Ū = U/‖U₀‖`, `p̄ = p/‖U₀‖²`.
pub fn normalize_fields(f: &FlowField, u0: [f64; 2]) -> Result<FlowField> {
    let m = u0[0].hypot(u0[1]);
    if !(m > 0.0) {
        return Err(PanelError::ZeroFreestream);
    }
    Ok(FlowField {
        velocity: f.velocity.iter().map(|v| [v[0] / m, v[1] / m]).collect(),
        pressure: f.pressure.iter().map(|p| p / (m * m)).collect(),
    })
}
