//! Quasi-Newton minimisation and curvature-based standard errors.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Settings for [`minimize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Converged when `max |grad| <= gtol * max(1, |f|)`.
    pub gtol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            gtol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting at the initial point.
    pub trace: Vec<f64>,
}

impl OptimResult {
    pub fn grad_norm(&self) -> f64 {
        inf_norm(&self.grad)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + a * d).collect()
}

struct LinePoint {
    a: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

/// Strong-Wolfe line search by bracketing and zoom.
fn line_search<F>(fg: &F, x: &[f64], f0: f64, slope0: f64, d: &[f64]) -> Option<LinePoint>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let eval = |a: f64| {
        let (f, g) = fg(&axpy(x, a, d));
        let slope = dot(&g, d);
        LinePoint { a, f, g, slope }
    };
    let mut lo = LinePoint {
        a: 0.0,
        f: f0,
        g: Vec::new(),
        slope: slope0,
    };
    let mut a = 1.0;
    for i in 0..60 {
        let p = eval(a);
        if !p.f.is_finite() {
            // Off support: shrink towards the last good point.
            a = lo.a + 0.25 * (a - lo.a);
            if a - lo.a < 1e-16 {
                return None;
            }
            return zoom_shrink(&eval, lo, a, f0, slope0);
        }
        if p.f > f0 + C1 * a * slope0 || (i > 0 && p.f >= lo.f) {
            return zoom(&eval, lo, p, f0, slope0);
        }
        if p.slope.abs() <= -C2 * slope0 {
            return Some(p);
        }
        if p.slope >= 0.0 {
            return zoom(&eval, p, lo, f0, slope0);
        }
        lo = p;
        a *= 2.0;
    }
    None
}

/// Step lengths beyond `hi_a` hit the support boundary; back off until finite.
fn zoom_shrink<E>(eval: &E, lo: LinePoint, mut hi_a: f64, f0: f64, slope0: f64) -> Option<LinePoint>
where
    E: Fn(f64) -> LinePoint,
{
    for _ in 0..60 {
        let p = eval(hi_a);
        if p.f.is_finite() {
            if p.f > f0 + 1e-4 * p.a * slope0 || p.f >= lo.f {
                return zoom(eval, lo, p, f0, slope0);
            }
            // Sufficient decrease holds; the curvature condition may not.
            return Some(p);
        }
        hi_a = lo.a + 0.25 * (hi_a - lo.a);
    }
    None
}

fn zoom<E>(eval: &E, mut lo: LinePoint, mut hi: LinePoint, f0: f64, slope0: f64) -> Option<LinePoint>
where
    E: Fn(f64) -> LinePoint,
{
    for _ in 0..60 {
        let width = hi.a - lo.a;
        if width.abs() < 1e-14 * lo.a.abs().max(1.0) {
            break;
        }
        // Cubic interpolation, safeguarded to the middle of the bracket.
        let a = {
            let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (lo.a - hi.a);
            let disc = d1 * d1 - lo.slope * hi.slope;
            let cand = if disc >= 0.0 && hi.f.is_finite() {
                let d2 = disc.sqrt() * width.signum();
                hi.a - (hi.a - lo.a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2)
            } else {
                f64::NAN
            };
            let (a_min, a_max) = (lo.a.min(hi.a), lo.a.max(hi.a));
            let margin = 0.1 * (a_max - a_min);
            if cand.is_finite() && cand > a_min + margin && cand < a_max - margin {
                cand
            } else {
                0.5 * (lo.a + hi.a)
            }
        };
        let p = eval(a);
        if !p.f.is_finite() || p.f > f0 + 1e-4 * a * slope0 || p.f >= lo.f {
            hi = p;
        } else {
            if p.slope.abs() <= -0.9 * slope0 {
                return Some(p);
            }
            if p.slope * (hi.a - lo.a) >= 0.0 {
                hi = lo;
            }
            lo = p;
        }
    }
    if lo.a > 0.0 && lo.f < f0 {
        Some(lo)
    } else {
        None
    }
}

/// Minimises `f` with BFGS. `fg` returns the value and gradient; values of
/// `+inf` mark points outside the support.
pub fn minimize<F>(fg: F, x0: &[f64], opts: &OptimOptions) -> OptimResult
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = fg(&x);
    let mut trace = vec![f];
    let done = |f: f64, g: &[f64]| inf_norm(g) <= opts.gtol * f.abs().max(1.0);
    if !f.is_finite() {
        return OptimResult {
            x,
            f,
            grad: g,
            iterations: 0,
            converged: false,
            trace,
        };
    }
    let mut h = identity(n);
    let mut fresh = true;
    let mut iterations = 0;
    while iterations < opts.max_iter && !done(f, &g) {
        iterations += 1;
        let mut d: Vec<f64> = mat_vec(&h, &g).into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            h = identity(n);
            fresh = true;
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        if fresh {
            // Unit steps along a raw gradient can be wildly off scale.
            let scale = 1.0 / inf_norm(&d).max(1.0);
            d.iter_mut().for_each(|v| *v *= scale);
            slope *= scale;
        }
        let Some(p) = line_search(&fg, &x, f, slope, &d) else {
            if fresh {
                break;
            }
            h = identity(n);
            fresh = true;
            continue;
        };
        let s: Vec<f64> = d.iter().map(|v| v * p.a).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                let scale = sy / dot(&y, &y);
                h.iter_mut().flatten().for_each(|v| *v *= scale);
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh = false;
        }
        x = axpy(&x, 1.0, &s);
        f = p.f;
        g = p.g;
        trace.push(f);
    }
    let converged = done(f, &g);
    OptimResult {
        x,
        f,
        grad: g,
        iterations,
        converged,
        trace,
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Inverse-Hessian update `H <- (I - r s y') H (I - r y s') + r s s'`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let r = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -r * (s[i] * hy[j] + hy[i] * s[j]) + (r * r * yhy + r) * s[i] * s[j];
        }
    }
}

/// Hessian of `f` by central differences of its gradient, symmetrised.
pub fn hessian_from_gradient<G>(grad: G, x: &[f64]) -> Vec<Vec<f64>>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut z = x.to_vec();
    for k in 0..n {
        let h = 1e-4 * x[k].abs().max(1.0);
        z[k] = x[k] + h;
        let up = grad(&z);
        z[k] = x[k] - h;
        let down = grad(&z);
        z[k] = x[k];
        cols.push(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
    }
    (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (cols[i][j] + cols[j][i])).collect())
        .collect()
}

/// Inverse of a curvature matrix with per-parameter singularity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Curvature {
    /// Pseudo-inverse restricted to the well-determined directions.
    pub covariance: Vec<Vec<f64>>,
    pub singular: Vec<bool>,
}

impl Curvature {
    pub fn std_errors(&self) -> Vec<Option<f64>> {
        self.covariance
            .iter()
            .enumerate()
            .map(|(k, row)| (!self.singular[k] && row[k] > 0.0).then(|| row[k].sqrt()))
            .collect()
    }
}

/// Inverts a (negative log-density) Hessian. Directions with eigenvalues at
/// or below `1e-10` of the largest are dropped, and parameters that load on
/// them are flagged.
pub fn invert_curvature(hessian: &[Vec<f64>]) -> Curvature {
    let n = hessian.len();
    if n == 0 {
        return Curvature {
            covariance: Vec::new(),
            singular: Vec::new(),
        };
    }
    let m = DMatrix::from_fn(n, n, |i, j| hessian[i][j]);
    if m.iter().any(|v| !v.is_finite()) {
        return Curvature {
            covariance: vec![vec![0.0; n]; n],
            singular: vec![true; n],
        };
    }
    let eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-10 * top.max(f64::MIN_POSITIVE);
    let mut singular = vec![false; n];
    let mut cov = vec![vec![0.0; n]; n];
    for (e, &lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(e);
        if lam > tol {
            for i in 0..n {
                for j in 0..n {
                    cov[i][j] += v[i] * v[j] / lam;
                }
            }
        } else {
            for i in 0..n {
                if v[i].abs() > 1e-3 {
                    singular[i] = true;
                }
            }
        }
    }
    Curvature {
        covariance: cov,
        singular,
    }
}
