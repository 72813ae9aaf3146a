//! Radial reparameterizations and the sparsity-driven search over them.
//!
//! A reparameterization `h` decides where radial samples land: nodes are
//! spaced uniformly in `h`-space, pulled back to incident angles with
//! `h^-1`, and pushed through the lens. The local spread of samples on the
//! image is therefore `P'(theta) / h'(theta)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{LensModel, DOMAIN_TOL};

/// Below this a candidate's derivative is treated as degenerate.
pub const DERIVATIVE_FLOOR: f64 = 1e-12;

/// `g(theta) = lambda * b * (theta/a)^n + (1 - lambda) * (1 - (1 - theta/a)^m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GFunction {
    pub lambda: f64,
    pub m: f64,
    pub n: f64,
    pub b: f64,
    /// Half field of view in radians.
    pub a: f64,
}

impl GFunction {
    pub fn new(lambda: f64, m: f64, n: f64, b: f64, a: f64) -> Result<Self> {
        let g = Self { lambda, m, n, b, a };
        g.validate()?;
        Ok(g)
    }

    /// Reference parameters for a 175 degree lens, with `a = fov / 2`.
    pub fn reference(fov: f64) -> Self {
        Self {
            lambda: 0.777,
            m: 5.5084,
            n: 5.0,
            b: 4.1052,
            a: 0.5 * fov,
        }
    }

    /// `g(theta) = theta` on `[0, a]`.
    pub fn identity(a: f64) -> Self {
        Self {
            lambda: 1.0,
            m: 1.0,
            n: 1.0,
            b: a,
            a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lambda)
            && self.m > 0.0
            && self.n > 0.0
            && self.b > 0.0
            && self.a > 0.0
            && self.a < std::f64::consts::FRAC_PI_2;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid g parameters {self:?}")))
        }
    }

    fn check(&self, theta: f64) -> Result<f64> {
        if !(theta >= -DOMAIN_TOL && theta <= self.a + DOMAIN_TOL) {
            return Err(Error::Domain(format!(
                "theta {theta} outside [0, {}]",
                self.a
            )));
        }
        Ok(theta.clamp(0.0, self.a))
    }

    #[inline]
    fn eval_raw(&self, theta: f64) -> f64 {
        let t = theta / self.a;
        self.lambda * self.b * t.powf(self.n) + (1.0 - self.lambda) * (1.0 - (1.0 - t).powf(self.m))
    }

    #[inline]
    fn derivative_raw(&self, theta: f64) -> f64 {
        let t = theta / self.a;
        let p = if self.lambda > 0.0 {
            self.lambda * self.b * self.n * t.powf(self.n - 1.0)
        } else {
            0.0
        };
        let q = if self.lambda < 1.0 {
            (1.0 - self.lambda) * self.m * (1.0 - t).powf(self.m - 1.0)
        } else {
            0.0
        };
        (p + q) / self.a
    }

    pub fn eval(&self, theta: f64) -> Result<f64> {
        Ok(self.eval_raw(self.check(theta)?))
    }

    pub fn derivative(&self, theta: f64) -> Result<f64> {
        Ok(self.derivative_raw(self.check(theta)?))
    }

    /// `g(a) = lambda * b + (1 - lambda)`.
    pub fn upper_value(&self) -> f64 {
        self.lambda * self.b + (1.0 - self.lambda)
    }

    /// Bisection inverse of `g` on `[0, a]`.
    pub fn inverse(&self, u: f64) -> Result<f64> {
        let top = self.upper_value();
        if !(u >= -DOMAIN_TOL && u <= top + DOMAIN_TOL) {
            return Err(Error::Domain(format!("value {u} outside [0, {top}]")));
        }
        Ok(bisect_inverse(|x| self.eval_raw(x), u.clamp(0.0, top), self.a, top))
    }
}

fn bisect_inverse(f: impl Fn(f64) -> f64, u: f64, hi_x: f64, hi_u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= hi_u {
        return hi_x;
    }
    let (mut lo, mut hi) = (0.0f64, hi_x);
    // 200 halvings reach adjacent floats well before the loop ends.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (flo, fhi) = (f(lo), f(hi));
    if (u - flo).abs() <= (fhi - u).abs() {
        lo
    } else {
        hi
    }
}

/// Spacing rule for radial samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadialProfile {
    /// Uniform in incident angle.
    Theta { a: f64 },
    /// Uniform in `tan(theta)`.
    Tan { a: f64 },
    /// Uniform in `g(theta)`.
    G(GFunction),
}

impl RadialProfile {
    pub fn max_theta(&self) -> f64 {
        match self {
            Self::Theta { a } | Self::Tan { a } => *a,
            Self::G(g) => g.a,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Theta { .. } => "theta",
            Self::Tan { .. } => "tan",
            Self::G(_) => "g",
        }
    }

    /// Parse `theta`, `tan` or `g` (the latter uses the reference optimum).
    pub fn parse(name: &str, fov: f64) -> Result<Self> {
        let a = 0.5 * fov;
        match name {
            "theta" => Ok(Self::Theta { a }),
            "tan" => Ok(Self::Tan { a }),
            "g" => Ok(Self::G(GFunction::reference(fov))),
            other => Err(Error::InvalidValue(format!(
                "unknown sampling profile '{other}' (expected theta, tan or g)"
            ))),
        }
    }

    pub fn eval(&self, theta: f64) -> f64 {
        match self {
            Self::Theta { .. } => theta,
            Self::Tan { .. } => theta.tan(),
            Self::G(g) => g.eval_raw(theta),
        }
    }

    pub fn derivative(&self, theta: f64) -> f64 {
        match self {
            Self::Theta { .. } => 1.0,
            Self::Tan { .. } => {
                let c = theta.cos();
                1.0 / (c * c)
            }
            Self::G(g) => g.derivative_raw(theta),
        }
    }

    pub fn upper_value(&self) -> f64 {
        match self {
            Self::Theta { a } => *a,
            Self::Tan { a } => a.tan(),
            Self::G(g) => g.upper_value(),
        }
    }

    pub fn inverse(&self, u: f64) -> f64 {
        let top = self.upper_value();
        let u = u.clamp(0.0, top);
        match self {
            Self::Theta { .. } => u,
            Self::Tan { a } => u.atan().min(*a),
            Self::G(g) => bisect_inverse(|x| g.eval_raw(x), u, g.a, top),
        }
    }
}

/// Half-cell-offset evaluation nodes on `(0, a)`.
pub fn theta_nodes(a: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| (i as f64 + 0.5) / count as f64 * a)
        .collect()
}

/// Lens derivative at the two extreme distortions, sampled on `nodes`.
fn extreme_derivatives(fov: f64, nodes: &[f64]) -> Result<[Vec<f64>; 2]> {
    let lo = LensModel::new(0.0, fov)?;
    let hi = LensModel::new(1.0, fov)?;
    Ok([
        nodes.iter().map(|&t| lo.derivative_unchecked(t)).collect(),
        nodes.iter().map(|&t| hi.derivative_unchecked(t)).collect(),
    ])
}

/// Sum over `xi in {0, 1}` of `max_theta P'(theta) / h'(theta)`.
///
/// Returns `f64::INFINITY` for candidates whose derivative vanishes on the
/// interior grid.
pub fn sparsity_objective_with(profile: &RadialProfile, fov: f64, grid: usize) -> Result<f64> {
    if !(fov > 0.0 && fov < std::f64::consts::PI) {
        return Err(Error::Domain(format!("fov {fov} outside (0, pi)")));
    }
    let a = profile.max_theta();
    let nodes = theta_nodes(a, grid.max(1));
    let lens_d = extreme_derivatives(fov, &nodes)?;
    let hd: Vec<f64> = nodes.iter().map(|&t| profile.derivative(t)).collect();
    Ok(objective_from_tables(&lens_d, &hd))
}

fn objective_from_tables(lens_d: &[Vec<f64>; 2], hd: &[f64]) -> f64 {
    let mut max0 = f64::NEG_INFINITY;
    let mut max1 = f64::NEG_INFINITY;
    for (i, &d) in hd.iter().enumerate() {
        if d.is_nan() || d < DERIVATIVE_FLOOR {
            return f64::INFINITY;
        }
        max0 = max0.max(lens_d[0][i] / d);
        max1 = max1.max(lens_d[1][i] / d);
    }
    max0 + max1
}

/// Sparsity objective of a `g` candidate on the default 512-node grid.
pub fn sparsity_objective(g: &GFunction, fov: f64) -> Result<f64> {
    g.validate()?;
    sparsity_objective_with(&RadialProfile::G(*g), fov, SearchGrid::default().theta_grid)
}

/// Closed interval sampled with `steps` inclusive, linearly spaced points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, steps: usize) -> Self {
        Self { lo, hi, steps }
    }

    pub fn point(lo: f64) -> Self {
        Self { lo, hi: lo, steps: 1 }
    }

    pub fn values(&self) -> Vec<f64> {
        if self.steps <= 1 {
            return vec![self.lo];
        }
        let span = self.hi - self.lo;
        let last = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| {
                if i + 1 == self.steps {
                    self.hi
                } else {
                    self.lo + span * i as f64 / last
                }
            })
            .collect()
    }

    pub fn step(&self) -> f64 {
        if self.steps <= 1 {
            0.0
        } else {
            (self.hi - self.lo) / (self.steps - 1) as f64
        }
    }
}

/// Exhaustive search grid over `(lambda, m, n, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub lambda: Axis,
    pub m: Axis,
    pub n: Axis,
    pub b: Axis,
    pub theta_grid: usize,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            lambda: Axis::new(0.0, 1.0, 10),
            m: Axis::new(1.0, 20.0, 60),
            n: Axis::new(0.5, 5.0, 20),
            b: Axis::new(2.0, 10.0, 40),
            theta_grid: 512,
        }
    }
}

impl SearchGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, ax) in [("lambda", self.lambda), ("m", self.m), ("n", self.n), ("b", self.b)] {
            if ax.steps == 0 || ax.lo.is_nan() || ax.hi.is_nan() || ax.lo > ax.hi {
                return Err(Error::InvalidValue(format!("bad {name} axis {ax:?}")));
            }
            if ax.steps == 1 && ax.lo != ax.hi {
                return Err(Error::InvalidValue(format!(
                    "{name} axis with one step must be a point"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda.lo) || self.lambda.hi > 1.0 {
            return Err(Error::InvalidValue("lambda axis outside [0, 1]".into()));
        }
        if self.m.lo <= 0.0 || self.n.lo <= 0.0 || self.b.lo <= 0.0 {
            return Err(Error::InvalidValue("m, n, b must be positive".into()));
        }
        if self.theta_grid < 2 {
            return Err(Error::InvalidValue("theta grid needs at least 2 nodes".into()));
        }
        Ok(())
    }

    pub fn candidate_count(&self) -> usize {
        self.lambda.steps.max(1) * self.m.steps.max(1) * self.n.steps.max(1) * self.b.steps.max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub g: GFunction,
    pub cost: f64,
    /// Grid indices `(lambda, m, n, b)`.
    pub index: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: Candidate,
    /// Every candidate, sorted by cost then by lexicographic grid index.
    pub ranking: Vec<Candidate>,
}

fn rank_order(x: &Candidate, y: &Candidate) -> std::cmp::Ordering {
    x.cost.total_cmp(&y.cost).then(x.index.cmp(&y.index))
}

/// Evaluates the sparsity objective on every grid point.
pub fn grid_search(grid: &SearchGrid, fov: f64) -> Result<SearchResult> {
    grid.validate()?;
    let a = 0.5 * fov;
    let nodes = theta_nodes(a, grid.theta_grid);
    let lens_d = extreme_derivatives(fov, &nodes)?;
    let lambdas = grid.lambda.values();
    let ms = grid.m.values();
    let ns = grid.n.values();
    let bs = grid.b.values();

    // (theta/a)^(n-1) and (1-theta/a)^(m-1) depend on one exponent each.
    let ts: Vec<f64> = nodes.iter().map(|&t| t / a).collect();
    let p_tab: Vec<Vec<f64>> = ns
        .iter()
        .map(|&n| ts.iter().map(|&t| n * t.powf(n - 1.0) / a).collect())
        .collect();
    let q_tab: Vec<Vec<f64>> = ms
        .iter()
        .map(|&m| ts.iter().map(|&t| m * (1.0 - t).powf(m - 1.0) / a).collect())
        .collect();

    let (nl, nm, nn, nb) = (lambdas.len(), ms.len(), ns.len(), bs.len());
    let total = nl * nm * nn * nb;
    let ranking_unsorted: Vec<Candidate> = (0..total)
        .into_par_iter()
        .map_init(
            || vec![0.0; nodes.len()],
            |hd, flat| {
                let ib = flat % nb;
                let in_ = (flat / nb) % nn;
                let im = (flat / (nb * nn)) % nm;
                let il = flat / (nb * nn * nm);
                let (lambda, m, n, b) = (lambdas[il], ms[im], ns[in_], bs[ib]);
                let wp = lambda * b;
                let wq = 1.0 - lambda;
                for (k, h) in hd.iter_mut().enumerate() {
                    let p = if wp > 0.0 { wp * p_tab[in_][k] } else { 0.0 };
                    let q = if wq > 0.0 { wq * q_tab[im][k] } else { 0.0 };
                    *h = p + q;
                }
                Candidate {
                    g: GFunction { lambda, m, n, b, a },
                    cost: objective_from_tables(&lens_d, hd),
                    index: [il, im, in_, ib],
                }
            },
        )
        .collect();
    let mut ranking = ranking_unsorted;
    ranking.par_sort_by(rank_order);
    let best = ranking[0];
    Ok(SearchResult { best, ranking })
}

/// Radial patch boundaries `(theta_j, r_j)` for `j = 0..=count`.
pub fn radial_nodes(lens: &LensModel, profile: &RadialProfile, count: usize) -> Result<Vec<(f64, f64)>> {
    if count == 0 {
        return Err(Error::InvalidDimension("radial node count must be >= 1".into()));
    }
    check_profile_matches(lens, profile)?;
    let top = profile.upper_value();
    let mut out = Vec::with_capacity(count + 1);
    for j in 0..=count {
        let (theta, r) = if j == 0 {
            (0.0, 0.0)
        } else if j == count {
            (lens.max_theta(), 1.0)
        } else {
            let theta = profile.inverse(top * j as f64 / count as f64);
            (theta, lens.project(theta)?)
        };
        out.push((theta, r));
    }
    Ok(out)
}

pub(crate) fn check_profile_matches(lens: &LensModel, profile: &RadialProfile) -> Result<()> {
    let a = profile.max_theta();
    if (a - lens.max_theta()).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "profile half-fov {a} does not match lens half-fov {}",
            lens.max_theta()
        )));
    }
    Ok(())
}

/// Uniform azimuth partition of `[0, 2 pi]`.
pub fn azimuth_nodes(count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::InvalidDimension("azimuth node count must be >= 1".into()));
    }
    let tau = std::f64::consts::TAU;
    Ok((0..=count)
        .map(|j| if j == count { tau } else { tau * j as f64 / count as f64 })
        .collect())
}

/// Largest gap between consecutive normalized radii when `samples` radial
/// samples (endpoints included) are spaced uniformly in profile space.
pub fn max_radial_gap(lens: &LensModel, profile: &RadialProfile, samples: usize) -> Result<f64> {
    if samples < 2 {
        return Err(Error::InvalidDimension("need at least 2 radial samples".into()));
    }
    check_profile_matches(lens, profile)?;
    let top = profile.upper_value();
    let last = (samples - 1) as f64;
    let radii: Vec<f64> = (0..samples)
        .map(|j| {
            if j == 0 {
                0.0
            } else if j == samples - 1 {
                1.0
            } else {
                lens.project_unchecked(profile.inverse(top * j as f64 / last))
            }
        })
        .collect();
    Ok(radii
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fov175() -> f64 {
        175f64.to_radians()
    }

    #[test]
    fn g_endpoints() {
        let g = GFunction::new(0.3, 2.0, 1.5, 3.0, 1.2).unwrap();
        assert_eq!(g.eval(0.0).unwrap(), 0.0);
        assert!((g.eval(1.2).unwrap() - (0.3 * 3.0 + 0.7)).abs() < 1e-15);
        let r = GFunction { lambda: 0.777, b: 4.1052, ..GFunction::reference(fov175()) };
        assert!((r.eval(r.a).unwrap() - 3.412_740_4).abs() < 1e-9);
        assert!(g.eval(1.3).is_err());
        assert!(g.derivative(-0.1).is_err());
    }

    #[test]
    fn linear_derivatives() {
        let a = 1.1;
        let p = GFunction::new(1.0, 3.0, 1.0, 1.0, a).unwrap();
        let q = GFunction::new(0.0, 1.0, 2.0, 5.0, a).unwrap();
        for t in [0.0, 0.3, 0.9, a] {
            assert!((p.derivative(t).unwrap() - 1.0 / a).abs() < 1e-15);
            assert!((q.derivative(t).unwrap() - 1.0 / a).abs() < 1e-15);
        }
    }

    #[test]
    fn reference_derivative_matches_finite_difference() {
        let g = GFunction::reference(fov175());
        let t = 0.5 * g.a;
        let h = 1e-6;
        let fd = (g.eval(t + h).unwrap() - g.eval(t - h).unwrap()) / (2.0 * h);
        let an = g.derivative(t).unwrap();
        assert!(((fd - an) / an).abs() < 1e-6);
    }

    #[test]
    fn inverse_roundtrip() {
        let g = GFunction::reference(fov175());
        assert_eq!(g.inverse(0.0).unwrap(), 0.0);
        assert_eq!(g.inverse(g.upper_value()).unwrap(), g.a);
        let u = g.eval(0.7).unwrap();
        let t = g.inverse(u).unwrap();
        assert!((t - 0.7).abs() < 1e-9);
        assert!((g.eval(t).unwrap() - u).abs() < 1e-10);
        assert!(g.inverse(-0.5).is_err());
        assert!(g.inverse(g.upper_value() + 0.1).is_err());
    }

    #[test]
    fn identity_objective_is_sum_of_lens_maxima() {
        let fov = fov175();
        let a = 0.5 * fov;
        let id = GFunction::identity(a);
        let cost = sparsity_objective(&id, fov).unwrap();
        // Direct route: lens derivative maxima on the same nodes.
        let nodes = theta_nodes(a, 512);
        let l0 = LensModel::new(0.0, fov).unwrap();
        let l1 = LensModel::new(1.0, fov).unwrap();
        let m0 = nodes.iter().map(|&t| l0.projection_derivative(t).unwrap()).fold(0.0, f64::max);
        let m1 = nodes.iter().map(|&t| l1.projection_derivative(t).unwrap()).fold(0.0, f64::max);
        assert!((cost - (m0 + m1)).abs() <= 1e-12 * cost);
    }

    #[test]
    fn reference_beats_identity() {
        let fov = fov175();
        let id = sparsity_objective(&GFunction::identity(0.5 * fov), fov).unwrap();
        let g = sparsity_objective(&GFunction::reference(fov), fov).unwrap();
        assert!(g < id, "{g} vs {id}");
    }

    #[test]
    fn objective_scales_inversely() {
        // Scaling g by c multiplies both lambda*b and (1-lambda) by c; at
        // lambda = 1 that is exactly b -> c b.
        let fov = fov175();
        let a = 0.5 * fov;
        let g = GFunction::new(1.0, 2.0, 1.3, 2.0, a).unwrap();
        let g3 = GFunction { b: 6.0, ..g };
        let c1 = sparsity_objective(&g, fov).unwrap();
        let c3 = sparsity_objective(&g3, fov).unwrap();
        assert!((c1 / c3 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_candidate_is_infinite() {
        let fov = fov175();
        let g = GFunction::new(1.0, 2.0, 80.0, 2.0, 0.5 * fov).unwrap();
        assert_eq!(sparsity_objective(&g, fov).unwrap(), f64::INFINITY);
    }

    #[test]
    fn single_candidate_grid() {
        let grid = SearchGrid {
            lambda: Axis::point(0.5),
            m: Axis::point(3.0),
            n: Axis::point(2.0),
            b: Axis::point(4.0),
            theta_grid: 64,
        };
        let res = grid_search(&grid, fov175()).unwrap();
        assert_eq!(res.ranking.len(), 1);
        assert_eq!(res.best.g.lambda, 0.5);
        assert_eq!(res.best.g.b, 4.0);
    }

    #[test]
    fn forced_minimizer() {
        let r = GFunction::reference(fov175());
        let grid = SearchGrid {
            lambda: Axis::point(r.lambda),
            m: Axis::point(r.m),
            n: Axis::point(r.n),
            b: Axis::point(r.b),
            theta_grid: 512,
        };
        let res = grid_search(&grid, fov175()).unwrap();
        assert_eq!(res.best.g, r);
        let direct = sparsity_objective(&r, fov175()).unwrap();
        assert!((res.best.cost - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn grid_search_matches_direct_objective() {
        let grid = SearchGrid {
            lambda: Axis::new(0.0, 1.0, 4),
            m: Axis::new(1.0, 8.0, 5),
            n: Axis::new(0.5, 5.0, 4),
            b: Axis::new(2.0, 10.0, 3),
            theta_grid: 128,
        };
        let fov = fov175();
        let res = grid_search(&grid, fov).unwrap();
        for c in &res.ranking {
            let direct = sparsity_objective_with(&RadialProfile::G(c.g), fov, 128).unwrap();
            if direct.is_finite() {
                assert!((direct - c.cost).abs() <= 1e-10 * direct, "{:?}", c);
            } else {
                assert_eq!(c.cost, direct);
            }
        }
        let again = grid_search(&grid, fov).unwrap();
        assert_eq!(res.best, again.best);
        assert!(res.ranking.windows(2).all(|w| rank_order(&w[0], &w[1]).is_le()));
    }

    #[test]
    fn axis_values_inclusive() {
        let m = Axis::new(1.0, 20.0, 60).values();
        assert_eq!(m.len(), 60);
        assert_eq!(m[0], 1.0);
        assert_eq!(m[59], 20.0);
        assert!((m[14] - 5.508_474_576_271_186).abs() < 1e-12);
        let l = Axis::new(0.0, 1.0, 10).values();
        assert!((l[7] - 7.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn radial_nodes_basic() {
        let fov = fov175();
        let lens = LensModel::new(0.4, fov).unwrap();
        let prof = RadialProfile::G(GFunction::reference(fov));
        let one = radial_nodes(&lens, &prof, 1).unwrap();
        assert_eq!(one, vec![(0.0, 0.0), (0.5 * fov, 1.0)]);
        assert!(radial_nodes(&lens, &prof, 0).is_err());
        let n = radial_nodes(&lens, &prof, 16).unwrap();
        assert_eq!(n.len(), 17);
        assert!(n.windows(2).all(|w| w[1].1 > w[0].1));
    }

    #[test]
    fn radial_nodes_identity_perspective() {
        let fov = fov175();
        let a = 0.5 * fov;
        let lens = LensModel::new(0.0, fov).unwrap();
        let nodes = radial_nodes(&lens, &RadialProfile::Theta { a }, 8).unwrap();
        for (j, &(theta, r)) in nodes.iter().enumerate() {
            let expect_t = a * j as f64 / 8.0;
            assert!((theta - expect_t).abs() < 1e-15);
            assert!((r - lens.focal() * expect_t.tan()).abs() < 1e-12);
        }
    }

    #[test]
    fn radial_nodes_extended_precision() {
        // mpmath (50 digits) recomputation of the N_r = 16, xi = 0.25 nodes for
        // the reference g; bisection on g, then the closed-form projection.
        let fov = fov175();
        let lens = LensModel::new(0.25, fov).unwrap();
        let prof = RadialProfile::G(GFunction::reference(fov));
        let nodes = radial_nodes(&lens, &prof, 16).unwrap();
        for (j, &r) in REF_RADII_XI025.iter().enumerate() {
            assert!((nodes[j].1 - r).abs() < 1e-12, "node {j}: {} vs {r}", nodes[j].1);
        }
    }

    const REF_RADII_XI025: [f64; 17] = [
        0.0, 0.128_689_917_808_470_93, 0.256_409_886_379_674_27, 0.322_068_355_405_644_04, 0.375_066_786_401_19, 0.423_087_838_204_389_93, 0.468_961_650_760_491_45, 0.514_145_298_730_439_6, 0.559_557_877_005_808_1, 0.605_873_095_637_420_8, 0.653_647_482_974_378_2, 0.703_386_824_279_240_6, 0.755_586_286_917_207_6, 0.810_758_779_143_628_6, 0.869_458_479_756_279_9, 0.932_303_444_384_813_4, 1.0,
    ];

    #[test]
    fn azimuth_partition() {
        let n = azimuth_nodes(4).unwrap();
        let pi = std::f64::consts::PI;
        assert_eq!(n, vec![0.0, pi / 2.0, pi, 1.5 * pi, 2.0 * pi]);
        let n = azimuth_nodes(64).unwrap();
        let gaps: Vec<f64> = n.windows(2).map(|w| w[1] - w[0]).collect();
        let (lo, hi) = gaps.iter().fold((f64::MAX, f64::MIN), |(l, h), &g| (l.min(g), h.max(g)));
        assert!((hi - lo) < 1e-15);
        assert!((gaps[0] - std::f64::consts::TAU / 64.0).abs() < 1e-15);
        assert!(azimuth_nodes(0).is_err());
    }

    #[test]
    fn gap_comparisons() {
        let fov = fov175();
        let a = 0.5 * fov;
        let g = RadialProfile::G(GFunction::reference(fov));
        let l0 = LensModel::new(0.0, fov).unwrap();
        let l1 = LensModel::new(1.0, fov).unwrap();
        let s = 64;
        let g0 = max_radial_gap(&l0, &g, s).unwrap();
        let t0 = max_radial_gap(&l0, &RadialProfile::Theta { a }, s).unwrap();
        assert!(g0 < t0, "{g0} {t0}");
        let g1 = max_radial_gap(&l1, &g, s).unwrap();
        let tan1 = max_radial_gap(&l1, &RadialProfile::Tan { a }, s).unwrap();
        assert!(g1 < tan1, "{g1} {tan1}");
        assert_eq!(max_radial_gap(&l1, &g, 2).unwrap(), 1.0);
    }

    #[test]
    fn profile_mismatch_rejected() {
        let lens = LensModel::from_degrees(0.2, 120.0).unwrap();
        let prof = RadialProfile::G(GFunction::reference(fov175()));
        assert!(radial_nodes(&lens, &prof, 4).is_err());
    }

    proptest! {
        #[test]
        fn g_is_monotone(
            lambda in 0.0f64..=1.0,
            m in 0.2f64..20.0,
            n in 0.2f64..6.0,
            b in 0.5f64..10.0,
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let g = GFunction::new(lambda, m, n, b, 1.3).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(g.eval(lo * 1.3).unwrap() <= g.eval(hi * 1.3).unwrap());
            prop_assert!(g.derivative(lo * 1.3).unwrap() >= 0.0);
        }

        #[test]
        fn endpoint_maximum_over_xi(
            lambda in 0.0f64..=1.0,
            m in 1.0f64..20.0,
            n in 0.5f64..5.0,
            b in 2.0f64..10.0,
            frac in 0.01f64..0.99,
        ) {
            let fov = fov175();
            let g = GFunction::new(lambda, m, n, b, 0.5 * fov).unwrap();
            let theta = frac * g.a;
            let gd = g.derivative(theta).unwrap();
            // focal held fixed across xi
            let ratio = |xi: f64| crate::lens::radius_derivative(xi, 1.0, theta) / gd;
            let ends = ratio(0.0).max(ratio(1.0));
            let dense = (0..=100).map(|i| ratio(i as f64 / 100.0)).fold(f64::MIN, f64::max);
            prop_assert!((dense - ends).abs() <= 1e-12 * ends.max(1.0));
        }
    }
}
