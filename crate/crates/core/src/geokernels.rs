//! Stationary isotropic correlation functions on a fixed set of sensor sites.
//!
//! Only the half-integer Matérn members (ν = 0.5, 1.5, 2.5) and the Gaussian
//! limit are supported; all four have closed forms, so both the correlation
//! and its derivative with respect to the range are exact and cheap.
//!
//! Learnable positive quantities (range ρ, bias weight λ) are stored as raw
//! unconstrained reals and mapped through softplus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D coordinate (unitless, usually inside the unit square).
pub type Point = [f64; 2];

/// `ln(1 + e^x)`, evaluated without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], i.e. the logistic function.
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!("inverse_softplus needs y > 0, got {y}")));
    }
    if y > 30.0 {
        Ok(y + (-(-y).exp_m1()).ln())
    } else {
        Ok(y.exp_m1().ln())
    }
}

/// Dense symmetric matrix of Euclidean distances between all pairs of sites.
pub fn pairwise_distances(locations: &[Point]) -> Result<Vec<f64>> {
    if locations.is_empty() {
        return Err(Error::InvalidInput("at least one location required".into()));
    }
    if let Some((i, p)) = locations
        .iter()
        .enumerate()
        .find(|(_, p)| !p[0].is_finite() || !p[1].is_finite())
    {
        return Err(Error::InvalidInput(format!(
            "location {i} has a non-finite coordinate {p:?}"
        )));
    }
    let n = locations.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = locations[i][0] - locations[j][0];
            let dy = locations[i][1] - locations[j][1];
            let v = dx.hypot(dy);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(d)
}

/// Fixed sensor locations together with their precomputed distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGrid {
    locations: Vec<Point>,
    dist: Vec<f64>,
}

impl SensorGrid {
    pub fn new(locations: Vec<Point>) -> Result<Self> {
        let dist = pairwise_distances(&locations)?;
        Ok(Self { locations, dist })
    }

    /// Regular `side × side` lattice on the unit square with sites at cell
    /// centres `((i + 0.5) / side, (j + 0.5) / side)`, row-major in `i`.
    pub fn lattice(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidInput("lattice side must be >= 1".into()));
        }
        let g = side as f64;
        let locations = (0..side)
            .flat_map(|i| (0..side).map(move |j| [(i as f64 + 0.5) / g, (j as f64 + 0.5) / g]))
            .collect();
        Self::new(locations)
    }

    pub fn n(&self) -> usize {
        self.locations.len()
    }

    pub fn locations(&self) -> &[Point] {
        &self.locations
    }

    /// Row-major `n × n` distance matrix.
    pub fn dist_matrix(&self) -> &[f64] {
        &self.dist
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n() + j]
    }

    pub fn max_distance(&self) -> f64 {
        self.dist.iter().copied().fold(0.0, f64::max)
    }

    /// Grid whose site `k` is this grid's site `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n())?;
        Self::new(perm.iter().map(|&p| self.locations[p]).collect())
    }

    /// Sub-grid made of the listed sites, in the listed order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n()) {
            return Err(Error::InvalidInput(format!("site index {bad} out of range")));
        }
        Self::new(idx.iter().map(|&i| self.locations[i]).collect())
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::InvalidInput(format!(
            "permutation has length {}, expected {n}",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidInput("not a permutation".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Covariance family. Matérn members are named by their smoothness ν.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// Matérn ν = 0.5.
    Exponential,
    Matern15,
    Matern25,
    /// Matérn ν → ∞.
    Gaussian,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Exponential,
        KernelFamily::Matern15,
        KernelFamily::Matern25,
        KernelFamily::Gaussian,
    ];

    /// Smoothness ν, `None` for the Gaussian limit.
    pub fn nu(self) -> Option<f64> {
        match self {
            KernelFamily::Exponential => Some(0.5),
            KernelFamily::Matern15 => Some(1.5),
            KernelFamily::Matern25 => Some(2.5),
            KernelFamily::Gaussian => None,
        }
    }

    pub fn from_nu(nu: f64) -> Result<Self> {
        match nu {
            x if x == 0.5 => Ok(KernelFamily::Exponential),
            x if x == 1.5 => Ok(KernelFamily::Matern15),
            x if x == 2.5 => Ok(KernelFamily::Matern25),
            x if x == f64::INFINITY => Ok(KernelFamily::Gaussian),
            other => Err(Error::Domain(format!(
                "smoothness nu = {other} unsupported (0.5, 1.5, 2.5 or inf)"
            ))),
        }
    }

    /// Correlation at distance `d` for range `rho`. Inputs are not checked;
    /// see [`matern_correlation`] for the validating entry point.
    #[inline]
    pub fn correlation(self, d: f64, rho: f64) -> f64 {
        match self {
            KernelFamily::Exponential => (-d / rho).exp(),
            KernelFamily::Matern15 => {
                let a = 3f64.sqrt() * d / rho;
                (1.0 + a) * (-a).exp()
            }
            KernelFamily::Matern25 => {
                let a = 5f64.sqrt() * d / rho;
                (1.0 + a + a * a / 3.0) * (-a).exp()
            }
            KernelFamily::Gaussian => (-d * d / (2.0 * rho * rho)).exp(),
        }
    }

    /// ∂Ψ/∂ρ at distance `d`, unchecked.
    #[inline]
    pub fn correlation_grad_rho(self, d: f64, rho: f64) -> f64 {
        match self {
            KernelFamily::Exponential => d / (rho * rho) * (-d / rho).exp(),
            KernelFamily::Matern15 => {
                let a = 3f64.sqrt() * d / rho;
                a * a * (-a).exp() / rho
            }
            KernelFamily::Matern25 => {
                let a = 5f64.sqrt() * d / rho;
                a * a * (1.0 + a) * (-a).exp() / (3.0 * rho)
            }
            KernelFamily::Gaussian => {
                let r2 = rho * rho;
                (-d * d / (2.0 * r2)).exp() * d * d / (r2 * rho)
            }
        }
    }
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            KernelFamily::Exponential => "exponential",
            KernelFamily::Matern15 => "matern15",
            KernelFamily::Matern25 => "matern25",
            KernelFamily::Gaussian => "gaussian",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" | "exp" | "matern05" => Ok(KernelFamily::Exponential),
            "matern15" | "matern" => Ok(KernelFamily::Matern15),
            "matern25" => Ok(KernelFamily::Matern25),
            "gaussian" | "rbf" => Ok(KernelFamily::Gaussian),
            other => Err(Error::InvalidInput(format!("unknown kernel family {other:?}"))),
        }
    }
}

fn check_args(d: f64, rho: f64) -> Result<()> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::Domain(format!("range rho must be > 0, got {rho}")));
    }
    if !(d >= 0.0) || d.is_infinite() {
        return Err(Error::Domain(format!("distance must be >= 0, got {d}")));
    }
    Ok(())
}

/// Ψ(d; ρ, ν). Equals 1 at `d = 0` and is non-increasing in `d`.
pub fn matern_correlation(d: f64, rho: f64, family: KernelFamily) -> Result<f64> {
    check_args(d, rho)?;
    Ok(family.correlation(d, rho))
}

/// ∂Ψ(d; ρ, ν)/∂ρ. For the exponential kernel this is `(d/ρ²)·exp(−d/ρ)`.
pub fn matern_correlation_grad_rho(d: f64, rho: f64, family: KernelFamily) -> Result<f64> {
    check_args(d, rho)?;
    Ok(family.correlation_grad_rho(d, rho))
}

/// Kernel family plus the raw learnable parameters of the attention prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Raw range parameter; ρ = softplus(theta_rho).
    pub theta_rho: f64,
    /// Raw bias weight; λ = softplus(theta_lambda).
    pub theta_lambda: f64,
    /// Marginal variance for simulation and Kriging. Not learned.
    pub sigma2: f64,
}

impl KernelSpec {
    /// Spec with the given effective range and bias weight.
    pub fn from_effective(family: KernelFamily, rho: f64, lambda: f64) -> Result<Self> {
        Ok(Self {
            family,
            theta_rho: inverse_softplus(rho)?,
            theta_lambda: inverse_softplus(lambda)?,
            sigma2: 1.0,
        })
    }

    pub fn rho(&self) -> f64 {
        softplus(self.theta_rho)
    }

    pub fn lambda(&self) -> f64 {
        softplus(self.theta_lambda)
    }
}

/// `λ·Ψ(d_ij; ρ)` for every pair of sites, for an explicit (ρ, λ).
///
/// `lambda` may be zero here, which disables the prior.
pub fn kernel_bias_matrix_with(
    grid: &SensorGrid,
    family: KernelFamily,
    rho: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_args(0.0, rho)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("bias weight must be >= 0, got {lambda}")));
    }
    Ok(grid
        .dist_matrix()
        .iter()
        .map(|&d| lambda * family.correlation(d, rho))
        .collect())
}

/// `λ·Ψ(d_ij; ρ)` with ρ and λ taken from the spec's raw parameters.
pub fn kernel_bias_matrix(grid: &SensorGrid, spec: &KernelSpec) -> Result<Vec<f64>> {
    kernel_bias_matrix_with(grid, spec.family, spec.rho(), spec.lambda())
}

/// Correlation matrix `Ψ(D; ρ)` and its elementwise ρ-derivative, memoised
/// on `(family, ρ)`. The cache belongs to one model instance, so a change of
/// ρ after an optimiser step simply triggers a recompute.
#[derive(Debug, Clone, Default)]
pub struct KernelCache {
    key: Option<(KernelFamily, u64)>,
    psi: Vec<f64>,
    dpsi: Vec<f64>,
}

impl KernelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, grid: &SensorGrid, family: KernelFamily, rho: f64) -> (&[f64], &[f64]) {
        let key = (family, rho.to_bits());
        if self.key != Some(key) || self.psi.len() != grid.dist_matrix().len() {
            let d = grid.dist_matrix();
            self.psi = d.iter().map(|&x| family.correlation(x, rho)).collect();
            self.dpsi = d.iter().map(|&x| family.correlation_grad_rho(x, rho)).collect();
            self.key = Some(key);
        }
        (&self.psi, &self.dpsi)
    }

    pub fn invalidate(&mut self) {
        self.key = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(d: f64, rho: f64, fam: KernelFamily) -> f64 {
        let h = 1e-5 * rho;
        (fam.correlation(d, rho + h) - fam.correlation(d, rho - h)) / (2.0 * h)
    }

    #[test]
    fn distances_small_cases() {
        assert_eq!(pairwise_distances(&[[0.0, 0.0]]).unwrap(), vec![0.0]);
        let d = pairwise_distances(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(d, vec![0.0, 5.0, 5.0, 0.0]);
        assert!(pairwise_distances(&[[0.0, f64::NAN]]).is_err());
        assert!(pairwise_distances(&[]).is_err());
    }

    #[test]
    fn lattice_geometry() {
        let g = SensorGrid::lattice(20).unwrap();
        assert_eq!(g.n(), 400);
        // cell centres: corners are 19/20 apart per axis
        let corner = 2f64.sqrt() * 19.0 / 20.0;
        assert!((g.max_distance() - corner).abs() < 1e-12);
        // corner-to-corner in a lattice spanning the unit square
        let full = SensorGrid::new(
            (0..20)
                .flat_map(|i| (0..20).map(move |j| [i as f64 / 19.0, j as f64 / 19.0]))
                .collect(),
        )
        .unwrap();
        assert!((full.max_distance() - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn distance_matrix_is_a_metric() {
        let g = SensorGrid::lattice(6).unwrap();
        let n = g.n();
        for i in 0..n {
            assert_eq!(g.distance(i, i), 0.0);
            for j in 0..n {
                assert_eq!(g.distance(i, j), g.distance(j, i));
                for k in 0..n {
                    assert!(g.distance(i, k) <= g.distance(i, j) + g.distance(j, k) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn correlation_examples() {
        for fam in KernelFamily::ALL {
            assert_eq!(matern_correlation(0.0, 0.37, fam).unwrap(), 1.0);
            assert_eq!(matern_correlation_grad_rho(0.0, 0.37, fam).unwrap(), 0.0);
        }
        let e = matern_correlation(0.3, 0.3, KernelFamily::Exponential).unwrap();
        assert!((e - (-1f64).exp()).abs() < 1e-15);
        // (1 + √3)·e^{−√3}, high-precision reference value
        let m = matern_correlation(0.2, 0.2, KernelFamily::Matern15).unwrap();
        assert!((m - 0.483_357_724_596_507_65).abs() < 1e-15);
        let g = matern_correlation_grad_rho(1.0, 1.0, KernelFamily::Exponential).unwrap();
        assert!((g - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(
            matern_correlation(1.0, 0.0, KernelFamily::Matern15),
            Err(Error::Domain(_))
        ));
        assert!(matern_correlation(-0.1, 1.0, KernelFamily::Matern15).is_err());
        assert!(matern_correlation_grad_rho(0.1, -1.0, KernelFamily::Gaussian).is_err());
        assert!(inverse_softplus(0.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = matern_correlation_grad_rho(0.4, 0.2, KernelFamily::Matern15).unwrap();
        let fd = central_diff(0.4, 0.2, KernelFamily::Matern15);
        assert!(((g - fd) / g).abs() < 1e-6, "{g} vs {fd}");
        for fam in KernelFamily::ALL {
            for &rho in &[0.05, 0.2, 0.7] {
                for &d in &[0.01, 0.1, 0.25, 0.5, 1.0] {
                    let g = fam.correlation_grad_rho(d, rho);
                    let fd = central_diff(d, rho, fam);
                    if g.abs() < 1e-12 {
                        assert!(fd.abs() < 1e-9);
                    } else {
                        assert!(((g - fd) / g).abs() < 1e-6, "{fam} d={d} rho={rho}");
                    }
                }
            }
        }
    }

    #[test]
    fn smoothness_ordering_near_origin() {
        let rho = 0.3;
        let d = 0.1 * rho;
        let v: Vec<f64> = [
            KernelFamily::Gaussian,
            KernelFamily::Matern25,
            KernelFamily::Matern15,
            KernelFamily::Exponential,
        ]
        .iter()
        .map(|f| f.correlation(d, rho))
        .collect();
        assert!(v.windows(2).all(|w| w[0] >= w[1]), "{v:?}");
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(800.0).is_finite());
        for &y in &[1e-4, 0.01, 0.2, 0.5, 3.0, 50.0] {
            let x = inverse_softplus(y).unwrap();
            assert!(((softplus(x) - y) / y).abs() < 1e-12);
        }
        let h = 1e-6;
        for &x in &[-3.0, 0.0, 2.5] {
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((softplus_grad(x) - fd).abs() < 1e-9);
        }
    }

    #[test]
    fn bias_matrix_examples() {
        let g = SensorGrid::new(vec![[0.0, 0.0], [0.25, 0.0]]).unwrap();
        let m = kernel_bias_matrix_with(&g, KernelFamily::Exponential, 0.25, 2.0).unwrap();
        let off = 2.0 * (-1f64).exp();
        assert_eq!(m[0], 2.0);
        assert_eq!(m[3], 2.0);
        assert!((m[1] - off).abs() < 1e-15 && m[1] == m[2]);

        let zero = kernel_bias_matrix_with(&g, KernelFamily::Matern15, 0.25, 0.0).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));

        let one = SensorGrid::new(vec![[0.4, 0.4]]).unwrap();
        let spec = KernelSpec::from_effective(KernelFamily::Gaussian, 0.2, 1.5).unwrap();
        let m = kernel_bias_matrix(&one, &spec).unwrap();
        assert!((m[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn bias_matrix_entries_bounded_by_lambda() {
        let g = SensorGrid::lattice(5).unwrap();
        let spec = KernelSpec::from_effective(KernelFamily::Matern15, 0.2, 0.7).unwrap();
        let lam = spec.lambda();
        let m = kernel_bias_matrix(&g, &spec).unwrap();
        let n = g.n();
        for i in 0..n {
            assert!((m[i * n + i] - lam).abs() < 1e-15);
            for j in 0..n {
                assert!(m[i * n + j] > 0.0 && m[i * n + j] <= lam);
                assert_eq!(m[i * n + j], m[j * n + i]);
            }
        }
    }

    #[test]
    fn cache_recomputes_on_rho_change() {
        let g = SensorGrid::lattice(3).unwrap();
        let mut c = KernelCache::new();
        let a = c.get(&g, KernelFamily::Exponential, 0.2).0.to_vec();
        let b = c.get(&g, KernelFamily::Exponential, 0.4).0.to_vec();
        assert_ne!(a, b);
        let a2 = c.get(&g, KernelFamily::Exponential, 0.2).0.to_vec();
        assert_eq!(a, a2);
    }
}
