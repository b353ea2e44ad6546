//! Point-set distances (Chamfer, earth mover's) and the set-of-sets scores
//! used to compare generated and reference collections (MMD, COV, 1-NNA).

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaseDistance {
    #[serde(rename = "CD")]
    Chamfer,
    #[serde(rename = "EMD")]
    Emd,
}

impl BaseDistance {
    pub fn label(self) -> &'static str {
        match self {
            BaseDistance::Chamfer => "CD",
            BaseDistance::Emd => "EMD",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmdMode {
    /// Hungarian assignment; equal cardinalities only.
    Exact,
    /// Log-domain entropic transport.
    Sinkhorn,
    /// Exact when both sides have the same size up to `EXACT_LIMIT`.
    Auto,
}

/// Largest cardinality `EmdMode::Auto` solves exactly.
pub const EXACT_LIMIT: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub base: BaseDistance,
    pub emd_mode: EmdMode,
    /// Entropic regularization relative to the mean pairwise cost.
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            base: BaseDistance::Chamfer,
            emd_mode: EmdMode::Auto,
            sinkhorn_eps: 2e-3,
            sinkhorn_iters: 2000,
        }
    }
}

impl MetricConfig {
    pub fn with_base(&self, base: BaseDistance) -> Self {
        Self { base, ..self.clone() }
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

fn mean_nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    from.iter()
        .map(|p| to.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / from.len() as f64
}

/// `mean_x min_y ‖x−y‖² + mean_y min_x ‖x−y‖²`.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> f64 {
    mean_nearest(x.points(), y.points()) + mean_nearest(y.points(), x.points())
}

fn cost_matrix(x: &PointCloud, y: &PointCloud) -> Array2<f64> {
    Array2::from_shape_fn((x.len(), y.len()), |(i, j)| sq_dist(&x.points()[i], &y.points()[j]).sqrt())
}

/// Minimum-cost perfect assignment of a square cost matrix. Returns the
/// column assigned to each row and the total cost.
pub fn hungarian(cost: &Array2<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::CardinalityMismatch(n, cost.ncols()));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // potentials formulation, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((assign, total))
}

fn logsumexp(it: impl Iterator<Item = f64>, buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    buf.extend(it);
    let m = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + buf.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport between uniform measures, solved in the log
/// domain with ε annealed down to `eps_rel ·` the mean cost. Returns the
/// transport cost of the final plan.
pub fn sinkhorn(cost: &Array2<f64>, eps_rel: f64, max_iters: usize) -> Result<f64> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::Empty("point cloud"));
    }
    if !(eps_rel > 0.0) || max_iters == 0 {
        return Err(Error::InvalidParam("sinkhorn needs eps > 0 and at least one iteration".into()));
    }
    let mean = cost.sum() / (n * m) as f64;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let target = eps_rel * mean;
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = Vec::with_capacity(n.max(m));
    let mut eps = mean;
    let mut iters = 0;
    loop {
        for _ in 0..10 {
            for i in 0..n {
                f[i] = -eps * logsumexp((0..m).map(|j| (g[j] - cost[[i, j]]) / eps + log_b), &mut buf);
            }
            for j in 0..m {
                g[j] = -eps * logsumexp((0..n).map(|i| (f[i] - cost[[i, j]]) / eps + log_a), &mut buf);
            }
            iters += 1;
        }
        if eps <= target || iters >= max_iters {
            break;
        }
        eps = (eps * 0.5).max(target);
    }
    // polish at the target ε
    let remaining = max_iters.saturating_sub(iters);
    for _ in 0..remaining.min(200) {
        for i in 0..n {
            f[i] = -eps * logsumexp((0..m).map(|j| (g[j] - cost[[i, j]]) / eps + log_b), &mut buf);
        }
        for j in 0..m {
            g[j] = -eps * logsumexp((0..n).map(|i| (f[i] - cost[[i, j]]) / eps + log_a), &mut buf);
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            total += ((f[i] + g[j] - cost[[i, j]]) / eps + log_a + log_b).exp() * cost[[i, j]];
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("sinkhorn transport cost".into()));
    }
    Ok(total)
}

/// Mean matched (unsquared) distance under the optimal transport plan.
pub fn emd(x: &PointCloud, y: &PointCloud, cfg: &MetricConfig) -> Result<f64> {
    let exact = match cfg.emd_mode {
        EmdMode::Exact => {
            if x.len() != y.len() {
                return Err(Error::CardinalityMismatch(x.len(), y.len()));
            }
            true
        }
        EmdMode::Sinkhorn => false,
        EmdMode::Auto => x.len() == y.len() && x.len() <= EXACT_LIMIT,
    };
    let cost = cost_matrix(x, y);
    if exact {
        Ok(hungarian(&cost)?.1 / x.len() as f64)
    } else {
        sinkhorn(&cost, cfg.sinkhorn_eps, cfg.sinkhorn_iters)
    }
}

pub fn distance(x: &PointCloud, y: &PointCloud, cfg: &MetricConfig) -> Result<f64> {
    match cfg.base {
        BaseDistance::Chamfer => Ok(chamfer(x, y)),
        BaseDistance::Emd => emd(x, y, cfg),
    }
}

/// `D[i][j] = distance(a[i], b[j])`.
pub fn distance_matrix(a: &[PointCloud], b: &[PointCloud], cfg: &MetricConfig) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[[i, j]] = distance(x, y, cfg)?;
        }
    }
    Ok(out)
}

fn check_sets(gen: &[PointCloud], reference: &[PointCloud]) -> Result<()> {
    if gen.is_empty() {
        return Err(Error::Empty("generated set"));
    }
    if reference.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    Ok(())
}

/// Index of the smallest entry, the lowest index on ties.
fn argmin(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in it.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// MMD from a `gen × ref` distance matrix.
pub fn mmd_from_matrix(d: &Array2<f64>) -> f64 {
    d.columns()
        .into_iter()
        .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / d.ncols() as f64
}

/// COV from a `gen × ref` distance matrix.
pub fn cov_from_matrix(d: &Array2<f64>) -> f64 {
    let mut hit = vec![false; d.ncols()];
    for r in d.rows() {
        hit[argmin(r.iter().copied())] = true;
    }
    hit.iter().filter(|h| **h).count() as f64 / d.ncols() as f64
}

/// Mean over reference clouds of the distance to the closest generated one.
pub fn mmd(gen: &[PointCloud], reference: &[PointCloud], cfg: &MetricConfig) -> Result<f64> {
    check_sets(gen, reference)?;
    Ok(mmd_from_matrix(&distance_matrix(gen, reference, cfg)?))
}

/// Fraction of reference clouds that are the nearest reference of some
/// generated cloud.
pub fn cov(gen: &[PointCloud], reference: &[PointCloud], cfg: &MetricConfig) -> Result<f64> {
    check_sets(gen, reference)?;
    Ok(cov_from_matrix(&distance_matrix(gen, reference, cfg)?))
}

fn cmp_clouds(a: &PointCloud, b: &PointCloud) -> Ordering {
    let (a, b) = (a.canonical(), b.canonical());
    for (p, q) in a.points().iter().zip(b.points()) {
        for k in 0..3 {
            match p[k].total_cmp(&q[k]) {
                Ordering::Equal => {}
                o => return o,
            }
        }
    }
    a.len().cmp(&b.len())
}

/// Leave-one-out 1-nearest-neighbor accuracy (percent) of telling `a` from
/// `b`. The pooled set is put in a canonical content order first; distance
/// ties go to the lower pooled position.
pub fn one_nna(a: &[PointCloud], b: &[PointCloud], cfg: &MetricConfig) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidParam("1-NNA needs at least two clouds per set".into()));
    }
    let mut pooled: Vec<(&PointCloud, bool)> = a.iter().map(|c| (c, true)).chain(b.iter().map(|c| (c, false))).collect();
    pooled.sort_by(|x, y| cmp_clouds(x.0, y.0));
    let n = pooled.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = distance(pooled[i].0, pooled[j].0, cfg)?;
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    let correct = (0..n)
        .filter(|&i| {
            let nn = argmin((0..n).map(|j| if j == i { f64::INFINITY } else { d[[i, j]] }));
            pooled[nn].1 == pooled[i].1
        })
        .count();
    Ok(100.0 * correct as f64 / n as f64)
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub base: BaseDistance,
    pub value: f64,
}

/// MMD, COV and 1-NNA over both base distances.
pub fn evaluate_sets(gen: &[PointCloud], reference: &[PointCloud], cfg: &MetricConfig) -> Result<Vec<MetricRow>> {
    check_sets(gen, reference)?;
    let mut rows = Vec::new();
    for base in [BaseDistance::Chamfer, BaseDistance::Emd] {
        let c = cfg.with_base(base);
        let d = distance_matrix(gen, reference, &c)?;
        rows.push(MetricRow { metric: "MMD", base, value: mmd_from_matrix(&d) });
        rows.push(MetricRow { metric: "COV", base, value: cov_from_matrix(&d) });
        rows.push(MetricRow { metric: "1-NNA", base, value: one_nna(gen, reference, &c)? });
    }
    Ok(rows)
}

pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,base_distance,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:?}", r.metric, r.base.label(), r.value);
    }
    s
}

pub fn write_report(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{synth_shape, Shape};
    use crate::rng::{normal_matrix, rng_from_seed};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        PointCloud::from_array(&normal_matrix(&mut rng_from_seed(seed), n, 3)).unwrap()
    }

    fn exact() -> MetricConfig {
        MetricConfig { emd_mode: EmdMode::Exact, ..MetricConfig::default() }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..n {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn chamfer_examples() {
        let x = random_cloud(1, 30);
        assert_eq!(chamfer(&x, &x), 0.0);
        assert_eq!(chamfer(&cloud(&[[0.0; 3]]), &cloud(&[[1.0, 0.0, 0.0]])), 2.0);
        let y = random_cloud(2, 17);
        assert_eq!(chamfer(&x, &y), chamfer(&y, &x));
    }

    #[test]
    fn emd_examples() {
        let x = random_cloud(1, 30);
        assert_eq!(emd(&x, &x, &exact()).unwrap(), 0.0);
        let a = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0; 3], [3.0, 0.0, 0.0]]);
        assert_eq!(emd(&a, &b, &exact()).unwrap(), 1.0);
        assert!(matches!(emd(&a, &x, &exact()), Err(Error::CardinalityMismatch(2, 30))));
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = rng_from_seed(3);
        for trial in 0..1000 {
            let n = rng.gen_range(1..=8);
            let (x, y) = (random_cloud(10 + 2 * trial, n), random_cloud(11 + 2 * trial, n));
            let c = cost_matrix(&x, &y);
            let brute = permutations(n)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let (assign, total) = hungarian(&c).unwrap();
            let mut seen = assign.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert!((total - brute).abs() <= 1e-12 * brute.max(1.0), "{total} vs {brute}");
        }
    }

    #[test]
    fn hungarian_beats_random_bijections() {
        let (x, y) = (random_cloud(1, 100), random_cloud(2, 100));
        let best = emd(&x, &y, &exact()).unwrap();
        let c = cost_matrix(&x, &y);
        let mut rng = rng_from_seed(4);
        for _ in 0..200 {
            let mut p: Vec<usize> = (0..100).collect();
            p.shuffle(&mut rng);
            let cost = p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>() / 100.0;
            assert!(best <= cost + 1e-12);
        }
    }

    #[test]
    fn sinkhorn_tracks_exact() {
        let cfg = MetricConfig { emd_mode: EmdMode::Sinkhorn, ..MetricConfig::default() };
        for pair in 0..50 {
            let (x, y) = (random_cloud(100 + 2 * pair, 64), random_cloud(101 + 2 * pair, 64));
            let e = emd(&x, &y, &exact()).unwrap();
            let s = emd(&x, &y, &cfg).unwrap();
            assert!((s - e).abs() / e < 0.05, "{s} vs {e}");
        }
        let x = random_cloud(7, 40);
        assert!(emd(&x, &x, &cfg).unwrap() < 0.05 * emd(&x, &random_cloud(8, 40), &cfg).unwrap());
        assert!(emd(&x, &random_cloud(9, 25), &cfg).unwrap() > 0.0);
    }

    fn rotation(seed: u64) -> [[f64; 3]; 3] {
        // Gram-Schmidt on a random matrix
        let m = normal_matrix(&mut rng_from_seed(seed), 3, 3);
        let mut q = [[0.0; 3]; 3];
        for i in 0..3 {
            let mut v = [m[[i, 0]], m[[i, 1]], m[[i, 2]]];
            for row in q.iter().take(i) {
                let d: f64 = (0..3).map(|k| v[k] * row[k]).sum();
                for k in 0..3 {
                    v[k] -= d * row[k];
                }
            }
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            q[i] = v.map(|c| c / n);
        }
        q
    }

    fn rotate(c: &PointCloud, r: &[[f64; 3]; 3]) -> PointCloud {
        PointCloud::new(
            c.points()
                .iter()
                .map(|p| [0, 1, 2].map(|i| (0..3).map(|k| r[i][k] * p[k]).sum()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn distances_are_rotation_invariant() {
        for s in 0..10 {
            let (x, y) = (random_cloud(2 * s, 40), random_cloud(2 * s + 1, 40));
            let r = rotation(100 + s);
            let (rx, ry) = (rotate(&x, &r), rotate(&y, &r));
            assert!((chamfer(&x, &y) - chamfer(&rx, &ry)).abs() < 1e-9);
            assert!((emd(&x, &y, &exact()).unwrap() - emd(&rx, &ry, &exact()).unwrap()).abs() < 1e-9);
        }
    }

    fn fixture(seed: u64) -> Vec<PointCloud> {
        (0..5).map(|i| random_cloud(seed * 10 + i, 12 + i as usize)).collect()
    }

    #[test]
    fn mmd_and_cov_match_brute_force() {
        let (gen, reference) = (fixture(1), fixture(2));
        let cfg = MetricConfig::default();
        let mut want_mmd = 0.0;
        for r in &reference {
            let mut best = f64::INFINITY;
            for g in &gen {
                best = best.min(chamfer(g, r));
            }
            want_mmd += best;
        }
        want_mmd /= 5.0;
        assert_eq!(mmd(&gen, &reference, &cfg).unwrap(), want_mmd);
        let mut matched = std::collections::BTreeSet::new();
        for g in &gen {
            let mut best = (0, f64::INFINITY);
            for (j, r) in reference.iter().enumerate() {
                let d = chamfer(g, r);
                if d < best.1 {
                    best = (j, d);
                }
            }
            matched.insert(best.0);
        }
        assert_eq!(cov(&gen, &reference, &cfg).unwrap(), matched.len() as f64 / 5.0);
    }

    #[test]
    fn set_metric_examples() {
        let set = fixture(3);
        let cfg = MetricConfig::default();
        assert_eq!(mmd(&set, &set, &cfg).unwrap(), 0.0);
        assert_eq!(cov(&set, &set, &cfg).unwrap(), 1.0);
        let one = vec![set[0].clone()];
        let want = set.iter().map(|r| chamfer(&set[0], r)).sum::<f64>() / 5.0;
        assert_eq!(mmd(&one, &set, &cfg).unwrap(), want);
        assert_eq!(cov(&vec![set[2].clone(); 4], &set, &cfg).unwrap(), 0.2);
        assert!(mmd(&[], &set, &cfg).is_err());
        assert!(cov(&set, &[], &cfg).is_err());
    }

    #[test]
    fn one_nna_examples() {
        let cfg = MetricConfig::default();
        let near: Vec<_> = (0..6).map(|i| random_cloud(i, 10)).collect();
        let far: Vec<_> = (0..6)
            .map(|i| PointCloud::from_array(&(normal_matrix(&mut rng_from_seed(50 + i), 10, 3) + 100.0)).unwrap())
            .collect();
        assert_eq!(one_nna(&near, &far, &cfg).unwrap(), 100.0);
        assert!(one_nna(&near[..1], &far, &cfg).is_err());
    }

    #[test]
    fn one_nna_matches_brute_force() {
        let cfg = MetricConfig::default();
        let mk = |s: u64| -> Vec<PointCloud> {
            (0..8).map(|i| synth_shape(&Shape::Ellipsoid { radii: [1.0, 1.0 + 0.05 * i as f64, 0.8] }, 20, s + i).unwrap()).collect()
        };
        let (a, b) = (mk(0), mk(100));
        let pooled: Vec<(&PointCloud, usize)> = a.iter().map(|c| (c, 0)).chain(b.iter().map(|c| (c, 1))).collect();
        let mut correct = 0;
        for (i, (ci, li)) in pooled.iter().enumerate() {
            let mut best = (usize::MAX, f64::INFINITY);
            for (j, (cj, _)) in pooled.iter().enumerate() {
                if i != j {
                    let d = chamfer(ci, cj);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
            }
            if pooled[best.0].1 == *li {
                correct += 1;
            }
        }
        let want = 100.0 * correct as f64 / 16.0;
        assert_eq!(one_nna(&a, &b, &cfg).unwrap(), want);
        assert_eq!(one_nna(&b, &a, &cfg).unwrap(), want);
    }

    #[test]
    fn report_layout() {
        let (gen, reference) = (fixture(4), fixture(5));
        let rows = evaluate_sets(&gen, &reference, &MetricConfig::default()).unwrap();
        let csv = report_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,base_distance,value");
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("MMD,CD,"));
        assert!(lines[6].starts_with("1-NNA,EMD,"));
    }

    proptest! {
        #[test]
        fn base_distances_are_symmetric_and_nonnegative(s1 in any::<u64>(), s2 in any::<u64>(), n in 1usize..12) {
            let (x, y) = (random_cloud(s1, n), random_cloud(s2, n));
            let c = chamfer(&x, &y);
            prop_assert!(c >= 0.0);
            prop_assert_eq!(c, chamfer(&y, &x));
            let e = emd(&x, &y, &exact()).unwrap();
            prop_assert!(e >= 0.0);
            prop_assert!((e - emd(&y, &x, &exact()).unwrap()).abs() < 1e-12);
        }
    }
}
