//! Token-level alignment of audio/video/face sequences onto the text
//! sequence with entropic, optionally KL-relaxed optimal transport, and the
//! kernel MMD alignment loss.
//!
//! Transport plans are treated as constants by the backward pass: gradients
//! reach the source tokens only through the barycentric projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FeatureSequence;
use crate::linalg::{dot, norm, Matrix};

/// `C[i][j] = 1 - cos(src_i, tgt_j)`; cosine is 0 when either side has zero norm.
pub fn cost_matrix(src: &FeatureSequence, tgt: &FeatureSequence) -> Result<Matrix> {
    if src.dim() != tgt.dim() {
        return Err(Error::DimMismatch(format!(
            "cost matrix: source dim {} vs target dim {}",
            src.dim(),
            tgt.dim()
        )));
    }
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::InvalidArgument("cost matrix needs non-empty sequences".into()));
    }
    let src_norms: Vec<f64> = (0..src.len()).map(|i| norm(src.token(i))).collect();
    let tgt_norms: Vec<f64> = (0..tgt.len()).map(|j| norm(tgt.token(j))).collect();
    let mut c = Matrix::zeros(src.len(), tgt.len());
    for i in 0..src.len() {
        for j in 0..tgt.len() {
            let denom = src_norms[i] * tgt_norms[j];
            let cos = if denom == 0.0 {
                0.0
            } else {
                (dot(src.token(i), tgt.token(j)) / denom).clamp(-1.0, 1.0)
            };
            c.set(i, j, 1.0 - cos);
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RotConfig {
    pub epsilon: f64,
    /// Marginal KL weight; `None` enforces the marginals exactly.
    pub tau: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for RotConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            tau: Some(1.0),
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

impl RotConfig {
    pub fn balanced(epsilon: f64, max_iters: usize, tol: f64) -> Self {
        Self {
            epsilon,
            tau: None,
            max_iters,
            tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub matrix: Matrix,
    pub epsilon: f64,
    pub tau: Option<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Per-iteration convergence residual: max marginal violation when
    /// balanced, max potential update when relaxed.
    pub residuals: Vec<f64>,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.matrix.rows).map(|i| self.matrix.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.matrix.cols];
        for i in 0..self.matrix.rows {
            for (acc, v) in s.iter_mut().zip(self.matrix.row(i)) {
                *acc += v;
            }
        }
        s
    }

    /// Largest deviation of either marginal from uniform.
    pub fn marginal_violation(&self) -> f64 {
        let (n, m) = (self.matrix.rows as f64, self.matrix.cols as f64);
        let r = self.row_sums().iter().map(|s| (s - 1.0 / n).abs()).fold(0.0, f64::max);
        let c = self.col_sums().iter().map(|s| (s - 1.0 / m).abs()).fold(0.0, f64::max);
        r.max(c)
    }
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic Sinkhorn with uniform marginals, run on dual potentials in the
/// log domain. With `tau = Some(t)` each potential update is damped by
/// `t / (t + epsilon)`, the KL-relaxed marginal penalty.
pub fn rot_solve(cost: &Matrix, cfg: &RotConfig) -> Result<TransportPlan> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    if let Some(t) = cfg.tau {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {t}")));
        }
    }
    if cfg.max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
    }
    if cost.rows == 0 || cost.cols == 0 {
        return Err(Error::InvalidArgument("empty cost matrix".into()));
    }
    if let Some(i) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: i / cost.cols,
            col: i % cost.cols,
        });
    }

    let (n, m) = (cost.rows, cost.cols);
    let eps = cfg.epsilon;
    let rho = cfg.tau.map_or(1.0, |t| t / (t + eps));
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations_run = 0;

    for _ in 0..cfg.max_iters {
        iterations_run += 1;
        let mut delta: f64 = 0.0;
        for i in 0..n {
            let lse = logsumexp((0..m).map(|j| (g[j] - cost.get(i, j)) / eps));
            let new = rho * eps * (log_a - lse);
            delta = delta.max((new - f[i]).abs());
            f[i] = new;
        }
        for j in 0..m {
            let lse = logsumexp((0..n).map(|i| (f[i] - cost.get(i, j)) / eps));
            let new = rho * eps * (log_b - lse);
            delta = delta.max((new - g[j]).abs());
            g[j] = new;
        }
        let residual = if cfg.tau.is_none() {
            // Columns are exact after the g update; rows carry the violation.
            (0..n)
                .map(|i| {
                    let lse = logsumexp((0..m).map(|j| (f[i] + g[j] - cost.get(i, j)) / eps));
                    (lse.exp() - 1.0 / n as f64).abs()
                })
                .fold(0.0, f64::max)
        } else {
            delta
        };
        residuals.push(residual);
        if residual < cfg.tol {
            converged = true;
            break;
        }
    }

    let mut matrix = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            matrix.set(i, j, ((f[i] + g[j] - cost.get(i, j)) / eps).exp());
        }
    }
    Ok(TransportPlan {
        matrix,
        epsilon: eps,
        tau: cfg.tau,
        iterations_run,
        converged,
        residuals,
    })
}

const MASS_FLOOR: f64 = 1e-12;

/// Re-expresses `src` on the target grid: token `j` is the plan-weighted
/// mean of source tokens over column `j`.
pub fn barycentric_project(plan: &TransportPlan, src: &FeatureSequence) -> Result<FeatureSequence> {
    let t = &plan.matrix;
    if t.rows != src.len() {
        return Err(Error::DimMismatch(format!(
            "plan has {} source rows, sequence has {} tokens",
            t.rows,
            src.len()
        )));
    }
    let mass = plan.col_sums();
    let mut out = Matrix::zeros(t.cols, src.dim());
    for j in 0..t.cols {
        let w = mass[j].max(MASS_FLOOR);
        let row = out.row_mut(j);
        for i in 0..t.rows {
            let c = t.get(i, j) / w;
            for (o, s) in row.iter_mut().zip(src.token(i)) {
                *o += c * s;
            }
        }
    }
    Ok(FeatureSequence {
        modality: src.modality,
        tokens: out,
    })
}

/// dL/dsrc given dL/daligned, with the plan held constant.
pub fn barycentric_backward(plan: &TransportPlan, daligned: &Matrix) -> Matrix {
    let t = &plan.matrix;
    let mass = plan.col_sums();
    let mut dsrc = Matrix::zeros(t.rows, daligned.cols);
    for i in 0..t.rows {
        let row = dsrc.row_mut(i);
        for j in 0..t.cols {
            let c = t.get(i, j) / mass[j].max(MASS_FLOOR);
            for (d, g) in row.iter_mut().zip(daligned.row(j)) {
                *d += c * g;
            }
        }
    }
    dsrc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidths {
    /// Explicit RBF widths σ.
    Fixed(Vec<f64>),
    /// σ = multiplier × median pairwise distance of the pooled samples.
    MedianHeuristic(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmdConfig {
    pub bandwidths: Bandwidths,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            bandwidths: Bandwidths::MedianHeuristic(vec![0.5, 1.0, 2.0]),
        }
    }
}

impl MmdConfig {
    pub fn fixed(sigmas: Vec<f64>) -> Self {
        Self {
            bandwidths: Bandwidths::Fixed(sigmas),
        }
    }

    /// Concrete widths for the pair `(x, y)`.
    pub fn resolve(&self, x: &Matrix, y: &Matrix) -> Result<Vec<f64>> {
        let sigmas = match &self.bandwidths {
            Bandwidths::Fixed(s) => s.clone(),
            Bandwidths::MedianHeuristic(mult) => {
                let med = median_pairwise_distance(x, y);
                let base = if med > 0.0 && med.is_finite() { med } else { 1.0 };
                mult.iter().map(|m| m * base).collect()
            }
        };
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("bad MMD bandwidths {sigmas:?}")));
        }
        Ok(sigmas)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn median_pairwise_distance(x: &Matrix, y: &Matrix) -> f64 {
    let pooled: Vec<&[f64]> = (0..x.rows).map(|i| x.row(i)).chain((0..y.rows).map(|i| y.row(i))).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for a in 0..pooled.len() {
        for b in a + 1..pooled.len() {
            d.push(sq_dist(pooled[a], pooled[b]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

fn check_sets(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows == 0 || y.rows == 0 {
        return Err(Error::InvalidArgument("MMD needs non-empty token sets".into()));
    }
    if x.cols != y.cols {
        return Err(Error::DimMismatch(format!("MMD between dims {} and {}", x.cols, y.cols)));
    }
    Ok(())
}

/// Mean of `exp(-|a-b|²/(2σ²))` over all pairs, summed in sorted order so
/// the value is independent of argument and token order.
fn kernel_mean(a: &Matrix, b: &Matrix, sigma: f64) -> f64 {
    let s2 = 2.0 * sigma * sigma;
    let mut vals = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            vals.push((-sq_dist(a.row(i), b.row(j)) / s2).exp());
        }
    }
    vals.sort_by(f64::total_cmp);
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Biased (V-statistic) squared MMD summed over bandwidths, clamped at 0.
pub fn mmd(x: &Matrix, y: &Matrix, cfg: &MmdConfig) -> Result<f64> {
    check_sets(x, y)?;
    let sigmas = cfg.resolve(x, y)?;
    Ok(mmd_fixed(x, y, &sigmas))
}

fn mmd_fixed(x: &Matrix, y: &Matrix, sigmas: &[f64]) -> f64 {
    let mut total = 0.0;
    for &s in sigmas {
        let (kxx, kyy, kxy) = (kernel_mean(x, x, s), kernel_mean(y, y, s), kernel_mean(x, y, s));
        total += (kxx + kyy) - 2.0 * kxy;
    }
    total.max(0.0)
}

/// MMD value and its gradient with respect to `x`; bandwidths are held
/// constant.
pub fn mmd_grad_x(x: &Matrix, y: &Matrix, cfg: &MmdConfig) -> Result<(f64, Matrix)> {
    check_sets(x, y)?;
    let sigmas = cfg.resolve(x, y)?;
    let value = mmd_fixed(x, y, &sigmas);
    let mut dx = Matrix::zeros(x.rows, x.cols);
    if value == 0.0 {
        return Ok((value, dx));
    }
    let (n, m) = (x.rows as f64, y.rows as f64);
    for &s in &sigmas {
        let s2 = s * s;
        for a in 0..x.rows {
            let xa = x.row(a);
            let mut acc = vec![0.0; x.cols];
            for b in 0..x.rows {
                let xb = x.row(b);
                let k = (-sq_dist(xa, xb) / (2.0 * s2)).exp();
                let c = 2.0 / (n * n) * (-k / s2);
                for ((g, u), v) in acc.iter_mut().zip(xa).zip(xb) {
                    *g += c * (u - v);
                }
            }
            for b in 0..y.rows {
                let yb = y.row(b);
                let k = (-sq_dist(xa, yb) / (2.0 * s2)).exp();
                let c = -2.0 / (n * m) * (-k / s2);
                for ((g, u), v) in acc.iter_mut().zip(xa).zip(yb) {
                    *g += c * (u - v);
                }
            }
            for (d, g) in dx.row_mut(a).iter_mut().zip(acc) {
                *d += g;
            }
        }
    }
    Ok((value, dx))
}

/// Alignment loss: sum of MMDs between each aligned modality and text.
pub fn total_mmd_loss(
    aligned_audio: &FeatureSequence,
    aligned_video: &FeatureSequence,
    aligned_face: &FeatureSequence,
    text: &FeatureSequence,
    cfg: &MmdConfig,
) -> Result<f64> {
    let t = &text.tokens;
    Ok(mmd(&aligned_audio.tokens, t, cfg)? + mmd(&aligned_video.tokens, t, cfg)? + mmd(&aligned_face.tokens, t, cfg)?)
}

/// Gradients of [`total_mmd_loss`] with respect to the three aligned sequences.
pub struct MmdGrads {
    pub value: f64,
    pub audio: Matrix,
    pub video: Matrix,
    pub face: Matrix,
}

pub fn total_mmd_loss_grad(
    aligned_audio: &FeatureSequence,
    aligned_video: &FeatureSequence,
    aligned_face: &FeatureSequence,
    text: &FeatureSequence,
    cfg: &MmdConfig,
) -> Result<MmdGrads> {
    let t = &text.tokens;
    let (va, audio) = mmd_grad_x(&aligned_audio.tokens, t, cfg)?;
    let (vv, video) = mmd_grad_x(&aligned_video.tokens, t, cfg)?;
    let (vf, face) = mmd_grad_x(&aligned_face.tokens, t, cfg)?;
    Ok(MmdGrads {
        value: va + vv + vf,
        audio,
        video,
        face,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Modality;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: &[Vec<f64>]) -> FeatureSequence {
        FeatureSequence::from_rows(Modality::Video, rows).unwrap()
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn cosine_cost_special_values() {
        let a = vec![1.0, 2.0, -0.5];
        let c = cost_matrix(&seq(std::slice::from_ref(&a)), &seq(std::slice::from_ref(&a))).unwrap();
        assert!(c.get(0, 0).abs() < 1e-15);
        let c = cost_matrix(&seq(&[vec![1.0, 0.0]]), &seq(&[vec![0.0, 3.0]])).unwrap();
        assert_eq!(c.get(0, 0), 1.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let c = cost_matrix(&seq(std::slice::from_ref(&a)), &seq(&[neg])).unwrap();
        assert!((c.get(0, 0) - 2.0).abs() < 1e-15);
        let c = cost_matrix(&seq(&[vec![0.0; 3]]), &seq(&[a])).unwrap();
        assert_eq!(c.get(0, 0), 1.0);
        assert!(matches!(
            cost_matrix(&seq(&[vec![1.0]]), &seq(&[vec![1.0, 2.0]])),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn single_cell_plan_is_one() {
        let c = Matrix::from_rows(&[vec![0.7]]).unwrap();
        let p = rot_solve(&c, &RotConfig::balanced(0.05, 50, 1e-9)).unwrap();
        assert!((p.matrix.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(p.converged);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = Matrix::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(matches!(rot_solve(&c, &RotConfig::default()), Err(Error::NonFinite { .. })));
        let c = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let cfg = RotConfig {
            epsilon: 0.0,
            ..RotConfig::default()
        };
        assert!(matches!(rot_solve(&c, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn balanced_rows_converge_on_random_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = rand_matrix(&mut rng, 5, 7, 0.0, 2.0);
        let p = rot_solve(&c, &RotConfig::balanced(0.05, 500, 1e-9)).unwrap();
        assert!(p.converged);
        for s in p.row_sums() {
            assert!((s - 0.2).abs() < 1e-6);
        }
        for s in p.col_sums() {
            assert!((s - 1.0 / 7.0).abs() < 1e-6);
        }
    }

    #[test]
    fn relaxed_plan_is_nonnegative_and_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = rand_matrix(&mut rng, 6, 4, 0.0, 2.0);
        let p = rot_solve(&c, &RotConfig::default()).unwrap();
        assert!(p.converged, "residual {:?}", p.residuals.last());
        assert!(p.matrix.data.iter().all(|v| *v >= 0.0 && v.is_finite()));
        let mass: f64 = p.matrix.data.iter().sum();
        assert!(mass > 0.0 && mass <= 1.0 + 1e-9);
    }

    #[test]
    fn projection_examples() {
        let plan = |rows: &[Vec<f64>]| TransportPlan {
            matrix: Matrix::from_rows(rows).unwrap(),
            epsilon: 0.05,
            tau: None,
            iterations_run: 1,
            converged: true,
            residuals: vec![],
        };
        let src = seq(&[vec![1.5, -2.0]]);
        assert_eq!(barycentric_project(&plan(&[vec![1.0]]), &src).unwrap().tokens, src.tokens);

        let src = seq(&[vec![1.0, 2.0], vec![-3.0, 4.0]]);
        let out = barycentric_project(&plan(&[vec![0.5, 0.0], vec![0.0, 0.5]]), &src).unwrap();
        assert_eq!(out.tokens, src.tokens);

        assert!(barycentric_project(&plan(&[vec![1.0]]), &src).is_err());
    }

    #[test]
    fn projection_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = rand_matrix(&mut rng, 4, 6, 0.0, 1.0);
        let src = FeatureSequence::new(Modality::Audio, rand_matrix(&mut rng, 4, 3, -1.0, 1.0)).unwrap();
        let plan = TransportPlan {
            matrix: t.clone(),
            epsilon: 0.1,
            tau: None,
            iterations_run: 0,
            converged: false,
            residuals: vec![],
        };
        let out = barycentric_project(&plan, &src).unwrap();
        for j in 0..6 {
            let mass: f64 = (0..4).map(|i| t.get(i, j)).sum();
            for k in 0..3 {
                let mut acc = 0.0;
                for i in 0..4 {
                    acc += t.get(i, j) * src.token(i)[k];
                }
                assert!((out.token(j)[k] - acc / mass).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mmd_scalar_hand_value() {
        let x = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let v = mmd(&x, &y, &MmdConfig::fixed(vec![1.0])).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((v - 0.786939).abs() < 1e-6);
    }

    #[test]
    fn mmd_errors() {
        let x = Matrix::zeros(0, 2);
        let y = Matrix::zeros(1, 2);
        assert!(mmd(&x, &y, &MmdConfig::default()).is_err());
        let x = Matrix::zeros(1, 3);
        assert!(matches!(mmd(&x, &y, &MmdConfig::default()), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn total_mmd_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mk = |rng: &mut ChaCha8Rng, m| FeatureSequence::new(m, rand_matrix(rng, 5, 4, -1.0, 1.0)).unwrap();
        let text = mk(&mut rng, Modality::Text);
        let a = mk(&mut rng, Modality::Audio);
        let v = mk(&mut rng, Modality::Video);
        let f = mk(&mut rng, Modality::Face);
        let cfg = MmdConfig::default();
        assert_eq!(total_mmd_loss(&text, &text, &text, &text, &cfg).unwrap(), 0.0);
        let single = total_mmd_loss(&a, &text, &text, &text, &cfg).unwrap();
        assert_eq!(single, mmd(&a.tokens, &text.tokens, &cfg).unwrap());
        let total = total_mmd_loss(&a, &v, &f, &text, &cfg).unwrap();
        let parts: f64 = [&a, &v, &f]
            .iter()
            .map(|s| mmd(&s.tokens, &text.tokens, &cfg).unwrap())
            .sum();
        assert!((total - parts).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mmd_symmetric_and_permutation_invariant(
            xs in proptest::collection::vec(-3.0f64..3.0, 6..=12),
            ys in proptest::collection::vec(-3.0f64..3.0, 6..=12),
            rot in 0usize..5,
        ) {
            let x = Matrix::from_vec(xs.len() / 2, 2, xs[..xs.len() / 2 * 2].to_vec()).unwrap();
            let y = Matrix::from_vec(ys.len() / 2, 2, ys[..ys.len() / 2 * 2].to_vec()).unwrap();
            let cfg = MmdConfig::default();
            let xy = mmd(&x, &y, &cfg).unwrap();
            prop_assert_eq!(xy, mmd(&y, &x, &cfg).unwrap());
            prop_assert!(mmd(&x, &x, &cfg).unwrap() <= 1e-12);
            let mut rows = x.to_rows();
            let k = rot % rows.len();
            rows.rotate_left(k);
            let xp = Matrix::from_rows(&rows).unwrap();
            prop_assert!((mmd(&xp, &y, &cfg).unwrap() - xy).abs() <= 1e-12);
        }

        #[test]
        fn projection_invariant_to_plan_scale(
            t in proptest::collection::vec(0.01f64..1.0, 12),
            s in proptest::collection::vec(-2.0f64..2.0, 8),
            scale in 0.01f64..100.0,
        ) {
            let mk = |m: Matrix| TransportPlan { matrix: m, epsilon: 0.1, tau: None, iterations_run: 0, converged: true, residuals: vec![] };
            let plan = mk(Matrix::from_vec(4, 3, t.clone()).unwrap());
            let scaled = mk(Matrix::from_vec(4, 3, t.iter().map(|v| v * scale).collect()).unwrap());
            let src = FeatureSequence::new(Modality::Face, Matrix::from_vec(4, 2, s).unwrap()).unwrap();
            let a = barycentric_project(&plan, &src).unwrap();
            let b = barycentric_project(&scaled, &src).unwrap();
            for (u, v) in a.tokens.data.iter().zip(&b.tokens.data) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }
}
