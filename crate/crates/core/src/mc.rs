//! Monte Carlo validation harness: seeded batches of random digraphs,
//! per-trial structural measurements (initial lumped state, (1,1)-core,
//! largest strong component), and statistical comparison of the scaled
//! results against the limit theory.
//!
//! Determinism contract: every trial derives its seed from the master
//! seed and its index alone, so reports are bit-identical for any worker
//! count.

use rayon::prelude::*;
use serde::Serialize;

use crate::digraph::{self, Digraph};
use crate::peel::{initial_state, StateVector};
use crate::rng::derive_seed;
use crate::theory;
use crate::{Error, Result};

/// Which random digraph model a batch samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    /// Uniformly random with exactly m = round(c n) arcs.
    Nm,
    /// Each ordered pair an arc independently with p = c/n.
    Np,
}

impl std::str::FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nm" => Ok(Model::Nm),
            "np" => Ok(Model::Np),
            other => Err(Error::Parse(format!("unknown model '{other}'"))),
        }
    }
}

/// One sampled digraph's measurements.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// The derived per-trial seed.
    pub seed: u64,
    /// Lumped state after isolated-vertex cleanup.
    pub s0: StateVector,
    /// (vertices, arcs) of the (1,1)-core.
    pub core: (u64, u64),
    /// (vertices, internal arcs) of the largest strong component.
    pub giant: (u64, u64),
    /// core minus giant, componentwise; non-negative whenever the giant
    /// has at least two vertices.
    pub gap: (i64, i64),
}

/// Gap summary over a batch.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapStats {
    pub v_max: i64,
    pub v_mean: f64,
    pub v_median: f64,
    pub a_max: i64,
    pub a_mean: f64,
    pub a_median: f64,
}

/// Aggregated, scaled results of one experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub model: Model,
    pub n: u64,
    pub c: f64,
    pub trials: usize,
    pub master_seed: u64,
    pub theta: f64,
    /// Sample mean of ((core_v - theta^2 n)/sqrt(n), (core_a - c theta^2 n)/sqrt(n)).
    pub core_mean: [f64; 2],
    /// Same scaling for the largest strong component.
    pub giant_mean: [f64; 2],
    /// Giant in (size, excess) coordinates: (v, a - v), centered at
    /// (theta^2 n, (c-1) theta^2 n).
    pub excess_mean: [f64; 2],
    /// Sample covariances of the scaled pairs; None below 2 trials.
    pub core_cov: Option<[[f64; 2]; 2]>,
    pub giant_cov: Option<[[f64; 2]; 2]>,
    pub excess_cov: Option<[[f64; 2]; 2]>,
    /// Sample mean of (nu, nu_i, nu_o)/n after cleanup.
    pub init_mean: [f64; 3],
    /// Sample covariance of (nu, nu_i, nu_o)/sqrt(n).
    pub init_cov: Option<[[f64; 3]; 3]>,
    pub gap_stats: GapStats,
    pub records: Vec<TrialRecord>,
}

fn sample_digraph(model: Model, n: u64, c: f64, seed: u64) -> Result<Digraph> {
    match model {
        Model::Nm => {
            let m = (c * n as f64).round() as usize;
            digraph::sample_dnm(n as usize, m, seed)
        }
        Model::Np => digraph::sample_dnp(n as usize, c / n as f64, seed),
    }
}

fn run_trial(model: Model, n: u64, c: f64, master_seed: u64, i: usize) -> Result<TrialRecord> {
    let seed = derive_seed(master_seed, i as u64);
    let d = sample_digraph(model, n, c, seed)?;
    let s0 = initial_state(&d);
    let core = digraph::core_11(&d);
    let core_v = core.support().len() as u64;
    let core_a = core.m() as u64;
    let giant = digraph::largest_scc(&d);
    Ok(TrialRecord {
        trial: i,
        seed,
        s0,
        core: (core_v, core_a),
        giant: (giant.v1 as u64, giant.a1 as u64),
        gap: (
            core_v as i64 - giant.v1 as i64,
            core_a as i64 - giant.a1 as i64,
        ),
    })
}

fn mean_cov<const D: usize>(xs: &[[f64; D]]) -> ([f64; D], Option<[[f64; D]; D]>) {
    let n = xs.len();
    let mut mean = [0.0f64; D];
    for x in xs {
        for i in 0..D {
            mean[i] += x[i];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    if n < 2 {
        return (mean, None);
    }
    let mut cov = [[0.0f64; D]; D];
    for x in xs {
        for i in 0..D {
            for j in 0..D {
                cov[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    (mean, Some(cov))
}

fn median_of(mut v: Vec<i64>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2]) as f64
    }
}

/// Runs `trials` independent samples of the chosen model and aggregates
/// the scaled statistics. Bit-identical output for any rayon worker
/// count: trial i depends only on (master_seed, i) and aggregation runs
/// in trial order.
pub fn run_experiment(
    model: Model,
    n: u64,
    c: f64,
    trials: usize,
    master_seed: u64,
) -> Result<ExperimentReport> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("n must be >= 100, got {n}")));
    }
    if trials < 1 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    if !(c > 1.0) {
        return Err(Error::InvalidArgument(format!("c must be > 1, got {c}")));
    }
    let theta = theory::theta(c)?;
    let records: Vec<TrialRecord> = (0..trials)
        .into_par_iter()
        .map(|i| run_trial(model, n, c, master_seed, i))
        .collect::<Result<Vec<_>>>()?;

    let nf = n as f64;
    let sq = nf.sqrt();
    let v_center = theta * theta * nf;
    let a_center = c * theta * theta * nf;
    let scale2 = |v: u64, a: u64| [(v as f64 - v_center) / sq, (a as f64 - a_center) / sq];
    let core_s: Vec<[f64; 2]> =
        records.iter().map(|r| scale2(r.core.0, r.core.1)).collect();
    let giant_s: Vec<[f64; 2]> =
        records.iter().map(|r| scale2(r.giant.0, r.giant.1)).collect();
    let excess_s: Vec<[f64; 2]> = records
        .iter()
        .map(|r| {
            [
                (r.giant.0 as f64 - v_center) / sq,
                (r.giant.1 as f64 - r.giant.0 as f64 - (a_center - v_center)) / sq,
            ]
        })
        .collect();
    let init_s: Vec<[f64; 3]> = records
        .iter()
        .map(|r| {
            [
                r.s0.nu as f64 / sq,
                r.s0.nu_i as f64 / sq,
                r.s0.nu_o as f64 / sq,
            ]
        })
        .collect();

    let (core_mean, core_cov) = mean_cov(&core_s);
    let (giant_mean, giant_cov) = mean_cov(&giant_s);
    let (excess_mean, excess_cov) = mean_cov(&excess_s);
    let (init_mean_sq, init_cov) = mean_cov(&init_s);
    // means are reported per-vertex, covariance stays at the sqrt(n) scale
    let init_mean = [
        init_mean_sq[0] / sq,
        init_mean_sq[1] / sq,
        init_mean_sq[2] / sq,
    ];

    let gv: Vec<i64> = records.iter().map(|r| r.gap.0).collect();
    let ga: Vec<i64> = records.iter().map(|r| r.gap.1).collect();
    let gap_stats = GapStats {
        v_max: gv.iter().copied().max().unwrap_or(0),
        v_mean: gv.iter().sum::<i64>() as f64 / trials as f64,
        v_median: median_of(gv.clone()),
        a_max: ga.iter().copied().max().unwrap_or(0),
        a_mean: ga.iter().sum::<i64>() as f64 / trials as f64,
        a_median: median_of(ga.clone()),
    };

    Ok(ExperimentReport {
        schema: "1".into(),
        model,
        n,
        c,
        trials,
        master_seed,
        theta,
        core_mean,
        giant_mean,
        excess_mean,
        core_cov,
        giant_cov,
        excess_cov,
        init_mean,
        init_cov,
        gap_stats,
        records,
    })
}

/// One TrialRecord per row, CSV with header.
pub fn trials_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "trial,seed,nu0,nu_i0,nu_o0,mu0,core_v,core_a,giant_v,giant_a,gap_v,gap_a\n",
    );
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.trial,
            r.seed,
            r.s0.nu,
            r.s0.nu_i,
            r.s0.nu_o,
            r.s0.mu,
            r.core.0,
            r.core.1,
            r.giant.0,
            r.giant.1,
            r.gap.0,
            r.gap.1
        ));
    }
    out
}

// ---------------------------------------------------------------------
// structural checks

/// Containment and scaled-gap summary of one batch.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapSummary {
    pub all_nonnegative: bool,
    /// mean vertex gap divided by sqrt(n).
    pub v_mean_over_sqrt_n: f64,
    pub a_mean_over_sqrt_n: f64,
    pub stats: GapStats,
}

/// Verifies the core contains the giant component in every trial and
/// reports the gap scaled by sqrt(n) for trend comparisons across n.
pub fn gap_check(report: &ExperimentReport) -> GapSummary {
    let all_nonnegative = report.records.iter().all(|r| r.gap.0 >= 0 && r.gap.1 >= 0);
    let sq = (report.n as f64).sqrt();
    GapSummary {
        all_nonnegative,
        v_mean_over_sqrt_n: report.gap_stats.v_mean / sq,
        a_mean_over_sqrt_n: report.gap_stats.a_mean / sq,
        stats: report.gap_stats,
    }
}

/// True when the scaled mean gap decreases from the smaller-n batch to
/// the larger-n batch (the asymptotic polylog bound seen as a trend).
pub fn gap_trend(small_n: &ExperimentReport, large_n: &ExperimentReport) -> bool {
    assert!(small_n.n < large_n.n, "pass the batches in increasing n order");
    let a = gap_check(small_n);
    let b = gap_check(large_n);
    b.v_mean_over_sqrt_n < a.v_mean_over_sqrt_n
        && b.a_mean_over_sqrt_n < a.a_mean_over_sqrt_n
}

/// Comparison of the post-cleanup state statistics against their limits.
#[derive(Debug, Clone, Serialize)]
pub struct InitialStateDiagnostics {
    /// Limit means of (nu, nu_i, nu_o)/n.
    pub mean_targets: [f64; 3],
    /// Standard errors of the sample means.
    pub mean_se: [f64; 3],
    /// |sample - target|/SE per coordinate.
    pub mean_z: [f64; 3],
    /// |nu_i mean - nu_o mean| over the pooled SE.
    pub symmetry_z: f64,
    /// Entrywise |S - K|/|K| against the reference covariance.
    pub cov_rel: Option<[[f64; 3]; 3]>,
}

/// Compares the sampled initial states against the limit means and the
/// reference covariance `k` (usually `theory::k_matrix(c)`).
pub fn initial_state_check(
    report: &ExperimentReport,
    k: &[[f64; 3]; 3],
) -> InitialStateDiagnostics {
    let c = report.c;
    let e = (-c).exp();
    let targets = [-libm::expm1(-2.0 * c), e * (1.0 - e), e * (1.0 - e)];
    let nf = report.n as f64;
    let t = report.trials as f64;
    let mut mean_se = [0.0f64; 3];
    let mut mean_z = [0.0f64; 3];
    for i in 0..3 {
        // SD of a single trial's count/n is sqrt(K_ii/n)
        mean_se[i] = (k[i][i] / nf).sqrt() / t.sqrt();
        mean_z[i] = (report.init_mean[i] - targets[i]).abs() / mean_se[i];
    }
    let pooled = (mean_se[1] * mean_se[1] + mean_se[2] * mean_se[2]).sqrt();
    let symmetry_z = (report.init_mean[1] - report.init_mean[2]).abs() / pooled;
    let cov_rel = report.init_cov.map(|s| {
        let mut rel = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rel[i][j] = (s[i][j] - k[i][j]).abs() / k[i][j].abs().max(1e-12);
            }
        }
        rel
    });
    InitialStateDiagnostics { mean_targets: targets, mean_se, mean_z, symmetry_z, cov_rel }
}

// ---------------------------------------------------------------------
// the reachability/component equidistribution check

/// Result of the two-sample Kolmogorov-Smirnov comparison between
/// |descendants(v)| in the directed model and |component(v)| in the
/// undirected one.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KarpCheck {
    pub ks: f64,
    pub threshold: f64,
    pub pass: bool,
    pub samples: usize,
}

// Two-sample KS distance between empirical distributions of integers.
fn ks_two_sample(a: &mut [u64], b: &mut [u64]) -> f64 {
    a.sort_unstable();
    b.sort_unstable();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Samples |descendants(0)| in the Bernoulli digraph and |component(0)|
/// in the Bernoulli graph with the same p, and KS-tests the two at
/// significance 0.001. The distributions agree exactly in the limit
/// theory; the test validates the samplers end to end.
pub fn karp_check(n: u64, p: f64, samples: usize, seed: u64) -> Result<KarpCheck> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p must be in [0, 1), got {p}")));
    }
    if n == 0 || samples == 0 {
        return Err(Error::InvalidArgument("need n >= 1 and samples >= 1".into()));
    }
    let mut directed: Vec<u64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let d = digraph::sample_dnp(n as usize, p, derive_seed(seed, 2 * i as u64))?;
            Ok(digraph::descendants(&d, 0)?.len() as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut undirected: Vec<u64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            digraph::sample_gnp_component_size(
                n as usize,
                p,
                derive_seed(seed, 2 * i as u64 + 1),
            )
            .map(|s| s as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    let ks = ks_two_sample(&mut directed, &mut undirected);
    let m = samples as f64;
    // c(alpha) = sqrt(-ln(alpha/2)/2) at alpha = 0.001
    let threshold = 1.9494746035203276 * ((m + m) / (m * m)).sqrt();
    Ok(KarpCheck { ks, threshold, pass: ks < threshold, samples })
}

// ---------------------------------------------------------------------
// normality diagnostics

/// Which measured pair to diagnose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PairKind {
    Core,
    Giant,
}

/// Moments and KS distance of one scalar projection.
#[derive(Debug, Clone, Serialize)]
pub struct ProjectionStats {
    pub label: String,
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// One-sample KS distance against the standard normal.
    pub ks: f64,
}

/// Projection-based normality diagnostics of a scaled pair.
#[derive(Debug, Clone, Serialize)]
pub struct NormalityReport {
    pub pair: PairKind,
    /// The theory covariance used for whitening (B for nm, B_np for np).
    pub theory_cov: [[f64; 2]; 2],
    /// Sample covariance conjugated by the whitening transform; near the
    /// identity when the theory matches.
    pub whitened_cov: [[f64; 2]; 2],
    pub projections: Vec<ProjectionStats>,
}

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn ks_against_normal(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = phi(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max((f - (i as f64 + 1.0) / n).abs());
    }
    d
}

fn projection_stats(label: &str, xs: &[f64]) -> ProjectionStats {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &x in xs {
        let d = x - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let sd = m2.sqrt();
    let mut standardized: Vec<f64> = xs.to_vec();
    let ks = ks_against_normal(&mut standardized);
    ProjectionStats {
        label: label.to_string(),
        mean,
        sd,
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        ks,
    }
}

fn cholesky2(b: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    if b[0][0] <= 0.0 {
        return Err(Error::Numerical("covariance not positive definite".into()));
    }
    let l11 = b[0][0].sqrt();
    let l21 = b[0][1] / l11;
    let rest = b[1][1] - l21 * l21;
    if rest <= 0.0 {
        return Err(Error::Numerical("covariance not positive definite".into()));
    }
    Ok([[l11, 0.0], [l21, rest.sqrt()]])
}

/// Projects the chosen scaled pair onto eight fixed directions (axes and
/// diagonals, raw B-normalized and B-whitened) and reports moments plus
/// KS distances; also returns the whitened sample covariance.
pub fn normality_diagnostics_for(
    report: &ExperimentReport,
    pair: PairKind,
) -> Result<NormalityReport> {
    if report.trials < 200 {
        return Err(Error::InvalidArgument(format!(
            "normality diagnostics need >= 200 trials, got {}",
            report.trials
        )));
    }
    let (b, _, b_np) = theory::b_matrices(report.c)?;
    let theory_cov = match report.model {
        Model::Nm => b,
        Model::Np => b_np,
    };
    let nf = report.n as f64;
    let sq = nf.sqrt();
    let v_center = report.theta * report.theta * nf;
    let a_center = report.c * report.theta * report.theta * nf;
    let ys: Vec<[f64; 2]> = report
        .records
        .iter()
        .map(|r| {
            let (v, a) = match pair {
                PairKind::Core => r.core,
                PairKind::Giant => r.giant,
            };
            [(v as f64 - v_center) / sq, (a as f64 - a_center) / sq]
        })
        .collect();

    let l = cholesky2(&theory_cov)?;
    // forward-solve L w = y
    let whiten = |y: &[f64; 2]| {
        let w0 = y[0] / l[0][0];
        let w1 = (y[1] - l[1][0] * w0) / l[1][1];
        [w0, w1]
    };
    let ws: Vec<[f64; 2]> = ys.iter().map(whiten).collect();
    let (_, wcov) = mean_cov(&ws);
    let whitened_cov = wcov.expect("trials >= 200 checked above");

    let s = std::f64::consts::FRAC_1_SQRT_2;
    let raw_dirs: [([f64; 2], &str); 4] = [
        ([1.0, 0.0], "axis-v"),
        ([0.0, 1.0], "axis-a"),
        ([s, s], "diag-sum"),
        ([s, -s], "diag-diff"),
    ];
    let mut projections = Vec::with_capacity(8);
    for (u, label) in raw_dirs {
        // normalize by the theory SD in direction u so the target is N(0,1)
        let var = u[0] * (theory_cov[0][0] * u[0] + theory_cov[0][1] * u[1])
            + u[1] * (theory_cov[1][0] * u[0] + theory_cov[1][1] * u[1]);
        let sd = var.sqrt();
        let xs: Vec<f64> = ys.iter().map(|y| (u[0] * y[0] + u[1] * y[1]) / sd).collect();
        projections.push(projection_stats(label, &xs));
    }
    for (u, label) in [
        ([1.0, 0.0], "white-1"),
        ([0.0, 1.0], "white-2"),
        ([s, s], "white-sum"),
        ([s, -s], "white-diff"),
    ] {
        let xs: Vec<f64> = ws.iter().map(|w| u[0] * w[0] + u[1] * w[1]).collect();
        projections.push(projection_stats(label, &xs));
    }
    Ok(NormalityReport { pair, theory_cov, whitened_cov, projections })
}

/// [`normality_diagnostics_for`] on the core pair.
pub fn normality_diagnostics(report: &ExperimentReport) -> Result<NormalityReport> {
    normality_diagnostics_for(report, PairKind::Core)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trial_report() {
        let rep = run_experiment(Model::Nm, 200, 2.0, 1, 7).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert!(rep.core_cov.is_none());
        assert!(rep.init_cov.is_none());
        assert_eq!(rep.schema, "1");
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(run_experiment(Model::Nm, 50, 2.0, 10, 1).is_err());
        assert!(run_experiment(Model::Nm, 200, 0.9, 10, 1).is_err());
        assert!(run_experiment(Model::Nm, 200, 2.0, 0, 1).is_err());
    }

    #[test]
    fn determinism_across_worker_counts() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| run_experiment(Model::Nm, 300, 2.0, 24, 99).unwrap())
        };
        let a = run(1);
        let b = run(4);
        let c = run(16);
        let key = |r: &ExperimentReport| {
            (
                serde_json::to_string(&r.records).unwrap(),
                r.core_mean,
                r.giant_mean,
            )
        };
        assert_eq!(key(&a), key(&b));
        assert_eq!(key(&a), key(&c));
    }

    #[test]
    fn containment_holds_per_trial() {
        let rep = run_experiment(Model::Nm, 500, 1.5, 30, 5).unwrap();
        let g = gap_check(&rep);
        assert!(g.all_nonnegative);
        for r in &rep.records {
            assert!(r.core.0 >= r.giant.0);
            assert!(r.core.1 >= r.giant.1);
        }
    }

    #[test]
    fn gap_construction_two_cycles_joined() {
        // two 3-cycles joined by a directed 2-arc path through a middle
        // vertex: the whole thing is the (1,1)-core, the giant is one
        // 3-cycle, so the vertex gap is 4 and the arc gap is 5
        let arcs = vec![
            (0, 1),
            (1, 2),
            (2, 0),
            (2, 3),
            (3, 4),
            (4, 5),
            (5, 6),
            (6, 4),
        ];
        let d = Digraph::new(7, arcs).unwrap();
        let core = digraph::core_11(&d);
        let giant = digraph::largest_scc(&d);
        assert_eq!(core.support().len(), 7);
        assert_eq!(core.m(), 8);
        assert_eq!(giant.v1, 3);
        assert_eq!(giant.a1, 3);
        assert_eq!(core.support().len() - giant.v1, 4);
        assert_eq!(core.m() - giant.a1, 5);
    }

    #[test]
    fn trials_csv_shape() {
        let rep = run_experiment(Model::Np, 200, 2.0, 3, 11).unwrap();
        let csv = trials_csv(&rep);
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("trial,seed,nu0"));
        assert_eq!(lines[1].split(',').count(), 12);
    }

    #[test]
    fn ks_distance_basics() {
        let mut a = vec![1u64, 2, 3, 4, 5];
        let mut b = vec![1u64, 2, 3, 4, 5];
        assert_eq!(ks_two_sample(&mut a, &mut b), 0.0);
        let mut c = vec![1u64; 5];
        let mut d = vec![2u64; 5];
        assert_eq!(ks_two_sample(&mut c, &mut d), 1.0);
    }

    #[test]
    fn karp_point_mass_at_p_zero() {
        let k = karp_check(50, 0.0, 20, 3).unwrap();
        assert_eq!(k.ks, 0.0);
        assert!(k.pass);
    }

    #[test]
    fn karp_two_vertices() {
        // with n=2 both distributions are Bernoulli(p) shifted to {1, 2};
        // at 400 samples the KS test comfortably passes
        let k = karp_check(2, 0.5, 400, 17).unwrap();
        assert!(k.pass, "ks = {}, threshold = {}", k.ks, k.threshold);
    }

    #[test]
    fn karp_rejects_bad_p() {
        assert!(karp_check(10, 1.0, 5, 1).is_err());
        assert!(karp_check(10, -0.1, 5, 1).is_err());
    }

    #[test]
    fn normality_needs_enough_trials() {
        let rep = run_experiment(Model::Nm, 200, 2.0, 10, 7).unwrap();
        assert!(normality_diagnostics(&rep).is_err());
    }

    #[test]
    fn phi_is_the_normal_cdf() {
        assert!((phi(0.0) - 0.5).abs() < 1e-15);
        assert!((phi(1.959963984540054) - 0.975).abs() < 1e-9);
        assert!(phi(-8.0) < 1e-14);
    }

    #[test]
    fn initial_state_symmetry() {
        let rep = run_experiment(Model::Nm, 1000, 2.0, 60, 21).unwrap();
        let k = theory::k_matrix(2.0).unwrap();
        let diag = initial_state_check(&rep, &k);
        assert!(diag.symmetry_z < 3.0, "symmetry z = {}", diag.symmetry_z);
        for (i, z) in diag.mean_z.iter().enumerate() {
            assert!(*z < 4.0, "coordinate {i}: z = {z}");
        }
    }
}
