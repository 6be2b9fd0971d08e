//! Counting digraphs with prescribed zero-degree sets, and the one-step
//! transition kernels of the lumped deletion chain.
//!
//! Everything here comes in two flavors: exact (small vertex counts,
//! integer arithmetic, used as test oracles) and asymptotic (the
//! product-form approximations that drive the limit theory). The exact
//! kernel divides counts of labelled digraphs; the `q`-kernel replaces the
//! counts by truncated-Poisson factors and is substochastic, with an
//! exponentially small deficit in the regime of interest.
//!
//! Conventions: a state `(nu, nu_i, nu_o, mu)` fixes the vertex set
//! `{0, .., nu-1}` with zero-in set `{0, .., nu_i-1}` and zero-out set
//! `{nu_i, .., nu_i+nu_o-1}`; `g(s)` counts digraphs with exactly those
//! zero sets and `mu` arcs.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Mutex, OnceLock};

use serde::Serialize;

use crate::peel::{Flavor, StateVector, TransitionDelta};
use crate::theory;
use crate::{Error, Result};

/// Largest vertex count the exact enumerators accept.
pub const ORACLE_MAX_NU: u64 = 6;

fn binom(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

fn ln_factorial(n: f64) -> f64 {
    libm::lgamma(n + 1.0)
}

/// ln(e^z - 1), stable for both small and large z.
fn ln_expm1(z: f64) -> f64 {
    if z > 30.0 {
        z + libm::log1p(-(-z).exp())
    } else {
        libm::expm1(z).ln()
    }
}

fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// A pair of in/out degree sequences on the same vertex set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreePair {
    /// In-degrees, indexed by vertex.
    pub in_degrees: Vec<u32>,
    /// Out-degrees, indexed by vertex.
    pub out_degrees: Vec<u32>,
}

impl DegreePair {
    pub fn new(in_degrees: Vec<u32>, out_degrees: Vec<u32>) -> Result<Self> {
        if in_degrees.len() != out_degrees.len() {
            return Err(Error::InvalidArgument(
                "degree sequences differ in length".into(),
            ));
        }
        let nu = in_degrees.len() as u32;
        let max = nu.saturating_sub(1);
        if in_degrees.iter().chain(&out_degrees).any(|&d| d > max) {
            return Err(Error::InvalidArgument(format!(
                "a degree exceeds nu - 1 = {max}"
            )));
        }
        let si: u64 = in_degrees.iter().map(|&d| d as u64).sum();
        let so: u64 = out_degrees.iter().map(|&d| d as u64).sum();
        if si != so {
            return Err(Error::InvalidArgument(format!(
                "degree sums differ: {si} vs {so}"
            )));
        }
        Ok(DegreePair { in_degrees, out_degrees })
    }

    pub fn nu(&self) -> usize {
        self.in_degrees.len()
    }

    /// Total number of arcs.
    pub fn mu(&self) -> u64 {
        self.in_degrees.iter().map(|&d| d as u64).sum()
    }
}

// ---------------------------------------------------------------------
// exact counting

/// Counts digraphs column by column: vertex v's in-neighborhood is a
/// subset of the permitted tails, tracked against total arcs and the set
/// of tails already used. Returns g for every arc count at once.
fn g_table_compute(nu: u64, nu_i: u64, nu_o: u64) -> Vec<u64> {
    let nu = nu as usize;
    let nu_i = nu_i as usize;
    let nu_o = nu_o as usize;
    let max_m = nu * nu.saturating_sub(1);
    let in_o_o = |u: usize| u >= nu_i && u < nu_i + nu_o;
    let full_mask: u32 = (0..nu).filter(|&u| !in_o_o(u)).map(|u| 1u32 << u).sum();
    // dp[arcs][used-tails mask]
    let mut dp = vec![vec![0u64; 1 << nu]; max_m + 1];
    dp[0][0] = 1;
    for col in 0..nu {
        if col < nu_i {
            continue; // zero-in vertices receive no arcs
        }
        let allowed: Vec<usize> =
            (0..nu).filter(|&u| u != col && !in_o_o(u)).collect();
        // (arc increment, tail mask) per non-empty tail subset
        let choices: Vec<(usize, u32)> = (1u32..1 << allowed.len())
            .map(|sub| {
                let mask = allowed
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| sub >> i & 1 == 1)
                    .map(|(_, &u)| 1u32 << u)
                    .sum();
                (sub.count_ones() as usize, mask)
            })
            .collect();
        let mut next = vec![vec![0u64; 1 << nu]; max_m + 1];
        for arcs in 0..=max_m {
            for mask in 0..1usize << nu {
                let c = dp[arcs][mask];
                if c == 0 {
                    continue;
                }
                for &(size, add) in &choices {
                    if arcs + size <= max_m {
                        next[arcs + size][mask | add as usize] += c;
                    }
                }
            }
        }
        dp = next;
    }
    (0..=max_m).map(|m| dp[m][full_mask as usize]).collect()
}

fn g_cached(nu: u64, nu_i: u64, nu_o: u64, mu: u64) -> u64 {
    static CACHE: OnceLock<Mutex<HashMap<(u64, u64, u64), Vec<u64>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("g cache poisoned");
    let table = guard
        .entry((nu, nu_i, nu_o))
        .or_insert_with(|| g_table_compute(nu, nu_i, nu_o));
    table.get(mu as usize).copied().unwrap_or(0)
}

/// g(s): the number of digraphs on `{0, .., nu-1}` with `mu` arcs whose
/// zero-in-degree set is exactly `{0, .., nu_i-1}` and zero-out-degree set
/// exactly `{nu_i, .., nu_i+nu_o-1}`. Exact; refuses `nu` > 6.
pub fn exact_g(s: &StateVector) -> Result<u64> {
    if s.nu > ORACLE_MAX_NU {
        return Err(Error::InvalidArgument(format!(
            "exact_g is an oracle for nu <= {ORACLE_MAX_NU}, got nu = {}",
            s.nu
        )));
    }
    if s.nu_i + s.nu_o > s.nu {
        return Err(Error::InvalidArgument(
            "zero-degree sets exceed the vertex set".into(),
        ));
    }
    Ok(g_cached(s.nu, s.nu_i, s.nu_o, s.mu))
}

/// Exhaustively enumerates the digraphs counted by [`exact_g`], invoking
/// `f` with each arc list. Recursion over admissible ordered pairs with
/// exact zero-set checks at the leaves.
fn for_each_digraph(
    nu: u64,
    nu_i: u64,
    nu_o: u64,
    mu: u64,
    f: &mut dyn FnMut(&[(u8, u8)]),
) {
    let nu = nu as usize;
    let nu_i = nu_i as usize;
    let nu_o = nu_o as usize;
    let mu = mu as usize;
    let in_o_i = |v: usize| v < nu_i;
    let in_o_o = |v: usize| v >= nu_i && v < nu_i + nu_o;
    let pairs: Vec<(u8, u8)> = (0..nu)
        .flat_map(|u| (0..nu).map(move |v| (u, v)))
        .filter(|&(u, v)| u != v && !in_o_o(u) && !in_o_i(v))
        .map(|(u, v)| (u as u8, v as u8))
        .collect();
    if mu > pairs.len() {
        return;
    }
    let mut arcs: Vec<(u8, u8)> = Vec::with_capacity(mu);
    let mut indeg = [0u8; 8];
    let mut outdeg = [0u8; 8];

    fn rec(
        pairs: &[(u8, u8)],
        from: usize,
        mu: usize,
        nu: usize,
        nu_i: usize,
        nu_o: usize,
        arcs: &mut Vec<(u8, u8)>,
        indeg: &mut [u8; 8],
        outdeg: &mut [u8; 8],
        f: &mut dyn FnMut(&[(u8, u8)]),
    ) {
        if arcs.len() == mu {
            let zero_in_ok = (nu_i..nu).all(|v| indeg[v] > 0);
            let zero_out_ok =
                (0..nu).filter(|&v| !(v >= nu_i && v < nu_i + nu_o)).all(|v| outdeg[v] > 0);
            if zero_in_ok && zero_out_ok {
                f(arcs);
            }
            return;
        }
        if pairs.len() - from < mu - arcs.len() {
            return;
        }
        for i in from..pairs.len() {
            let (u, v) = pairs[i];
            arcs.push((u, v));
            indeg[v as usize] += 1;
            outdeg[u as usize] += 1;
            rec(pairs, i + 1, mu, nu, nu_i, nu_o, arcs, indeg, outdeg, f);
            indeg[v as usize] -= 1;
            outdeg[u as usize] -= 1;
            arcs.pop();
        }
    }
    rec(&pairs, 0, mu, nu, nu_i, nu_o, &mut arcs, &mut indeg, &mut outdeg, f);
}

/// Counts simple digraphs realizing the exact degree pair. Column-by-column
/// recursion with memoization on remaining out-capacities; exact integers.
/// Refuses `nu` > 6.
pub fn exact_g_by_degrees(dp: &DegreePair) -> Result<u64> {
    let nu = dp.nu();
    if nu as u64 > ORACLE_MAX_NU {
        return Err(Error::InvalidArgument(format!(
            "exact_g_by_degrees is an oracle for nu <= {ORACLE_MAX_NU}, got nu = {nu}"
        )));
    }
    if nu == 0 {
        return Ok(1);
    }
    // caps[u] = remaining out-degree of u; encode base (nu) for the memo key
    fn encode(caps: &[u32]) -> u64 {
        caps.iter().fold(0u64, |acc, &c| acc * 8 + c as u64)
    }
    fn rec(
        col: usize,
        caps: &mut Vec<u32>,
        dp: &DegreePair,
        memo: &mut HashMap<(usize, u64), u64>,
    ) -> u64 {
        let nu = dp.nu();
        if col == nu {
            return caps.iter().all(|&c| c == 0) as u64;
        }
        let key = (col, encode(caps));
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let want = dp.in_degrees[col] as usize;
        let avail: Vec<usize> =
            (0..nu).filter(|&u| u != col && caps[u] > 0).collect();
        let mut total = 0u64;
        // choose `want` tails out of `avail`
        let mut chosen: Vec<usize> = Vec::with_capacity(want);
        fn choose(
            avail: &[usize],
            from: usize,
            want: usize,
            chosen: &mut Vec<usize>,
            col: usize,
            caps: &mut Vec<u32>,
            dp: &DegreePair,
            memo: &mut HashMap<(usize, u64), u64>,
            total: &mut u64,
        ) {
            if chosen.len() == want {
                for &u in chosen.iter() {
                    caps[u] -= 1;
                }
                *total += rec(col + 1, caps, dp, memo);
                for &u in chosen.iter() {
                    caps[u] += 1;
                }
                return;
            }
            if avail.len() - from < want - chosen.len() {
                return;
            }
            for i in from..avail.len() {
                chosen.push(avail[i]);
                choose(avail, i + 1, want, chosen, col, caps, dp, memo, total);
                chosen.pop();
            }
        }
        choose(&avail, 0, want, &mut chosen, col, caps, dp, memo, &mut total);
        memo.insert(key, total);
        total
    }
    let mut caps: Vec<u32> = dp.out_degrees.clone();
    let mut memo = HashMap::new();
    Ok(rec(0, &mut caps, dp, &mut memo))
}

/// McKay-style estimate of the number of digraphs with a given degree
/// pair, with the pieces it is assembled from.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct McKayEstimate {
    /// mu!/(prod delta! Delta!) * fudge.
    pub estimate: f64,
    /// The fudge factor H in (0, 1]: the probability that the random
    /// arc-matching produces a simple digraph.
    pub fudge: f64,
    /// The plain upper bound mu!/(prod delta! Delta!).
    pub upper_bound: f64,
}

/// Estimates the degree-pair count as mu!/(prod of degree factorials)
/// times the fudge factor H = exp(-(1/mu) sum d_v D_v
/// - (1/(2 mu^2)) sum (d_v)_2 sum (D_u)_2).
pub fn mckay_estimate(dp: &DegreePair) -> Result<McKayEstimate> {
    let mu = dp.mu();
    if dp.nu() == 0 || mu == 0 {
        return Err(Error::InvalidArgument(
            "mckay_estimate needs nu >= 1 and mu >= 1".into(),
        ));
    }
    let muf = mu as f64;
    let cross: f64 = dp
        .in_degrees
        .iter()
        .zip(&dp.out_degrees)
        .map(|(&di, &do_)| di as f64 * do_ as f64)
        .sum();
    let fall2 = |d: u32| d as f64 * (d as f64 - 1.0);
    let s_in: f64 = dp.in_degrees.iter().map(|&d| fall2(d)).sum();
    let s_out: f64 = dp.out_degrees.iter().map(|&d| fall2(d)).sum();
    let fudge = (-cross / muf - s_in * s_out / (2.0 * muf * muf)).exp();
    let ln_ub = ln_factorial(muf)
        - dp.in_degrees
            .iter()
            .chain(&dp.out_degrees)
            .map(|&d| ln_factorial(d as f64))
            .sum::<f64>();
    let upper_bound = ln_ub.exp();
    Ok(McKayEstimate { estimate: upper_bound * fudge, fudge, upper_bound })
}

// ---------------------------------------------------------------------
// asymptotics

/// The roots z_i, z_o attached to a state: ell(z_i) = mu/(nu - nu_i) and
/// ell(z_o) = mu/(nu - nu_o), each solved to 1e-12.
pub fn z_of_state(s: &StateVector) -> Result<(f64, f64)> {
    if s.nu <= s.nu_i || s.nu <= s.nu_o {
        return Err(Error::Domain(
            "z_of_state needs nu - nu_i > 0 and nu - nu_o > 0".into(),
        ));
    }
    let z_i = theory::z_root(s.mu as f64 / (s.nu - s.nu_i) as f64)?;
    let z_o = theory::z_root(s.mu as f64 / (s.nu - s.nu_o) as f64)?;
    Ok((z_i, z_o))
}

fn truncated_poisson_var(z: f64) -> f64 {
    let mean = theory::ell(z);
    // E[(Z)_2] = z^2/(1 - e^{-z}) = z * ell(z)
    z * mean + mean - mean * mean
}

/// log of the product-form approximation to g(s): two independent
/// truncated Poisson degree sequences matched at random, with the local
/// CLT normalization and the simplicity correction e^{-eta}.
pub fn asym_g_ln(s: &StateVector) -> Result<f64> {
    if s.nu - s.nu_i.min(s.nu) == 0 || s.nu <= s.nu_i + s.nu_o {
        return Err(Error::Domain(
            "asym_g needs nu - nu_i - nu_o > 0".into(),
        ));
    }
    let (z_i, z_o) = z_of_state(s)?;
    let (nu, nu_i, nu_o, mu) =
        (s.nu as f64, s.nu_i as f64, s.nu_o as f64, s.mu as f64);
    let f1 = mu * (nu - nu_i - nu_o) / ((nu - nu_i) * (nu - nu_o));
    let eta = f1 + z_i * z_o / 2.0;
    let var_i = truncated_poisson_var(z_i);
    let var_o = truncated_poisson_var(z_o);
    Ok(ln_factorial(mu)
        + (nu - nu_i) * ln_expm1(z_i)
        + (nu - nu_o) * ln_expm1(z_o)
        - mu * (z_i * z_o).ln()
        - eta
        - (2.0 * std::f64::consts::PI).ln()
        - 0.5 * ((nu - nu_i) * var_i * (nu - nu_o) * var_o).ln())
}

/// [`asym_g_ln`] exponentiated; overflows to infinity for large states,
/// which is why the log form is primary.
pub fn asym_g(s: &StateVector) -> Result<f64> {
    Ok(asym_g_ln(s)?.exp())
}

/// log of the rigorous upper bound on g(s): mu! phi_i(z_i) phi_o(z_o)
/// with phi_i(x) = (e^x - 1)^{nu - nu_i} / x^mu and phi_o alike.
pub fn g_upper_bound_ln(s: &StateVector) -> Result<f64> {
    let (z_i, z_o) = z_of_state(s)?;
    let (nu, nu_i, nu_o, mu) =
        (s.nu as f64, s.nu_i as f64, s.nu_o as f64, s.mu as f64);
    Ok(ln_factorial(mu)
        + (nu - nu_i) * ln_expm1(z_i) - mu * z_i.ln()
        + (nu - nu_o) * ln_expm1(z_o) - mu * z_o.ln())
}

/// Leading factor of the ratio g(s')/g(s) across one transition:
/// (z_i z_o/mu)^k / ((e^{z_o}-1)(e^{z_i}-1)^{b+r_i}) for the i-flavor, and
/// the full i<->o mirror for the o-flavor.
pub fn g_ratio_asym(s: &StateVector, delta: &TransitionDelta) -> Result<f64> {
    delta.check().map_err(|e| {
        Error::InvalidArgument(format!("inadmissible fivesome: {e}"))
    })?;
    let (z_i, z_o) = z_of_state(s)?;
    let base = (z_i * z_o / s.mu as f64).powi(delta.k as i32);
    let (ei1, eo1) = (libm::expm1(z_i), libm::expm1(z_o));
    Ok(match delta.flavor {
        Flavor::I => base / (eo1 * ei1.powi((delta.b + delta.r_i) as i32)),
        Flavor::O => base / (ei1 * eo1.powi((delta.a + delta.r_o) as i32)),
    })
}

// ---------------------------------------------------------------------
// kernels

/// One-step transition kernel of the lumped chain from a fixed state.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    pub source: StateVector,
    /// Probability per fivesome; fivesomes determine the target state.
    pub entries: BTreeMap<TransitionDelta, f64>,
}

impl TransitionKernel {
    pub fn prob(&self, delta: &TransitionDelta) -> f64 {
        self.entries.get(delta).copied().unwrap_or(0.0)
    }

    fn mass_where(&self, flavor: Flavor) -> f64 {
        kahan_sum(
            self.entries
                .iter()
                .filter(|(d, _)| d.flavor == flavor)
                .map(|(_, &p)| p),
        )
    }

    /// Total probability of i-flavor transitions.
    pub fn mass_i(&self) -> f64 {
        self.mass_where(Flavor::I)
    }

    /// Total probability of o-flavor transitions.
    pub fn mass_o(&self) -> f64 {
        self.mass_where(Flavor::O)
    }

    pub fn total_mass(&self) -> f64 {
        kahan_sum(self.entries.values().copied())
    }

    /// 1 minus the total mass; zero for the exact kernel, small and
    /// positive for the substochastic q-kernel.
    pub fn deficit(&self) -> f64 {
        1.0 - self.total_mass()
    }
}

/// The exact transition kernel: binomial placement factors times exact
/// g-ratios. Sums to 1 over the reachable fivesomes. Oracle scale.
pub fn exact_transition(s: &StateVector) -> Result<TransitionKernel> {
    s.check()?;
    if s.nu_i + s.nu_o == 0 {
        return Err(Error::InvalidArgument(
            "exact_transition needs a semi-isolated vertex".into(),
        ));
    }
    if s.nu > ORACLE_MAX_NU {
        return Err(Error::InvalidArgument(format!(
            "exact_transition is oracle-scale (nu <= {ORACLE_MAX_NU})"
        )));
    }
    let g_s = g_cached(s.nu, s.nu_i, s.nu_o, s.mu);
    if g_s == 0 {
        return Err(Error::Domain(format!(
            "state {s:?} has no digraph realizations"
        )));
    }
    let semis = (s.nu_i + s.nu_o) as f64;
    let mut entries = BTreeMap::new();
    let plain = s.nu - s.nu_i - s.nu_o;

    // i-flavor: delete one zero-in vertex with k out-arcs; b zero-out
    // heads become isolated, r_i plain heads become zero-in
    if s.nu_i >= 1 {
        for b in 0..=s.nu_o {
            for r_i in 0..=plain {
                for k in 1.max(b + r_i)..=s.mu {
                    let factor = binom(s.nu - s.nu_i - b - r_i, k - b - r_i)
                        * s.nu_i as u128
                        * binom(s.nu_o, b)
                        * binom(plain, r_i);
                    if factor == 0 {
                        continue;
                    }
                    let g_next =
                        g_cached(s.nu - 1 - b, s.nu_i - 1 + r_i, s.nu_o - b, s.mu - k);
                    if g_next == 0 {
                        continue;
                    }
                    let p = factor as f64 * g_next as f64 / (g_s as f64 * semis);
                    let delta = TransitionDelta {
                        flavor: Flavor::I,
                        a: 1,
                        b,
                        r_i,
                        r_o: 0,
                        k,
                    };
                    entries.insert(delta, p);
                }
            }
        }
    }
    // o-flavor mirror: delete one zero-out vertex with k in-arcs
    if s.nu_o >= 1 {
        for a in 0..=s.nu_i {
            for r_o in 0..=plain {
                for k in 1.max(a + r_o)..=s.mu {
                    let factor = binom(s.nu - s.nu_o - a - r_o, k - a - r_o)
                        * s.nu_o as u128
                        * binom(s.nu_i, a)
                        * binom(plain, r_o);
                    if factor == 0 {
                        continue;
                    }
                    let g_next =
                        g_cached(s.nu - 1 - a, s.nu_i - a, s.nu_o - 1 + r_o, s.mu - k);
                    if g_next == 0 {
                        continue;
                    }
                    let p = factor as f64 * g_next as f64 / (g_s as f64 * semis);
                    let delta = TransitionDelta {
                        flavor: Flavor::O,
                        a,
                        b: 1,
                        r_i: 0,
                        r_o,
                        k,
                    };
                    entries.insert(delta, p);
                }
            }
        }
    }
    Ok(TransitionKernel { source: *s, entries })
}

fn ln_binom(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    ln_factorial(n as f64) - ln_factorial(k as f64) - ln_factorial((n - k) as f64)
}

/// The exact kernel's structure with the digraph counts supplied in log
/// space, so it stays usable far beyond oracle scale (e.g. with
/// [`asym_g_ln`]). `k_max` truncates the arc-deletion count. Equals
/// [`exact_transition`] when `ln_g` is the log of the exact counts and
/// `k_max = mu`.
pub fn transition_with_ln_g(
    s: &StateVector,
    k_max: u64,
    ln_g: &dyn Fn(&StateVector) -> Result<f64>,
) -> Result<TransitionKernel> {
    s.check()?;
    if s.nu_i + s.nu_o == 0 {
        return Err(Error::InvalidArgument(
            "transition_with_ln_g needs a semi-isolated vertex".into(),
        ));
    }
    let ln_g_s = ln_g(s)?;
    let ln_semis = ((s.nu_i + s.nu_o) as f64).ln();
    let plain = s.nu - s.nu_i - s.nu_o;
    let mut entries = BTreeMap::new();
    let k_max = k_max.min(s.mu);
    // (deleted-vertex count, newly-zero cap, head-pool size) per flavor
    let flavors = [
        (Flavor::I, s.nu_i, s.nu_o, s.nu - s.nu_i),
        (Flavor::O, s.nu_o, s.nu_i, s.nu - s.nu_o),
    ];
    for (flavor, own, other_cap, pool) in flavors {
        if own == 0 {
            continue;
        }
        let ln_own = (own as f64).ln();
        for b in 0..=other_cap.min(k_max) {
            for r in 0..=plain.min(k_max - b) {
                for k in 1.max(b + r)..=k_max {
                    if k - b - r > pool - b - r {
                        continue;
                    }
                    let next = StateVector {
                        nu: s.nu - 1 - b,
                        nu_i: match flavor {
                            Flavor::I => s.nu_i - 1 + r,
                            Flavor::O => s.nu_i - b,
                        },
                        nu_o: match flavor {
                            Flavor::I => s.nu_o - b,
                            Flavor::O => s.nu_o - 1 + r,
                        },
                        mu: s.mu - k,
                    };
                    if next.check().is_err() {
                        continue;
                    }
                    // a Domain error marks a target without a usable count
                    // (unrealizable, or outside the approximation's range):
                    // it contributes nothing, as in the exact kernel
                    let ln_g_next = match ln_g(&next) {
                        Ok(v) => v,
                        Err(Error::Domain(_)) => continue,
                        Err(e) => return Err(e),
                    };
                    let ln_p = ln_binom(pool - b - r, k - b - r)
                        + ln_own
                        + ln_binom(other_cap, b)
                        + ln_binom(plain, r)
                        + ln_g_next
                        - ln_g_s
                        - ln_semis;
                    let delta = match flavor {
                        Flavor::I => TransitionDelta { flavor, a: 1, b, r_i: r, r_o: 0, k },
                        Flavor::O => TransitionDelta { flavor, a: b, b: 1, r_i: 0, r_o: r, k },
                    };
                    entries.insert(delta, ln_p.exp());
                }
            }
        }
    }
    Ok(TransitionKernel { source: *s, entries })
}

/// Definitional oracle for [`exact_transition`]: enumerates every digraph
/// realizing the state, applies the deletion step for every semi-isolated
/// choice, and aggregates the outcomes with uniform weights.
pub fn oracle_transition(s: &StateVector) -> Result<TransitionKernel> {
    s.check()?;
    if s.nu_i + s.nu_o == 0 {
        return Err(Error::InvalidArgument(
            "oracle_transition needs a semi-isolated vertex".into(),
        ));
    }
    if s.nu > ORACLE_MAX_NU {
        return Err(Error::InvalidArgument(format!(
            "oracle_transition is oracle-scale (nu <= {ORACLE_MAX_NU})"
        )));
    }
    let nu_i = s.nu_i as usize;
    let nu_o = s.nu_o as usize;
    let mut counts: BTreeMap<TransitionDelta, u64> = BTreeMap::new();
    let mut g: u64 = 0;
    for_each_digraph(s.nu, s.nu_i, s.nu_o, s.mu, &mut |arcs| {
        g += 1;
        let mut indeg = [0u8; 8];
        let mut outdeg = [0u8; 8];
        for &(u, v) in arcs {
            outdeg[u as usize] += 1;
            indeg[v as usize] += 1;
        }
        // i-flavor choices: each zero-in vertex
        for v in 0..nu_i {
            let (mut b, mut r_i, mut k) = (0u64, 0u64, 0u64);
            for &(u, w) in arcs {
                if u as usize != v {
                    continue;
                }
                k += 1;
                if indeg[w as usize] == 1 {
                    // w keeps no in-arc; zero-out heads die, others turn zero-in
                    if outdeg[w as usize] == 0 {
                        b += 1;
                    } else {
                        r_i += 1;
                    }
                }
            }
            let delta =
                TransitionDelta { flavor: Flavor::I, a: 1, b, r_i, r_o: 0, k };
            *counts.entry(delta).or_insert(0) += 1;
        }
        // o-flavor choices: each zero-out vertex
        for v in nu_i..nu_i + nu_o {
            let (mut a, mut r_o, mut k) = (0u64, 0u64, 0u64);
            for &(u, w) in arcs {
                if w as usize != v {
                    continue;
                }
                k += 1;
                if outdeg[u as usize] == 1 {
                    if indeg[u as usize] == 0 {
                        a += 1;
                    } else {
                        r_o += 1;
                    }
                }
            }
            let delta =
                TransitionDelta { flavor: Flavor::O, a, b: 1, r_i: 0, r_o, k };
            *counts.entry(delta).or_insert(0) += 1;
        }
    });
    if g == 0 {
        return Err(Error::Domain(format!(
            "state {s:?} has no digraph realizations"
        )));
    }
    let norm = g as f64 * (s.nu_i + s.nu_o) as f64;
    let entries = counts
        .into_iter()
        .map(|(d, c)| (d, c as f64 / norm))
        .collect();
    Ok(TransitionKernel { source: *s, entries })
}

/// The deleted-arc placement counts N_in and N_out: how many source
/// digraphs map to one fixed target digraph under an i-step (resp.
/// o-step) connecting the two lumped states. Zero when the shapes do not
/// fit.
pub fn n_counts(s: &StateVector, s_next: &StateVector) -> (u64, u64) {
    let n_in = (|| {
        let b = s.nu_o.checked_sub(s_next.nu_o)?;
        let r_i = (s_next.nu_i + 1).checked_sub(s.nu_i)?;
        let k = s.mu.checked_sub(s_next.mu)?;
        if k < 1.max(b + r_i) {
            return None;
        }
        let top = s.nu.checked_sub(s.nu_i + b + r_i)?;
        Some(binom(top, k - b - r_i) as u64)
    })()
    .unwrap_or(0);
    let n_out = (|| {
        let a = s.nu_i.checked_sub(s_next.nu_i)?;
        let r_o = (s_next.nu_o + 1).checked_sub(s.nu_o)?;
        let k = s.mu.checked_sub(s_next.mu)?;
        if k < 1.max(a + r_o) {
            return None;
        }
        let top = s.nu.checked_sub(s.nu_o + a + r_o)?;
        Some(binom(top, k - a - r_o) as u64)
    })()
    .unwrap_or(0);
    (n_in, n_out)
}

/// Truncation depth used by [`q_transition`]: beyond it the Poisson-type
/// tails carry less than 1e-15 of mass.
pub fn q_truncation(s: &StateVector) -> Result<u64> {
    let (z_i, z_o) = z_of_state(s)?;
    Ok((60.0_f64).max((4.0 * z_i * z_o * s.nu as f64 / s.mu as f64).ceil()) as u64)
}

/// The limiting product-form kernel: binomial factor for the zero-out
/// heads, Poissonized factors for fresh zero-ins and plain heads. Exactly
/// the displayed q_i/q_o, truncated at `k_max`. Substochastic.
pub fn q_transition_truncated(
    s: &StateVector,
    k_max: u64,
) -> Result<TransitionKernel> {
    if s.nu_i + s.nu_o == 0 {
        return Err(Error::InvalidArgument(
            "q_transition needs a semi-isolated vertex".into(),
        ));
    }
    let (z_i, z_o) = z_of_state(s)?;
    let (nu, nu_i, nu_o, mu) =
        (s.nu as f64, s.nu_i as f64, s.nu_o as f64, s.mu as f64);
    let plain = nu - nu_i - nu_o;
    if plain < 0.0 {
        return Err(Error::Domain("zero-degree sets exceed nu".into()));
    }
    let zz = z_i * z_o;
    let (ei1, eo1) = (libm::expm1(z_i), libm::expm1(z_o));
    let semis = nu_i + nu_o;
    let mut entries = BTreeMap::new();
    let mut side = |flavor: Flavor| {
        // the i-flavor reads (nu_i, z_o-denominator, ...); o mirrors it
        let (head, e_del, e_new, cap, free) = match flavor {
            Flavor::I => (nu_i, eo1, ei1, s.nu_o, nu - nu_i),
            Flavor::O => (nu_o, ei1, eo1, s.nu_i, nu - nu_o),
        };
        if head == 0.0 {
            return;
        }
        let a_new = zz / (e_new * mu);
        let pref = head / (semis * e_del);
        // term tables by recurrence; interleaving the huge binomials with
        // the tiny powers keeps everything inside f64 range
        let len = (k_max + 1) as usize;
        let mut t_b = vec![0.0f64; len]; // C(cap, b) a_new^b
        let mut t_r = vec![0.0f64; len]; // (plain a_new)^r / r!
        let mut t_j = vec![0.0f64; len]; // (free zz/mu)^j / j!
        t_b[0] = 1.0;
        t_r[0] = 1.0;
        t_j[0] = 1.0;
        for i in 1..len {
            let iu = i as u64;
            t_b[i] = if iu <= cap {
                t_b[i - 1] * (cap - iu + 1) as f64 * a_new / i as f64
            } else {
                0.0
            };
            t_r[i] = t_r[i - 1] * plain * a_new / i as f64;
            t_j[i] = t_j[i - 1] * free * zz / mu / i as f64;
        }
        for k in 1..=k_max {
            for b in 0..=k.min(cap) {
                for r in 0..=(k - b) {
                    let j = k - b - r;
                    let p = pref * t_b[b as usize] * t_r[r as usize] * t_j[j as usize];
                    if p <= 0.0 {
                        continue;
                    }
                    let delta = match flavor {
                        Flavor::I => TransitionDelta {
                            flavor,
                            a: 1,
                            b,
                            r_i: r,
                            r_o: 0,
                            k,
                        },
                        Flavor::O => TransitionDelta {
                            flavor,
                            a: b,
                            b: 1,
                            r_i: 0,
                            r_o: r,
                            k,
                        },
                    };
                    entries.insert(delta, p);
                }
            }
        }
    };
    side(Flavor::I);
    side(Flavor::O);
    Ok(TransitionKernel { source: *s, entries })
}

/// [`q_transition_truncated`] at the default depth of [`q_truncation`].
pub fn q_transition(s: &StateVector) -> Result<TransitionKernel> {
    q_transition_truncated(s, q_truncation(s)?)
}

// ---------------------------------------------------------------------
// moments of the q-kernel

/// First and second moments of the fivesome under the limiting kernel:
/// the five means and all fifteen pairwise products.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Moments {
    pub a: f64,
    pub b: f64,
    pub r_i: f64,
    pub r_o: f64,
    pub k: f64,
    pub a2: f64,
    pub ab: f64,
    pub ar_i: f64,
    pub ar_o: f64,
    pub ak: f64,
    pub b2: f64,
    pub br_i: f64,
    pub br_o: f64,
    pub bk: f64,
    pub r_i2: f64,
    pub r_ir_o: f64,
    pub r_ik: f64,
    pub r_o2: f64,
    pub r_ok: f64,
    pub k2: f64,
}

/// Closed-form moments of the q-kernel, as a function of the (real-valued)
/// state. Zero-degree homogeneous: scaling all four coordinates leaves
/// every moment unchanged, so this serves both integer states and scaled
/// densities.
pub fn moments_scaled(nu: f64, nu_i: f64, nu_o: f64, mu: f64) -> Result<Moments> {
    if nu_i + nu_o <= 0.0 {
        return Err(Error::Domain("moments need nu_i + nu_o > 0".into()));
    }
    if nu - nu_i <= 0.0 || nu - nu_o <= 0.0 || mu <= 0.0 {
        return Err(Error::Domain(
            "moments need nu - nu_i, nu - nu_o, mu > 0".into(),
        ));
    }
    let plain = nu - nu_i - nu_o;
    if plain < 0.0 {
        return Err(Error::Domain("moments need nu_i + nu_o <= nu".into()));
    }
    let z_i = theory::z_root(mu / (nu - nu_i))?;
    let z_o = theory::z_root(mu / (nu - nu_o))?;
    let zz = z_i * z_o;
    let (ei1, eo1) = (libm::expm1(z_i), libm::expm1(z_o));
    // 1/(1 - e^{-z}) = e^z/(e^z - 1)
    let gi = 1.0 / (-libm::expm1(-z_i));
    let go = 1.0 / (-libm::expm1(-z_o));
    let semis = nu_i + nu_o;
    let p_i = nu_i / semis;
    let p_o = nu_o / semis;
    let q_i = nu_i * zz / (eo1 * mu);
    let q_o = nu_o * zz / (ei1 * mu);
    let r_i_ = plain * zz / (ei1 * mu);
    let r_o_ = plain * zz / (eo1 * mu);
    let d0 = semis * (nu - nu_i) * (nu - nu_o);

    Ok(Moments {
        a: p_i + nu_i * nu_o * mu * (-z_o).exp() / d0,
        b: p_o + nu_i * nu_o * mu * (-z_i).exp() / d0,
        r_i: nu_i * mu * plain * (-z_i).exp() / d0,
        r_o: nu_o * mu * plain * (-z_o).exp() / d0,
        k: mu / semis * (nu_o / (nu - nu_i) + nu_i / (nu - nu_o)),
        a2: p_i + p_o * gi * q_i * (1.0 + q_i),
        ab: p_i * go * q_o + p_o * gi * q_i,
        ar_i: p_i * go * r_i_,
        ar_o: p_o * gi * q_i * r_o_,
        ak: p_i * z_o * go + p_o * gi * q_i * (1.0 + z_i),
        b2: p_o + p_i * go * q_o * (1.0 + q_o),
        br_i: p_i * go * q_o * r_i_,
        br_o: p_o * gi * r_o_,
        bk: p_i * go * q_o * (1.0 + z_o) + p_o * z_i * gi,
        r_i2: p_i * go * r_i_ * (1.0 + r_i_),
        r_ir_o: 0.0,
        r_ik: p_i * go * r_i_ * (1.0 + z_o),
        r_o2: p_o * gi * r_o_ * (1.0 + r_o_),
        r_ok: p_o * gi * r_o_ * (1.0 + z_i),
        k2: p_i * z_o * go * (1.0 + z_o) + p_o * z_i * gi * (1.0 + z_i),
    })
}

/// [`moments_scaled`] at an integer state.
pub fn approx_moments(s: &StateVector) -> Result<Moments> {
    moments_scaled(s.nu as f64, s.nu_i as f64, s.nu_o as f64, s.mu as f64)
}

/// Empirical moments of a kernel by direct summation over its entries;
/// the finite-sum oracle for [`approx_moments`].
pub fn kernel_moments(kernel: &TransitionKernel) -> Moments {
    let sum = |f: &dyn Fn(&TransitionDelta) -> f64| {
        kahan_sum(kernel.entries.iter().map(|(d, &p)| f(d) * p))
    };
    let af = |d: &TransitionDelta| d.a as f64;
    let bf = |d: &TransitionDelta| d.b as f64;
    let rif = |d: &TransitionDelta| d.r_i as f64;
    let rof = |d: &TransitionDelta| d.r_o as f64;
    let kf = |d: &TransitionDelta| d.k as f64;
    Moments {
        a: sum(&af),
        b: sum(&bf),
        r_i: sum(&rif),
        r_o: sum(&rof),
        k: sum(&kf),
        a2: sum(&|d| af(d) * af(d)),
        ab: sum(&|d| af(d) * bf(d)),
        ar_i: sum(&|d| af(d) * rif(d)),
        ar_o: sum(&|d| af(d) * rof(d)),
        ak: sum(&|d| af(d) * kf(d)),
        b2: sum(&|d| bf(d) * bf(d)),
        br_i: sum(&|d| bf(d) * rif(d)),
        br_o: sum(&|d| bf(d) * rof(d)),
        bk: sum(&|d| bf(d) * kf(d)),
        r_i2: sum(&|d| rif(d) * rif(d)),
        r_ir_o: sum(&|d| rif(d) * rof(d)),
        r_ik: sum(&|d| rif(d) * kf(d)),
        r_o2: sum(&|d| rof(d) * rof(d)),
        r_ok: sum(&|d| rof(d) * kf(d)),
        k2: sum(&|d| kf(d) * kf(d)),
    }
}

impl Moments {
    /// The 20 values as (label, formula value) pairs, in a fixed order.
    pub fn labelled(&self) -> [(&'static str, f64); 20] {
        [
            ("a", self.a),
            ("b", self.b),
            ("r_i", self.r_i),
            ("r_o", self.r_o),
            ("k", self.k),
            ("a2", self.a2),
            ("ab", self.ab),
            ("ar_i", self.ar_i),
            ("ar_o", self.ar_o),
            ("ak", self.ak),
            ("b2", self.b2),
            ("br_i", self.br_i),
            ("br_o", self.br_o),
            ("bk", self.bk),
            ("r_i2", self.r_i2),
            ("r_ir_o", self.r_ir_o),
            ("r_ik", self.r_ik),
            ("r_o2", self.r_o2),
            ("r_ok", self.r_ok),
            ("k2", self.k2),
        ]
    }
}
