//! The randomized deletion chain that strips a digraph to its (1,1)-core,
//! and the lumped state it induces.
//!
//! One loop iteration deletes a uniformly random semi-isolated vertex
//! (in-degree zero or out-degree zero) together with its incident arcs,
//! then sweeps away every vertex that became isolated. Time 0 is the
//! initial cleanup that removes vertices isolated from the start; the
//! chain stops when no semi-isolated vertex remains, i.e. at the
//! (1,1)-core.
//!
//! The lumped state `(nu, nu_i, nu_o, mu)` records the number of surviving
//! vertices, zero-in-degree vertices, zero-out-degree vertices, and arcs.
//! It is itself a Markov chain: transitions are summarized by the fivesome
//! `(a, b, r_i, r_o, k)` counting deleted zero-in vertices, deleted
//! zero-out vertices, freshly created zero-in vertices, freshly created
//! zero-out vertices, and deleted arcs.

use rand::Rng;
use serde::Serialize;

use crate::digraph::Digraph;
use crate::rng::{derive_seed, rng_from};
use crate::theory;
use crate::{Error, Result};

/// Lumped state of the deletion chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct StateVector {
    /// Surviving vertices.
    pub nu: u64,
    /// Surviving vertices of in-degree zero.
    pub nu_i: u64,
    /// Surviving vertices of out-degree zero.
    pub nu_o: u64,
    /// Surviving arcs.
    pub mu: u64,
}

impl StateVector {
    pub fn new(nu: u64, nu_i: u64, nu_o: u64, mu: u64) -> Result<Self> {
        let s = StateVector { nu, nu_i, nu_o, mu };
        s.check()?;
        Ok(s)
    }

    /// Validates the counting constraints an isolated-free digraph imposes:
    /// the zero-in and zero-out sets are disjoint (no isolated vertices),
    /// and every vertex outside each set carries at least one arc.
    pub fn check(&self) -> Result<()> {
        if self.nu_i + self.nu_o > self.nu {
            return Err(Error::InvalidArgument(format!(
                "nu_i + nu_o = {} exceeds nu = {}",
                self.nu_i + self.nu_o,
                self.nu
            )));
        }
        if self.nu > 0 && self.mu < (self.nu - self.nu_i).max(self.nu - self.nu_o) {
            return Err(Error::InvalidArgument(format!(
                "mu = {} below max(nu - nu_i, nu - nu_o) = {}",
                self.mu,
                (self.nu - self.nu_i).max(self.nu - self.nu_o)
            )));
        }
        Ok(())
    }

    /// True when no semi-isolated vertex remains (the (1,1)-core).
    pub fn is_terminal(&self) -> bool {
        self.nu_i == 0 && self.nu_o == 0
    }

    pub fn as_tuple(&self) -> (u64, u64, u64, u64) {
        (self.nu, self.nu_i, self.nu_o, self.mu)
    }
}

/// Which kind of semi-isolated vertex a loop iteration deleted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Flavor {
    /// A zero-in-degree vertex was deleted (a = 1, r_o = 0).
    I,
    /// A zero-out-degree vertex was deleted (b = 1, r_i = 0).
    O,
}

/// The fivesome summarizing one loop iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct TransitionDelta {
    pub flavor: Flavor,
    /// Zero-in vertices removed (the chosen one, plus any swept in the
    /// o-flavor cleanup).
    pub a: u64,
    /// Zero-out vertices removed.
    pub b: u64,
    /// Vertices that newly acquired in-degree zero.
    pub r_i: u64,
    /// Vertices that newly acquired out-degree zero.
    pub r_o: u64,
    /// Arcs removed.
    pub k: u64,
}

impl TransitionDelta {
    /// Shape constraints every realizable fivesome satisfies.
    pub fn check(&self) -> Result<()> {
        let ok = match self.flavor {
            Flavor::I => self.a == 1 && self.r_o == 0,
            Flavor::O => self.b == 1 && self.r_i == 0,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "fivesome {self:?} violates its flavor shape"
            )));
        }
        if self.k < 1 || self.k < self.a + self.r_o || self.k < self.b + self.r_i {
            return Err(Error::InvalidArgument(format!(
                "fivesome {self:?} violates k >= max(1, a + r_o, b + r_i)"
            )));
        }
        Ok(())
    }

    /// The state reached from `s` by this fivesome.
    pub fn apply(&self, s: &StateVector) -> Result<StateVector> {
        self.check()?;
        let dead = self.a + self.b;
        if s.nu < dead || s.nu_i + self.r_i < self.a || s.nu_o + self.r_o < self.b
            || s.mu < self.k
        {
            return Err(Error::InvalidArgument(format!(
                "fivesome {self:?} does not fit state {s:?}"
            )));
        }
        StateVector::new(
            s.nu - dead,
            s.nu_i + self.r_i - self.a,
            s.nu_o + self.r_o - self.b,
            s.mu - self.k,
        )
    }
}

/// The recorded history of one deletion run.
///
/// `states[0]` is the post-cleanup state at time 0 and `states[t]` the
/// state after `t` loop iterations, so `deltas.len()` iterations were
/// performed in total and `states.last()` is terminal.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    /// Ambient vertex count of the original digraph (the `n` used for
    /// density tracking).
    pub n: usize,
    pub states: Vec<StateVector>,
    /// `deltas[t]` maps `states[t]` to `states[t+1]`.
    pub deltas: Vec<TransitionDelta>,
    /// `(F1, F2)` at each state, `None` where the density preconditions
    /// fail (terminal and near-terminal states).
    pub f_track: Vec<Option<(f64, f64)>>,
}

impl Trajectory {
    /// Number of loop iterations after the time-0 cleanup.
    pub fn tau_bar(&self) -> usize {
        self.deltas.len()
    }

    /// Renders the run as CSV: one row per state, the fivesome columns on
    /// the row of the state it produced, empty cells where undefined.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("t,nu,nu_i,nu_o,mu,a,b,r_i,r_o,k,F1,F2\n");
        for (t, s) in self.states.iter().enumerate() {
            let delta = if t > 0 {
                let d = &self.deltas[t - 1];
                format!("{},{},{},{},{}", d.a, d.b, d.r_i, d.r_o, d.k)
            } else {
                ",,,,".into()
            };
            let fs = match self.f_track[t] {
                Some((f1, f2)) => format!("{f1},{f2}"),
                None => ",".into(),
            };
            out.push_str(&format!(
                "{t},{},{},{},{},{delta},{fs}\n",
                s.nu, s.nu_i, s.nu_o, s.mu
            ));
        }
        out
    }
}

/// The lumped state of `d` after removing isolated vertices.
pub fn initial_state(d: &Digraph) -> StateVector {
    let mut nu = 0;
    let mut nu_i = 0;
    let mut nu_o = 0;
    for v in 0..d.n() as u32 {
        let (di, do_) = (d.in_degree(v), d.out_degree(v));
        if di + do_ == 0 {
            continue;
        }
        nu += 1;
        if di == 0 {
            nu_i += 1;
        }
        if do_ == 0 {
            nu_o += 1;
        }
    }
    StateVector { nu, nu_i, nu_o, mu: d.m() as u64 }
}

/// The most likely post-cleanup state of a random digraph on `n` vertices
/// with arc density `c`: expected counts rounded to integers. Each vertex
/// is isolated with probability about e^{-2c} and one-sidedly degenerate
/// with probability about e^{-c}(1 - e^{-c}).
pub fn likely_initial_state(n: u64, c: f64) -> StateVector {
    let e = (-c).exp();
    let nf = n as f64;
    StateVector {
        nu: (-libm::expm1(-2.0 * c) * nf).round() as u64,
        nu_i: (e * (1.0 - e) * nf).round() as u64,
        nu_o: (e * (1.0 - e) * nf).round() as u64,
        mu: (c * nf).round() as u64,
    }
}

/// Density functions of a lumped state relative to the ambient vertex
/// count `n`: `F1 = mu (nu - nu_i - nu_o) / ((nu - nu_i)(nu - nu_o))` and
/// `F2 = z_i z_o n / mu` with `z_i, z_o` the roots attached to the degree
/// ratios. Both stay near the arc density c along typical trajectories.
pub fn f_values(s: &StateVector, n: u64) -> Result<(f64, f64)> {
    if s.mu == 0 {
        return Err(Error::Domain("F-values need mu > 0".into()));
    }
    if s.nu <= s.nu_i {
        return Err(Error::Domain("F-values need nu - nu_i > 0".into()));
    }
    if s.nu <= s.nu_o {
        return Err(Error::Domain("F-values need nu - nu_o > 0".into()));
    }
    let (nu, nu_i, nu_o, mu) =
        (s.nu as f64, s.nu_i as f64, s.nu_o as f64, s.mu as f64);
    let ratio_i = mu / (nu - nu_i);
    let ratio_o = mu / (nu - nu_o);
    if ratio_i <= 1.0 {
        return Err(Error::Domain(format!(
            "F-values need mu/(nu - nu_i) > 1, got {ratio_i}"
        )));
    }
    if ratio_o <= 1.0 {
        return Err(Error::Domain(format!(
            "F-values need mu/(nu - nu_o) > 1, got {ratio_o}"
        )));
    }
    let z_i = theory::z_root(ratio_i)?;
    let z_o = theory::z_root(ratio_o)?;
    let f1 = mu * (nu - nu_i - nu_o) / ((nu - nu_i) * (nu - nu_o));
    let f2 = z_i * z_o * n as f64 / mu;
    Ok((f1, f2))
}

/// Membership in the density window S_eps: the structural constraints of
/// [`f_values`] plus `nu <= n`, `mu <= c_n n`, at least one semi-isolated
/// vertex, and both F-values inside `(c_n - eps, c_n + eps)`.
pub fn in_s_eps(s: &StateVector, n: u64, c_n: f64, eps: f64) -> bool {
    if s.nu > n || s.mu as f64 > c_n * n as f64 || s.nu_i + s.nu_o == 0 {
        return false;
    }
    match f_values(s, n) {
        Ok((f1, f2)) => (f1 - c_n).abs() < eps && (f2 - c_n).abs() < eps,
        Err(_) => false,
    }
}

// membership structure with O(1) insert/remove by value
struct IndexedSet {
    items: Vec<u32>,
    pos: Vec<u32>,
}

impl IndexedSet {
    const ABSENT: u32 = u32::MAX;

    fn new(n: usize) -> Self {
        IndexedSet { items: Vec::new(), pos: vec![Self::ABSENT; n] }
    }

    fn len(&self) -> usize {
        self.items.len()
    }

    fn get(&self, i: usize) -> u32 {
        self.items[i]
    }

    fn insert(&mut self, v: u32) {
        debug_assert_eq!(self.pos[v as usize], Self::ABSENT);
        self.pos[v as usize] = self.items.len() as u32;
        self.items.push(v);
    }

    fn remove(&mut self, v: u32) {
        let i = self.pos[v as usize];
        debug_assert_ne!(i, Self::ABSENT);
        let last = *self.items.last().unwrap();
        self.items[i as usize] = last;
        self.pos[last as usize] = i;
        self.items.pop();
        self.pos[v as usize] = Self::ABSENT;
    }
}

/// Runs the deletion chain on `d` to completion and returns the terminal
/// digraph (the (1,1)-core, on the ambient vertex set) together with the
/// recorded trajectory.
///
/// The choice of semi-isolated vertex at each iteration is uniform under
/// the stream derived from `seed`; everything else is deterministic.
pub fn run_deletion(d: &Digraph, seed: u64) -> (Digraph, Trajectory) {
    let n = d.n();
    let mut rng = rng_from(derive_seed(seed, 0));
    let mut indeg: Vec<usize> = (0..n as u32).map(|v| d.in_degree(v)).collect();
    let mut outdeg: Vec<usize> = (0..n as u32).map(|v| d.out_degree(v)).collect();
    // time-0 cleanup: vertices isolated in the input never enter the state
    let mut alive: Vec<bool> =
        (0..n).map(|v| indeg[v] + outdeg[v] > 0).collect();
    let mut o_i = IndexedSet::new(n);
    let mut o_o = IndexedSet::new(n);
    for v in 0..n as u32 {
        if !alive[v as usize] {
            continue;
        }
        if indeg[v as usize] == 0 {
            o_i.insert(v);
        } else if outdeg[v as usize] == 0 {
            o_o.insert(v);
        }
    }

    let mut s = initial_state(d);
    let mut states = vec![s];
    let mut deltas = Vec::new();

    loop {
        let (ni, no) = (o_i.len(), o_o.len());
        let total = ni + no;
        if total == 0 {
            break;
        }
        let idx = rng.gen_range(0..total);
        let delta = if idx < ni {
            // delete a zero-in vertex; its heads lose one in-arc each
            let v = o_i.get(idx);
            o_i.remove(v);
            alive[v as usize] = false;
            let k = outdeg[v as usize] as u64;
            let (mut b, mut r_i) = (0u64, 0u64);
            for &w in d.out_neighbors(v) {
                let wu = w as usize;
                if !alive[wu] {
                    continue;
                }
                indeg[wu] -= 1;
                if indeg[wu] == 0 {
                    if outdeg[wu] == 0 {
                        // was zero-out, now isolated: swept immediately
                        o_o.remove(w);
                        alive[wu] = false;
                        b += 1;
                    } else {
                        o_i.insert(w);
                        r_i += 1;
                    }
                }
            }
            TransitionDelta { flavor: Flavor::I, a: 1, b, r_i, r_o: 0, k }
        } else {
            // delete a zero-out vertex; its tails lose one out-arc each
            let v = o_o.get(idx - ni);
            o_o.remove(v);
            alive[v as usize] = false;
            let k = indeg[v as usize] as u64;
            let (mut a, mut r_o) = (0u64, 0u64);
            for &u in d.in_neighbors(v) {
                let uu = u as usize;
                if !alive[uu] {
                    continue;
                }
                outdeg[uu] -= 1;
                if outdeg[uu] == 0 {
                    if indeg[uu] == 0 {
                        o_i.remove(u);
                        alive[uu] = false;
                        a += 1;
                    } else {
                        o_o.insert(u);
                        r_o += 1;
                    }
                }
            }
            TransitionDelta { flavor: Flavor::O, a, b: 1, r_i: 0, r_o, k }
        };
        s = delta.apply(&s).expect("deletion step produced an invalid state");
        debug_assert_eq!(s.nu_i as usize, o_i.len());
        debug_assert_eq!(s.nu_o as usize, o_o.len());
        states.push(s);
        deltas.push(delta);
    }

    let arcs: Vec<(u32, u32)> = d
        .arcs()
        .iter()
        .copied()
        .filter(|&(u, v)| alive[u as usize] && alive[v as usize])
        .collect();
    let core = Digraph::new(n, arcs).expect("surviving arcs form a valid digraph");
    let f_track = states
        .iter()
        .map(|st| f_values(st, n as u64).ok())
        .collect();
    let traj = Trajectory { n, states, deltas, f_track };
    (core, traj)
}
