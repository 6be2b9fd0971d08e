//! Cross-scale kernel checks: the substochastic product-form kernel
//! against the counting-based kernel as n grows, and the one-step
//! reconstruction counts against direct preimage enumeration.

use std::collections::BTreeMap;

use giant_core::enumerate::{asym_g_ln, n_counts, q_transition, transition_with_ln_g};
use giant_core::peel::{likely_initial_state, StateVector};

/// Worst per-fivesome relative difference between the product-form
/// kernel and the counting kernel built on the asymptotic counts; it
/// shrinks as n grows.
#[test]
fn q_kernel_approaches_counting_kernel() {
    let max_rel = |n: u64| -> f64 {
        let s = likely_initial_state(n, 2.0);
        let q = q_transition(&s).unwrap();
        let p = transition_with_ln_g(&s, 60, &|t: &StateVector| asym_g_ln(t)).unwrap();
        let mut worst = 0.0f64;
        for (d, &qp) in &q.entries {
            if qp < 1e-8 {
                continue;
            }
            let pp = p.prob(d);
            assert!(pp > 0.0, "n={n}: counting kernel misses {d:?}");
            worst = worst.max((qp - pp).abs() / pp);
        }
        worst
    };
    let coarse = max_rel(1_000);
    let fine = max_rel(10_000);
    assert!(
        fine < coarse,
        "relative gap did not shrink: n=1e3 gives {coarse:.3e}, n=1e4 gives {fine:.3e}"
    );
}

// arcs of the complete digraph on nu vertices, in a fixed order
fn all_pairs(nu: u64) -> Vec<(u32, u32)> {
    let mut pairs = Vec::new();
    for i in 0..nu as u32 {
        for j in 0..nu as u32 {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

// next size-k index combination in lexicographic order; false at the end
fn next_combination(idx: &mut [usize], total: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < total - (k - i) {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

type Target = (Vec<u32>, Vec<(u32, u32)>);

/// Deletes vertex `u` from the arc set, drops newly isolated vertices,
/// and returns (survivors, surviving arcs) plus the step's fivesome
/// ingredients, following the two-substep rule. `zero_lo..zero_hi` is the
/// label range of the opposite zero-class, `plain_lo` the first plain
/// label.
fn apply_step(
    arcs: &[(u32, u32)],
    nu: u64,
    u: u32,
    out_step: bool,
    zero_lo: u32,
    zero_hi: u32,
    plain_lo: u32,
) -> (Target, u64, u64, u64) {
    let mut in_deg = vec![0u32; nu as usize];
    let mut out_deg = vec![0u32; nu as usize];
    for &(a, b) in arcs {
        out_deg[a as usize] += 1;
        in_deg[b as usize] += 1;
    }
    // heads (for an in-side deletion) or tails (out-side) of u's arcs
    let touched: Vec<u32> = arcs
        .iter()
        .filter_map(|&(a, b)| {
            if out_step && a == u {
                Some(b)
            } else if !out_step && b == u {
                Some(a)
            } else {
                None
            }
        })
        .collect();
    let k = touched.len() as u64;
    let mut dead = Vec::new();
    let mut promoted = 0u64;
    for &w in &touched {
        let lone = if out_step {
            in_deg[w as usize] == 1 && out_deg[w as usize] == 0
        } else {
            out_deg[w as usize] == 1 && in_deg[w as usize] == 0
        };
        if lone && (zero_lo..zero_hi).contains(&w) {
            dead.push(w);
        } else if w >= plain_lo {
            let becomes_zero = if out_step {
                in_deg[w as usize] == 1
            } else {
                out_deg[w as usize] == 1
            };
            if becomes_zero {
                promoted += 1;
            }
        }
    }
    let survivors: Vec<u32> = (0..nu as u32)
        .filter(|v| *v != u && !dead.contains(v))
        .collect();
    let kept: Vec<(u32, u32)> = arcs
        .iter()
        .copied()
        .filter(|&(a, b)| a != u && b != u)
        .collect();
    ((survivors, kept), dead.len() as u64, promoted, k)
}

/// For every small state: group one-step outcomes by the literal target
/// digraph; each target's preimage count equals the reconstruction
/// formula for its state pair, for both deletion flavors.
#[test]
fn reconstruction_counts_match_preimage_enumeration() {
    for nu in 2..=5u64 {
        for nu_i in 0..=nu {
            for nu_o in 0..=(nu - nu_i) {
                for mu in 1..=6u64.min(nu * (nu - 1)) {
                    let s = match StateVector::new(nu, nu_i, nu_o, mu) {
                        Ok(s) => s,
                        Err(_) => continue,
                    };
                    check_reconstruction(&s);
                }
            }
        }
    }
}

fn check_reconstruction(s: &StateVector) {
    let pairs = all_pairs(s.nu);
    if s.mu as usize > pairs.len() {
        return;
    }
    let mut idx: Vec<usize> = (0..s.mu as usize).collect();
    // preimage counters: target -> (count, successor state)
    let mut in_counts: BTreeMap<Target, (u64, StateVector)> = BTreeMap::new();
    let mut out_counts: BTreeMap<Target, (u64, StateVector)> = BTreeMap::new();
    let plain_lo = (s.nu_i + s.nu_o) as u32;
    loop {
        let arcs: Vec<(u32, u32)> = idx.iter().map(|&i| pairs[i]).collect();
        let mut in_deg = vec![0u32; s.nu as usize];
        let mut out_deg = vec![0u32; s.nu as usize];
        for &(a, b) in &arcs {
            out_deg[a as usize] += 1;
            in_deg[b as usize] += 1;
        }
        let zero_in_ok = (0..s.nu as u32).all(|v| (in_deg[v as usize] == 0) == (v < s.nu_i as u32));
        let zero_out_ok = (0..s.nu as u32).all(|v| {
            (out_deg[v as usize] == 0) == (v >= s.nu_i as u32 && v < plain_lo)
        });
        if zero_in_ok && zero_out_ok {
            if s.nu_i >= 1 {
                // delete zero-in vertex 0: k out-arcs leave, b zero-out
                // heads die, r_i plain heads become zero-in
                let (target, b, r_i, k) =
                    apply_step(&arcs, s.nu, 0, true, s.nu_i as u32, plain_lo, plain_lo);
                let next = StateVector {
                    nu: s.nu - 1 - b,
                    nu_i: s.nu_i - 1 + r_i,
                    nu_o: s.nu_o - b,
                    mu: s.mu - k,
                };
                in_counts.entry(target).or_insert((0, next)).0 += 1;
            }
            if s.nu_o >= 1 {
                let (target, a, r_o, k) =
                    apply_step(&arcs, s.nu, s.nu_i as u32, false, 0, s.nu_i as u32, plain_lo);
                let next = StateVector {
                    nu: s.nu - 1 - a,
                    nu_i: s.nu_i - a,
                    nu_o: s.nu_o - 1 + r_o,
                    mu: s.mu - k,
                };
                out_counts.entry(target).or_insert((0, next)).0 += 1;
            }
        }
        if !next_combination(&mut idx, pairs.len()) {
            break;
        }
    }
    for (target, (count, next)) in &in_counts {
        let (n_in, _) = n_counts(s, next);
        assert_eq!(
            *count, n_in,
            "state {s:?} -> {next:?}, target {target:?}: preimages {count} vs formula {n_in}"
        );
    }
    for (target, (count, next)) in &out_counts {
        let (_, n_out) = n_counts(s, next);
        assert_eq!(
            *count, n_out,
            "state {s:?} -> {next:?} (out), target {target:?}: preimages {count} vs formula {n_out}"
        );
    }
}
