//! Property tests for the library's structural invariants: root-finder
//! identities, chain bookkeeping, kernel mass, moment homogeneity, and the
//! well geometry of the ODE layer.

use proptest::prelude::*;

use giant_core::digraph::{core_11, largest_scc, sample_dnm};
use giant_core::enumerate::{exact_g, exact_transition, moments_scaled, q_transition};
use giant_core::peel::{initial_state, likely_initial_state, run_deletion, StateVector};
use giant_core::theory::{
    ell, f_mean, in_well, integrals, likely_initial, ode_rhs, theta, z_pair, WVector,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn z_root_inverts_ell(z in 1e-4f64..30.0) {
        let eta = ell(z);
        let back = giant_core::theory::z_root(eta).unwrap();
        prop_assert!((back - z).abs() <= 1e-9 * (1.0 + z));
    }

    #[test]
    fn z_root_inverts_ell_near_zero(z in 1e-8f64..1e-4) {
        let back = giant_core::theory::z_root(ell(z)).unwrap();
        prop_assert!((back - z).abs() <= 1e-9);
    }

    #[test]
    fn theta_satisfies_its_equation(c in 1.0001f64..8.0) {
        let t = theta(c).unwrap();
        prop_assert!(t > 0.0 && t < 1.0);
        prop_assert!((1.0 - t - (-c * t).exp()).abs() < 1e-12);
    }

    #[test]
    fn theta_is_increasing(c in 1.01f64..6.0, d in 0.01f64..1.0) {
        prop_assert!(theta(c + d).unwrap() > theta(c).unwrap());
    }

    #[test]
    fn deletion_chain_bookkeeping(n in 2usize..40, m_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let m_max = (n * (n - 1)).min(3 * n);
        let m = (m_frac * m_max as f64) as usize;
        let d = sample_dnm(n, m, seed).unwrap();

        // initial state recount
        let s0 = initial_state(&d);
        let mut live = 0u64;
        let mut zi = 0u64;
        let mut zo = 0u64;
        for v in 0..n as u32 {
            let (din, dout) = (d.in_degree(v), d.out_degree(v));
            if din + dout == 0 {
                continue;
            }
            live += 1;
            if din == 0 {
                zi += 1;
            }
            if dout == 0 {
                zo += 1;
            }
        }
        prop_assert_eq!(s0.as_tuple(), (live, zi, zo, m as u64));

        // chain: deltas replay the state sequence; monotone decrease
        let (terminal, traj) = run_deletion(&d, seed ^ 0xabcdef);
        for t in 0..traj.deltas.len() {
            let next = traj.deltas[t].apply(&traj.states[t]).unwrap();
            prop_assert_eq!(next.as_tuple(), traj.states[t + 1].as_tuple());
            prop_assert!(traj.states[t + 1].nu <= traj.states[t].nu);
            prop_assert!(traj.states[t + 1].mu < traj.states[t].mu);
        }
        let last = traj.states.last().unwrap();
        prop_assert_eq!(last.nu_i, 0);
        prop_assert_eq!(last.nu_o, 0);

        // terminal digraph is the core; the giant strong component is inside it
        let core = core_11(&d);
        prop_assert_eq!(terminal.support(), core.support());
        let giant = largest_scc(&d);
        if giant.v1 >= 2 {
            let support = core.support();
            for v in &giant.members {
                prop_assert!(support.contains(v));
            }
        }
    }

    #[test]
    fn exact_kernel_is_a_distribution(
        nu in 2u64..=5,
        nu_i in 0u64..=2,
        nu_o in 0u64..=2,
        mu in 1u64..=6,
    ) {
        prop_assume!(nu_i + nu_o >= 1 && nu_i + nu_o <= nu);
        let s = match StateVector::new(nu, nu_i, nu_o, mu) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        prop_assume!(exact_g(&s).unwrap() > 0);
        let k = exact_transition(&s).unwrap();
        prop_assert!((k.total_mass() - 1.0).abs() < 1e-12);
        for &p in k.entries.values() {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
        }
    }

    #[test]
    fn scaled_moments_are_degree_zero_homogeneous(
        nu in 100.0f64..1e6,
        fi in 0.05f64..0.3,
        fo in 0.05f64..0.3,
        dens in 1.3f64..3.0,
        lambda in 0.1f64..10.0,
    ) {
        let nu_i = fi * nu;
        let nu_o = fo * nu;
        let mu = dens * nu;
        prop_assume!(mu / (nu - nu_i) > 1.0 + 1e-6 && mu / (nu - nu_o) > 1.0 + 1e-6);
        let base = moments_scaled(nu, nu_i, nu_o, mu).unwrap();
        let scaled = moments_scaled(lambda * nu, lambda * nu_i, lambda * nu_o, lambda * mu).unwrap();
        for ((_, x), (name, y)) in base.labelled().iter().zip(scaled.labelled().iter()) {
            prop_assert!(
                (x - y).abs() <= 1e-9 * (1.0 + x.abs()),
                "{}: {} vs {}", name, x, y
            );
        }
    }

    #[test]
    fn q_kernel_mass_stays_below_one(n in 500u64..5000, c in 1.2f64..3.0) {
        let s = likely_initial_state(n, c);
        let q = q_transition(&s).unwrap();
        prop_assert!(q.total_mass() <= 1.0 + 1e-12);
        prop_assert!(q.deficit() > 0.0);
    }

    #[test]
    fn well_points_have_regular_dynamics(
        c in 1.2f64..3.5,
        frac in 0.05f64..0.95,
        ji in 0.8f64..1.25,
        jo in 0.8f64..1.25,
    ) {
        // start from an interior point of the symmetric trajectory and
        // jitter the beta components
        let th = theta(c).unwrap();
        let z = c * th + frac * (c - c * th);
        let sym = giant_core::theory::symmetric_trajectory(c, z).unwrap();
        let w = WVector::new(sym.alpha, sym.beta_i * ji, sym.beta_o * jo, sym.gamma);
        prop_assume!(in_well(&w));
        prop_assume!(integrals(&w).is_ok());

        let (i1, i2) = integrals(&w).unwrap();
        prop_assert!(i1 > 1.0 && i2 > 1.0);
        let (z_i, z_o) = z_pair(&w).unwrap();
        prop_assert!(z_i > 0.0 && z_o > 0.0);

        let rhs = ode_rhs(&w).unwrap();
        for v in rhs {
            prop_assert!(v.is_finite());
        }
        // vertices and arcs only disappear
        prop_assert!(rhs[0] < 0.0);
        prop_assert!(rhs[3] < 0.0);

        let (f1, f2) = f_mean(&w).unwrap();
        prop_assert!(f1 > 0.0 && f1 <= w.alpha + 1e-12);
        prop_assert!(f2 > 0.0 && f2 <= w.gamma + 1e-12);
    }

    #[test]
    fn likely_initial_is_in_the_well(c in 1.05f64..5.0) {
        let w = likely_initial(c);
        prop_assert!(in_well(&w));
        // The root solves for z to machine precision, so the integrals come
        // back to c up to rounding that scales with c itself.
        let (i1, i2) = integrals(&w).unwrap();
        prop_assert!((i1 - c).abs() < 1e-12 * (1.0 + c));
        prop_assert!((i2 - c).abs() < 1e-12 * (1.0 + c));
    }
}
