//! Machinery for the giant strong component of a sparse random digraph.
//!
//! The crate is organized around one pipeline:
//!
//! * [`digraph`] — digraph storage, random models D(n,m) and D(n,p),
//!   strongly connected components, the (1,1)-core, and DFS forests;
//! * [`peel`] — the randomized deletion chain that strips a digraph down to
//!   its (1,1)-core one semi-isolated vertex at a time, with the lumped
//!   state `(nu, nu_i, nu_o, mu)` it induces;
//! * [`enumerate`] — exact and asymptotic counts of digraphs with
//!   prescribed zero-in/zero-out sets, the exact one-step transition kernel
//!   of the lumped chain, its brute-force oracle, and the limiting
//!   product-form kernel with its moments;
//! * [`theory`] — the deterministic side: characteristic ODEs, conserved
//!   integrals, the fluctuation matrices `psi`, `K`, `B`, and the size /
//!   arc-count law of the giant component;
//! * [`mc`] — Monte Carlo experiments tying the previous modules together,
//!   with reproducible seeding and distributional diagnostics.

pub mod digraph;
pub mod enumerate;
mod error;
pub mod mc;
pub mod peel;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
