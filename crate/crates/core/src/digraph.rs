//! Simple digraphs on vertex set `{0, .., n-1}`, random models, and the
//! structural queries the rest of the crate is built on.
//!
//! Arcs are ordered pairs `(u, v)` with `u != v`; no parallel arcs. The arc
//! list is kept sorted, so two digraphs with the same `n` and the same arc
//! set compare equal.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::distributions::Distribution;
use rand::Rng;
use rand_distr::Binomial;

use crate::rng::{derive_seed, rng_from};
use crate::{Error, Result};

/// A simple digraph with a fixed vertex set `{0, .., n-1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Digraph {
    n: usize,
    arcs: Vec<(u32, u32)>,
    out_adj: Vec<Vec<u32>>,
    in_adj: Vec<Vec<u32>>,
}

impl Digraph {
    /// Builds a digraph, validating that every arc is a non-loop pair of
    /// vertices below `n` and that no arc repeats.
    pub fn new(n: usize, mut arcs: Vec<(u32, u32)>) -> Result<Self> {
        for &(u, v) in &arcs {
            if u as usize >= n || v as usize >= n {
                return Err(Error::InvalidArgument(format!(
                    "arc ({u}, {v}) out of range for n={n}"
                )));
            }
            if u == v {
                return Err(Error::InvalidArgument(format!("loop at vertex {u}")));
            }
        }
        arcs.sort_unstable();
        if arcs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate arc".into()));
        }
        Ok(Self::from_sorted_unchecked(n, arcs))
    }

    /// The empty digraph on `n` vertices.
    pub fn empty(n: usize) -> Self {
        Self::from_sorted_unchecked(n, Vec::new())
    }

    // arcs must be sorted, deduplicated, loop-free, in range
    fn from_sorted_unchecked(n: usize, arcs: Vec<(u32, u32)>) -> Self {
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for &(u, v) in &arcs {
            out_adj[u as usize].push(v);
            in_adj[v as usize].push(u);
        }
        // arcs are sorted, so each out list is already ascending
        for l in &mut in_adj {
            l.sort_unstable();
        }
        Self { n, arcs, out_adj, in_adj }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of arcs.
    pub fn m(&self) -> usize {
        self.arcs.len()
    }

    /// Arcs in sorted order.
    pub fn arcs(&self) -> &[(u32, u32)] {
        &self.arcs
    }

    pub fn out_neighbors(&self, v: u32) -> &[u32] {
        &self.out_adj[v as usize]
    }

    pub fn in_neighbors(&self, v: u32) -> &[u32] {
        &self.in_adj[v as usize]
    }

    pub fn out_degree(&self, v: u32) -> usize {
        self.out_adj[v as usize].len()
    }

    pub fn in_degree(&self, v: u32) -> usize {
        self.in_adj[v as usize].len()
    }

    pub fn has_arc(&self, u: u32, v: u32) -> bool {
        self.arcs.binary_search(&(u, v)).is_ok()
    }

    /// Vertices incident to at least one arc, ascending.
    pub fn support(&self) -> Vec<u32> {
        (0..self.n as u32)
            .filter(|&v| self.out_degree(v) + self.in_degree(v) > 0)
            .collect()
    }

    /// Renders the `# digraph n=<n> m=<m>` header followed by one `u v`
    /// line per arc, in sorted order.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# digraph n={} m={}", self.n, self.m());
        for &(u, v) in &self.arcs {
            let _ = writeln!(s, "{u} {v}");
        }
        s
    }

    /// Parses the edge-list format produced by [`Digraph::to_edge_list`].
    ///
    /// Rejects missing or malformed headers, arc counts that disagree with
    /// the header, loops, duplicates, and out-of-range endpoints.
    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty input".into()))?
            .trim();
        let rest = header
            .strip_prefix("# digraph n=")
            .ok_or_else(|| Error::Parse(format!("bad header: {header:?}")))?;
        let (n_str, m_str) = rest
            .split_once(" m=")
            .ok_or_else(|| Error::Parse(format!("bad header: {header:?}")))?;
        let n: usize = n_str
            .parse()
            .map_err(|_| Error::Parse(format!("bad vertex count: {n_str:?}")))?;
        let m: usize = m_str
            .parse()
            .map_err(|_| Error::Parse(format!("bad arc count: {m_str:?}")))?;
        let mut arcs = Vec::with_capacity(m);
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (u_str, v_str) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Parse(format!("bad arc line: {line:?}")))?;
            let u: u32 = u_str
                .parse()
                .map_err(|_| Error::Parse(format!("bad arc line: {line:?}")))?;
            let v: u32 = v_str
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad arc line: {line:?}")))?;
            arcs.push((u, v));
        }
        if arcs.len() != m {
            return Err(Error::Parse(format!(
                "header says m={m} but {} arc lines found",
                arcs.len()
            )));
        }
        let d = Self::new(n, arcs).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(d)
    }
}

/// Decodes a rank in `{0, .., n(n-1)-1}` to the ordered pair it indexes:
/// pairs are listed row by row with the diagonal skipped.
fn decode_pair(t: u64, n: u64) -> (u32, u32) {
    let u = t / (n - 1);
    let r = t % (n - 1);
    let v = if r < u { r } else { r + 1 };
    (u as u32, v as u32)
}

/// Draws `m` distinct ranks uniformly from `{0, .., space-1}` using a
/// partial Fisher-Yates shuffle with a sparse displacement map, so memory
/// is O(m) even when `space` is huge.
fn sample_distinct_ranks(space: u64, m: u64, rng: &mut impl Rng) -> Vec<u64> {
    let mut moved: HashMap<u64, u64> = HashMap::with_capacity(m as usize * 2);
    let mut out = Vec::with_capacity(m as usize);
    for i in 0..m {
        let j = rng.gen_range(i..space);
        let vi = *moved.get(&i).unwrap_or(&i);
        let vj = *moved.get(&j).unwrap_or(&j);
        moved.insert(j, vi);
        out.push(vj);
    }
    out
}

/// Samples the uniform model D(n, m): a digraph drawn uniformly from all
/// simple digraphs on `n` labelled vertices with exactly `m` arcs.
pub fn sample_dnm(n: usize, m: usize, seed: u64) -> Result<Digraph> {
    let space = (n as u64) * (n as u64 - if n > 0 { 1 } else { 0 });
    if (m as u64) > space {
        return Err(Error::InvalidArgument(format!(
            "m={m} exceeds the {space} possible arcs on n={n} vertices"
        )));
    }
    let mut rng = rng_from(derive_seed(seed, 0));
    let ranks = sample_distinct_ranks(space, m as u64, &mut rng);
    let arcs: Vec<(u32, u32)> = ranks.into_iter().map(|t| decode_pair(t, n as u64)).collect();
    let mut arcs = arcs;
    arcs.sort_unstable();
    Ok(Digraph::from_sorted_unchecked(n, arcs))
}

/// Samples the binomial model D(n, p): each of the `n(n-1)` possible arcs
/// is present independently with probability `p`.
///
/// Implemented as a two-stage draw: the arc count M ~ Binomial(n(n-1), p)
/// from one substream, then a uniform M-subset from another. The uniform
/// substream is shared with [`sample_dnm`], so for a common seed the two
/// models are maximally coupled: their arc sets agree on the first
/// `min(m, M)` draws.
pub fn sample_dnp(n: usize, p: f64, seed: u64) -> Result<Digraph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p={p} not in [0, 1]")));
    }
    let space = (n as u64) * (n as u64 - if n > 0 { 1 } else { 0 });
    let binom = Binomial::new(space, p)
        .map_err(|e| Error::InvalidArgument(format!("binomial: {e}")))?;
    let m = binom.sample(&mut rng_from(derive_seed(seed, 1)));
    let mut rng = rng_from(derive_seed(seed, 0));
    let ranks = sample_distinct_ranks(space, m, &mut rng);
    let mut arcs: Vec<(u32, u32)> =
        ranks.into_iter().map(|t| decode_pair(t, n as u64)).collect();
    arcs.sort_unstable();
    Ok(Digraph::from_sorted_unchecked(n, arcs))
}

/// Strongly connected components via Tarjan's algorithm, iterative so deep
/// graphs cannot overflow the call stack. Single pass over the arcs.
///
/// Components are returned with their vertex lists ascending; the list of
/// components is ordered by their smallest vertex.
pub fn strongly_connected_components(d: &Digraph) -> Vec<Vec<u32>> {
    const UNSET: u32 = u32::MAX;
    let n = d.n();
    let mut index = vec![UNSET; n];
    let mut low = vec![0u32; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<u32> = Vec::new();
    let mut comps: Vec<Vec<u32>> = Vec::new();
    let mut next_index = 0u32;
    // frames: (vertex, position in its out list)
    let mut frames: Vec<(u32, usize)> = Vec::new();

    for root in 0..n as u32 {
        if index[root as usize] != UNSET {
            continue;
        }
        frames.push((root, 0));
        index[root as usize] = next_index;
        low[root as usize] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root as usize] = true;

        while let Some(&mut (v, ref mut pos)) = frames.last_mut() {
            let vu = v as usize;
            if *pos < d.out_adj[vu].len() {
                let w = d.out_adj[vu][*pos];
                *pos += 1;
                let wu = w as usize;
                if index[wu] == UNSET {
                    index[wu] = next_index;
                    low[wu] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[wu] = true;
                    frames.push((w, 0));
                } else if on_stack[wu] {
                    low[vu] = low[vu].min(index[wu]);
                }
            } else {
                frames.pop();
                if let Some(&mut (p, _)) = frames.last_mut() {
                    let pu = p as usize;
                    low[pu] = low[pu].min(low[vu]);
                }
                if low[vu] == index[vu] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack underflow");
                        on_stack[w as usize] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    comps.push(comp);
                }
            }
        }
    }
    comps.sort_unstable_by_key(|c| c[0]);
    comps
}

/// The largest strongly connected component and its internal arc count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LargestScc {
    /// Number of vertices in the component.
    pub v1: usize,
    /// Number of arcs with both endpoints in the component.
    pub a1: usize,
    /// The component's vertices, ascending.
    pub members: Vec<u32>,
}

/// Picks the largest strongly connected component, breaking size ties by
/// the smallest vertex label a component contains.
///
/// Single vertices are components, so any digraph with `n >= 1` has
/// `v1 >= 1`; the empty digraph on 4 vertices yields `v1 = 1, a1 = 0`.
pub fn largest_scc(d: &Digraph) -> LargestScc {
    let comps = strongly_connected_components(d);
    let mut best: Option<&Vec<u32>> = None;
    for c in &comps {
        let better = match best {
            None => true,
            // comps is ordered by min label, so on a size tie keep the first
            Some(b) => c.len() > b.len(),
        };
        if better {
            best = Some(c);
        }
    }
    let members = best.cloned().unwrap_or_default();
    let mut comp_id = vec![usize::MAX; d.n()];
    for (i, c) in comps.iter().enumerate() {
        for &v in c {
            comp_id[v as usize] = i;
        }
    }
    let chosen = members.first().map(|&v| comp_id[v as usize]);
    let a1 = match chosen {
        Some(id) => d
            .arcs()
            .iter()
            .filter(|&&(u, v)| comp_id[u as usize] == id && comp_id[v as usize] == id)
            .count(),
        None => 0,
    };
    LargestScc { v1: members.len(), a1, members }
}

/// The (1,1)-core: the maximal sub-digraph in which every vertex has
/// in-degree >= 1 and out-degree >= 1.
///
/// Computed by exhaustively deleting vertices that violate the degree
/// condition until none remain; the result does not depend on the deletion
/// order. The returned digraph keeps the ambient vertex set `{0, .., n-1}`;
/// core membership is exactly its [`Digraph::support`].
pub fn core_11(d: &Digraph) -> Digraph {
    let n = d.n();
    let mut indeg: Vec<usize> = (0..n as u32).map(|v| d.in_degree(v)).collect();
    let mut outdeg: Vec<usize> = (0..n as u32).map(|v| d.out_degree(v)).collect();
    let mut alive = vec![true; n];
    let mut queue: Vec<u32> = (0..n as u32)
        .filter(|&v| indeg[v as usize] == 0 || outdeg[v as usize] == 0)
        .collect();
    while let Some(v) = queue.pop() {
        let vu = v as usize;
        if !alive[vu] {
            continue;
        }
        alive[vu] = false;
        for &w in d.out_neighbors(v) {
            let wu = w as usize;
            if alive[wu] {
                indeg[wu] -= 1;
                if indeg[wu] == 0 {
                    queue.push(w);
                }
            }
        }
        for &u in d.in_neighbors(v) {
            let uu = u as usize;
            if alive[uu] {
                outdeg[uu] -= 1;
                if outdeg[uu] == 0 {
                    queue.push(u);
                }
            }
        }
    }
    let arcs: Vec<(u32, u32)> = d
        .arcs()
        .iter()
        .copied()
        .filter(|&(u, v)| alive[u as usize] && alive[v as usize])
        .collect();
    Digraph::from_sorted_unchecked(n, arcs)
}

fn bfs(adj: &[Vec<u32>], start: u32) -> Vec<u32> {
    let mut seen = vec![false; adj.len()];
    seen[start as usize] = true;
    let mut frontier = vec![start];
    let mut out = vec![start];
    while let Some(v) = frontier.pop() {
        for &w in &adj[v as usize] {
            if !seen[w as usize] {
                seen[w as usize] = true;
                out.push(w);
                frontier.push(w);
            }
        }
    }
    out.sort_unstable();
    out
}

/// Vertices reachable from `v` by directed paths, including `v` itself.
pub fn descendants(d: &Digraph, v: u32) -> Result<Vec<u32>> {
    if v as usize >= d.n() {
        return Err(Error::InvalidArgument(format!("vertex {v} out of range")));
    }
    Ok(bfs(&d.out_adj, v))
}

/// Vertices from which `v` is reachable, including `v` itself.
pub fn ancestors(d: &Digraph, v: u32) -> Result<Vec<u32>> {
    if v as usize >= d.n() {
        return Err(Error::InvalidArgument(format!("vertex {v} out of range")));
    }
    Ok(bfs(&d.in_adj, v))
}

/// A depth-first search forest over all vertices.
#[derive(Debug, Clone)]
pub struct DfsForest {
    /// Vertices in the order DFS first reaches them.
    pub order: Vec<u32>,
    /// `parent[v]` is the DFS tree parent of `v`, `None` for roots.
    pub parent: Vec<Option<u32>>,
    /// `tree_index[v]` numbers the trees in the order their roots start.
    pub tree_index: Vec<u32>,
    /// `partial_desc_size[v]` is the size of the subtree of the DFS tree
    /// rooted at `v` (the partial descendant set, `v` included).
    pub partial_desc_size: Vec<usize>,
    /// Vertex lists of the trees, each in discovery order.
    pub trees: Vec<Vec<u32>>,
}

/// Runs a depth-first search from every unvisited vertex, lowest label
/// first, exploring out-neighbors in ascending label order.
pub fn dfs_forest(d: &Digraph) -> DfsForest {
    let n = d.n();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut parent = vec![None; n];
    let mut tree_index = vec![0u32; n];
    let mut size = vec![1usize; n];
    let mut trees: Vec<Vec<u32>> = Vec::new();

    for root in 0..n as u32 {
        if visited[root as usize] {
            continue;
        }
        let t = trees.len() as u32;
        trees.push(Vec::new());
        visited[root as usize] = true;
        order.push(root);
        tree_index[root as usize] = t;
        trees[t as usize].push(root);
        let mut frames: Vec<(u32, usize)> = vec![(root, 0)];
        while let Some(&mut (v, ref mut pos)) = frames.last_mut() {
            if *pos < d.out_adj[v as usize].len() {
                let w = d.out_adj[v as usize][*pos];
                *pos += 1;
                if !visited[w as usize] {
                    visited[w as usize] = true;
                    parent[w as usize] = Some(v);
                    tree_index[w as usize] = t;
                    order.push(w);
                    trees[t as usize].push(w);
                    frames.push((w, 0));
                }
            } else {
                frames.pop();
                if let Some(&(p, _)) = frames.last() {
                    size[p as usize] += size[v as usize];
                }
            }
        }
    }
    DfsForest { order, parent, tree_index, partial_desc_size: size, trees }
}

/// Decodes a rank in `{0, .., n(n-1)/2 - 1}` to the unordered pair it
/// indexes, pairs listed row by row: row `i` holds `{i, j}` for `j > i`.
fn decode_unordered(t: u64, n: u64) -> (u32, u32) {
    // binary search for the largest row i whose first rank is <= t;
    // row i starts at sum_{s<i} (n-1-s) = i(2n-i-1)/2
    let row_start = |i: u64| i * (2 * n - i - 1) / 2;
    let (mut lo, mut hi) = (0u64, n - 1);
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if row_start(mid) <= t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let i = lo;
    let j = i + 1 + (t - row_start(i));
    (i as u32, j as u32)
}

/// Samples an undirected G(n, p) graph and returns the size of the
/// connected component containing vertex 0.
///
/// This is the comparison distribution for out-reachability in D(n, p):
/// the number of descendants of a vertex in D(n, p) has the same law as
/// the component size of a vertex in G(n, p).
pub fn sample_gnp_component_size(n: usize, p: f64, seed: u64) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p={p} not in [0, 1]")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n=0 has no vertex 0".into()));
    }
    let space = (n as u64) * (n as u64 - 1) / 2;
    let binom = Binomial::new(space, p)
        .map_err(|e| Error::InvalidArgument(format!("binomial: {e}")))?;
    let m = binom.sample(&mut rng_from(derive_seed(seed, 1)));
    let mut rng = rng_from(derive_seed(seed, 0));
    let ranks = sample_distinct_ranks(space, m, &mut rng);
    let mut adj = vec![Vec::new(); n];
    for t in ranks {
        let (i, j) = decode_unordered(t, n as u64);
        adj[i as usize].push(j);
        adj[j as usize].push(i);
    }
    Ok(bfs(&adj, 0).len())
}
