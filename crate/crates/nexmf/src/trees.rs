//! Oriented trees, observables built from them by tree contraction, and the
//! weighted supremum metric that compares systems through those observables.
//!
//! An observable pairs a tree T and a {0,1} edge signature s with a measure
//! on T^{|v'|}, where v' is the set of edge targets ("heads"). Finite systems
//! produce atomic measures, continuum systems produce grid tensors, and both
//! feed the same H⁻¹-tensor distance.

use std::collections::BTreeSet;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::dynamics::{simulate_particles, Coefficients, TimeGrid};
use crate::error::{Error, Result};
use crate::seeding::child_seed;
use crate::system::{ContinuumSystem, FiniteSystem, System};
use crate::torus::{h_neg1_dist, lambda_closed, AtomicMeasure, GridTensor, MeasureRep};

/// Most atoms a single observable may materialize.
pub const ATOM_CAP: usize = 4_000_000;

/// Beyond this many atom pairs, distances switch from the exact bilinear sum
/// to grid binning.
pub const EXACT_DISTANCE_PAIR_CAP: usize = 200_000;

const MAX_ENUMERATED_VERTICES: usize = 6;

/// A connected acyclic digraph whose underlying undirected graph is a tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OrientedTree {
    v: usize,
    edges: Vec<(usize, usize)>,
}

impl OrientedTree {
    pub fn new(v: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if v < 2 {
            return Err(Error::invalid("a tree needs at least two vertices"));
        }
        if edges.len() != v - 1 {
            return Err(Error::invalid(format!(
                "{v} vertices require {} edges, got {}",
                v - 1,
                edges.len()
            )));
        }
        let mut undirected = BTreeSet::new();
        for &(i, j) in &edges {
            if i >= v || j >= v || i == j {
                return Err(Error::invalid(format!(
                    "edge ({i},{j}) is not a pair of distinct vertices below {v}"
                )));
            }
            if !undirected.insert((i.min(j), i.max(j))) {
                return Err(Error::invalid(format!(
                    "vertices {i} and {j} are joined more than once"
                )));
            }
        }
        // v-1 distinct undirected edges + connectivity = tree (no cycles).
        let mut seen = vec![false; v];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(i, j) in &edges {
                let other = if i == u {
                    j
                } else if j == u {
                    i
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::invalid("the edge set is not connected"));
        }
        Ok(OrientedTree { v, edges })
    }

    pub fn vertex_count(&self) -> usize {
        self.v
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// The ordered set v′: distinct edge targets, ascending.
    pub fn head_vertices(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.edges.iter().map(|&(_, j)| j).collect();
        set.into_iter().collect()
    }

    /// Minimal relabeled edge list over all vertex permutations; two trees
    /// are isomorphic exactly when their codes agree.
    pub fn canonical_code(&self) -> Vec<(usize, usize)> {
        let mut best: Option<Vec<(usize, usize)>> = None;
        let mut perm: Vec<usize> = (0..self.v).collect();
        permute_all(&mut perm, 0, &mut |p| {
            let mut relabeled: Vec<(usize, usize)> =
                self.edges.iter().map(|&(i, j)| (p[i], p[j])).collect();
            relabeled.sort_unstable();
            if best.as_ref().map_or(true, |b| relabeled < *b) {
                best = Some(relabeled);
            }
        });
        best.unwrap()
    }

    /// Short text form of the edge list, e.g. "0>1,2>1".
    pub fn label(&self) -> String {
        self.edges
            .iter()
            .map(|(i, j)| format!("{i}>{j}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn permute_all(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute_all(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

/// One bit per edge, in edge-list order: 1 keeps the weight factor, 0 drops
/// it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EdgeSignature {
    bits: Vec<u8>,
}

impl EdgeSignature {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("signature entries must be 0 or 1"));
        }
        Ok(EdgeSignature { bits })
    }

    pub fn ones(len: usize) -> Self {
        EdgeSignature { bits: vec![1; len] }
    }

    pub fn zeros(len: usize) -> Self {
        EdgeSignature { bits: vec![0; len] }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// All 2^len signatures, in binary counting order.
    pub fn enumerate(len: usize) -> Vec<EdgeSignature> {
        (0..1usize << len)
            .map(|mask| EdgeSignature {
                bits: (0..len).map(|e| ((mask >> e) & 1) as u8).collect(),
            })
            .collect()
    }

    pub fn label(&self) -> String {
        self.bits.iter().map(|b| char::from(b'0' + b)).collect()
    }
}

/// All oriented trees with 2..=max_vertices vertices, one representative per
/// isomorphism class, ordered by size then canonical code.
///
/// Labeled shapes come from Prüfer sequences, each undirected edge takes
/// both orientations, and classes are collapsed through the canonical code.
pub fn enumerate_trees(max_vertices: usize) -> Result<Vec<OrientedTree>> {
    if !(2..=MAX_ENUMERATED_VERTICES).contains(&max_vertices) {
        return Err(Error::invalid(format!(
            "tree enumeration covers 2..={MAX_ENUMERATED_VERTICES} vertices, got {max_vertices}"
        )));
    }
    let mut all = Vec::new();
    for v in 2..=max_vertices {
        let mut codes: BTreeSet<Vec<(usize, usize)>> = BTreeSet::new();
        for undirected in labeled_trees(v) {
            let m = undirected.len();
            for mask in 0..1usize << m {
                let directed: Vec<(usize, usize)> = undirected
                    .iter()
                    .enumerate()
                    .map(|(e, &(a, b))| if (mask >> e) & 1 == 0 { (a, b) } else { (b, a) })
                    .collect();
                let tree = OrientedTree::new(v, directed).expect("labeled tree is valid");
                codes.insert(tree.canonical_code());
            }
        }
        for code in codes {
            all.push(OrientedTree::new(v, code).expect("canonical code is a valid tree"));
        }
    }
    Ok(all)
}

/// Every labeled undirected tree on v vertices as a sorted edge list.
fn labeled_trees(v: usize) -> Vec<Vec<(usize, usize)>> {
    if v == 2 {
        return vec![vec![(0, 1)]];
    }
    // Decode all Prüfer sequences of length v-2 over [v].
    let len = v - 2;
    let total = v.pow(len as u32);
    let mut trees = Vec::with_capacity(total);
    for idx in 0..total {
        let mut seq = Vec::with_capacity(len);
        let mut rem = idx;
        for _ in 0..len {
            seq.push(rem % v);
            rem /= v;
        }
        let mut degree = vec![1usize; v];
        for &s in &seq {
            degree[s] += 1;
        }
        let mut edges = Vec::with_capacity(v - 1);
        for &s in &seq {
            let leaf = (0..v).find(|&u| degree[u] == 1).unwrap();
            edges.push((leaf.min(s), leaf.max(s)));
            degree[leaf] -= 1;
            degree[s] -= 1;
        }
        let (a, b) = {
            let mut left = (0..v).filter(|&u| degree[u] == 1);
            (left.next().unwrap(), left.next().unwrap())
        };
        edges.push((a.min(b), a.max(b)));
        edges.sort_unstable();
        trees.push(edges);
    }
    trees
}

/// Which estimator produced an observable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableVariant {
    Tau,
    TauE,
    TauP,
    TauM,
    Continuum,
}

/// A tree/signature pair together with the measure it induces on the heads.
#[derive(Clone, Debug)]
pub struct Observable {
    tree: OrientedTree,
    signature: EdgeSignature,
    head_vertices: Vec<usize>,
    measure: MeasureRep,
    variant: ObservableVariant,
}

impl Observable {
    pub fn tree(&self) -> &OrientedTree {
        &self.tree
    }

    pub fn signature(&self) -> &EdgeSignature {
        &self.signature
    }

    /// Head vertices in measure-coordinate order. Standard observables list
    /// each target once (ascending); normal-form observables repeat targets
    /// per incoming edge.
    pub fn head_vertices(&self) -> &[usize] {
        &self.head_vertices
    }

    pub fn measure(&self) -> &MeasureRep {
        &self.measure
    }

    pub fn variant(&self) -> ObservableVariant {
        self.variant
    }

    pub fn arity(&self) -> usize {
        self.measure.arity()
    }

    pub fn total_mass(&self) -> f64 {
        match &self.measure {
            MeasureRep::Atomic(a) => a.total_mass(),
            MeasureRep::Grid(g) => g.mass(),
        }
    }

    /// JSON form: tree edge list, signature, heads, variant, and either the
    /// full atom list or the shape of the grid component.
    pub fn to_json(&self) -> serde_json::Value {
        let measure = match &self.measure {
            MeasureRep::Atomic(a) => json!({
                "kind": "atomic",
                "arity": a.arity(),
                "positions": a.positions(),
                "weights": a.weights(),
            }),
            MeasureRep::Grid(g) => json!({
                "kind": "grid",
                "arity": g.arity(),
                "grid_size": g.grid_size(),
                "mass": g.mass(),
            }),
        };
        json!({
            "tree": { "vertices": self.tree.vertex_count(), "edges": self.tree.edges() },
            "signature": self.signature.bits(),
            "heads": self.head_vertices,
            "variant": serde_json::to_value(self.variant).unwrap(),
            "measure": measure,
        })
    }
}

fn check_signature(t: &OrientedTree, s: &EdgeSignature) -> Result<()> {
    if s.len() != t.edge_count() {
        return Err(Error::dim(format!(
            "signature has {} bits for {} edges",
            s.len(),
            t.edge_count()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tree contraction over an n-point index domain
// ---------------------------------------------------------------------------

struct Factor {
    scope: Vec<usize>,
    table: Vec<f64>,
}

impl Factor {
    fn value(&self, assignment: &[usize], n: usize) -> f64 {
        let mut idx = 0;
        for &vertex in &self.scope {
            idx = idx * n + assignment[vertex];
        }
        self.table[idx]
    }
}

fn checked_table_len(scope_len: usize, n: usize) -> Result<usize> {
    let mut len = 1usize;
    for _ in 0..scope_len {
        len = len
            .checked_mul(n)
            .filter(|&l| l <= ATOM_CAP)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "contraction needs a table of {n}^{scope_len} entries, above the cap of {ATOM_CAP}"
                ))
            })?;
    }
    Ok(len)
}

/// Sums vertex `u` out of the factors that mention it.
fn eliminate(factors: &mut Vec<Factor>, u: usize, n: usize, num_vertices: usize) -> Result<()> {
    let (with_u, rest): (Vec<Factor>, Vec<Factor>) =
        factors.drain(..).partition(|f| f.scope.contains(&u));
    *factors = rest;
    if with_u.is_empty() {
        // Handled by the caller through the free-vertex scalar.
        return Err(Error::invalid("eliminate called on a factor-free vertex"));
    }
    let scope: Vec<usize> = {
        let mut set = BTreeSet::new();
        for f in &with_u {
            set.extend(f.scope.iter().copied());
        }
        set.remove(&u);
        set.into_iter().collect()
    };
    let len = checked_table_len(scope.len(), n)?;
    let mut table = vec![0.0; len];
    let mut assignment = vec![0usize; num_vertices];
    for (flat, slot) in table.iter_mut().enumerate() {
        let mut rem = flat;
        for &vertex in scope.iter().rev() {
            assignment[vertex] = rem % n;
            rem /= n;
        }
        let mut acc = 0.0;
        for lu in 0..n {
            assignment[u] = lu;
            let mut prod = 1.0;
            for f in &with_u {
                prod *= f.value(&assignment, n);
                if prod == 0.0 {
                    break;
                }
            }
            acc += prod;
        }
        *slot = acc;
    }
    factors.push(Factor { scope, table });
    Ok(())
}

/// Contracts the tree's edge factors down to a table over `heads` (ascending
/// order), returning the table and the scalar contribution of factor-free
/// vertices. Values are raw sums, not yet normalized.
fn contract(
    t: &OrientedTree,
    s: &EdgeSignature,
    n: usize,
    weight_of: impl Fn(usize, usize) -> f64,
    heads: &[usize],
) -> Result<(Vec<f64>, f64)> {
    let v = t.vertex_count();
    let mut factors: Vec<Factor> = Vec::new();
    for (e, &(i, j)) in t.edges().iter().enumerate() {
        if s.bits()[e] == 0 {
            // w⁰ = 1: the factor is constant and can be dropped.
            continue;
        }
        let (a, b) = (i.min(j), i.max(j));
        let mut table = vec![0.0; n * n];
        for la in 0..n {
            for lb in 0..n {
                let (li, lj) = if i == a { (la, lb) } else { (lb, la) };
                table[la * n + lb] = weight_of(li, lj);
            }
        }
        factors.push(Factor {
            scope: vec![a, b],
            table,
        });
    }

    let head_set: BTreeSet<usize> = heads.iter().copied().collect();
    let mut scalar = 1.0;
    let mut remaining: BTreeSet<usize> = (0..v).filter(|u| !head_set.contains(u)).collect();
    while !remaining.is_empty() {
        // Prefer the vertex whose elimination touches the fewest others.
        let pick = *remaining
            .iter()
            .min_by_key(|&&u| {
                let mut union = BTreeSet::new();
                for f in factors.iter().filter(|f| f.scope.contains(&u)) {
                    union.extend(f.scope.iter().copied());
                }
                (union.len(), u)
            })
            .unwrap();
        remaining.remove(&pick);
        if factors.iter().any(|f| f.scope.contains(&pick)) {
            eliminate(&mut factors, pick, n, v)?;
        } else {
            scalar *= n as f64;
        }
    }

    let len = checked_table_len(heads.len(), n)?;
    let mut table = vec![0.0; len];
    let mut assignment = vec![0usize; v];
    for (flat, slot) in table.iter_mut().enumerate() {
        let mut rem = flat;
        for &vertex in heads.iter().rev() {
            assignment[vertex] = rem % n;
            rem /= n;
        }
        let mut prod = scalar;
        for f in &factors {
            prod *= f.value(&assignment, n);
            if prod == 0.0 {
                break;
            }
        }
        *slot = prod;
    }
    Ok((table, scalar))
}

fn atoms_from_head_table(
    table: &[f64],
    heads: &[usize],
    positions_of: &[f64],
    n: usize,
    normalizer: f64,
) -> Result<AtomicMeasure> {
    let arity = heads.len();
    let mut positions = Vec::new();
    let mut weights = Vec::new();
    for (flat, &raw) in table.iter().enumerate() {
        if raw == 0.0 {
            continue;
        }
        let mut rem = flat;
        let mut coords = vec![0.0; arity];
        for d in (0..arity).rev() {
            coords[d] = positions_of[rem % n];
            rem /= n;
        }
        positions.extend_from_slice(&coords);
        weights.push(raw * normalizer);
    }
    AtomicMeasure::new(arity, positions, weights)
}

/// τ: the plain observable with index repetition,
/// (1/N^{|v|}) Σ_{l∈[N]^v} Π_e w_{l_i l_j}^{s_e} ⊗_{j∈v′} δ_{X_{l_j}},
/// computed by tree contraction in O(N^{|v′|+1}).
pub fn plain_observable(
    sys: &FiniteSystem,
    t: &OrientedTree,
    s: &EdgeSignature,
) -> Result<Observable> {
    check_signature(t, s)?;
    let heads = t.head_vertices();
    if heads.len() > 3 {
        return Err(Error::invalid(format!(
            "trees with {} head vertices exceed the arity cap of 3",
            heads.len()
        )));
    }
    let n = sys.n();
    checked_table_len(heads.len(), n)?;
    let (table, _) = contract(t, s, n, |i, j| sys.w()[[i, j]], &heads)?;
    let normalizer = (n as f64).powi(-(t.vertex_count() as i32));
    let atoms = atoms_from_head_table(&table, &heads, sys.x(), n, normalizer)?;
    Ok(Observable {
        tree: t.clone(),
        signature: s.clone(),
        head_vertices: heads,
        measure: MeasureRep::Atomic(atoms),
        variant: ObservableVariant::Tau,
    })
}

/// τₑ: the same sum restricted to tuples with pairwise distinct indices,
/// by direct enumeration.
pub fn plain_observable_norep(
    sys: &FiniteSystem,
    t: &OrientedTree,
    s: &EdgeSignature,
) -> Result<Observable> {
    check_signature(t, s)?;
    let v = t.vertex_count();
    if v > 4 {
        return Err(Error::invalid(format!(
            "distinct-tuple enumeration is capped at 4 vertices, got {v}"
        )));
    }
    let n = sys.n();
    if (n as f64).powi(v as i32) > 1e8 {
        return Err(Error::invalid(format!(
            "distinct-tuple enumeration over {n}^{v} tuples exceeds the 1e8 cap"
        )));
    }
    let heads = t.head_vertices();
    let head_table_len = checked_table_len(heads.len(), n)?;
    let mut table = vec![0.0; head_table_len];

    let mut assignment = vec![0usize; v];
    let mut used = vec![false; n];
    fn recurse(
        depth: usize,
        v: usize,
        n: usize,
        assignment: &mut [usize],
        used: &mut [bool],
        t: &OrientedTree,
        s: &EdgeSignature,
        sys: &FiniteSystem,
        heads: &[usize],
        table: &mut [f64],
    ) {
        if depth == v {
            let mut prod = 1.0;
            for (e, &(i, j)) in t.edges().iter().enumerate() {
                if s.bits()[e] == 1 {
                    prod *= sys.w()[[assignment[i], assignment[j]]];
                    if prod == 0.0 {
                        return;
                    }
                }
            }
            let mut flat = 0;
            for &h in heads {
                flat = flat * n + assignment[h];
            }
            table[flat] += prod;
            return;
        }
        for l in 0..n {
            if used[l] {
                continue;
            }
            used[l] = true;
            assignment[depth] = l;
            recurse(depth + 1, v, n, assignment, used, t, s, sys, heads, table);
            used[l] = false;
        }
    }
    recurse(
        0,
        v,
        n,
        &mut assignment,
        &mut used,
        t,
        s,
        sys,
        &heads,
        &mut table,
    );

    let normalizer = (n as f64).powi(-(v as i32));
    let atoms = atoms_from_head_table(&table, &heads, sys.x(), n, normalizer)?;
    Ok(Observable {
        tree: t.clone(),
        signature: s.clone(),
        head_vertices: heads,
        measure: MeasureRep::Atomic(atoms),
        variant: ObservableVariant::TauE,
    })
}

fn monte_carlo_average(
    sys0: &FiniteSystem,
    c: &Coefficients,
    tg: &TimeGrid,
    t: &OrientedTree,
    s: &EdgeSignature,
    realizations: usize,
    seed: u64,
    per_path: impl Fn(&FiniteSystem) -> Result<Observable> + Sync,
    variant: ObservableVariant,
) -> Result<Observable> {
    if realizations == 0 {
        return Err(Error::invalid("need at least one realization"));
    }
    check_signature(t, s)?;
    let samples: Vec<Observable> = (0..realizations)
        .into_par_iter()
        .map(|r| {
            let evolved = simulate_particles(sys0, c, tg, child_seed(seed, r as u64))?;
            per_path(&evolved)
        })
        .collect::<Result<_>>()?;
    let arity = samples[0].arity();
    let total_atoms: usize = samples
        .iter()
        .map(|o| match &o.measure {
            MeasureRep::Atomic(a) => a.len(),
            MeasureRep::Grid(_) => 0,
        })
        .sum();
    if total_atoms > ATOM_CAP {
        return Err(Error::invalid(format!(
            "{total_atoms} atoms across {realizations} realizations exceed the cap of {ATOM_CAP}"
        )));
    }
    let scale = 1.0 / realizations as f64;
    let mut positions = Vec::new();
    let mut weights = Vec::new();
    for o in &samples {
        if let MeasureRep::Atomic(a) = &o.measure {
            positions.extend_from_slice(a.positions());
            weights.extend(a.weights().iter().map(|w| w * scale));
        }
    }
    Ok(Observable {
        tree: t.clone(),
        signature: s.clone(),
        head_vertices: samples[0].head_vertices.clone(),
        measure: MeasureRep::Atomic(AtomicMeasure::new(arity, positions, weights)?),
        variant,
    })
}

/// τₚ: Monte-Carlo average of τ over `realizations` paths of the particle
/// dynamics started from `sys0`, one child seed per path.
pub fn law_observable(
    sys0: &FiniteSystem,
    c: &Coefficients,
    tg: &TimeGrid,
    t: &OrientedTree,
    s: &EdgeSignature,
    realizations: usize,
    seed: u64,
) -> Result<Observable> {
    monte_carlo_average(
        sys0,
        c,
        tg,
        t,
        s,
        realizations,
        seed,
        |evolved| plain_observable(evolved, t, s),
        ObservableVariant::TauP,
    )
}

/// τₘ: as `law_observable` but averaging the distinct-index estimator τₑ.
pub fn law_observable_norep(
    sys0: &FiniteSystem,
    c: &Coefficients,
    tg: &TimeGrid,
    t: &OrientedTree,
    s: &EdgeSignature,
    realizations: usize,
    seed: u64,
) -> Result<Observable> {
    monte_carlo_average(
        sys0,
        c,
        tg,
        t,
        s,
        realizations,
        seed,
        |evolved| plain_observable_norep(evolved, t, s),
        ObservableVariant::TauM,
    )
}

/// The continuum observable: class tuples weighted by κ and W^s select
/// which product of class densities each head carries.
pub fn continuum_observable(
    cont: &ContinuumSystem,
    t: &OrientedTree,
    s: &EdgeSignature,
) -> Result<Observable> {
    check_signature(t, s)?;
    let heads = t.head_vertices();
    let r = heads.len();
    if r > 2 {
        return Err(Error::invalid(format!(
            "continuum observables are capped at 2 head vertices, got {r}"
        )));
    }
    let k = cont.k();
    let v = t.vertex_count();

    // Class tuples are few (k^v), so fold κ and W^s directly instead of
    // routing the κ vertex weights through the contraction engine.
    let mut table = vec![0.0; k.pow(r as u32)];
    let mut tuple = vec![0usize; v];
    loop {
        let mut weight = 1.0;
        for &c in tuple.iter() {
            weight *= cont.kappa()[c];
        }
        if weight != 0.0 {
            for (e, &(i, j)) in t.edges().iter().enumerate() {
                if s.bits()[e] == 1 {
                    weight *= cont.w()[[tuple[i], tuple[j]]];
                    if weight == 0.0 {
                        break;
                    }
                }
            }
        }
        if weight != 0.0 {
            let mut flat = 0;
            for &h in &heads {
                flat = flat * k + tuple[h];
            }
            table[flat] += weight;
        }
        // Odometer increment over [k]^v.
        let mut pos = v;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            tuple[pos] += 1;
            if tuple[pos] < k {
                break;
            }
            tuple[pos] = 0;
        }
        if tuple.iter().all(|&c| c == 0) {
            break;
        }
    }

    let g = cont.grid_size();
    let values = match r {
        1 => {
            let mut values = vec![0.0; g];
            for (c, &wc) in table.iter().enumerate() {
                if wc == 0.0 {
                    continue;
                }
                for (cell, val) in cont.densities()[c].values().iter().enumerate() {
                    values[cell] += wc * val;
                }
            }
            values
        }
        2 => {
            let mut values = vec![0.0; g * g];
            for c1 in 0..k {
                for c2 in 0..k {
                    let wc = table[c1 * k + c2];
                    if wc == 0.0 {
                        continue;
                    }
                    let f1 = cont.densities()[c1].values();
                    let f2 = cont.densities()[c2].values();
                    for (a, &fa) in f1.iter().enumerate() {
                        let row = &mut values[a * g..(a + 1) * g];
                        for (b, &fb) in f2.iter().enumerate() {
                            row[b] += wc * fa * fb;
                        }
                    }
                }
            }
            values
        }
        _ => unreachable!("arity checked above"),
    };
    Ok(Observable {
        tree: t.clone(),
        signature: s.clone(),
        head_vertices: heads,
        measure: MeasureRep::Grid(GridTensor::new(r, g, values)?),
        variant: ObservableVariant::Continuum,
    })
}

/// Total tuple-sum mass t(F, w) = (1/n^{|v|}) Σ_{l∈[n]^v} Π_e w^{s}: the
/// homomorphism density of the tree in the kernel.
pub fn homomorphism_density(w: &Array2<f64>, t: &OrientedTree, s: &EdgeSignature) -> Result<f64> {
    check_signature(t, s)?;
    let n = w.nrows();
    if w.ncols() != n || n == 0 {
        return Err(Error::dim("kernel matrix must be square and nonempty"));
    }
    let (table, _) = contract(t, s, n, |i, j| w[[i, j]], &[])?;
    Ok(table[0] * (n as f64).powi(-(t.vertex_count() as i32)))
}

/// H⁻¹-tensor distance between two observables of equal arity; large atomic
/// pairs are binned to a grid before the spectral evaluation.
pub fn observable_distance(a: &Observable, b: &Observable) -> Result<f64> {
    observable_distance_capped(a, b, EXACT_DISTANCE_PAIR_CAP)
}

/// As `observable_distance` with an explicit exact-pair budget.
pub fn observable_distance_capped(a: &Observable, b: &Observable, pair_cap: usize) -> Result<f64> {
    if a.arity() != b.arity() {
        return Err(Error::dim(format!(
            "observable arity mismatch: {} vs {}",
            a.arity(),
            b.arity()
        )));
    }
    if let (MeasureRep::Atomic(ma), MeasureRep::Atomic(mb)) = (&a.measure, &b.measure) {
        let total = ma.len() + mb.len();
        if total.saturating_mul(total) > pair_cap {
            let g = bin_grid_for(a.arity());
            return h_neg1_dist(
                &MeasureRep::Grid(ma.bin_to_grid(g)?),
                &MeasureRep::Grid(mb.bin_to_grid(g)?),
            );
        }
    }
    h_neg1_dist(&a.measure, &b.measure)
}

fn bin_grid_for(arity: usize) -> usize {
    match arity {
        1 | 2 => 512,
        _ => 64,
    }
}

/// One tree/signature entry of the observable metric.
#[derive(Clone, Debug, Serialize)]
pub struct MetricTerm {
    pub tree: OrientedTree,
    pub signature: EdgeSignature,
    pub distance: f64,
    pub weight: f64,
    pub weighted: f64,
}

/// Result of the weighted supremum over trees and signatures.
#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub value: f64,
    pub argmax: Option<MetricTerm>,
    /// True when the best term sits at the vertex cap, i.e. enlarging the
    /// family could raise the value.
    pub saturated: bool,
    pub terms: Vec<MetricTerm>,
}

impl MetricReport {
    /// Per-term CSV: tree, signature, raw and weighted distances.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tree,signature,vertices,edges,distance,weighted\n");
        for term in &self.terms {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                term.tree.label(),
                term.signature.label(),
                term.tree.vertex_count(),
                term.tree.edge_count(),
                term.distance,
                term.weighted
            ));
        }
        out
    }
}

fn observable_of(sys: &System, t: &OrientedTree, s: &EdgeSignature) -> Result<Observable> {
    match sys {
        System::Finite(f) => plain_observable(f, t, s),
        System::Continuum(c) => continuum_observable(c, t, s),
    }
}

fn representable_arity(sys: &System) -> usize {
    match sys {
        System::Finite(_) => 3,
        System::Continuum(_) => 2,
    }
}

/// The observable metric: sup over enumerated trees T and signatures s of
/// (4(1+w_max)√Λ_max)^{−|e(T)|} · dist(τ_A, τ_B). Combos whose head count
/// neither operand can represent are skipped; the report records the argmax
/// and whether it saturates the vertex cap.
pub fn observable_metric(
    a: &System,
    b: &System,
    max_vertices: usize,
    w_max: f64,
) -> Result<MetricReport> {
    if !w_max.is_finite() || w_max < 0.0 {
        return Err(Error::invalid(format!(
            "w_max must be finite and nonnegative, got {w_max}"
        )));
    }
    let trees = enumerate_trees(max_vertices)?;
    let sqrt_lambda_max = lambda_closed(0.0).sqrt();
    let base = 4.0 * (1.0 + w_max) * sqrt_lambda_max;
    let arity_cap = representable_arity(a).min(representable_arity(b));

    let combos: Vec<(&OrientedTree, EdgeSignature)> = trees
        .iter()
        .filter(|t| t.head_vertices().len() <= arity_cap)
        .flat_map(|t| {
            EdgeSignature::enumerate(t.edge_count())
                .into_iter()
                .map(move |s| (t, s))
        })
        .collect();

    let terms: Vec<MetricTerm> = combos
        .into_par_iter()
        .map(|(t, s)| {
            let oa = observable_of(a, t, &s)?;
            let ob = observable_of(b, t, &s)?;
            let distance = observable_distance(&oa, &ob)?;
            let weight = base.powi(-(t.edge_count() as i32));
            Ok(MetricTerm {
                tree: t.clone(),
                signature: s,
                distance,
                weight,
                weighted: weight * distance,
            })
        })
        .collect::<Result<_>>()?;

    let mut best: Option<&MetricTerm> = None;
    for term in &terms {
        if best.map_or(true, |b| term.weighted > b.weighted) {
            best = Some(term);
        }
    }
    let argmax = best.cloned();
    let value = argmax.as_ref().map_or(0.0, |t| t.weighted);
    let saturated = argmax
        .as_ref()
        .map_or(false, |t| t.tree.vertex_count() == max_vertices);
    Ok(MetricReport {
        value,
        argmax,
        saturated,
        terms,
    })
}

/// Pushes an atomic observable forward to the normal form on T^{|e|}: each
/// atom's coordinate for edge e is the coordinate of e's target, so heads
/// with several incoming edges are duplicated and the support lies in the
/// corresponding diagonal subspace. Mass is preserved atom by atom.
pub fn pushforward_to_normal(o: &Observable) -> Result<Observable> {
    let atoms = match &o.measure {
        MeasureRep::Atomic(a) => a,
        MeasureRep::Grid(_) => {
            return Err(Error::invalid(
                "pushforward to normal form applies to atomic observables",
            ))
        }
    };
    let heads = &o.head_vertices;
    let edge_heads: Vec<usize> = o.tree.edges().iter().map(|&(_, j)| j).collect();
    let slot_of: Vec<usize> = edge_heads
        .iter()
        .map(|h| heads.iter().position(|x| x == h).expect("target is a head"))
        .collect();
    let arity = edge_heads.len();
    let mut positions = Vec::with_capacity(arity * atoms.len());
    let mut weights = Vec::with_capacity(atoms.len());
    for i in 0..atoms.len() {
        let p = atoms.position(i);
        for &slot in &slot_of {
            positions.push(p[slot]);
        }
        weights.push(atoms.weights()[i]);
    }
    Ok(Observable {
        tree: o.tree.clone(),
        signature: o.signature.clone(),
        head_vertices: edge_heads,
        measure: MeasureRep::Atomic(AtomicMeasure::new(arity, positions, weights)?),
        variant: o.variant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::GridDensity;
    use ndarray::array;
    use std::collections::BTreeMap;

    fn edge() -> OrientedTree {
        OrientedTree::new(2, vec![(0, 1)]).unwrap()
    }

    fn swap_system() -> FiniteSystem {
        FiniteSystem::new(array![[0.0, 1.0], [1.0, 0.0]], vec![0.0, 0.5]).unwrap()
    }

    #[test]
    fn tree_validation_rejects_malformed_graphs() {
        assert!(OrientedTree::new(3, vec![(0, 1)]).is_err());
        assert!(OrientedTree::new(3, vec![(0, 1), (1, 0)]).is_err());
        assert!(OrientedTree::new(3, vec![(0, 1), (0, 3)]).is_err());
        assert!(OrientedTree::new(4, vec![(0, 1), (1, 2), (2, 3)]).is_ok());
        assert!(OrientedTree::new(4, vec![(0, 1), (2, 3), (3, 2)]).is_err());
        assert!(OrientedTree::new(2, vec![(0, 0)]).is_err());
    }

    #[test]
    fn enumeration_counts_match_the_isomorphism_oracle() {
        assert_eq!(enumerate_trees(2).unwrap().len(), 1);
        let up_to_three = enumerate_trees(3).unwrap();
        assert_eq!(up_to_three.len(), 4);

        // Independent oracle at v = 3: all directed labeled trees, classes
        // by pairwise isomorphism testing.
        let mut all: Vec<OrientedTree> = Vec::new();
        let shapes = [
            vec![(0usize, 1usize), (1, 2)],
            vec![(0, 1), (0, 2)],
            vec![(0, 2), (1, 2)],
        ];
        for shape in &shapes {
            for mask in 0..4usize {
                let edges: Vec<(usize, usize)> = shape
                    .iter()
                    .enumerate()
                    .map(|(e, &(a, b))| if (mask >> e) & 1 == 0 { (a, b) } else { (b, a) })
                    .collect();
                if let Ok(t) = OrientedTree::new(3, edges) {
                    all.push(t);
                }
            }
        }
        let mut classes: Vec<OrientedTree> = Vec::new();
        'outer: for t in all {
            for seen in &classes {
                if isomorphic(&t, seen) {
                    continue 'outer;
                }
            }
            classes.push(t);
        }
        assert_eq!(classes.len(), 3);
        assert_eq!(
            up_to_three.iter().filter(|t| t.vertex_count() == 3).count(),
            classes.len()
        );

        // Codes are unique, so the enumeration has no duplicates.
        let four = enumerate_trees(4).unwrap();
        let codes: BTreeSet<Vec<(usize, usize)>> =
            four.iter().map(|t| t.canonical_code()).collect();
        assert_eq!(codes.len(), four.len());
        assert_eq!(four.len(), 1 + 3 + 8);
    }

    fn isomorphic(a: &OrientedTree, b: &OrientedTree) -> bool {
        if a.vertex_count() != b.vertex_count() {
            return false;
        }
        let target: BTreeSet<(usize, usize)> = b.edges().iter().copied().collect();
        let mut perm: Vec<usize> = (0..a.vertex_count()).collect();
        let mut found = false;
        permute_all(&mut perm, 0, &mut |p| {
            if !found {
                let mapped: BTreeSet<(usize, usize)> =
                    a.edges().iter().map(|&(i, j)| (p[i], p[j])).collect();
                found = mapped == target;
            }
        });
        found
    }

    #[test]
    fn zero_signature_single_edge_is_the_empirical_measure() {
        let sys = FiniteSystem::new(
            Array2::from_elem((4, 4), 0.7),
            vec![0.1, 0.35, 0.6, 0.85],
        )
        .unwrap();
        let o = plain_observable(&sys, &edge(), &EdgeSignature::zeros(1)).unwrap();
        let MeasureRep::Atomic(atoms) = o.measure() else {
            panic!("expected atoms")
        };
        assert_eq!(atoms.len(), 4);
        for i in 0..4 {
            assert_eq!(atoms.position(i)[0], sys.x()[i]);
            assert!((atoms.weights()[i] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_agent_swap_kernel_example() {
        let o = plain_observable(&swap_system(), &edge(), &EdgeSignature::ones(1)).unwrap();
        let MeasureRep::Atomic(atoms) = o.measure() else {
            panic!("expected atoms")
        };
        let mut by_pos: BTreeMap<u64, f64> = BTreeMap::new();
        for i in 0..atoms.len() {
            *by_pos.entry(atoms.position(i)[0].to_bits()).or_insert(0.0) += atoms.weights()[i];
        }
        assert_eq!(by_pos.len(), 2);
        assert!((by_pos[&0.0f64.to_bits()] - 0.25).abs() < 1e-15);
        assert!((by_pos[&0.5f64.to_bits()] - 0.25).abs() < 1e-15);
        assert!((o.total_mass() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn distinct_index_variant_matches_the_hand_sum() {
        let o = plain_observable_norep(&swap_system(), &edge(), &EdgeSignature::ones(1)).unwrap();
        let MeasureRep::Atomic(atoms) = o.measure() else {
            panic!("expected atoms")
        };
        // Tuples (0,1) and (1,0) both carry weight 1, scaled by 1/4.
        assert_eq!(atoms.len(), 2);
        assert!((o.total_mass() - 0.5).abs() < 1e-15);
        let o_rep = plain_observable(&swap_system(), &edge(), &EdgeSignature::ones(1)).unwrap();
        // The diagonal weights w_ii vanish here, so both variants agree.
        assert!((o.total_mass() - o_rep.total_mass()).abs() < 1e-15);
    }

    #[test]
    fn single_agent_multi_vertex_norep_observable_is_zero() {
        let sys = FiniteSystem::new(array![[1.0]], vec![0.3]).unwrap();
        let t = OrientedTree::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let o = plain_observable_norep(&sys, &t, &EdgeSignature::ones(2)).unwrap();
        assert_eq!(o.total_mass(), 0.0);
        let MeasureRep::Atomic(atoms) = o.measure() else {
            panic!("expected atoms")
        };
        assert!(atoms.is_empty());
    }

    fn atom_map(o: &Observable) -> BTreeMap<Vec<u64>, f64> {
        let MeasureRep::Atomic(atoms) = o.measure() else {
            panic!("expected atoms")
        };
        let mut map = BTreeMap::new();
        for i in 0..atoms.len() {
            let key: Vec<u64> = atoms.position(i).iter().map(|c| c.to_bits()).collect();
            *map.entry(key).or_insert(0.0) += atoms.weights()[i];
        }
        map
    }

    fn brute_force_tau(
        sys: &FiniteSystem,
        t: &OrientedTree,
        s: &EdgeSignature,
        distinct: bool,
    ) -> BTreeMap<Vec<u64>, f64> {
        let n = sys.n();
        let v = t.vertex_count();
        let heads = t.head_vertices();
        let mut map: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
        let total = n.pow(v as u32);
        for idx in 0..total {
            let mut tuple = vec![0usize; v];
            let mut rem = idx;
            for slot in tuple.iter_mut() {
                *slot = rem % n;
                rem /= n;
            }
            if distinct {
                let set: BTreeSet<usize> = tuple.iter().copied().collect();
                if set.len() != v {
                    continue;
                }
            }
            let mut prod = 1.0;
            for (e, &(i, j)) in t.edges().iter().enumerate() {
                if s.bits()[e] == 1 {
                    prod *= sys.w()[[tuple[i], tuple[j]]];
                }
            }
            if prod == 0.0 {
                continue;
            }
            let key: Vec<u64> = heads.iter().map(|&h| sys.x()[tuple[h]].to_bits()).collect();
            *map.entry(key).or_insert(0.0) += prod / (n as f64).powi(v as i32);
        }
        map
    }

    fn maps_close(a: &BTreeMap<Vec<u64>, f64>, b: &BTreeMap<Vec<u64>, f64>, tol: f64) -> bool {
        let keys: BTreeSet<&Vec<u64>> = a.keys().chain(b.keys()).collect();
        keys.into_iter().all(|k| {
            let va = a.get(k).copied().unwrap_or(0.0);
            let vb = b.get(k).copied().unwrap_or(0.0);
            (va - vb).abs() <= tol
        })
    }

    #[test]
    fn contraction_agrees_with_brute_force_on_small_systems() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for trial in 0..6 {
            let n = 3 + trial % 3;
            let w = Array2::from_shape_fn((n, n), |_| {
                if rng.random::<f64>() < 0.3 {
                    0.0
                } else {
                    rng.random::<f64>()
                }
            });
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let sys = FiniteSystem::new(w, x).unwrap();
            for t in enumerate_trees(4).unwrap() {
                for s in EdgeSignature::enumerate(t.edge_count()) {
                    let fast = plain_observable(&sys, &t, &s).unwrap();
                    let brute = brute_force_tau(&sys, &t, &s, false);
                    assert!(
                        maps_close(&atom_map(&fast), &brute, 1e-12),
                        "tau mismatch on {} / {}",
                        t.label(),
                        s.label()
                    );
                    let fast_e = plain_observable_norep(&sys, &t, &s).unwrap();
                    let brute_e = brute_force_tau(&sys, &t, &s, true);
                    assert!(
                        maps_close(&atom_map(&fast_e), &brute_e, 1e-12),
                        "tau_e mismatch on {} / {}",
                        t.label(),
                        s.label()
                    );
                }
            }
        }
    }

    #[test]
    fn all_zero_signature_factorizes_into_empirical_products() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 5;
        let w = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let sys = FiniteSystem::new(w, x.clone()).unwrap();
        let t = OrientedTree::new(3, vec![(0, 1), (0, 2)]).unwrap();
        let o = plain_observable(&sys, &t, &EdgeSignature::zeros(2)).unwrap();
        let map = atom_map(&o);
        for (key, &val) in &map {
            assert_eq!(key.len(), 2);
            assert!((val - 1.0 / (n * n) as f64).abs() < 1e-14);
        }
        assert_eq!(map.len(), n * n);
        assert!((o.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn homomorphism_density_matches_explicit_sums() {
        let w = array![[0.0, 1.0], [1.0, 0.0]];
        let t = edge();
        // (1/4)·Σ w_ij = 0.5 with the weight on, 1 with it off.
        assert!(
            (homomorphism_density(&w, &t, &EdgeSignature::ones(1)).unwrap() - 0.5).abs() < 1e-15
        );
        assert!(
            (homomorphism_density(&w, &t, &EdgeSignature::zeros(1)).unwrap() - 1.0).abs() < 1e-15
        );
        let path = OrientedTree::new(3, vec![(0, 1), (1, 2)]).unwrap();
        // Σ_{i,j,k} w_ij w_jk = Σ_j (col sum)(row sum) = 2, over n³ = 8.
        let val = homomorphism_density(&w, &path, &EdgeSignature::ones(2)).unwrap();
        assert!((val - 0.25).abs() < 1e-15);
    }

    #[test]
    fn law_observable_without_noise_reduces_to_the_deterministic_flow() {
        let sys = FiniteSystem::new(
            Array2::from_elem((3, 3), 1.0),
            vec![0.1, 0.4, 0.8],
        )
        .unwrap();
        let c = Coefficients {
            mu: crate::dynamics::Drift::SinDrift { a: 0.3 },
            sigma: crate::dynamics::Interaction::Kuramoto { k: 0.5 },
            nu: 0.0,
        };
        let tg = TimeGrid::with_steps(0.2, 50).unwrap();
        let t = edge();
        let s = EdgeSignature::ones(1);
        let averaged = law_observable(&sys, &c, &tg, &t, &s, 4, 11).unwrap();
        assert_eq!(averaged.variant(), ObservableVariant::TauP);
        let flow = simulate_particles(&sys, &c, &tg, 0).unwrap();
        let direct = plain_observable(&flow, &t, &s).unwrap();
        assert!(maps_close(&atom_map(&averaged), &atom_map(&direct), 1e-12));
        let marginal = law_observable_norep(&sys, &c, &tg, &t, &s, 2, 11).unwrap();
        assert_eq!(marginal.variant(), ObservableVariant::TauM);
    }

    #[test]
    fn single_class_continuum_observable_scales_the_density() {
        let g = 32;
        let density = GridDensity::new(
            (0..g)
                .map(|j| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * (j as f64 + 0.5) / g as f64).cos())
                .collect(),
        )
        .unwrap();
        let c = 0.7;
        let cont = ContinuumSystem::new(vec![1.0], array![[c]], vec![density.clone()]).unwrap();
        let o = continuum_observable(&cont, &edge(), &EdgeSignature::ones(1)).unwrap();
        let MeasureRep::Grid(grid) = o.measure() else {
            panic!("expected a grid")
        };
        for (out, f) in grid.values().iter().zip(density.values()) {
            assert!((out - c * f).abs() < 1e-14);
        }
    }

    #[test]
    fn continuum_zero_signature_tensorizes_the_mixture() {
        let g = 16;
        let mk = |amp: f64| {
            GridDensity::new(
                (0..g)
                    .map(|j| {
                        1.0 + amp
                            * (2.0 * std::f64::consts::PI * (j as f64 + 0.5) / g as f64).sin()
                    })
                    .collect(),
            )
            .unwrap()
        };
        let cont = ContinuumSystem::new(
            vec![0.5, 0.3, 0.2],
            array![[0.9, 0.1, 0.4], [0.1, 0.8, 0.2], [0.4, 0.2, 0.6]],
            vec![mk(0.4), mk(-0.2), mk(0.1)],
        )
        .unwrap();
        let t = OrientedTree::new(3, vec![(0, 1), (0, 2)]).unwrap();
        let o = continuum_observable(&cont, &t, &EdgeSignature::zeros(2)).unwrap();
        let MeasureRep::Grid(grid) = o.measure() else {
            panic!("expected a grid")
        };
        // Mixture density Σ κ_c f_c, tensorized over the two heads.
        let mix: Vec<f64> = (0..g)
            .map(|j| {
                cont.kappa()
                    .iter()
                    .zip(cont.densities())
                    .map(|(k, f)| k * f.values()[j])
                    .sum::<f64>()
            })
            .collect();
        for a in 0..g {
            for b in 0..g {
                assert!((grid.values()[a * g + b] - mix[a] * mix[b]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_recovers_the_two_dirac_constant() {
        let sys_a = FiniteSystem::new(array![[1.0]], vec![0.0]).unwrap();
        let sys_b = FiniteSystem::new(array![[1.0]], vec![0.5]).unwrap();
        let t = edge();
        let s = EdgeSignature::ones(1);
        let oa = plain_observable(&sys_a, &t, &s).unwrap();
        let ob = plain_observable(&sys_b, &t, &s).unwrap();
        let d = observable_distance(&oa, &ob).unwrap();
        assert!((d - 0.4949).abs() < 1e-3, "got {d}");
        assert_eq!(observable_distance(&oa, &oa).unwrap(), 0.0);
    }

    #[test]
    fn binned_distance_path_stays_close_to_the_exact_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let w = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        let xa: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let xb: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let sa = FiniteSystem::new(w.clone(), xa).unwrap();
        let sb = FiniteSystem::new(w, xb).unwrap();
        let t = edge();
        let s = EdgeSignature::ones(1);
        let oa = plain_observable(&sa, &t, &s).unwrap();
        let ob = plain_observable(&sb, &t, &s).unwrap();
        let exact = observable_distance_capped(&oa, &ob, usize::MAX).unwrap();
        let binned = observable_distance_capped(&oa, &ob, 0).unwrap();
        assert!(
            (exact - binned).abs() < 5e-3 * exact.max(0.1),
            "exact {exact} vs binned {binned}"
        );
    }

    #[test]
    fn metric_vanishes_on_identical_systems_and_reports_the_argmax() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = 6;
        let w = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let sys = System::Finite(FiniteSystem::new(w, x).unwrap());
        let report = observable_metric(&sys, &sys, 3, 1.0).unwrap();
        assert!(report.value < 1e-12);
        // 1 tree with 1 edge (2 signatures) + 3 trees with 2 edges (4 each).
        assert_eq!(report.terms.len(), 2 + 12);
        assert!(report.argmax.is_some());

        let csv = report.to_csv();
        assert!(csv.starts_with("tree,signature,vertices,edges,distance,weighted\n"));
        assert_eq!(csv.lines().count(), 1 + report.terms.len());
    }

    #[test]
    fn metric_shrinks_as_rotations_shrink() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let n = 8;
        let w = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        // Generic (non-lattice) states: a lattice maps onto itself under
        // rotation by its spacing, which would break monotonicity.
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let a = System::Finite(FiniteSystem::new(w.clone(), x.clone()).unwrap());
        let mut last = f64::INFINITY;
        for delta in [0.2, 0.1, 0.05, 0.025] {
            let shifted: Vec<f64> = x.iter().map(|&p| p + delta).collect();
            let b = System::Finite(FiniteSystem::new(w.clone(), shifted).unwrap());
            let report = observable_metric(&a, &b, 3, 1.0).unwrap();
            assert!(
                report.value < last,
                "metric did not decrease at delta={delta}"
            );
            last = report.value;
        }
        assert!(last < 0.05);
    }

    #[test]
    fn metric_terms_respect_the_a_priori_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(53);
        let n = 7;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let w = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            System::Finite(FiniteSystem::new(w, x).unwrap())
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let report = observable_metric(&a, &b, 4, 1.0).unwrap();
        for term in &report.terms {
            let cap = 0.5f64.powi(term.tree.edge_count() as i32);
            assert!(
                term.weighted <= cap + 1e-12,
                "term {} exceeded 2^-|e|",
                term.tree.label()
            );
        }
        assert_eq!(
            report.saturated,
            report.argmax.as_ref().unwrap().tree.vertex_count() == 4
        );
    }

    #[test]
    fn metric_is_invariant_under_agent_relabeling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(71);
        let n = 6;
        let w = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let perm = [3usize, 0, 4, 1, 5, 2];
        let pw = Array2::from_shape_fn((n, n), |(i, j)| w[[perm[i], perm[j]]]);
        let px: Vec<f64> = (0..n).map(|i| x[perm[i]]).collect();
        let a = System::Finite(FiniteSystem::new(w, x).unwrap());
        let b = System::Finite(FiniteSystem::new(pw, px).unwrap());
        let report = observable_metric(&a, &b, 3, 1.0).unwrap();
        // Zero up to the noise floor of the bilinear sums under sqrt.
        assert!(report.value < 1e-7, "metric {} should vanish", report.value);
    }

    #[test]
    fn pushforward_duplicates_heads_per_incoming_edge() {
        let sys = swap_system();
        let o = plain_observable(&sys, &edge(), &EdgeSignature::ones(1)).unwrap();
        let pushed = pushforward_to_normal(&o).unwrap();
        assert!(maps_close(&atom_map(&o), &atom_map(&pushed), 0.0));

        let star = OrientedTree::new(3, vec![(0, 2), (1, 2)]).unwrap();
        let sys3 = FiniteSystem::new(
            Array2::from_elem((3, 3), 1.0),
            vec![0.2, 0.5, 0.8],
        )
        .unwrap();
        let o_star = plain_observable(&sys3, &star, &EdgeSignature::ones(2)).unwrap();
        assert_eq!(o_star.arity(), 1);
        let pushed_star = pushforward_to_normal(&o_star).unwrap();
        assert_eq!(pushed_star.arity(), 2);
        assert_eq!(pushed_star.head_vertices(), &[2, 2]);
        let MeasureRep::Atomic(atoms) = pushed_star.measure() else {
            panic!("expected atoms")
        };
        for i in 0..atoms.len() {
            let p = atoms.position(i);
            assert_eq!(p[0], p[1]);
        }
        assert!((pushed_star.total_mass() - o_star.total_mass()).abs() < 1e-15);

        let grid = continuum_observable(
            &ContinuumSystem::new(
                vec![1.0],
                array![[1.0]],
                vec![GridDensity::uniform(8)],
            )
            .unwrap(),
            &edge(),
            &EdgeSignature::ones(1),
        )
        .unwrap();
        assert!(pushforward_to_normal(&grid).is_err());
    }

    #[test]
    fn observables_serialize_with_tree_and_measure_payload() {
        let o = plain_observable(&swap_system(), &edge(), &EdgeSignature::ones(1)).unwrap();
        let v = o.to_json();
        assert_eq!(v["tree"]["vertices"], 2);
        assert_eq!(v["signature"][0], 1);
        assert_eq!(v["variant"], "tau");
        assert_eq!(v["measure"]["kind"], "atomic");
        assert_eq!(v["measure"]["weights"].as_array().unwrap().len(), 2);
    }
}
