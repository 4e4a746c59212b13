//! The Oz dependence graph: nodes are the unique passes of a pipeline, edges
//! record which passes run next to each other, and high-degree nodes anchor
//! the walks that become the graph-derived action space.
//!
//! Published descriptions of this construction are ambiguous about which way
//! the edges point, which degree counts, and whether a walk keeps the
//! critical node it stops at. [`search_conventions`] enumerates every
//! combination and [`WalkConvention::resolved`] freezes the single one that
//! reproduces both the published critical degrees (simplifycfg 11,
//! instcombine 10, loop-simplify 8 at k=8) and the published 34 sub-sequences
//! from the bundled `Oz` schedule:
//!
//! - edges run in execution order (earlier pass -> later pass);
//! - a node's degree is its distinct in-neighbors plus distinct
//!   out-neighbors;
//! - a walk stops at the first critical node it reaches and drops it, unless
//!   the edge into it occurs only as the closing pair of the pipeline (in
//!   `Oz`: div-rem-pairs -> simplifycfg), in which case the terminal stays;
//! - a walk that passes through the inliner is emitted with `barrier`
//!   appended, mirroring the pass-manager boundary the stock schedule places
//!   after the inliner group.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{ActionSpace, ActionSpaceKind, CatalogError, PassId, PassPipeline};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OdgError {
    #[error("pipeline contains no passes")]
    EmptyPipeline,
    #[error("no node reaches the critical-degree threshold k={0}")]
    NoCriticalNodes(u32),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

/// Which way an adjacent pipeline pair (u, v) is stored as an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// u -> v, execution order.
    Forward,
    /// v -> u, dependence order (the later pass points at what preceded it).
    Reverse,
}

/// Degree statistic used for the critical-node threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegreeMeasure {
    InDistinct,
    OutDistinct,
    TotalDistinct,
    InMultiplicity,
    OutMultiplicity,
    TotalMultiplicity,
}

impl DegreeMeasure {
    pub const ALL: [DegreeMeasure; 6] = [
        DegreeMeasure::InDistinct,
        DegreeMeasure::OutDistinct,
        DegreeMeasure::TotalDistinct,
        DegreeMeasure::InMultiplicity,
        DegreeMeasure::OutMultiplicity,
        DegreeMeasure::TotalMultiplicity,
    ];
}

/// What happens to the critical node that terminates a walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalRule {
    /// The terminating critical node is kept in the emitted sub-sequence.
    Include,
    /// The terminating critical node is dropped.
    Exclude,
    /// Dropped, unless the edge into it only ever closes the pipeline
    /// (its target occurrence is the final pass), in which case it is kept.
    ExcludeUnlessClosing,
}

/// Append `append` to any emitted walk that contains `trigger`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarrierRule {
    pub trigger: PassId,
    pub append: PassId,
}

impl BarrierRule {
    /// The inliner boundary: walks through `inline` end with `barrier`.
    pub fn inliner() -> Self {
        BarrierRule {
            trigger: PassId::parse("inline").unwrap(),
            append: PassId::parse("barrier").unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkConvention {
    pub orientation: Orientation,
    pub degree: DegreeMeasure,
    pub terminal: TerminalRule,
    pub barrier: Option<BarrierRule>,
}

impl WalkConvention {
    /// The convention the bundled tables pin down; see the module docs.
    pub fn resolved() -> Self {
        WalkConvention {
            orientation: Orientation::Forward,
            degree: DegreeMeasure::TotalDistinct,
            terminal: TerminalRule::ExcludeUnlessClosing,
            barrier: Some(BarrierRule::inliner()),
        }
    }
}

impl Default for WalkConvention {
    fn default() -> Self {
        WalkConvention::resolved()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct EdgeInfo {
    multiplicity: u32,
    /// True iff every pipeline occurrence of this adjacent pair has the
    /// target as the final pass, i.e. the edge never continues anywhere.
    closing_only: bool,
}

/// Directed simple graph over unique passes with edge multiplicities and a
/// critical-node set. Immutable once built.
#[derive(Debug, Clone)]
pub struct Odg {
    nodes: BTreeSet<PassId>,
    /// Adjacency: from -> (to -> edge info). BTree maps keep every
    /// traversal and render deterministic.
    edges: BTreeMap<PassId, BTreeMap<PassId, EdgeInfo>>,
    threshold: u32,
    critical: BTreeSet<PassId>,
    convention: WalkConvention,
}

/// All six degree statistics for one node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Degrees {
    pub in_distinct: u32,
    pub out_distinct: u32,
    pub total_distinct: u32,
    pub in_multiplicity: u32,
    pub out_multiplicity: u32,
    pub total_multiplicity: u32,
}

impl Degrees {
    pub fn get(&self, measure: DegreeMeasure) -> u32 {
        match measure {
            DegreeMeasure::InDistinct => self.in_distinct,
            DegreeMeasure::OutDistinct => self.out_distinct,
            DegreeMeasure::TotalDistinct => self.total_distinct,
            DegreeMeasure::InMultiplicity => self.in_multiplicity,
            DegreeMeasure::OutMultiplicity => self.out_multiplicity,
            DegreeMeasure::TotalMultiplicity => self.total_multiplicity,
        }
    }
}

/// Per-node degree table, so the convention choice is auditable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeReport {
    rows: BTreeMap<PassId, Degrees>,
}

impl DegreeReport {
    pub fn get(&self, pass: &PassId) -> Degrees {
        self.rows.get(pass).copied().unwrap_or_default()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&PassId, &Degrees)> {
        self.rows.iter()
    }
}

/// One enumerated walk. `passes` is the emitted sub-sequence (terminal
/// handling and barrier appending already applied); `terminal` records the
/// critical node that stopped the traversal whether or not it was kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Walk {
    pub passes: Vec<PassId>,
    pub start: PassId,
    pub terminal: PassId,
}

/// Walks sorted lexicographically by pass names and deduplicated by emitted
/// sequence, so enumeration output is byte-stable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkSet {
    walks: Vec<Walk>,
}

impl WalkSet {
    pub fn walks(&self) -> &[Walk] {
        &self.walks
    }

    pub fn len(&self) -> usize {
        self.walks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.walks.is_empty()
    }

    pub fn to_action_space(&self) -> Result<ActionSpace, CatalogError> {
        ActionSpace::new(
            ActionSpaceKind::Odg,
            self.walks.iter().map(|w| w.passes.clone()).collect(),
        )
    }
}

/// Builds the dependence graph from a pipeline.
///
/// Consecutive equal passes contribute no edge; parallel edges collapse into
/// one with a multiplicity counter. The critical set is every node whose
/// `convention.degree` statistic is `>= k`.
pub fn build_odg(
    pipeline: &PassPipeline,
    k: u32,
    convention: WalkConvention,
) -> Result<Odg, OdgError> {
    let passes = pipeline.passes();
    if passes.is_empty() {
        return Err(OdgError::EmptyPipeline);
    }
    let nodes: BTreeSet<PassId> = passes.iter().cloned().collect();
    let mut edges: BTreeMap<PassId, BTreeMap<PassId, EdgeInfo>> = BTreeMap::new();
    let last = passes.len() - 1;
    for i in 0..last {
        let (u, v) = (&passes[i], &passes[i + 1]);
        if u == v {
            continue;
        }
        let (from, to) = match convention.orientation {
            Orientation::Forward => (u.clone(), v.clone()),
            Orientation::Reverse => (v.clone(), u.clone()),
        };
        let closes_here = i + 1 == last;
        edges
            .entry(from)
            .or_default()
            .entry(to)
            .and_modify(|e| {
                e.multiplicity += 1;
                e.closing_only &= closes_here;
            })
            .or_insert(EdgeInfo {
                multiplicity: 1,
                closing_only: closes_here,
            });
    }

    let mut graph = Odg {
        nodes,
        edges,
        threshold: k,
        critical: BTreeSet::new(),
        convention,
    };
    let report = degree_report(&graph);
    graph.critical = graph
        .nodes
        .iter()
        .filter(|n| report.get(n).get(graph.convention.degree) >= k)
        .cloned()
        .collect();
    Ok(graph)
}

impl Odg {
    /// Direct construction for tests and tools that already know the
    /// critical set. Edges are (from, to, multiplicity, closing_only).
    pub fn from_parts(
        nodes: &[&str],
        edges: &[(&str, &str, u32, bool)],
        critical: &[&str],
        k: u32,
        convention: WalkConvention,
    ) -> Self {
        let parse = |s: &str| PassId::parse(s).expect("valid pass name");
        let mut node_set: BTreeSet<PassId> = nodes.iter().map(|n| parse(n)).collect();
        let mut edge_map: BTreeMap<PassId, BTreeMap<PassId, EdgeInfo>> = BTreeMap::new();
        for (u, v, m, closing) in edges {
            let (u, v) = (parse(u), parse(v));
            node_set.insert(u.clone());
            node_set.insert(v.clone());
            edge_map.entry(u).or_default().insert(
                v,
                EdgeInfo {
                    multiplicity: *m,
                    closing_only: *closing,
                },
            );
        }
        Odg {
            nodes: node_set,
            edges: edge_map,
            threshold: k,
            critical: critical.iter().map(|n| parse(n)).collect(),
            convention,
        }
    }

    pub fn nodes(&self) -> &BTreeSet<PassId> {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeMap::len).sum()
    }

    pub fn critical(&self) -> &BTreeSet<PassId> {
        &self.critical
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    pub fn convention(&self) -> &WalkConvention {
        &self.convention
    }

    pub fn edge_multiplicity(&self, from: &PassId, to: &PassId) -> u32 {
        self.edges
            .get(from)
            .and_then(|m| m.get(to))
            .map_or(0, |e| e.multiplicity)
    }

    fn out_neighbors<'a>(
        &'a self,
        node: &PassId,
    ) -> impl Iterator<Item = (&'a PassId, &'a EdgeInfo)> {
        self.edges.get(node).into_iter().flatten()
    }

    fn edge_iter(&self) -> impl Iterator<Item = (&PassId, &PassId, &EdgeInfo)> {
        self.edges
            .iter()
            .flat_map(|(u, vs)| vs.iter().map(move |(v, e)| (u, v, e)))
    }
}

/// Computes all six degree statistics for every node of `g`.
pub fn degree_report(g: &Odg) -> DegreeReport {
    let mut rows: BTreeMap<PassId, Degrees> = g
        .nodes
        .iter()
        .map(|n| (n.clone(), Degrees::default()))
        .collect();
    for (u, v, e) in g.edge_iter() {
        {
            let du = rows.entry(u.clone()).or_default();
            du.out_distinct += 1;
            du.out_multiplicity += e.multiplicity;
        }
        let dv = rows.entry(v.clone()).or_default();
        dv.in_distinct += 1;
        dv.in_multiplicity += e.multiplicity;
    }
    for d in rows.values_mut() {
        d.total_distinct = d.in_distinct + d.out_distinct;
        d.total_multiplicity = d.in_multiplicity + d.out_multiplicity;
    }
    DegreeReport { rows }
}

/// Enumerates every node-simple walk that starts at a critical node and runs
/// until it steps into a critical node (see [`TerminalRule`] for what happens
/// to that terminal). Paths that dead-end without reaching a critical node
/// are discarded. Output is sorted lexicographically by pass names and
/// deduplicated by emitted sequence.
pub fn enumerate_subsequences(g: &Odg) -> Result<WalkSet, OdgError> {
    if g.critical.is_empty() {
        return Err(OdgError::NoCriticalNodes(g.threshold));
    }
    let mut walks: Vec<Walk> = Vec::new();
    for start in &g.critical {
        let mut visited: BTreeSet<PassId> = BTreeSet::new();
        visited.insert(start.clone());
        let mut path = vec![start.clone()];
        descend(g, &mut path, &mut visited, &mut walks);
    }
    for w in &mut walks {
        if let Some(rule) = &g.convention.barrier {
            if w.passes.contains(&rule.trigger) && !w.passes.contains(&rule.append) {
                w.passes.push(rule.append.clone());
            }
        }
    }
    walks.sort_by(|a, b| a.passes.cmp(&b.passes).then_with(|| a.terminal.cmp(&b.terminal)));
    walks.dedup_by(|a, b| a.passes == b.passes);
    Ok(WalkSet { walks })
}

fn descend(g: &Odg, path: &mut Vec<PassId>, visited: &mut BTreeSet<PassId>, out: &mut Vec<Walk>) {
    let node = path.last().expect("non-empty path").clone();
    let successors: Vec<(PassId, EdgeInfo)> = g
        .out_neighbors(&node)
        .map(|(v, e)| (v.clone(), *e))
        .collect();
    for (next, edge) in successors {
        if g.critical.contains(&next) {
            let include = match g.convention.terminal {
                TerminalRule::Include => true,
                TerminalRule::Exclude => false,
                TerminalRule::ExcludeUnlessClosing => edge.closing_only,
            };
            let mut passes = path.clone();
            if include {
                passes.push(next.clone());
            }
            out.push(Walk {
                passes,
                start: path[0].clone(),
                terminal: next,
            });
        } else if !visited.contains(&next) {
            visited.insert(next.clone());
            path.push(next);
            descend(g, path, visited, out);
            let popped = path.pop().expect("pushed above");
            visited.remove(&popped);
        }
    }
}

/// Renders the graph as DOT. Critical nodes are drawn as filled boxes; edge
/// labels carry multiplicities. Output is byte-stable for identical graphs.
pub fn export_dot(g: &Odg) -> String {
    let mut out = String::from("digraph odg {\n");
    out.push_str("  rankdir=LR;\n  node [shape=ellipse];\n");
    for node in &g.nodes {
        if g.critical.contains(node) {
            let _ = writeln!(
                out,
                "  \"{node}\" [shape=box, style=filled, fillcolor=lightblue];"
            );
        } else {
            let _ = writeln!(out, "  \"{node}\";");
        }
    }
    for (u, v, e) in g.edge_iter() {
        let _ = writeln!(out, "  \"{u}\" -> \"{v}\" [label=\"{}\"];", e.multiplicity);
    }
    out.push_str("}\n");
    out
}

/// Outcome of trying one convention against the published ground truth.
#[derive(Debug, Clone)]
pub struct ConventionFinding {
    pub convention: WalkConvention,
    pub critical_degrees_match: bool,
    pub walks_match: bool,
}

/// Tries every orientation x degree measure x terminal rule x barrier rule
/// against the expected critical degrees and the expected sub-sequence set,
/// and reports each combination. Used by tests to show the frozen
/// [`WalkConvention::resolved`] is the unique full match.
pub fn search_conventions(
    pipeline: &PassPipeline,
    k: u32,
    expected_degrees: &[(&str, u32)],
    expected_walks: &ActionSpace,
) -> Vec<ConventionFinding> {
    let expected_set: BTreeSet<Vec<PassId>> = expected_walks
        .subsequences()
        .iter()
        .map(|s| s.passes.clone())
        .collect();
    let expected_critical: BTreeSet<PassId> = expected_degrees
        .iter()
        .map(|(n, _)| PassId::parse(n).unwrap())
        .collect();

    let mut findings = Vec::new();
    for orientation in [Orientation::Forward, Orientation::Reverse] {
        for degree in DegreeMeasure::ALL {
            for terminal in [
                TerminalRule::Include,
                TerminalRule::Exclude,
                TerminalRule::ExcludeUnlessClosing,
            ] {
                for barrier in [None, Some(BarrierRule::inliner())] {
                    let convention = WalkConvention {
                        orientation,
                        degree,
                        terminal,
                        barrier: barrier.clone(),
                    };
                    let graph = match build_odg(pipeline, k, convention.clone()) {
                        Ok(g) => g,
                        Err(_) => continue,
                    };
                    let report = degree_report(&graph);
                    let degrees_ok = graph.critical == expected_critical
                        && expected_degrees.iter().all(|(name, want)| {
                            let id = PassId::parse(name).unwrap();
                            report.get(&id).get(degree) == *want
                        });
                    let walks_ok = match enumerate_subsequences(&graph) {
                        Ok(ws) => {
                            let got: BTreeSet<Vec<PassId>> =
                                ws.walks().iter().map(|w| w.passes.clone()).collect();
                            got == expected_set
                        }
                        Err(_) => false,
                    };
                    findings.push(ConventionFinding {
                        convention,
                        critical_degrees_match: degrees_ok,
                        walks_match: walks_ok,
                    });
                }
            }
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{odg_action_space, oz_pipeline};

    fn pid(s: &str) -> PassId {
        PassId::parse(s).unwrap()
    }

    fn toy(pipeline: &[&str], k: u32) -> Odg {
        let text = pipeline.iter().map(|p| format!("-{p}")).collect::<Vec<_>>().join(" ");
        let p = PassPipeline::parse(&text, "toy").unwrap();
        build_odg(&p, k, WalkConvention::resolved()).unwrap()
    }

    #[test]
    fn pair_pipeline_builds_one_edge() {
        let g = toy(&["a", "b"], 1);
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.edge_multiplicity(&pid("a"), &pid("b")), 1);
        // Forward orientation with total-distinct degree: both nodes score 1.
        assert_eq!(g.critical().len(), 2);
    }

    #[test]
    fn consecutive_repeats_add_no_self_loop() {
        let g = toy(&["a", "a", "b"], 1);
        let pair = toy(&["a", "b"], 1);
        assert_eq!(g.edge_count(), pair.edge_count());
        assert_eq!(g.edge_multiplicity(&pid("a"), &pid("a")), 0);
        assert_eq!(g.edge_multiplicity(&pid("a"), &pid("b")), 1);
    }

    #[test]
    fn degree_report_counts_toy_cycle() {
        let g = toy(&["a", "b", "c", "a"], 1);
        let report = degree_report(&g);
        for n in ["a", "b", "c"] {
            let d = report.get(&pid(n));
            assert_eq!(
                (d.in_distinct, d.out_distinct, d.total_distinct),
                (1, 1, 2),
                "node {n}"
            );
            assert_eq!(
                (d.in_multiplicity, d.out_multiplicity, d.total_multiplicity),
                (1, 1, 2),
                "node {n}"
            );
        }
    }

    #[test]
    fn degree_report_empty_edges_all_zero() {
        let g = Odg::from_parts(&["a", "b"], &[], &[], 1, WalkConvention::resolved());
        let report = degree_report(&g);
        assert_eq!(report.get(&pid("a")), Degrees::default());
        assert_eq!(report.get(&pid("b")), Degrees::default());
    }

    #[test]
    fn oz_critical_nodes_have_published_degrees() {
        let g = build_odg(oz_pipeline(), 8, WalkConvention::resolved()).unwrap();
        let want: BTreeSet<PassId> = ["simplifycfg", "instcombine", "loop-simplify"]
            .iter()
            .map(|n| pid(n))
            .collect();
        assert_eq!(g.critical(), &want);
        let report = degree_report(&g);
        assert_eq!(report.get(&pid("simplifycfg")).total_distinct, 11);
        assert_eq!(report.get(&pid("instcombine")).total_distinct, 10);
        assert_eq!(report.get(&pid("loop-simplify")).total_distinct, 8);
    }

    #[test]
    fn empty_pipeline_rejected() {
        let p = PassPipeline::from_passes(vec![pid("a")], "t").unwrap();
        // Single node, no edges: build succeeds, k=1 finds no critical nodes.
        let g = build_odg(&p, 1, WalkConvention::resolved()).unwrap();
        assert!(g.critical().is_empty());
        assert_eq!(
            enumerate_subsequences(&g).unwrap_err(),
            OdgError::NoCriticalNodes(1)
        );
    }

    #[test]
    fn walk_returns_to_start_keeps_closing_terminal() {
        // As if built from the pipeline [a, b, a]: the b->a pair only occurs
        // as the closing pair, so the walk keeps its terminal: [a, b, a].
        let g = Odg::from_parts(
            &[],
            &[("a", "b", 1, false), ("b", "a", 1, true)],
            &["a"],
            1,
            WalkConvention::resolved(),
        );
        let ws = enumerate_subsequences(&g).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws.walks()[0].passes, vec![pid("a"), pid("b"), pid("a")]);
        assert_eq!(ws.walks()[0].terminal, pid("a"));
    }

    #[test]
    fn walk_returns_to_start_include_rule() {
        let include = WalkConvention {
            terminal: TerminalRule::Include,
            ..WalkConvention::resolved()
        };
        let g = Odg::from_parts(
            &[],
            &[("a", "b", 1, false), ("b", "a", 1, false)],
            &["a"],
            1,
            include,
        );
        let ws = enumerate_subsequences(&g).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws.walks()[0].passes, vec![pid("a"), pid("b"), pid("a")]);
    }

    #[test]
    fn critical_node_without_out_edges_yields_empty_walkset() {
        let g = Odg::from_parts(
            &["a", "b"],
            &[("b", "a", 1, false)],
            &["a"],
            1,
            WalkConvention::resolved(),
        );
        let ws = enumerate_subsequences(&g).unwrap();
        assert!(ws.is_empty());
    }

    #[test]
    fn oz_walks_reproduce_published_34() {
        let g = build_odg(oz_pipeline(), 8, WalkConvention::resolved()).unwrap();
        let ws = enumerate_subsequences(&g).unwrap();
        assert_eq!(ws.len(), 34);
        let got: BTreeSet<Vec<PassId>> = ws.walks().iter().map(|w| w.passes.clone()).collect();
        let want: BTreeSet<Vec<PassId>> = odg_action_space()
            .subsequences()
            .iter()
            .map(|s| s.passes.clone())
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn every_walk_starts_critical_and_is_node_simple() {
        let g = build_odg(oz_pipeline(), 8, WalkConvention::resolved()).unwrap();
        let ws = enumerate_subsequences(&g).unwrap();
        for w in ws.walks() {
            assert!(g.critical().contains(&w.start));
            assert_eq!(w.passes[0], w.start);
            // Node-simple up to the permitted terminal revisit and the
            // appended barrier (which never duplicates an interior node).
            let mut seen = BTreeSet::new();
            for (i, p) in w.passes.iter().enumerate() {
                let revisit_of_start = i + 1 == w.passes.len() && p == &w.start;
                assert!(seen.insert(p.clone()) || revisit_of_start, "walk {:?}", w.passes);
            }
        }
    }

    #[test]
    fn every_emitted_step_is_a_graph_edge() {
        let g = build_odg(oz_pipeline(), 8, WalkConvention::resolved()).unwrap();
        let ws = enumerate_subsequences(&g).unwrap();
        let barrier = pid("barrier");
        let inline = pid("inline");
        for w in ws.walks() {
            for pair in w.passes.windows(2) {
                let appended_barrier = pair[1] == barrier && w.passes.contains(&inline);
                assert!(
                    g.edge_multiplicity(&pair[0], &pair[1]) >= 1 || appended_barrier,
                    "missing edge {} -> {} in {:?}",
                    pair[0],
                    pair[1],
                    w.passes
                );
            }
        }
    }

    #[test]
    fn enumeration_and_dot_are_deterministic() {
        let g1 = build_odg(oz_pipeline(), 8, WalkConvention::resolved()).unwrap();
        let g2 = build_odg(oz_pipeline(), 8, WalkConvention::resolved()).unwrap();
        assert_eq!(
            enumerate_subsequences(&g1).unwrap(),
            enumerate_subsequences(&g2).unwrap()
        );
        assert_eq!(export_dot(&g1), export_dot(&g2));
    }

    #[test]
    fn dot_renders_nodes_edges_and_critical_styling() {
        let g = toy(&["a", "b"], 1);
        let dot = export_dot(&g);
        assert!(dot.contains("\"a\""));
        assert!(dot.contains("\"b\""));
        assert!(dot.contains("\"a\" -> \"b\" [label=\"1\"]"));
        assert!(dot.contains("fillcolor"));

        let empty = Odg::from_parts(&[], &[], &[], 1, WalkConvention::resolved());
        assert_eq!(
            export_dot(&empty),
            "digraph odg {\n  rankdir=LR;\n  node [shape=ellipse];\n}\n"
        );

        let oz = build_odg(oz_pipeline(), 8, WalkConvention::resolved()).unwrap();
        let oz_dot = export_dot(&oz);
        let node_lines = oz_dot
            .lines()
            .filter(|l| l.starts_with("  \"") && !l.contains("->"))
            .count();
        assert_eq!(node_lines, 54);
    }

    #[test]
    fn brute_force_recount_matches_multiplicities_on_random_pipelines() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let alphabet = ["a", "b", "c", "d", "e", "f"];
        for _ in 0..200 {
            let len = rng.gen_range(2..=20);
            let seq: Vec<&str> = (0..len).map(|_| alphabet[rng.gen_range(0..6)]).collect();
            let g = toy(&seq, 1);
            // Independent recount straight off the token sequence.
            let mut counts: BTreeMap<(PassId, PassId), u32> = BTreeMap::new();
            for w in seq.windows(2) {
                if w[0] != w[1] {
                    *counts.entry((pid(w[0]), pid(w[1]))).or_default() += 1;
                }
            }
            assert_eq!(g.edge_count(), counts.len());
            for ((u, v), m) in counts {
                assert_eq!(g.edge_multiplicity(&u, &v), m);
            }
        }
    }

    #[test]
    fn convention_search_has_unique_full_match() {
        let findings = search_conventions(
            oz_pipeline(),
            8,
            &[("simplifycfg", 11), ("instcombine", 10), ("loop-simplify", 8)],
            odg_action_space(),
        );
        let full: Vec<_> = findings
            .iter()
            .filter(|f| f.critical_degrees_match && f.walks_match)
            .collect();
        assert_eq!(full.len(), 1, "expected exactly one matching convention");
        assert_eq!(full[0].convention, WalkConvention::resolved());
    }
}
