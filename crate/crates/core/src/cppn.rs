//! Compositional pattern producing networks: the indirect genome.
//!
//! A genome is a DAG with three inputs (`x`, `y`, distance to centre), seven
//! identity outputs (one per [`VoxelType`](crate::voxel::VoxelType), in order)
//! and any number of hidden nodes carrying one of eight activations. Incoming
//! values are weighted and summed.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const N_INPUTS: usize = 3;
pub const N_OUTPUTS: usize = 7;
pub const GENOME_FORMAT_VERSION: u32 = 1;

const SQUARE_CLAMP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CppnError {
    #[error("graph contains a cycle")]
    CyclicGraph,
    #[error("edge references unknown node {0}")]
    UnknownNode(u32),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(u32, u32),
    #[error("edge {0} -> {1} enters an input or leaves an output")]
    BadEdge(u32, u32),
    #[error("malformed genome: {0}")]
    Malformed(String),
    #[error("parse error: {0}")]
    ParseError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sin,
    Abs,
    Square,
    Sqrt,
    NegSin,
    NegAbs,
    NegSquare,
    NegSqrt,
}

impl Activation {
    pub const ALL: [Activation; 8] = [
        Activation::Sin,
        Activation::Abs,
        Activation::Square,
        Activation::Sqrt,
        Activation::NegSin,
        Activation::NegAbs,
        Activation::NegSquare,
        Activation::NegSqrt,
    ];

    pub fn apply(self, v: f64) -> f64 {
        let sq = |v: f64| {
            let c = v.clamp(-SQUARE_CLAMP, SQUARE_CLAMP);
            c * c
        };
        match self {
            Activation::Sin => v.sin(),
            Activation::Abs => v.abs(),
            Activation::Square => sq(v),
            Activation::Sqrt => v.abs().sqrt(),
            Activation::NegSin => -v.sin(),
            Activation::NegAbs => -v.abs(),
            Activation::NegSquare => -sq(v),
            Activation::NegSqrt => -v.abs().sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Hidden,
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: u32,
    pub kind: NodeKind,
    /// Only hidden nodes carry an activation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: u32,
    pub dst: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Genome {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    /// Seed of the random stream that produced this genome.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MutationKind {
    AddNode,
    RemoveNode,
    AddEdge,
    RemoveEdge,
    ChangeActivation,
    ChangeWeight,
}

impl MutationKind {
    pub const ALL: [MutationKind; 6] = [
        MutationKind::AddNode,
        MutationKind::RemoveNode,
        MutationKind::AddEdge,
        MutationKind::RemoveEdge,
        MutationKind::ChangeActivation,
        MutationKind::ChangeWeight,
    ];
}

/// Topologically ordered evaluation plan.
#[derive(Debug, Clone)]
pub struct Compiled {
    order: Vec<usize>,
    /// Incoming `(source slot, weight)` per node slot, in edge-list order.
    incoming: Vec<Vec<(usize, f64)>>,
    activation: Vec<Option<Activation>>,
    kind: Vec<NodeKind>,
    inputs: [usize; N_INPUTS],
    outputs: [usize; N_OUTPUTS],
}

impl Compiled {
    pub fn eval(&self, x: f64, y: f64, d: f64) -> [f64; N_OUTPUTS] {
        self.eval_with(x, y, d, &mut Vec::new())
    }

    pub fn eval_with(&self, x: f64, y: f64, d: f64, values: &mut Vec<f64>) -> [f64; N_OUTPUTS] {
        values.clear();
        values.resize(self.kind.len(), 0.0);
        let supplied = [x, y, d];
        for (slot, &v) in self.inputs.iter().zip(&supplied) {
            values[*slot] = v;
        }
        for &n in &self.order {
            if self.kind[n] == NodeKind::Input {
                continue;
            }
            if self.incoming[n].is_empty() {
                values[n] = 0.0;
                continue;
            }
            let sum: f64 = self.incoming[n].iter().map(|&(s, w)| w * values[s]).sum();
            values[n] = match self.activation[n] {
                Some(act) if self.kind[n] == NodeKind::Hidden => act.apply(sum),
                _ => sum,
            };
        }
        self.outputs.map(|slot| values[slot])
    }
}

impl Genome {
    pub fn input_id(i: usize) -> u32 {
        i as u32
    }

    pub fn output_id(i: usize) -> u32 {
        (N_INPUTS + i) as u32
    }

    /// Inputs and outputs only, no edges.
    pub fn minimal(seed: u64) -> Genome {
        let mut nodes = Vec::with_capacity(N_INPUTS + N_OUTPUTS);
        for i in 0..N_INPUTS {
            nodes.push(Node { id: Self::input_id(i), kind: NodeKind::Input, activation: None });
        }
        for i in 0..N_OUTPUTS {
            nodes.push(Node { id: Self::output_id(i), kind: NodeKind::Output, activation: None });
        }
        Genome { nodes, edges: Vec::new(), seed }
    }

    fn next_id(&self) -> u32 {
        self.nodes.iter().map(|n| n.id).max().map_or(0, |m| m + 1)
    }

    pub fn node(&self, id: u32) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn hidden_ids(&self) -> Vec<u32> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Hidden).map(|n| n.id).collect()
    }

    pub fn add_node(&mut self, kind: NodeKind, activation: Option<Activation>) -> u32 {
        let id = self.next_id();
        self.nodes.push(Node { id, kind, activation });
        id
    }

    /// True if `to` is reachable from `from` along edges.
    fn reaches(&self, from: u32, to: u32) -> bool {
        let mut stack = vec![from];
        let mut seen = vec![from];
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            for e in self.edges.iter().filter(|e| e.src == n) {
                if !seen.contains(&e.dst) {
                    seen.push(e.dst);
                    stack.push(e.dst);
                }
            }
        }
        false
    }

    fn edge_allowed(&self, src: u32, dst: u32) -> Result<(), CppnError> {
        let s = self.node(src).ok_or(CppnError::UnknownNode(src))?;
        let d = self.node(dst).ok_or(CppnError::UnknownNode(dst))?;
        if src == dst || s.kind == NodeKind::Output || d.kind == NodeKind::Input {
            return Err(CppnError::BadEdge(src, dst));
        }
        if self.edges.iter().any(|e| e.src == src && e.dst == dst) {
            return Err(CppnError::DuplicateEdge(src, dst));
        }
        if self.reaches(dst, src) {
            return Err(CppnError::CyclicGraph);
        }
        Ok(())
    }

    pub fn add_edge(&mut self, src: u32, dst: u32, weight: f64) -> Result<(), CppnError> {
        self.edge_allowed(src, dst)?;
        self.edges.push(Edge { src, dst, weight });
        Ok(())
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), CppnError> {
        self.compile().map(|_| ())
    }

    pub fn compile(&self) -> Result<Compiled, CppnError> {
        let mut slot: HashMap<u32, usize> = HashMap::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if slot.insert(n.id, i).is_some() {
                return Err(CppnError::Malformed(format!("duplicate node id {}", n.id)));
            }
            let has_act = n.activation.is_some();
            if has_act != (n.kind == NodeKind::Hidden) {
                return Err(CppnError::Malformed(format!("node {} activation does not match its kind", n.id)));
            }
        }
        let mut inputs = [usize::MAX; N_INPUTS];
        let mut outputs = [usize::MAX; N_OUTPUTS];
        for i in 0..N_INPUTS {
            match slot.get(&Self::input_id(i)) {
                Some(&s) if self.nodes[s].kind == NodeKind::Input => inputs[i] = s,
                _ => return Err(CppnError::Malformed(format!("missing input node {i}"))),
            }
        }
        for i in 0..N_OUTPUTS {
            match slot.get(&Self::output_id(i)) {
                Some(&s) if self.nodes[s].kind == NodeKind::Output => outputs[i] = s,
                _ => return Err(CppnError::Malformed(format!("missing output node {i}"))),
            }
        }
        let n_io = self.nodes.iter().filter(|n| n.kind != NodeKind::Hidden).count();
        if n_io != N_INPUTS + N_OUTPUTS {
            return Err(CppnError::Malformed(format!("expected {} input/output nodes, found {n_io}", N_INPUTS + N_OUTPUTS)));
        }

        let n = self.nodes.len();
        let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut outgoing: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut pairs = std::collections::HashSet::new();
        for e in &self.edges {
            let s = *slot.get(&e.src).ok_or(CppnError::UnknownNode(e.src))?;
            let d = *slot.get(&e.dst).ok_or(CppnError::UnknownNode(e.dst))?;
            if s == d || self.nodes[s].kind == NodeKind::Output || self.nodes[d].kind == NodeKind::Input {
                return Err(CppnError::BadEdge(e.src, e.dst));
            }
            if !pairs.insert((e.src, e.dst)) {
                return Err(CppnError::DuplicateEdge(e.src, e.dst));
            }
            if !e.weight.is_finite() {
                return Err(CppnError::Malformed(format!("edge {} -> {} has non-finite weight", e.src, e.dst)));
            }
            incoming[d].push((s, e.weight));
            outgoing[s].push(d);
        }

        // Kahn's algorithm, always releasing the lowest slot first
        let mut indeg: Vec<usize> = incoming.iter().map(|v| v.len()).collect();
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &j in &outgoing[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        if order.len() != n {
            return Err(CppnError::CyclicGraph);
        }
        Ok(Compiled {
            order,
            incoming,
            activation: self.nodes.iter().map(|n| n.activation).collect(),
            kind: self.nodes.iter().map(|n| n.kind).collect(),
            inputs,
            outputs,
        })
    }

    pub fn evaluate(&self, x: f64, y: f64, d: f64) -> Result<[f64; N_OUTPUTS], CppnError> {
        Ok(self.compile()?.eval(x, y, d))
    }

    /// Every `(src, dst)` pair that may be added without breaking an invariant.
    pub fn edge_candidates(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for s in self.nodes.iter().filter(|n| n.kind != NodeKind::Output) {
            for d in self.nodes.iter().filter(|n| n.kind != NodeKind::Input) {
                if self.edge_allowed(s.id, d.id).is_ok() {
                    out.push((s.id, d.id));
                }
            }
        }
        out
    }

    fn applicable(&self, kind: MutationKind) -> bool {
        match kind {
            MutationKind::AddNode | MutationKind::RemoveEdge | MutationKind::ChangeWeight => !self.edges.is_empty(),
            MutationKind::RemoveNode | MutationKind::ChangeActivation => {
                self.nodes.iter().any(|n| n.kind == NodeKind::Hidden)
            }
            MutationKind::AddEdge => !self.edge_candidates().is_empty(),
        }
    }

    /// Applies one specific mutation, or returns `None` if it is inapplicable.
    pub fn apply_mutation<R: Rng + ?Sized>(&self, kind: MutationKind, rng: &mut R) -> Option<Genome> {
        if !self.applicable(kind) {
            return None;
        }
        let mut g = self.clone();
        let normal = |sd: f64| Normal::new(0.0, sd).expect("valid normal");
        match kind {
            MutationKind::AddNode => {
                let i = rng.random_range(0..g.edges.len());
                let old = g.edges.remove(i);
                let act = *Activation::ALL.choose(rng).expect("non-empty");
                let id = g.add_node(NodeKind::Hidden, Some(act));
                g.edges.push(Edge { src: old.src, dst: id, weight: 1.0 });
                g.edges.push(Edge { src: id, dst: old.dst, weight: old.weight });
            }
            MutationKind::RemoveNode => {
                let hidden = g.hidden_ids();
                let id = *hidden.choose(rng).expect("applicable");
                g.nodes.retain(|n| n.id != id);
                g.edges.retain(|e| e.src != id && e.dst != id);
            }
            MutationKind::AddEdge => {
                let cands = g.edge_candidates();
                let &(src, dst) = cands.choose(rng).expect("applicable");
                let weight = normal(1.0).sample(rng);
                g.edges.push(Edge { src, dst, weight });
            }
            MutationKind::RemoveEdge => {
                let i = rng.random_range(0..g.edges.len());
                g.edges.remove(i);
            }
            MutationKind::ChangeActivation => {
                let hidden = g.hidden_ids();
                let id = *hidden.choose(rng).expect("applicable");
                let node = g.nodes.iter_mut().find(|n| n.id == id).expect("exists");
                let current = node.activation;
                let others: Vec<Activation> =
                    Activation::ALL.iter().copied().filter(|&a| Some(a) != current).collect();
                node.activation = Some(*others.choose(rng).expect("seven others"));
            }
            MutationKind::ChangeWeight => {
                let i = rng.random_range(0..g.edges.len());
                g.edges[i].weight += normal(0.5).sample(rng);
            }
        }
        Some(g)
    }

    /// One uniformly drawn mutation; inapplicable draws are redrawn.
    pub fn mutate<R: Rng + ?Sized>(&self, rng: &mut R) -> (Genome, Option<MutationKind>) {
        if !MutationKind::ALL.iter().any(|&k| self.applicable(k)) {
            let mut g = self.clone();
            let src = Self::input_id(rng.random_range(0..N_INPUTS));
            let dst = Self::output_id(rng.random_range(0..N_OUTPUTS));
            let weight = Normal::new(0.0, 1.0).expect("valid normal").sample(rng);
            g.edges.push(Edge { src, dst, weight });
            return (g, None);
        }
        loop {
            let kind = MutationKind::ALL[rng.random_range(0..MutationKind::ALL.len())];
            if let Some(g) = self.apply_mutation(kind, rng) {
                return (g, Some(kind));
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GenomeFile::from(self)).expect("genome serializes")
    }

    pub fn from_json(text: &str) -> Result<Genome, CppnError> {
        let file: GenomeFile = serde_json::from_str(text).map_err(|e| CppnError::ParseError(e.to_string()))?;
        Genome::try_from(file)
    }
}

/// Input-to-output edges each present with probability 1/2, at least one,
/// weights drawn from a standard normal.
pub fn random_genome<R: Rng + ?Sized>(rng: &mut R, seed: u64) -> Genome {
    let mut g = Genome::minimal(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    for i in 0..N_INPUTS {
        for o in 0..N_OUTPUTS {
            if rng.random_bool(0.5) {
                let weight = normal.sample(rng);
                g.edges.push(Edge { src: Genome::input_id(i), dst: Genome::output_id(o), weight });
            }
        }
    }
    if g.edges.is_empty() {
        let pick = rng.random_range(0..N_INPUTS * N_OUTPUTS);
        let weight = normal.sample(rng);
        g.edges.push(Edge {
            src: Genome::input_id(pick / N_OUTPUTS),
            dst: Genome::output_id(pick % N_OUTPUTS),
            weight,
        });
    }
    g
}

/// On-disk genome layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenomeFile {
    pub version: u32,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub seed: u64,
}

impl From<&Genome> for GenomeFile {
    fn from(g: &Genome) -> Self {
        GenomeFile { version: GENOME_FORMAT_VERSION, nodes: g.nodes.clone(), edges: g.edges.clone(), seed: g.seed }
    }
}

impl TryFrom<GenomeFile> for Genome {
    type Error = CppnError;

    fn try_from(f: GenomeFile) -> Result<Genome, CppnError> {
        if f.version != GENOME_FORMAT_VERSION {
            return Err(CppnError::ParseError(format!("unsupported genome version {}", f.version)));
        }
        let g = Genome { nodes: f.nodes, edges: f.edges, seed: f.seed };
        g.validate()?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    #[test]
    fn no_edges_gives_zeros() {
        assert_eq!(Genome::minimal(0).evaluate(0.3, -0.2, 0.5).unwrap(), [0.0; 7]);
    }

    #[test]
    fn single_edge() {
        let mut g = Genome::minimal(0);
        g.add_edge(0, Genome::output_id(0), 2.0).unwrap();
        let out = g.evaluate(0.5, 0.0, 0.0).unwrap();
        assert_eq!(out, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn square_chain() {
        let mut g = Genome::minimal(0);
        let h = g.add_node(NodeKind::Hidden, Some(Activation::Square));
        g.add_edge(0, h, 1.0).unwrap();
        g.add_edge(h, Genome::output_id(3), -1.0).unwrap();
        assert_eq!(g.evaluate(0.5, 0.0, 0.0).unwrap()[3], -0.25);
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Sqrt.apply(-4.0), 2.0);
        assert_eq!(Activation::NegSqrt.apply(9.0), -3.0);
        assert_eq!(Activation::NegAbs.apply(-1.5), -1.5);
        assert_eq!(Activation::Square.apply(1e9), 1e12);
        assert!(Activation::ALL.iter().all(|a| a.apply(0.0) == 0.0));
    }

    #[test]
    fn rejects_bad_edges() {
        let mut g = Genome::minimal(0);
        let a = g.add_node(NodeKind::Hidden, Some(Activation::Sin));
        let b = g.add_node(NodeKind::Hidden, Some(Activation::Abs));
        g.add_edge(a, b, 1.0).unwrap();
        assert_eq!(g.add_edge(b, a, 1.0), Err(CppnError::CyclicGraph));
        assert_eq!(g.add_edge(a, b, 1.0), Err(CppnError::DuplicateEdge(a, b)));
        assert_eq!(g.add_edge(a, 0, 1.0), Err(CppnError::BadEdge(a, 0)));
        assert_eq!(g.add_edge(Genome::output_id(0), a, 1.0), Err(CppnError::BadEdge(3, a)));
        assert_eq!(g.add_edge(a, 99, 1.0), Err(CppnError::UnknownNode(99)));
    }

    #[test]
    fn inapplicable_mutation_is_redrawn() {
        let mut rng = rng_for(&[1]);
        let g = random_genome(&mut rng, 1);
        assert!(g.hidden_ids().is_empty());
        assert!(g.apply_mutation(MutationKind::RemoveNode, &mut rng).is_none());
        assert!(g.apply_mutation(MutationKind::ChangeActivation, &mut rng).is_none());
        for _ in 0..50 {
            let (child, kind) = g.mutate(&mut rng);
            let kind = kind.unwrap();
            assert!(kind != MutationKind::RemoveNode && kind != MutationKind::ChangeActivation);
            assert_ne!(child, g);
            child.validate().unwrap();
        }
    }

    #[test]
    fn mutation_is_deterministic() {
        let g = random_genome(&mut rng_for(&[5]), 5);
        let a = g.mutate(&mut rng_for(&[6]));
        let b = g.mutate(&mut rng_for(&[6]));
        assert_eq!(a, b);
    }

    #[test]
    fn random_genome_stats() {
        let a = random_genome(&mut rng_for(&[9]), 9);
        let b = random_genome(&mut rng_for(&[9]), 9);
        assert_eq!(a, b);
        let mut rng = rng_for(&[10]);
        let mut total = 0usize;
        for _ in 0..1000 {
            let g = random_genome(&mut rng, 0);
            g.validate().unwrap();
            assert!(!g.edges.is_empty());
            assert!(g.hidden_ids().is_empty());
            total += g.edges.len();
        }
        let mean = total as f64 / 1000.0;
        assert!((9.5..=11.5).contains(&mean), "mean edge count {mean}");
    }

    #[test]
    fn serialization() {
        let mut rng = rng_for(&[2]);
        let mut g = random_genome(&mut rng, 2);
        for _ in 0..20 {
            g = g.mutate(&mut rng).0;
        }
        let text = g.to_json();
        let back = Genome::from_json(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json(), text);
        assert!(matches!(Genome::from_json(""), Err(CppnError::ParseError(_))));

        let mut cyclic = GenomeFile::from(&Genome::minimal(0));
        cyclic.nodes.push(Node { id: 10, kind: NodeKind::Hidden, activation: Some(Activation::Sin) });
        cyclic.nodes.push(Node { id: 11, kind: NodeKind::Hidden, activation: Some(Activation::Sin) });
        cyclic.edges.push(Edge { src: 10, dst: 11, weight: 1.0 });
        cyclic.edges.push(Edge { src: 11, dst: 10, weight: 1.0 });
        let text = serde_json::to_string(&cyclic).unwrap();
        assert_eq!(Genome::from_json(&text), Err(CppnError::CyclicGraph));
    }

    #[test]
    fn fallback_when_nothing_applies() {
        // with no edges and no hidden nodes only add-edge applies, so the redraw loop runs
        let g = Genome::minimal(0);
        let (child, kind) = g.mutate(&mut rng_for(&[3]));
        assert_eq!(kind, Some(MutationKind::AddEdge));
        assert_eq!(child.edges.len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn mutation_chains_stay_valid(seed in any::<u64>(), len in 1usize..200) {
                let mut rng = rng_for(&[seed]);
                let mut g = random_genome(&mut rng, seed);
                for _ in 0..len {
                    let (child, _) = g.mutate(&mut rng);
                    prop_assert!(child.validate().is_ok());
                    prop_assert_eq!(child.nodes.iter().filter(|n| n.kind != NodeKind::Hidden).count(), 10);
                    g = child;
                }
                for &(x, y, d) in &[(-1.0, -1.0, 1.0), (0.3, 0.9, 0.2), (1.0, 1.0, 1.0)] {
                    prop_assert!(g.evaluate(x, y, d).unwrap().iter().all(|v| v.is_finite()));
                }
            }
        }
    }
}
