//! Structural mutations over the columnar architecture space.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ExploreError;
use crate::arch::{infer_shapes, ArchSpec, NodeSpec, Op};
use crate::Shape;

pub const MIN_WIDTH: usize = 4;
pub const MAX_WIDTH: usize = 256;
pub const MAX_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    /// Scale one convolution's output channels by 1.25 or 0.8.
    Width,
    /// Duplicate or drop a parallel column feeding a concat.
    Column,
    /// Insert or remove a depthwise-pointwise-ReLU block.
    Block,
    /// Insert or remove an attention condenser.
    Vac,
    /// Swap an AADS block with its neighbour.
    Aads,
}

pub const MUTATION_KINDS: [MutationKind; 5] = [
    MutationKind::Width,
    MutationKind::Column,
    MutationKind::Block,
    MutationKind::Vac,
    MutationKind::Aads,
];

/// Relative frequency of each mutation kind; normalized before use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationWeights {
    pub width: f64,
    pub column: f64,
    pub block: f64,
    pub vac: f64,
    pub aads: f64,
}

impl Default for MutationWeights {
    fn default() -> Self {
        Self {
            width: 0.35,
            column: 0.15,
            block: 0.2,
            vac: 0.15,
            aads: 0.15,
        }
    }
}

impl MutationWeights {
    /// Probabilities in [`MUTATION_KINDS`] order, summing to 1.
    pub fn normalized(&self) -> Result<[f64; 5], ExploreError> {
        let raw = [self.width, self.column, self.block, self.vac, self.aads];
        if raw.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ExploreError::Config(format!("mutation weights must be non-negative: {raw:?}")));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(ExploreError::Config("mutation weights sum to zero".into()));
        }
        Ok(raw.map(|w| w / total))
    }

    fn sample(&self, rng: &mut impl Rng) -> Result<MutationKind, ExploreError> {
        let p = self.normalized()?;
        let mut x: f64 = rng.random();
        for (kind, w) in MUTATION_KINDS.iter().zip(p) {
            if x < w {
                return Ok(*kind);
            }
            x -= w;
        }
        Ok(*MUTATION_KINDS.iter().zip(p).rev().find(|(_, w)| *w > 0.0).expect("some weight is positive").0)
    }
}

/// Produces a structurally valid child that differs from `parent`.
/// Fails after [`MAX_ATTEMPTS`] consecutive invalid or no-op mutations.
pub fn generate(parent: &ArchSpec, weights: &MutationWeights, rng: &mut impl Rng) -> Result<(ArchSpec, MutationKind), ExploreError> {
    let shapes = infer_shapes(parent)?;
    let parent_hash = parent.structural_hash();
    for _ in 0..MAX_ATTEMPTS {
        let kind = weights.sample(rng)?;
        let Some(child) = mutate(parent, &shapes, kind, rng) else {
            continue;
        };
        if infer_shapes(&child).is_ok() && child.structural_hash() != parent_hash {
            return Ok((child, kind));
        }
    }
    Err(ExploreError::Exhausted {
        parent: parent.name.clone(),
        attempts: MAX_ATTEMPTS,
    })
}

/// One attempt at a mutation of the given kind; `None` when the drawn
/// site does not admit it. The result is not shape-checked.
pub fn mutate(spec: &ArchSpec, shapes: &[Shape], kind: MutationKind, rng: &mut impl Rng) -> Option<ArchSpec> {
    let mut g = Graph::new(spec, shapes);
    match kind {
        MutationKind::Width => {
            let sites = g.filter(|n, _| matches!(n.op, Op::Conv { .. } | Op::PointwiseConv { .. }));
            let i = pick(&sites, rng)?;
            let factor = if rng.random::<bool>() { 1.25 } else { 0.8 };
            g.scale_width(*i, factor)?;
        }
        MutationKind::Column => {
            let chains = g.columns();
            let (concat, slot, chain) = pick(&chains, rng)?.clone();
            if rng.random::<bool>() || g.spec.nodes[concat].inputs.len() < 3 {
                g.duplicate_column(concat, &chain);
            } else {
                g.remove_column(concat, slot, &chain);
            }
        }
        MutationKind::Block => {
            let removable = g.separable_blocks();
            let sites = g.spatial_sites();
            if !removable.is_empty() && rng.random::<bool>() {
                let b = pick(&removable, rng)?;
                g.remove_block(b);
            } else {
                let i = pick(&sites, rng)?;
                g.insert_block(*i);
            }
        }
        MutationKind::Vac => {
            let vacs = g.filter(|n, _| matches!(n.op, Op::Vac { .. }));
            let sites: Vec<usize> = g.spatial_sites().into_iter().filter(|&i| g.shapes[i].h >= 2).collect();
            let n_choices = vacs.len() + sites.len();
            if n_choices == 0 {
                return None;
            }
            let k = rng.random_range(0..n_choices);
            if k < vacs.len() {
                g.bypass(&[vacs[k]]);
            } else {
                g.insert_vac(sites[k - vacs.len()]);
            }
        }
        MutationKind::Aads => {
            let swaps = g.aads_swaps();
            let (first, second) = *pick(&swaps, rng)?;
            g.swap(first, second);
        }
    }
    Some(g.finish())
}

fn pick<'a, T>(items: &'a [T], rng: &mut impl Rng) -> Option<&'a T> {
    (!items.is_empty()).then(|| &items[rng.random_range(0..items.len())])
}

/// Mutable view with consumer lists, indexed by node position.
struct Graph<'a> {
    spec: ArchSpec,
    shapes: &'a [Shape],
    removed: HashSet<usize>,
    inserted: Vec<(usize, NodeSpec)>,
    ids: HashSet<String>,
}

impl<'a> Graph<'a> {
    fn new(spec: &ArchSpec, shapes: &'a [Shape]) -> Self {
        Self {
            ids: spec.nodes.iter().map(|n| n.id.clone()).collect(),
            spec: spec.clone(),
            shapes,
            removed: HashSet::new(),
            inserted: Vec::new(),
        }
    }

    fn filter(&self, f: impl Fn(&NodeSpec, Shape) -> bool) -> Vec<usize> {
        (0..self.spec.nodes.len())
            .filter(|&i| f(&self.spec.nodes[i], self.shapes[i]))
            .collect()
    }

    fn index(&self, id: &str) -> usize {
        self.spec.index_of(id).expect("id of an existing node")
    }

    fn consumers(&self, i: usize) -> Vec<usize> {
        let id = &self.spec.nodes[i].id;
        (0..self.spec.nodes.len())
            .filter(|&j| self.spec.nodes[j].inputs.iter().any(|x| x == id))
            .collect()
    }

    fn single_input(&self, i: usize) -> Option<usize> {
        match self.spec.nodes[i].inputs.as_slice() {
            [x] => Some(self.index(x)),
            _ => None,
        }
    }

    /// Nodes after which a spatial block can be inserted.
    fn spatial_sites(&self) -> Vec<usize> {
        self.filter(|n, s| !matches!(n.op, Op::Input | Op::Output | Op::Fc { .. } | Op::Gap) && s.h >= 3 && s.w >= 3)
    }

    fn fresh_id(&mut self, near: usize, kind: &str) -> String {
        let prefix = match &self.spec.nodes[near].column {
            Some(c) => format!("{c}/"),
            None => String::new(),
        };
        let id = (1..)
            .map(|k| format!("{prefix}{kind}_m{k}"))
            .find(|id| !self.ids.contains(id))
            .expect("unbounded search");
        self.ids.insert(id.clone());
        id
    }

    /// Points every consumer of `from` at `to` instead.
    fn redirect(&mut self, from: usize, to: &str, skip: &[usize]) {
        let old = self.spec.nodes[from].id.clone();
        for j in self.consumers(from) {
            if skip.contains(&j) {
                continue;
            }
            for x in &mut self.spec.nodes[j].inputs {
                if *x == old {
                    *x = to.to_owned();
                }
            }
        }
    }

    /// Inserts a chain of new nodes after node `at`; the first takes `at`
    /// as input, the last replaces `at` for all its former consumers.
    fn insert_chain(&mut self, at: usize, ops: Vec<(&str, Op)>) {
        let column = self.spec.nodes[at].column.clone();
        let mut prev = self.spec.nodes[at].id.clone();
        let mut new_nodes = Vec::new();
        for (kind, op) in ops {
            let id = self.fresh_id(at, kind);
            new_nodes.push(NodeSpec {
                id: id.clone(),
                op,
                inputs: vec![prev],
                column: column.clone(),
            });
            prev = id;
        }
        let skip: Vec<usize> = Vec::new();
        self.redirect(at, &prev, &skip);
        self.inserted.extend(new_nodes.into_iter().map(|n| (at, n)));
    }

    /// Removes single-input nodes in chain order, wiring their consumers to
    /// the chain's input.
    fn bypass(&mut self, chain: &[usize]) {
        let last = *chain.last().expect("non-empty chain");
        let source = self.spec.nodes[chain[0]].inputs[0].clone();
        self.redirect(last, &source, chain);
        self.removed.extend(chain.iter().copied());
    }

    fn scale_width(&mut self, i: usize, factor: f64) -> Option<()> {
        let (Op::Conv { out_channels, .. } | Op::PointwiseConv { out_channels, .. }) = &mut self.spec.nodes[i].op else {
            return None;
        };
        let old = *out_channels;
        let new = ((old as f64 * factor).round() as usize).clamp(MIN_WIDTH, MAX_WIDTH);
        if new == old {
            return None;
        }
        *out_channels = new;
        Some(())
    }

    /// (concat, input slot, chain from the branch source to the concat).
    fn columns(&self) -> Vec<(usize, usize, Vec<usize>)> {
        let mut out = Vec::new();
        for c in self.filter(|n, _| matches!(n.op, Op::Concat)) {
            for (slot, x) in self.spec.nodes[c].inputs.iter().enumerate() {
                let mut chain = Vec::new();
                let mut cur = self.index(x);
                while !matches!(self.spec.nodes[cur].op, Op::Input | Op::Concat) && self.consumers(cur).len() == 1 {
                    let Some(up) = self.single_input(cur) else { break };
                    chain.push(cur);
                    cur = up;
                }
                if !chain.is_empty() {
                    chain.reverse();
                    out.push((c, slot, chain));
                }
            }
        }
        out
    }

    fn duplicate_column(&mut self, concat: usize, chain: &[usize]) {
        let label = self.spec.nodes[chain[0]]
            .column
            .clone()
            .map(|c| {
                (2..)
                    .map(|k| format!("{c}_{k}"))
                    .find(|l| self.spec.nodes.iter().all(|n| n.column.as_deref() != Some(l.as_str())))
                    .expect("unbounded search")
            });
        let mut prev = self.spec.nodes[chain[0]].inputs[0].clone();
        for &i in chain {
            let kind = self.spec.nodes[i].op.kind();
            let id = self.fresh_id(i, kind);
            let node = NodeSpec {
                id: id.clone(),
                op: self.spec.nodes[i].op.clone(),
                inputs: vec![prev],
                column: label.clone(),
            };
            self.inserted.push((*chain.last().unwrap(), node));
            prev = id;
        }
        self.spec.nodes[concat].inputs.push(prev);
    }

    fn remove_column(&mut self, concat: usize, slot: usize, chain: &[usize]) {
        self.spec.nodes[concat].inputs.remove(slot);
        self.removed.extend(chain.iter().copied());
    }

    /// Stride-1 depthwise, pointwise, ReLU triples with no side exits.
    fn separable_blocks(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for d in self.filter(|n, _| matches!(n.op, Op::DepthwiseConv { stride: 1, .. })) {
            let [p] = self.consumers(d)[..] else { continue };
            if !matches!(self.spec.nodes[p].op, Op::PointwiseConv { stride: 1, .. }) {
                continue;
            }
            let [r] = self.consumers(p)[..] else { continue };
            if matches!(self.spec.nodes[r].op, Op::Relu) {
                out.push([d, p, r]);
            }
        }
        out
    }

    fn remove_block(&mut self, b: &[usize; 3]) {
        self.bypass(b);
    }

    fn insert_block(&mut self, at: usize) {
        let c = self.shapes[at].c;
        self.insert_chain(
            at,
            vec![
                (
                    "depthwise_conv",
                    Op::DepthwiseConv {
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                        bias: true,
                    },
                ),
                (
                    "pointwise_conv",
                    Op::PointwiseConv {
                        out_channels: c.clamp(MIN_WIDTH, MAX_WIDTH),
                        stride: 1,
                        bias: true,
                    },
                ),
                ("relu", Op::Relu),
            ],
        );
    }

    fn insert_vac(&mut self, at: usize) {
        let c = self.shapes[at].c;
        self.insert_chain(
            at,
            vec![(
                "vac",
                Op::Vac {
                    condense_kernel: 2,
                    condense_stride: 2,
                    mid_channels: (c / 4).max(1),
                    embed_kernel: 3,
                },
            )],
        );
    }

    /// Adjacent (first, second) pairs around an AADS block that can trade
    /// places: `first` feeds only `second`, both take a single input.
    fn aads_swaps(&self) -> Vec<(usize, usize)> {
        let movable = |i: usize| {
            !matches!(
                self.spec.nodes[i].op,
                Op::Input | Op::Output | Op::Concat | Op::Gap | Op::Fc { .. }
            )
        };
        let mut out = Vec::new();
        for a in self.filter(|n, _| matches!(n.op, Op::Aads { .. })) {
            if let Some(p) = self.single_input(a) {
                if movable(p) && self.single_input(p).is_some() && self.consumers(p) == [a] {
                    out.push((p, a));
                }
            }
            if let [s] = self.consumers(a)[..] {
                if movable(s) && self.single_input(s).is_some() {
                    out.push((a, s));
                }
            }
        }
        out
    }

    /// Rewires `x -> first -> second -> rest` into `x -> second -> first -> rest`.
    fn swap(&mut self, first: usize, second: usize) {
        let first_id = self.spec.nodes[first].id.clone();
        self.redirect(second, &first_id, &[]);
        self.spec.nodes[second].inputs = self.spec.nodes[first].inputs.clone();
        self.spec.nodes[first].inputs = vec![self.spec.nodes[second].id.clone()];
        self.spec.nodes.swap(first, second);
    }

    fn finish(self) -> ArchSpec {
        let Graph {
            mut spec,
            removed,
            inserted,
            ..
        } = self;
        let mut nodes = Vec::with_capacity(spec.nodes.len() + inserted.len());
        for (i, n) in spec.nodes.into_iter().enumerate() {
            if !removed.contains(&i) {
                nodes.push(n);
            }
            nodes.extend(inserted.iter().filter(|(at, _)| *at == i).map(|(_, n)| n.clone()));
        }
        spec.nodes = nodes;
        spec
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::arch::{count_params, reference_spec};

    #[test]
    fn weights_normalize_and_reject_negatives() {
        let p = MutationWeights::default().normalized().unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let bad = MutationWeights {
            vac: -0.1,
            ..Default::default()
        };
        assert!(bad.normalized().is_err());
        let zero = MutationWeights {
            width: 0.0,
            column: 0.0,
            block: 0.0,
            vac: 0.0,
            aads: 0.0,
        };
        assert!(zero.normalized().is_err());
    }

    #[test]
    fn every_kind_applies_to_the_reference() {
        let spec = reference_spec();
        let shapes = infer_shapes(&spec).unwrap();
        for kind in MUTATION_KINDS {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let ok = (0..MAX_ATTEMPTS).any(|_| {
                mutate(&spec, &shapes, kind, &mut rng)
                    .is_some_and(|c| infer_shapes(&c).is_ok() && c.structural_hash() != spec.structural_hash())
            });
            assert!(ok, "{kind:?}");
        }
    }

    #[test]
    fn widening_increases_parameters() {
        let spec = reference_spec();
        let shapes = infer_shapes(&spec).unwrap();
        let mut g = Graph::new(&spec, &shapes);
        let i = spec.index_of("stem/conv1").unwrap();
        g.scale_width(i, 1.25).unwrap();
        let child = g.finish();
        assert!(count_params(&child).unwrap() > count_params(&spec).unwrap());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = reference_spec();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            generate(&spec, &MutationWeights::default(), &mut rng).unwrap().0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn widths_stay_in_range() {
        let mut spec = reference_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = MutationWeights {
            width: 1.0,
            column: 0.0,
            block: 0.0,
            vac: 0.0,
            aads: 0.0,
        };
        for _ in 0..60 {
            spec = generate(&spec, &w, &mut rng).unwrap().0;
            for n in &spec.nodes {
                if let Op::Conv { out_channels, .. } | Op::PointwiseConv { out_channels, .. } = n.op {
                    assert!((MIN_WIDTH..=MAX_WIDTH).contains(&out_channels), "{}", n.id);
                }
            }
        }
    }
}
