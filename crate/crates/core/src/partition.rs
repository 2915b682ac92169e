//! Recursive spectral bisection of the item set.
//!
//! Each split sends items with a non-negative Fiedler entry to the left and
//! the rest to the right. The root is always split; a child is split again
//! while its size is at least `tau` times the size of the *full* item set.

use rayon::join;
use serde::{Deserialize, Serialize};

use crate::eigen::SolverOptions;
use crate::error::{Error, Result};
use crate::spectral::{fiedler, FiedlerResult};
use crate::sparse::NormalizedView;

/// Reseeded attempts after a split that leaves one side empty.
const SPLIT_RETRIES: u64 = 3;

/// One node of the recursion tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub size: usize,
    /// Connectivity of the node's subgraph, when a split was attempted.
    pub fiedler_value: Option<f64>,
    /// `(left, right)` sizes when the node was split.
    pub split: Option<(usize, usize)>,
    /// Index into `partitions` for leaves.
    pub partition: Option<u32>,
    /// The node had to become a leaf although it was at or above the size cap.
    pub unsplittable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionAssignment {
    assignment: Vec<u32>,
    partitions: Vec<Vec<u32>>,
    tau: f64,
    trace: Vec<TraceNode>,
}

impl PartitionAssignment {
    /// Rebuild from a stored item -> partition map. Partitions are derived
    /// from it, so ids must already be contiguous and ordered by first item.
    pub fn from_assignment(assignment: Vec<u32>, tau: f64, trace: Vec<TraceNode>) -> Result<Self> {
        let n_parts = assignment.iter().map(|&p| p as usize + 1).max().unwrap_or(0);
        let mut partitions = vec![Vec::new(); n_parts];
        for (i, &p) in assignment.iter().enumerate() {
            partitions[p as usize].push(i as u32);
        }
        if partitions.iter().any(Vec::is_empty) {
            return Err(Error::ShapeError("partition ids are not contiguous".into()));
        }
        if partitions.windows(2).any(|w| w[0][0] > w[1][0]) {
            return Err(Error::ShapeError("partition ids are not ordered by first item".into()));
        }
        Ok(Self {
            assignment,
            partitions,
            tau,
            trace,
        })
    }

    /// Build from item lists (any order); ids are renumbered canonically.
    pub fn from_partitions(n_items: usize, mut parts: Vec<Vec<u32>>, tau: f64, trace: Vec<TraceNode>) -> Result<Self> {
        for p in &mut parts {
            p.sort_unstable();
        }
        parts.retain(|p| !p.is_empty());
        parts.sort_by_key(|p| p[0]);
        let mut assignment = vec![u32::MAX; n_items];
        for (pid, p) in parts.iter().enumerate() {
            for &i in p {
                let slot = assignment
                    .get_mut(i as usize)
                    .ok_or_else(|| Error::InvalidArgument(format!("item {i} out of range")))?;
                if *slot != u32::MAX {
                    return Err(Error::InvalidArgument(format!("item {i} in two partitions")));
                }
                *slot = pid as u32;
            }
        }
        if let Some(i) = assignment.iter().position(|&p| p == u32::MAX) {
            return Err(Error::InvalidArgument(format!("item {i} not covered")));
        }
        Ok(Self {
            assignment,
            partitions: parts,
            tau,
            trace,
        })
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn partitions(&self) -> &[Vec<u32>] {
        &self.partitions
    }

    pub fn n_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn trace(&self) -> &[TraceNode] {
        &self.trace
    }

    /// Whether partition `p` is a leaf that was forced despite its size.
    pub fn is_unsplittable(&self, p: usize) -> bool {
        self.trace
            .iter()
            .any(|n| n.partition == Some(p as u32) && n.unsplittable)
    }

    /// Trace as CSV: node id, parent, depth, size, Fiedler value, child sizes.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("node,parent,depth,size,fiedler_value,left_size,right_size,unsplittable\n");
        for n in &self.trace {
            let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                n.id,
                opt(n.parent),
                n.depth,
                n.size,
                n.fiedler_value.map(|v| format!("{v:.12e}")).unwrap_or_default(),
                opt(n.split.map(|s| s.0)),
                opt(n.split.map(|s| s.1)),
                n.unsplittable
            ));
        }
        out
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Split `items` by the sign of the Fiedler vector (zero goes left).
pub fn bisect(view: &NormalizedView<'_>, items: &[u32], opts: &SolverOptions) -> Result<(Vec<u32>, Vec<u32>)> {
    bisect_with_value(view, items, opts).map(|(l, r, _)| (l, r))
}

fn bisect_with_value(view: &NormalizedView<'_>, items: &[u32], opts: &SolverOptions) -> Result<(Vec<u32>, Vec<u32>, FiedlerResult)> {
    let f = fiedler(view, items, opts)?;
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (&i, &x) in items.iter().zip(&f.vector) {
        if x >= 0.0 {
            left.push(i);
        } else {
            right.push(i);
        }
    }
    Ok((left, right, f))
}

enum Node {
    Leaf {
        items: Vec<u32>,
        size: usize,
        fiedler_value: Option<f64>,
        unsplittable: bool,
    },
    Split {
        size: usize,
        fiedler_value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

struct Recursion<'v, 'a> {
    view: &'v NormalizedView<'a>,
    threshold: f64,
    opts: SolverOptions,
}

impl Recursion<'_, '_> {
    fn run(&self, items: Vec<u32>, seed: u64, force: bool) -> Result<Node> {
        let size = items.len();
        if !force && (size as f64) < self.threshold {
            return Ok(Node::Leaf {
                items,
                size,
                fiedler_value: None,
                unsplittable: false,
            });
        }
        if size < 2 {
            return Ok(Node::Leaf {
                items,
                size,
                fiedler_value: None,
                unsplittable: true,
            });
        }
        let mut last_value = None;
        for attempt in 0..=SPLIT_RETRIES {
            let opts = self.opts.with_seed(splitmix64(seed.wrapping_add(attempt)));
            let (left, right, f) = bisect_with_value(self.view, &items, &opts)?;
            last_value = Some(f.value);
            if left.is_empty() || right.is_empty() {
                log::debug!("one-sided split of {size} items (attempt {attempt})");
                continue;
            }
            let (l, r) = join(
                || self.run(left, splitmix64(seed ^ 0x1), false),
                || self.run(right, splitmix64(seed ^ 0x2), false),
            );
            return Ok(Node::Split {
                size,
                fiedler_value: f.value,
                left: Box::new(l?),
                right: Box::new(r?),
            });
        }
        Ok(Node::Leaf {
            items,
            size,
            fiedler_value: last_value,
            unsplittable: true,
        })
    }
}

fn flatten(node: Node, parent: Option<usize>, depth: usize, trace: &mut Vec<TraceNode>, leaves: &mut Vec<(usize, Vec<u32>)>) {
    let id = trace.len();
    match node {
        Node::Leaf {
            items,
            size,
            fiedler_value,
            unsplittable,
        } => {
            trace.push(TraceNode {
                id,
                parent,
                depth,
                size,
                fiedler_value,
                split: None,
                partition: None,
                unsplittable,
            });
            leaves.push((id, items));
        }
        Node::Split {
            size,
            fiedler_value,
            left,
            right,
        } => {
            let sizes = (node_size(&left), node_size(&right));
            trace.push(TraceNode {
                id,
                parent,
                depth,
                size,
                fiedler_value: Some(fiedler_value),
                split: Some(sizes),
                partition: None,
                unsplittable: false,
            });
            flatten(*left, Some(id), depth + 1, trace, leaves);
            flatten(*right, Some(id), depth + 1, trace, leaves);
        }
    }
}

fn node_size(n: &Node) -> usize {
    match n {
        Node::Leaf { size, .. } | Node::Split { size, .. } => *size,
    }
}

/// Recursive partitioning of all items of the view.
pub fn partition(view: &NormalizedView<'_>, tau: f64, opts: &SolverOptions) -> Result<PartitionAssignment> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must be in (0, 1], got {tau}")));
    }
    let n = view.matrix().n_items();
    let recursion = Recursion {
        view,
        threshold: tau * n as f64,
        opts: *opts,
    };
    let root = recursion.run((0..n as u32).collect(), splitmix64(opts.seed), true)?;
    let mut trace = Vec::new();
    let mut leaves = Vec::new();
    flatten(root, None, 0, &mut trace, &mut leaves);

    let mut order: Vec<usize> = (0..leaves.len()).collect();
    for (_, items) in &mut leaves {
        items.sort_unstable();
    }
    order.sort_by_key(|&l| leaves[l].1.first().copied().unwrap_or(u32::MAX));
    for (pid, &l) in order.iter().enumerate() {
        trace[leaves[l].0].partition = Some(pid as u32);
    }
    let parts: Vec<Vec<u32>> = order.iter().map(|&l| std::mem::take(&mut leaves[l].1)).collect();
    PartitionAssignment::from_partitions(n, parts, tau, trace)
}
