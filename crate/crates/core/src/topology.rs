//! Logical probing trees.
//!
//! A [`LogicalTree`] is the measured subnetwork seen from the edge: the probe
//! source sits at the root, destinations are the leaves, and every edge is one
//! logical link numbered densely from 1. Link ids double as array indices in
//! the estimators, so the numbering rule is enforced on construction.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The shipped default topology (`topology/default.json`).
pub const DEFAULT_TOPOLOGY_JSON: &str = include_str!("../../../topology/default.json");

/// Index of a node inside a [`LogicalTree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// Identifier of a logical link, dense in `1..=L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub usize);

impl LinkId {
    /// Zero-based slot for array-indexed per-link storage.
    #[inline]
    pub fn index(self) -> usize {
        self.0 - 1
    }

    #[inline]
    pub fn from_index(i: usize) -> Self {
        LinkId(i + 1)
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Serialized link entry of a topology file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: usize,
    pub from: String,
    pub to: String,
}

/// On-disk topology document: `{ "root", "nodes", "links": [{id, from, to}] }`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub root: String,
    pub nodes: Vec<String>,
    pub links: Vec<LinkSpec>,
}

impl TopologySpec {
    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        serde_json::from_str(text).map_err(|e| TopologyError::Parse(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TopologyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TopologyError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn default_tree() -> Self {
        Self::from_json(DEFAULT_TOPOLOGY_JSON).expect("shipped default topology parses")
    }
}

/// One broken tree invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateNode(String),
    UnknownRoot(String),
    UnknownNode { link: usize, name: String },
    SelfLoop(String),
    /// Parent chain from this node never reaches the root.
    Cycle(String),
    RootHasParent(String),
    MultipleParents(String),
    /// Non-root node without an incoming link.
    Orphan(String),
    /// Node hangs below an orphan and cannot be reached from the root.
    Unreachable(String),
    ZeroLinkId,
    DuplicateLinkId(usize),
    /// Link ids must cover `1..=L` without holes.
    LinkIdGap { missing: Vec<usize> },
    TooFewLeaves(usize),
}

impl Violation {
    /// Violations that make path queries meaningless. `TooFewLeaves` is not
    /// one of them: a chain still has paths, it just cannot be probed usefully.
    pub fn is_structural(&self) -> bool {
        !matches!(self, Violation::TooFewLeaves(_))
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNode(n) => write!(f, "duplicate node `{n}`"),
            Violation::UnknownRoot(n) => write!(f, "root `{n}` is not in the node list"),
            Violation::UnknownNode { link, name } => {
                write!(f, "link {link} references unknown node `{name}`")
            }
            Violation::SelfLoop(n) => write!(f, "cycle: node `{n}` is its own parent"),
            Violation::Cycle(n) => write!(f, "cycle: node `{n}` does not reach the root"),
            Violation::RootHasParent(n) => write!(f, "root `{n}` has an incoming link"),
            Violation::MultipleParents(n) => write!(f, "node `{n}` has more than one parent"),
            Violation::Orphan(n) => write!(f, "orphan node `{n}`"),
            Violation::Unreachable(n) => write!(f, "node `{n}` is not reachable from the root"),
            Violation::ZeroLinkId => write!(f, "link id 0 is not allowed"),
            Violation::DuplicateLinkId(id) => write!(f, "duplicate link id {id}"),
            Violation::LinkIdGap { missing } => write!(f, "gap in link ids, missing {missing:?}"),
            Violation::TooFewLeaves(n) => write!(f, "probing tree needs >= 2 leaves, found {n}"),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TopologyError {
    #[error("invalid topology: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{0}` is not a leaf")]
    NotALeaf(String),
    #[error("topology parse error: {0}")]
    Parse(String),
    #[error("topology io error: {0}")]
    Io(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Checks every tree invariant and reports all violations at once.
pub fn validate(spec: &TopologySpec) -> Result<(), TopologyError> {
    let violations = collect_violations(spec);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(TopologyError::Invalid(violations))
    }
}

fn collect_violations(spec: &TopologySpec) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, n) in spec.nodes.iter().enumerate() {
        if index.insert(n.as_str(), i).is_some() {
            out.push(Violation::DuplicateNode(n.clone()));
        }
    }
    let root = index.get(spec.root.as_str()).copied();
    if root.is_none() {
        out.push(Violation::UnknownRoot(spec.root.clone()));
    }

    let mut seen_ids = HashSet::new();
    let mut parent: Vec<Option<usize>> = vec![None; spec.nodes.len()];
    for l in &spec.links {
        if l.id == 0 {
            out.push(Violation::ZeroLinkId);
        } else if !seen_ids.insert(l.id) {
            out.push(Violation::DuplicateLinkId(l.id));
        }
        let from = index.get(l.from.as_str()).copied();
        let to = index.get(l.to.as_str()).copied();
        if from.is_none() {
            out.push(Violation::UnknownNode { link: l.id, name: l.from.clone() });
        }
        if to.is_none() {
            out.push(Violation::UnknownNode { link: l.id, name: l.to.clone() });
        }
        let (Some(from), Some(to)) = (from, to) else { continue };
        if from == to {
            out.push(Violation::SelfLoop(l.to.clone()));
            continue;
        }
        if Some(to) == root {
            out.push(Violation::RootHasParent(l.to.clone()));
            continue;
        }
        if parent[to].is_some() {
            out.push(Violation::MultipleParents(l.to.clone()));
            continue;
        }
        parent[to] = Some(from);
    }

    let l = spec.links.len();
    let missing: Vec<usize> = (1..=l).filter(|id| !seen_ids.contains(id)).collect();
    if !missing.is_empty() {
        out.push(Violation::LinkIdGap { missing });
    }

    if let Some(root) = root {
        let self_looped: HashSet<&str> = out
            .iter()
            .filter_map(|v| match v {
                Violation::SelfLoop(n) => Some(n.as_str()),
                _ => None,
            })
            .collect();
        let mut cycles = Vec::new();
        let mut reachable = vec![false; spec.nodes.len()];
        reachable[root] = true;
        for (i, name) in spec.nodes.iter().enumerate() {
            if i == root || self_looped.contains(name.as_str()) {
                continue;
            }
            if parent[i].is_none() {
                cycles.push(Violation::Orphan(name.clone()));
                continue;
            }
            // Walk up; more than |nodes| steps means we are stuck in a loop.
            let mut cur = i;
            let mut steps = 0;
            let mut reaches_root = false;
            while let Some(p) = parent[cur] {
                if p == root {
                    reaches_root = true;
                    break;
                }
                cur = p;
                steps += 1;
                if steps > spec.nodes.len() {
                    break;
                }
            }
            reachable[i] = reaches_root;
            if !reaches_root {
                if parent[cur].is_some() {
                    cycles.push(Violation::Cycle(name.clone()));
                } else {
                    cycles.push(Violation::Unreachable(name.clone()));
                }
            }
        }
        out.extend(cycles);

        let has_child: HashSet<usize> = parent.iter().flatten().copied().collect();
        let leaves = (0..spec.nodes.len())
            .filter(|&i| i != root && reachable[i] && !has_child.contains(&i))
            .count();
        if leaves < 2 {
            out.push(Violation::TooFewLeaves(leaves));
        }
    }
    out
}

/// Immutable rooted tree of logical links.
#[derive(Debug, Clone, PartialEq)]
pub struct LogicalTree {
    names: Vec<String>,
    root: NodeId,
    parent: Vec<Option<NodeId>>,
    in_link: Vec<Option<LinkId>>,
    children: Vec<Vec<NodeId>>,
    /// `link_child[k.index()]` is the node the link leads into.
    link_child: Vec<NodeId>,
    leaves: Vec<NodeId>,
    /// Root first, every parent before its children.
    order: Vec<NodeId>,
}

impl LogicalTree {
    /// Builds a tree, rejecting every structural violation. Trees with a
    /// single leaf are accepted here (see [`LogicalTree::check_probing`]).
    pub fn from_spec(spec: &TopologySpec) -> Result<Self, TopologyError> {
        let structural: Vec<Violation> = collect_violations(spec)
            .into_iter()
            .filter(Violation::is_structural)
            .collect();
        if !structural.is_empty() {
            return Err(TopologyError::Invalid(structural));
        }

        let index: HashMap<&str, usize> =
            spec.nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let n = spec.nodes.len();
        let root = NodeId(index[spec.root.as_str()]);
        let mut parent = vec![None; n];
        let mut in_link = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut link_child = vec![NodeId(0); spec.links.len()];
        let mut links = spec.links.clone();
        links.sort_by_key(|l| l.id);
        for l in &links {
            let from = NodeId(index[l.from.as_str()]);
            let to = NodeId(index[l.to.as_str()]);
            parent[to.0] = Some(from);
            in_link[to.0] = Some(LinkId(l.id));
            children[from.0].push(to);
            link_child[l.id - 1] = to;
        }

        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            queue.extend(children[v.0].iter().copied());
        }
        let leaves = order
            .iter()
            .copied()
            .filter(|&v| v != root && children[v.0].is_empty())
            .collect();

        Ok(Self {
            names: spec.nodes.clone(),
            root,
            parent,
            in_link,
            children,
            link_child,
            leaves,
            order,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        Self::from_spec(&TopologySpec::from_json(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TopologyError> {
        Self::from_spec(&TopologySpec::from_file(path)?)
    }

    /// The nine-link default: s→a, a→{b,c}, b→{d1,d2}, c→{d3,e}, e→{d4,d5}.
    pub fn default_tree() -> Self {
        Self::from_spec(&TopologySpec::default_tree()).expect("default topology is valid")
    }

    /// Full validation including the probing requirement of two leaves.
    pub fn check_probing(&self) -> Result<(), TopologyError> {
        if self.leaves.len() < 2 {
            Err(TopologyError::Invalid(vec![Violation::TooFewLeaves(self.leaves.len())]))
        } else {
            Ok(())
        }
    }

    pub fn to_spec(&self) -> TopologySpec {
        TopologySpec {
            root: self.names[self.root.0].clone(),
            nodes: self.names.clone(),
            links: self
                .links()
                .map(|k| LinkSpec {
                    id: k.0,
                    from: self.name(self.link_parent(k)).to_string(),
                    to: self.name(self.link_child(k)).to_string(),
                })
                .collect(),
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn link_count(&self) -> usize {
        self.link_child.len()
    }

    pub fn links(&self) -> impl Iterator<Item = LinkId> + '_ {
        (1..=self.link_child.len()).map(LinkId)
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn is_leaf(&self, v: NodeId) -> bool {
        v != self.root && self.children[v.0].is_empty()
    }

    pub fn name(&self, v: NodeId) -> &str {
        &self.names[v.0]
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.names.iter().position(|n| n == name).map(NodeId)
    }

    pub fn parent(&self, v: NodeId) -> Option<NodeId> {
        self.parent[v.0]
    }

    pub fn children(&self, v: NodeId) -> &[NodeId] {
        &self.children[v.0]
    }

    /// Link entering `v`; `None` for the root.
    pub fn in_link(&self, v: NodeId) -> Option<LinkId> {
        self.in_link[v.0]
    }

    pub fn link_child(&self, k: LinkId) -> NodeId {
        self.link_child[k.index()]
    }

    pub fn link_parent(&self, k: LinkId) -> NodeId {
        self.parent[self.link_child(k).0].expect("link child has a parent")
    }

    /// Nodes in breadth-first order from the root.
    pub fn topological_order(&self) -> &[NodeId] {
        &self.order
    }

    /// Root-to-leaf link sequence, root side first.
    pub fn path_links(&self, leaf: NodeId) -> Result<Vec<LinkId>, TopologyError> {
        if leaf.0 >= self.names.len() {
            return Err(TopologyError::UnknownNode(format!("#{}", leaf.0)));
        }
        if !self.is_leaf(leaf) {
            return Err(TopologyError::NotALeaf(self.names[leaf.0].clone()));
        }
        let mut path = Vec::new();
        let mut cur = leaf;
        while let Some(k) = self.in_link[cur.0] {
            path.push(k);
            cur = self.parent[cur.0].expect("non-root node has parent");
        }
        path.reverse();
        Ok(path)
    }

    pub fn path_links_by_name(&self, leaf: &str) -> Result<Vec<LinkId>, TopologyError> {
        let v = self.node(leaf).ok_or_else(|| TopologyError::UnknownNode(leaf.to_string()))?;
        self.path_links(v)
    }

    /// Structural identifiability under multicast probing with an atom at zero
    /// delay on every link: identifiable iff every internal node branches.
    /// Otherwise returns each maximal chain of links that only appear summed.
    pub fn check_identifiability(&self) -> Identifiability {
        let is_unary_internal =
            |v: NodeId| v != self.root && self.children[v.0].len() == 1;
        let mut chains = Vec::new();
        for &v in &self.order {
            if !is_unary_internal(v) {
                continue;
            }
            // Start only at the top of a run of unary nodes.
            let p = self.parent[v.0].expect("non-root");
            if is_unary_internal(p) {
                continue;
            }
            let mut chain = vec![self.in_link[v.0].expect("non-root")];
            let mut cur = v;
            while is_unary_internal(cur) {
                let c = self.children[cur.0][0];
                chain.push(self.in_link[c.0].expect("child has link"));
                cur = c;
            }
            chains.push(chain);
        }
        if chains.is_empty() {
            Identifiability::Identifiable
        } else {
            Identifiability::NonIdentifiable { chains }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Identifiability {
    Identifiable,
    /// Links in each chain are in series and can only be estimated jointly.
    NonIdentifiable { chains: Vec<Vec<LinkId>> },
}

impl Identifiability {
    pub fn is_identifiable(&self) -> bool {
        matches!(self, Identifiability::Identifiable)
    }
}
