//! Hierarchical query trees.
//!
//! A tree conditions on one attribute per level. Children of a node under a
//! `Known` attribute are the values observed in the data for the node's known
//! conditions; children under an `Unknown` attribute enumerate the attribute's
//! whole domain, so the shape of the tree never depends on unknown values.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Known,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub kind: AttributeKind,
    /// Explicit value list; required (and only meaningful) for `Unknown`.
    #[serde(default)]
    pub domain: Vec<String>,
}

impl Attribute {
    pub fn known(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: AttributeKind::Known,
            domain: Vec::new(),
        }
    }

    pub fn unknown<S: Into<String>>(
        name: impl Into<String>,
        domain: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: AttributeKind::Unknown,
            domain: domain.into_iter().map(Into::into).collect(),
        }
    }

    fn domain_position(&self, value: &str) -> Option<usize> {
        self.domain.iter().position(|v| v == value)
    }
}

/// Ordered attribute list; one tree level per attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Schema("schema needs at least one attribute".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for attr in &attributes {
            if !seen.insert(attr.name.as_str()) {
                return Err(Error::Schema(format!("duplicate attribute `{}`", attr.name)));
            }
            if attr.kind == AttributeKind::Unknown {
                if attr.domain.is_empty() {
                    return Err(Error::Schema(format!(
                        "unknown attribute `{}` needs a non-empty domain",
                        attr.name
                    )));
                }
                let mut values = std::collections::HashSet::new();
                if let Some(dup) = attr.domain.iter().find(|v| !values.insert(v.as_str())) {
                    return Err(Error::Schema(format!(
                        "unknown attribute `{}` lists `{dup}` twice",
                        attr.name
                    )));
                }
            }
        }
        Ok(Self { attributes })
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    /// Tree depth `d`; the tree has `d + 1` levels.
    pub fn depth(&self) -> usize {
        self.attributes.len()
    }

    /// The schema with its first attribute removed, or `None` for a
    /// single-attribute schema.
    pub fn without_first(&self) -> Option<Self> {
        (self.attributes.len() > 1).then(|| Self {
            attributes: self.attributes[1..].to_vec(),
        })
    }
}

impl TryFrom<Vec<Attribute>> for AttributeSchema {
    type Error = Error;

    fn try_from(attributes: Vec<Attribute>) -> Result<Self> {
        Self::new(attributes)
    }
}

impl From<AttributeSchema> for Vec<Attribute> {
    fn from(schema: AttributeSchema) -> Self {
        schema.attributes
    }
}

/// One impression row after attribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub known_values: BTreeMap<String, String>,
    /// Values of the unknown attributes; present iff the impression received
    /// an attributed conversion.
    pub unknown_values: Option<BTreeMap<String, String>>,
    pub timestamp: i64,
}

impl AttributionRecord {
    pub fn new<K, V>(known: impl IntoIterator<Item = (K, V)>, timestamp: i64) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            known_values: known
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            unknown_values: None,
            timestamp,
        }
    }

    /// Marks the record as converted with the given unknown attribute value.
    pub fn with_conversion(mut self, attribute: impl Into<String>, value: impl Into<String>) -> Self {
        self.unknown_values
            .get_or_insert_with(BTreeMap::new)
            .insert(attribute.into(), value.into());
        self
    }

    pub fn converted(&self) -> bool {
        self.unknown_values.is_some()
    }
}

/// Parent/child structure shared by every per-node vector over a tree.
///
/// Nodes are dense indices with every parent preceding its children; node 0
/// is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    parent: Vec<Option<usize>>,
    level: Vec<usize>,
    children: Vec<Vec<usize>>,
    levels: Vec<Vec<usize>>,
}

impl Topology {
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Self> {
        match parents.first() {
            None => return Err(Error::Topology("tree has no nodes".into())),
            Some(Some(_)) => return Err(Error::Topology("node 0 must be the root".into())),
            Some(None) => {}
        }
        let n = parents.len();
        let mut level = vec![0usize; n];
        let mut children = vec![Vec::new(); n];
        for (v, p) in parents.iter().enumerate().skip(1) {
            let p = p.ok_or_else(|| Error::Topology(format!("node {v} has no parent")))?;
            if p >= v {
                return Err(Error::Topology(format!(
                    "parent {p} of node {v} must precede it"
                )));
            }
            level[v] = level[p] + 1;
            children[p].push(v);
        }
        let depth = level.iter().copied().max().unwrap_or(0);
        let mut levels = vec![Vec::new(); depth + 1];
        for (v, &l) in level.iter().enumerate() {
            levels[l].push(v);
        }
        Ok(Self {
            parent: parents.to_vec(),
            level,
            children,
            levels,
        })
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn level(&self, v: usize) -> usize {
        self.level[v]
    }

    /// Node sets `L_0..L_d`.
    pub fn levels(&self) -> &[Vec<usize>] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        self.children[v].is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&v| self.is_leaf(v))
    }

    /// Path from `v` up to the root, inclusive of both.
    pub fn ancestors(&self, v: usize) -> Vec<usize> {
        let mut out = vec![v];
        let mut cur = v;
        while let Some(p) = self.parent[cur] {
            out.push(p);
            cur = p;
        }
        out
    }
}

/// Tree of aggregation nodes with exact conversion counts.
#[derive(Debug, Clone, PartialEq)]
pub struct HierTree {
    topology: Arc<Topology>,
    paths: Vec<Vec<String>>,
    counts: Vec<i64>,
}

impl HierTree {
    /// Assembles a tree from parts. Counts must be non-negative and each path
    /// must have length equal to its node's level; consistency is not
    /// enforced (see [`HierTree::validate_consistency`]).
    pub fn from_parts(
        topology: Arc<Topology>,
        paths: Vec<Vec<String>>,
        counts: Vec<i64>,
    ) -> Result<Self> {
        let n = topology.len();
        if paths.len() != n || counts.len() != n {
            return Err(Error::Topology(format!(
                "expected {n} paths and counts, got {} and {}",
                paths.len(),
                counts.len()
            )));
        }
        for v in 0..n {
            if paths[v].len() != topology.level(v) {
                return Err(Error::Topology(format!(
                    "node {v}: path length {} does not match level {}",
                    paths[v].len(),
                    topology.level(v)
                )));
            }
            if counts[v] < 0 {
                return Err(Error::Topology(format!("node {v}: negative count {}", counts[v])));
            }
        }
        Ok(Self {
            topology,
            paths,
            counts,
        })
    }

    /// Tree whose node paths are the node indices; handy for synthetic shapes.
    pub fn from_topology(topology: Arc<Topology>, counts: Vec<i64>) -> Result<Self> {
        let paths = (0..topology.len())
            .map(|v| {
                topology
                    .ancestors(v)
                    .into_iter()
                    .rev()
                    .skip(1)
                    .map(|u| u.to_string())
                    .collect()
            })
            .collect();
        Self::from_parts(topology, paths, counts)
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn len(&self) -> usize {
        self.topology.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topology.is_empty()
    }

    pub fn counts(&self) -> &[i64] {
        &self.counts
    }

    pub fn count(&self, v: usize) -> i64 {
        self.counts[v]
    }

    pub fn path(&self, v: usize) -> &[String] {
        &self.paths[v]
    }

    pub fn paths(&self) -> &[Vec<String>] {
        &self.paths
    }

    pub fn set_count(&mut self, v: usize, count: i64) {
        self.counts[v] = count;
    }

    pub fn find(&self, path: &[String]) -> Option<usize> {
        let level = path.len();
        self.topology
            .levels()
            .get(level)?
            .iter()
            .copied()
            .find(|&v| self.paths[v] == path)
    }

    /// True iff every internal node's count equals the sum of its children's.
    pub fn validate_consistency(&self) -> bool {
        (0..self.len()).all(|v| {
            let children = self.topology.children(v);
            children.is_empty() || children.iter().map(|&u| self.counts[u]).sum::<i64>() == self.counts[v]
        })
    }

    /// The subtree rooted at `node`, re-indexed, with paths relative to `node`.
    pub fn subtree(&self, node: usize) -> HierTree {
        let (topology, members) = extract_subtree(&self.topology, node);
        let strip = self.topology.level(node);
        let paths = members.iter().map(|&v| self.paths[v][strip..].to_vec()).collect();
        let counts = members.iter().map(|&v| self.counts[v]).collect();
        HierTree {
            topology: Arc::new(topology),
            paths,
            counts,
        }
    }

    /// Line-oriented text form: `node_id,parent_id|-1,level,path,true_count`
    /// with path values joined by `|`.
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        for v in 0..self.len() {
            for value in &self.paths[v] {
                if value.contains([',', '|', '\n', '\r']) {
                    return Err(Error::Data(format!(
                        "node {v}: value `{value}` cannot be serialized (contains a separator)"
                    )));
                }
            }
            let parent = self.topology.parent(v).map_or(-1, |p| p as i64);
            writeln!(
                out,
                "{v},{parent},{},{},{}",
                self.topology.level(v),
                self.paths[v].join("|"),
                self.counts[v]
            )
            .expect("writing to a String cannot fail");
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut parents = Vec::new();
        let mut levels = Vec::new();
        let mut paths = Vec::new();
        let mut counts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Data(format!("tree line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(bad("expected 5 comma-separated fields"));
            }
            let id: usize = fields[0].parse().map_err(|_| bad("bad node id"))?;
            if id != parents.len() {
                return Err(bad("node ids must be dense and in order"));
            }
            let parent: i64 = fields[1].parse().map_err(|_| bad("bad parent id"))?;
            parents.push(if parent < 0 { None } else { Some(parent as usize) });
            levels.push(fields[2].parse::<usize>().map_err(|_| bad("bad level"))?);
            paths.push(if fields[3].is_empty() {
                Vec::new()
            } else {
                fields[3].split('|').map(str::to_owned).collect()
            });
            counts.push(fields[4].parse::<i64>().map_err(|_| bad("bad count"))?);
        }
        let as_data = |e: Error| match e {
            Error::Topology(msg) => Error::Data(msg),
            other => other,
        };
        let topology = Topology::from_parents(&parents).map_err(as_data)?;
        if let Some(v) = (0..topology.len()).find(|&v| topology.level(v) != levels[v]) {
            return Err(Error::Data(format!(
                "node {v}: declared level {} disagrees with parent links",
                levels[v]
            )));
        }
        Self::from_parts(Arc::new(topology), paths, counts).map_err(as_data)
    }
}

/// Per-node noisy measurements `x_v` with their variances `var_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyTree {
    topology: Arc<Topology>,
    values: Vec<f64>,
    variances: Vec<f64>,
}

impl NoisyTree {
    pub fn new(topology: Arc<Topology>, values: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let n = topology.len();
        if values.len() != n || variances.len() != n {
            return Err(Error::Topology(format!(
                "expected {n} values and variances, got {} and {}",
                values.len(),
                variances.len()
            )));
        }
        if let Some(v) = variances.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "node {v}: variance must be positive and finite, got {}",
                variances[v]
            )));
        }
        if let Some(v) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!("node {v}: non-finite value")));
        }
        Ok(Self {
            topology,
            values,
            variances,
        })
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }
}

/// Re-indexes the subtree under `node` in ascending original order, which
/// keeps parents ahead of children. Returns the new topology and the original
/// index of each new node.
pub(crate) fn extract_subtree(topology: &Topology, node: usize) -> (Topology, Vec<usize>) {
    let mut members = vec![node];
    let mut i = 0;
    while i < members.len() {
        members.extend_from_slice(topology.children(members[i]));
        i += 1;
    }
    members.sort_unstable();
    let index: HashMap<usize, usize> = members.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let parents: Vec<Option<usize>> = members
        .iter()
        .map(|&v| {
            if v == node {
                None
            } else {
                topology.parent(v).map(|p| index[&p])
            }
        })
        .collect();
    let sub = Topology::from_parents(&parents).expect("subtree of a valid tree is valid");
    (sub, members)
}

/// Builds a topology from a path list in which every proper prefix of every
/// path is itself listed earlier. Returns nodes in the given order.
pub(crate) fn topology_from_paths(paths: &[Vec<String>]) -> Result<Topology> {
    let mut index: HashMap<&[String], usize> = HashMap::with_capacity(paths.len());
    let mut parents = Vec::with_capacity(paths.len());
    for (v, path) in paths.iter().enumerate() {
        let parent = if path.is_empty() {
            None
        } else {
            let prefix = &path[..path.len() - 1];
            Some(*index.get(prefix).ok_or_else(|| {
                Error::Topology(format!("prefix of path {path:?} is missing"))
            })?)
        };
        if index.insert(path.as_slice(), v).is_some() {
            return Err(Error::Topology(format!("duplicate path {path:?}")));
        }
        parents.push(parent);
    }
    Topology::from_parents(&parents)
}

#[derive(Default)]
struct KnownTrie {
    children: Vec<BTreeMap<String, usize>>,
}

impl KnownTrie {
    fn new() -> Self {
        Self {
            children: vec![BTreeMap::new()],
        }
    }

    fn insert<'a>(&mut self, values: impl Iterator<Item = &'a str>) {
        let mut cur = 0;
        for value in values {
            let next = self.children.len();
            let slot = *self.children[cur].entry(value.to_owned()).or_insert(next);
            if slot == next {
                self.children.push(BTreeMap::new());
            }
            cur = slot;
        }
    }
}

fn known_value<'a>(record: &'a AttributionRecord, attr: &Attribute, row: usize) -> Result<&'a str> {
    record
        .known_values
        .get(&attr.name)
        .map(String::as_str)
        .ok_or_else(|| Error::RejectedRecord {
            row,
            reason: format!("missing known attribute `{}`", attr.name),
        })
}

/// Builds the hierarchical query tree for `records` under `schema`.
///
/// Node order is breadth-first by level; siblings are ordered by value
/// (lexicographic for known attributes, domain order for unknown ones).
pub fn build_tree(records: &[AttributionRecord], schema: &AttributeSchema) -> Result<HierTree> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let attrs = schema.attributes();
    let known: Vec<&Attribute> = attrs.iter().filter(|a| a.kind == AttributeKind::Known).collect();

    // Validate every record up front and collect its unknown positions.
    let mut unknown_pos: Vec<Option<Vec<usize>>> = Vec::with_capacity(records.len());
    let mut trie = KnownTrie::new();
    for (row, record) in records.iter().enumerate() {
        let values = known
            .iter()
            .map(|a| known_value(record, a, row))
            .collect::<Result<Vec<_>>>()?;
        trie.insert(values.into_iter());
        let positions = match &record.unknown_values {
            None => None,
            Some(unknown) => Some(
                attrs
                    .iter()
                    .filter(|a| a.kind == AttributeKind::Unknown)
                    .map(|a| {
                        let value = unknown.get(&a.name).ok_or_else(|| Error::RejectedRecord {
                            row,
                            reason: format!("converted record lacks unknown attribute `{}`", a.name),
                        })?;
                        a.domain_position(value).ok_or_else(|| Error::RejectedRecord {
                            row,
                            reason: format!(
                                "value `{value}` outside the domain of unknown attribute `{}`",
                                a.name
                            ),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        unknown_pos.push(positions);
    }

    // Breadth-first expansion; each tree node tracks its known-trie node.
    let mut parents: Vec<Option<usize>> = vec![None];
    let mut paths: Vec<Vec<String>> = vec![Vec::new()];
    let mut trie_of: Vec<usize> = vec![0];
    let mut frontier: Vec<usize> = vec![0];
    for attr in attrs {
        let mut next = Vec::new();
        for &node in &frontier {
            let t = trie_of[node];
            let mut push = |value: &str, child_trie: usize| {
                let id = parents.len();
                parents.push(Some(node));
                let mut path = paths[node].clone();
                path.push(value.to_owned());
                paths.push(path);
                trie_of.push(child_trie);
                next.push(id);
            };
            match attr.kind {
                AttributeKind::Known => {
                    for (value, &child) in &trie.children[t] {
                        push(value, child);
                    }
                }
                AttributeKind::Unknown => {
                    for value in &attr.domain {
                        push(value, t);
                    }
                }
            }
        }
        frontier = next;
    }
    let topology = Topology::from_parents(&parents)?;

    // Each converted record lands on exactly one leaf; sum upward.
    let mut counts = vec![0i64; topology.len()];
    for (row, record) in records.iter().enumerate() {
        let Some(unknown) = &unknown_pos[row] else { continue };
        let mut node = 0;
        let mut next_unknown = unknown.iter();
        for attr in attrs {
            let children = topology.children(node);
            node = match attr.kind {
                AttributeKind::Unknown => children[*next_unknown.next().expect("one position per unknown attribute")],
                AttributeKind::Known => {
                    let value = known_value(record, attr, row)?;
                    let level = paths[node].len();
                    let at = children
                        .binary_search_by(|&c| paths[c][level].as_str().cmp(value))
                        .expect("known path was inserted into the trie");
                    children[at]
                }
            };
        }
        counts[node] += 1;
    }
    for level in topology.levels().iter().rev() {
        for &v in level {
            if let Some(p) = topology.parent(v) {
                counts[p] += counts[v];
            }
        }
    }

    HierTree::from_parts(Arc::new(topology), paths, counts)
}

/// True iff every internal node's count equals the sum of its children's.
pub fn validate_consistency(tree: &HierTree) -> bool {
    tree.validate_consistency()
}
