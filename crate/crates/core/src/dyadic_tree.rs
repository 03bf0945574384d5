//! Dyadic cube geometry on `[0,1]^d`, Neveu-addressed vertices of the
//! `2^d`-regular tree, and the inside/outside/uncertain labeling rule.
//!
//! A child index `u ∈ {1, …, 2^d}` encodes one binary offset per axis:
//! `u = 1 + Σ_i b_i 2^(i-1)`, where `b_i = 1` selects the upper half of axis `i`.
//! In one dimension child 1 is the left half and child 2 the right half.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deepest level at which dyadic coordinates stay exact in `f64`.
pub const MAX_DEPTH: usize = 62;

/// Position of a vertex in the infinite `2^d`-regular tree. The empty path is the root.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VertexAddress(Vec<u32>);

impl VertexAddress {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    /// Builds an address, checking every index against `2^dim`.
    pub fn new(path: Vec<u32>, dim: usize) -> Result<Self> {
        let addr = Self(path);
        addr.validate(dim)?;
        Ok(addr)
    }

    /// Builds an address without range checks.
    pub fn from_path_unchecked(path: Vec<u32>) -> Self {
        Self(path)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if dim == 0 || dim > 31 {
            return Err(self.invalid(dim, "dimension must lie in 1..=31"));
        }
        let arity = 1u32 << dim;
        if let Some(bad) = self.0.iter().find(|&&u| u == 0 || u > arity) {
            return Err(self.invalid(dim, &format!("child index {bad} outside 1..={arity}")));
        }
        if self.0.len() > MAX_DEPTH {
            return Err(self.invalid(dim, &format!("depth exceeds {MAX_DEPTH}")));
        }
        Ok(())
    }

    fn invalid(&self, dim: usize, reason: &str) -> Error {
        Error::InvalidAddress {
            path: self.0.clone(),
            dim,
            reason: reason.to_string(),
        }
    }

    pub fn path(&self) -> &[u32] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Some(Self(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// Child index of this vertex within its parent (1-based), `None` for the root.
    pub fn last_index(&self) -> Option<u32> {
        self.0.last().copied()
    }

    pub fn child(&self, index: u32) -> Self {
        let mut path = Vec::with_capacity(self.0.len() + 1);
        path.extend_from_slice(&self.0);
        path.push(index);
        Self(path)
    }

    /// All `2^dim` children in index order.
    pub fn children(&self, dim: usize) -> impl Iterator<Item = VertexAddress> + '_ {
        (1..=(1u32 << dim)).map(move |i| self.child(i))
    }

    /// `true` if `self` is a prefix of `other` (every vertex is its own ancestor).
    pub fn is_ancestor_of(&self, other: &VertexAddress) -> bool {
        other.0.len() >= self.0.len() && other.0[..self.0.len()] == self.0[..]
    }

    /// `a(u)`: the non-root prefixes of `u`, including `u`, by increasing depth.
    pub fn ancestors(&self) -> Vec<VertexAddress> {
        (1..=self.0.len()).map(|k| Self(self.0[..k].to_vec())).collect()
    }

    /// Most recent common ancestor `u ∧ v` (longest common prefix).
    pub fn meet(&self, other: &VertexAddress) -> VertexAddress {
        Self(self.0[..self.meet_depth(other)].to_vec())
    }

    pub fn meet_depth(&self, other: &VertexAddress) -> usize {
        self.0
            .iter()
            .zip(other.0.iter())
            .take_while(|(a, b)| a == b)
            .count()
    }

    /// Key ordering vertices by depth first, then lexicographically.
    pub fn breadth_key(&self) -> (usize, &[u32]) {
        (self.0.len(), &self.0)
    }

    /// Stable byte encoding used to derive per-vertex random streams.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.0.len());
        out.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        for u in &self.0 {
            out.extend_from_slice(&u.to_le_bytes());
        }
        out
    }
}

impl fmt::Display for VertexAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, u) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{u}")?;
        }
        write!(f, ")")
    }
}

/// `a(u)` together with `u ∧ v`.
pub fn ancestors_and_meet(u: &VertexAddress, v: &VertexAddress) -> (Vec<VertexAddress>, VertexAddress) {
    (u.ancestors(), u.meet(v))
}

/// Axis-aligned dyadic cube of side `2^-depth`, stored by its integer grid position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DyadicCube {
    depth: usize,
    /// Per-axis cell index `m`, so the axis interval is `[m 2^-depth, (m+1) 2^-depth]`.
    index: Vec<u64>,
}

impl DyadicCube {
    pub fn unit(dim: usize) -> Self {
        Self {
            depth: 0,
            index: vec![0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.index.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn grid_index(&self) -> &[u64] {
        &self.index
    }

    pub fn side(&self) -> f64 {
        dyadic(1, self.depth)
    }

    pub fn lower_corner(&self) -> Vec<f64> {
        self.index.iter().map(|&m| dyadic(m, self.depth)).collect()
    }

    pub fn upper_corner(&self) -> Vec<f64> {
        self.index.iter().map(|&m| dyadic(m + 1, self.depth)).collect()
    }

    /// Center coordinates `(2m+1) 2^(-depth-1)`.
    pub fn center(&self) -> Vec<f64> {
        self.index
            .iter()
            .map(|&m| dyadic(2 * m + 1, self.depth + 1))
            .collect()
    }

    /// Interval `[low, high]` along one axis.
    pub fn axis_interval(&self, axis: usize) -> (f64, f64) {
        let m = self.index[axis];
        (dyadic(m, self.depth), dyadic(m + 1, self.depth))
    }

    pub fn volume(&self) -> f64 {
        dyadic(1, self.depth * self.dim())
    }

    pub fn child(&self, child_index: u32) -> DyadicCube {
        let offset = child_index - 1;
        let index = self
            .index
            .iter()
            .enumerate()
            .map(|(axis, &m)| 2 * m + u64::from((offset >> axis) & 1))
            .collect();
        DyadicCube {
            depth: self.depth + 1,
            index,
        }
    }

    /// Closed containment.
    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|axis| {
            let (lo, hi) = self.axis_interval(axis);
            x[axis] >= lo && x[axis] <= hi
        })
    }

    /// Half-open containment `[low, high)` on every axis, with the face at 1 closed.
    pub fn contains_half_open(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|axis| {
            let (lo, hi) = self.axis_interval(axis);
            x[axis] >= lo && (x[axis] < hi || (hi == 1.0 && x[axis] <= 1.0))
        })
    }

    /// Index of the child whose half-open cell holds `x`; `x` must lie in `self`.
    pub fn child_index_of(&self, x: &[f64]) -> u32 {
        let half = dyadic(1, self.depth + 1);
        let mut offset = 0u32;
        for (axis, &m) in self.index.iter().enumerate() {
            let mid = dyadic(m, self.depth) + half;
            if x[axis] >= mid {
                offset |= 1 << axis;
            }
        }
        offset + 1
    }

    /// Sup-norm distance from `x` to the complement of the cube, zero outside it.
    pub fn inner_distance(&self, x: &[f64]) -> f64 {
        let mut dist = f64::INFINITY;
        for axis in 0..self.dim() {
            let (lo, hi) = self.axis_interval(axis);
            dist = dist.min(x[axis] - lo).min(hi - x[axis]);
        }
        dist.max(0.0)
    }
}

/// `m · 2^-j`, exact for the depths we allow.
fn dyadic(m: u64, j: usize) -> f64 {
    m as f64 * (-(j as f64)).exp2()
}

/// Geometric cube `Q(addr)`.
pub fn decode_cube(addr: &VertexAddress, dim: usize) -> Result<DyadicCube> {
    addr.validate(dim)?;
    Ok(addr
        .path()
        .iter()
        .fold(DyadicCube::unit(dim), |cube, &u| cube.child(u)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    /// Certified inside the failure set.
    I,
    /// Certified outside the failure set.
    O,
    /// Uncertain.
    U,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Label::I => "I",
            Label::O => "O",
            Label::U => "U",
        };
        f.write_str(s)
    }
}

/// Labels a cube of side `2^-depth` from the value of `g` at its center.
/// Exact ties with the margin `L 2^(-depth-1)` are uncertain.
pub fn classify(g_center: f64, threshold: f64, lipschitz: f64, depth: usize) -> Result<Label> {
    if !g_center.is_finite() {
        return Err(Error::Evaluation {
            path: Vec::new(),
            value: g_center,
        });
    }
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "Lipschitz constant must be positive and finite, got {lipschitz}"
        )));
    }
    let margin = lipschitz * (-(depth as f64) - 1.0).exp2();
    Ok(if g_center > threshold + margin {
        Label::I
    } else if g_center < threshold - margin {
        Label::O
    } else {
        Label::U
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexRecord {
    pub label: Label,
    /// Value of `g` at the cube center, `None` when the label was not computed from `g`.
    pub g_value: Option<f64>,
}

/// One row of the tree serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexEntry {
    pub path: Vec<u32>,
    pub label: Label,
    pub depth: usize,
}

/// Finite ancestor-closed subtree of the `2^d`-regular tree with a label per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTree {
    dim: usize,
    vertices: BTreeMap<VertexAddress, VertexRecord>,
}

impl LabeledTree {
    /// The tree `{root}` with the root uncertain and unevaluated.
    pub fn root_only(dim: usize) -> Self {
        let mut vertices = BTreeMap::new();
        vertices.insert(
            VertexAddress::root(),
            VertexRecord {
                label: Label::U,
                g_value: None,
            },
        );
        Self { dim, vertices }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arity(&self) -> u32 {
        1 << self.dim
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.vertices.keys().map(VertexAddress::depth).max().unwrap_or(0)
    }

    pub fn get(&self, addr: &VertexAddress) -> Option<&VertexRecord> {
        self.vertices.get(addr)
    }

    pub fn label(&self, addr: &VertexAddress) -> Option<Label> {
        self.vertices.get(addr).map(|r| r.label)
    }

    pub fn contains(&self, addr: &VertexAddress) -> bool {
        self.vertices.contains_key(addr)
    }

    pub(crate) fn insert(&mut self, addr: VertexAddress, record: VertexRecord) {
        self.vertices.insert(addr, record);
    }

    pub(crate) fn set_record(&mut self, addr: &VertexAddress, record: VertexRecord) {
        if let Some(slot) = self.vertices.get_mut(addr) {
            *slot = record;
        }
    }

    /// Vertices in lexicographic address order.
    pub fn iter(&self) -> impl Iterator<Item = (&VertexAddress, &VertexRecord)> {
        self.vertices.iter()
    }

    pub fn is_internal(&self, addr: &VertexAddress) -> bool {
        self.vertices.contains_key(&addr.child(1))
    }

    /// Leaves in lexicographic order.
    pub fn leaves(&self) -> impl Iterator<Item = (&VertexAddress, &VertexRecord)> {
        self.vertices.iter().filter(|(a, _)| !self.is_internal(a))
    }

    pub fn leaves_labeled(&self, label: Label) -> Vec<VertexAddress> {
        self.leaves()
            .filter(|(_, r)| r.label == label)
            .map(|(a, _)| a.clone())
            .collect()
    }

    /// Vertices with children in the tree (the root included when split).
    pub fn internal_vertices(&self) -> Vec<VertexAddress> {
        self.vertices
            .keys()
            .filter(|a| self.is_internal(a))
            .cloned()
            .collect()
    }

    /// Checks ancestor closure, full `2^d` splits, and `U` labels on internal vertices.
    pub fn check_structure(&self) -> Result<()> {
        if !self.vertices.contains_key(&VertexAddress::root()) {
            return Err(Error::InvalidArgument("tree has no root".into()));
        }
        for (addr, record) in &self.vertices {
            addr.validate(self.dim)?;
            if let Some(parent) = addr.parent() {
                if !self.vertices.contains_key(&parent) {
                    return Err(Error::InvalidArgument(format!("{addr} has no parent in the tree")));
                }
            }
            if self.is_internal(addr) {
                if record.label != Label::U {
                    return Err(Error::InvalidArgument(format!(
                        "internal vertex {addr} labeled {}",
                        record.label
                    )));
                }
                if let Some(missing) = addr.children(self.dim).find(|c| !self.vertices.contains_key(c)) {
                    return Err(Error::InvalidArgument(format!(
                        "internal vertex {addr} lacks child {missing}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serialization rows ordered by depth, then lexicographic path.
    pub fn entries(&self) -> Vec<VertexEntry> {
        let mut keys: Vec<&VertexAddress> = self.vertices.keys().collect();
        keys.sort_by(|a, b| a.breadth_key().cmp(&b.breadth_key()));
        keys.into_iter()
            .map(|a| VertexEntry {
                path: a.path().to_vec(),
                label: self.vertices[a].label,
                depth: a.depth(),
            })
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(&self.entries())
    }

    /// Rebuilds a tree from serialized rows. `g` values are not part of the format.
    pub fn from_entries(dim: usize, entries: &[VertexEntry]) -> Result<Self> {
        let mut vertices = BTreeMap::new();
        for e in entries {
            let addr = VertexAddress::new(e.path.clone(), dim)?;
            if addr.depth() != e.depth {
                return Err(Error::InvalidArgument(format!(
                    "entry {addr} declares depth {}",
                    e.depth
                )));
            }
            vertices.insert(
                addr,
                VertexRecord {
                    label: e.label,
                    g_value: None,
                },
            );
        }
        let tree = Self { dim, vertices };
        tree.check_structure()?;
        Ok(tree)
    }

    /// Same vertex set and labels, ignoring stored `g` values.
    pub fn same_shape(&self, other: &LabeledTree) -> bool {
        self.dim == other.dim
            && self.vertices.len() == other.vertices.len()
            && self
                .vertices
                .iter()
                .zip(other.vertices.iter())
                .all(|((a, ra), (b, rb))| a == b && ra.label == rb.label)
    }
}
