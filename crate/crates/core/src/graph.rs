//! Mixed graphs (path diagrams) with directed and bidirected edges.
//!
//! A directed edge `u -> v` allows a nonzero coefficient `B[v, u]`; a
//! bidirected edge `u <-> v` allows a nonzero error covariance
//! `Omega[u, v]`. Vertex order is declaration order and fixes every
//! matrix index downstream.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::GraphError;

/// Counts of estimating equations and free parameters for a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofCounts {
    /// Number of naive estimating equations, `m + m(m+1)/2`.
    pub q: usize,
    /// Number of free parameters, `|E->| + |E<->| + m`.
    pub d: usize,
    /// Number of profiled constraints, `m + m(m-1)/2 - |E<->|`.
    pub profile_constraints: usize,
}

impl DofCounts {
    pub fn overidentification(&self) -> usize {
        self.q.saturating_sub(self.d)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedGraph {
    names: Vec<String>,
    /// `(tail, head)` pairs, sorted.
    directed: Vec<(usize, usize)>,
    /// `(min, max)` pairs, sorted.
    bidirected: Vec<(usize, usize)>,
    parents: Vec<Vec<usize>>,
    siblings: Vec<Vec<usize>>,
}

fn valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl MixedGraph {
    /// Builds a graph from vertex names and index-based edge lists.
    ///
    /// Bidirected edges are deduplicated as unordered pairs; repeated
    /// directed edges collapse to one.
    pub fn new(
        names: Vec<String>,
        directed: impl IntoIterator<Item = (usize, usize)>,
        bidirected: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        let m = names.len();
        let mut seen = BTreeSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(GraphError::DuplicateVertex(name.clone()));
            }
        }
        let check = |i: usize| {
            if i >= m {
                Err(GraphError::IndexOutOfRange(i))
            } else {
                Ok(())
            }
        };
        let mut dir = BTreeSet::new();
        for (u, v) in directed {
            check(u)?;
            check(v)?;
            if u == v {
                return Err(GraphError::SelfLoop(names[u].clone()));
            }
            dir.insert((u, v));
        }
        let mut bi = BTreeSet::new();
        for (u, v) in bidirected {
            check(u)?;
            check(v)?;
            if u == v {
                return Err(GraphError::SelfLoop(names[u].clone()));
            }
            bi.insert((u.min(v), u.max(v)));
        }
        let mut parents = vec![Vec::new(); m];
        for &(u, v) in &dir {
            parents[v].push(u);
        }
        let mut siblings = vec![Vec::new(); m];
        for &(u, v) in &bi {
            siblings[u].push(v);
            siblings[v].push(u);
        }
        for s in parents.iter_mut().chain(siblings.iter_mut()) {
            s.sort_unstable();
        }
        Ok(MixedGraph {
            names,
            directed: dir.into_iter().collect(),
            bidirected: bi.into_iter().collect(),
            parents,
            siblings,
        })
    }

    /// Builds a graph from name-based edge lists.
    pub fn from_named<S: AsRef<str>>(
        names: &[S],
        directed: &[(S, S)],
        bidirected: &[(S, S)],
    ) -> Result<Self, GraphError> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        let lookup = |s: &S| {
            names
                .iter()
                .position(|n| n == s.as_ref())
                .ok_or_else(|| GraphError::UnknownVertex(s.as_ref().to_string()))
        };
        let dir = directed
            .iter()
            .map(|(u, v)| Ok((lookup(u)?, lookup(v)?)))
            .collect::<Result<Vec<_>, GraphError>>()?;
        let bi = bidirected
            .iter()
            .map(|(u, v)| Ok((lookup(u)?, lookup(v)?)))
            .collect::<Result<Vec<_>, GraphError>>()?;
        MixedGraph::new(names, dir, bi)
    }

    /// Parses the text graph format:
    ///
    /// ```text
    /// # comment
    /// nodes: A B C
    /// A -> B
    /// B <-> C
    /// ```
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut names: Option<Vec<String>> = None;
        let mut directed = Vec::new();
        let mut bidirected = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            if content.trim().is_empty() {
                continue;
            }
            let indent = content.len() - content.trim_start().len();
            let content = content.trim();
            let syntax = |column: usize, message: String| GraphError::Syntax {
                line: line_no,
                column,
                message,
            };

            let Some(declared) = names.as_mut() else {
                let Some(rest) = content.strip_prefix("nodes:") else {
                    return Err(syntax(indent + 1, "expected `nodes:` declaration".into()));
                };
                let mut list: Vec<String> = Vec::new();
                let offset = indent + "nodes:".len();
                let mut col = 0;
                for tok in rest.split_whitespace() {
                    let at = rest[col..].find(tok).map(|p| p + col).unwrap_or(col);
                    col = at + tok.len();
                    if !valid_name(tok) {
                        return Err(syntax(offset + at + 1, format!("invalid vertex name `{tok}`")));
                    }
                    if list.iter().any(|n| n == tok) {
                        return Err(GraphError::DuplicateVertex(tok.to_string()));
                    }
                    list.push(tok.to_string());
                }
                names = Some(list);
                continue;
            };

            if content.starts_with("nodes:") {
                return Err(syntax(indent + 1, "repeated `nodes:` declaration".into()));
            }
            let (op, pos, bi) = if let Some(p) = content.find("<->") {
                ("<->", p, true)
            } else if let Some(p) = content.find("->") {
                ("->", p, false)
            } else {
                return Err(syntax(indent + 1, "expected `U -> V` or `U <-> V`".into()));
            };
            let lhs = content[..pos].trim();
            let rhs = content[pos + op.len()..].trim();
            if !valid_name(lhs) {
                return Err(syntax(indent + 1, format!("invalid vertex name `{lhs}`")));
            }
            if !valid_name(rhs) {
                let rhs_col = indent + pos + op.len() + 1;
                return Err(syntax(rhs_col, format!("invalid vertex name `{rhs}`")));
            }
            let find = |n: &str| {
                declared
                    .iter()
                    .position(|d| d == n)
                    .ok_or_else(|| GraphError::UnknownVertex(n.to_string()))
            };
            let (u, v) = (find(lhs)?, find(rhs)?);
            if u == v {
                return Err(GraphError::SelfLoop(lhs.to_string()));
            }
            if bi {
                bidirected.push((u, v));
            } else {
                directed.push((u, v));
            }
        }

        let names = names.ok_or(GraphError::Syntax {
            line: text.lines().count().max(1),
            column: 1,
            message: "missing `nodes:` declaration".into(),
        })?;
        MixedGraph::new(names, directed, bidirected)
    }

    pub fn num_vertices(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Directed edges as `(tail, head)`, sorted. This order indexes the
    /// free coefficients of `B`.
    pub fn directed_edges(&self) -> &[(usize, usize)] {
        &self.directed
    }

    /// Bidirected edges as `(min, max)`, sorted.
    pub fn bidirected_edges(&self) -> &[(usize, usize)] {
        &self.bidirected
    }

    pub fn has_directed(&self, from: usize, to: usize) -> bool {
        self.directed.binary_search(&(from, to)).is_ok()
    }

    pub fn has_bidirected(&self, u: usize, v: usize) -> bool {
        self.bidirected.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    pub fn parents(&self, v: usize) -> Result<&[usize], GraphError> {
        self.parents
            .get(v)
            .map(Vec::as_slice)
            .ok_or(GraphError::IndexOutOfRange(v))
    }

    pub fn siblings(&self, v: usize) -> Result<&[usize], GraphError> {
        self.siblings
            .get(v)
            .map(Vec::as_slice)
            .ok_or(GraphError::IndexOutOfRange(v))
    }

    pub fn parents_of(&self, name: &str) -> Result<Vec<&str>, GraphError> {
        let v = self
            .index_of(name)
            .ok_or_else(|| GraphError::UnknownVertex(name.to_string()))?;
        Ok(self.parents[v].iter().map(|&u| self.names[u].as_str()).collect())
    }

    pub fn siblings_of(&self, name: &str) -> Result<Vec<&str>, GraphError> {
        let v = self
            .index_of(name)
            .ok_or_else(|| GraphError::UnknownVertex(name.to_string()))?;
        Ok(self.siblings[v].iter().map(|&u| self.names[u].as_str()).collect())
    }

    /// Pairs `(u, v)`, `u < v`, without a bidirected edge, in
    /// lexicographic order. Each one contributes a profiled covariance
    /// constraint.
    pub fn nonedges(&self) -> Vec<(usize, usize)> {
        let m = self.num_vertices();
        let mut out = Vec::with_capacity(m * m.saturating_sub(1) / 2);
        for u in 0..m {
            for v in u + 1..m {
                if !self.has_bidirected(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Free entries of `Omega` in half-vectorization order: pairs
    /// `(u, v)` with `u <= v` that are diagonal or bidirected.
    pub fn omega_support(&self) -> Vec<(usize, usize)> {
        let m = self.num_vertices();
        let mut out = Vec::with_capacity(m + self.bidirected.len());
        for u in 0..m {
            out.push((u, u));
            for &v in &self.siblings[u] {
                if v > u {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn dof_counts(&self) -> DofCounts {
        let m = self.num_vertices();
        DofCounts {
            q: m + m * (m + 1) / 2,
            d: self.directed.len() + self.bidirected.len() + m,
            profile_constraints: m + m * m.saturating_sub(1) / 2 - self.bidirected.len(),
        }
    }

    /// True iff the directed part has no directed cycle.
    pub fn is_acyclic(&self) -> bool {
        let m = self.num_vertices();
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut children = vec![Vec::new(); m];
        for &(u, v) in &self.directed {
            children[u].push(v);
        }
        let mut stack: Vec<usize> = (0..m).filter(|&v| indegree[v] == 0).collect();
        let mut visited = 0;
        while let Some(u) = stack.pop() {
            visited += 1;
            for &v in &children[u] {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    stack.push(v);
                }
            }
        }
        visited == m
    }

    /// True when both graphs share the vertex list and every edge of
    /// `self` is an edge of `other`.
    pub fn is_subgraph_of(&self, other: &MixedGraph) -> bool {
        self.names == other.names
            && self.directed.iter().all(|&(u, v)| other.has_directed(u, v))
            && self.bidirected.iter().all(|&(u, v)| other.has_bidirected(u, v))
    }

    /// Relabels vertices so that old vertex `perm[k]` becomes vertex `k`.
    pub fn permuted(&self, perm: &[usize]) -> Result<MixedGraph, GraphError> {
        let m = self.num_vertices();
        let mut inverse = vec![usize::MAX; m];
        for (k, &old) in perm.iter().enumerate() {
            if old >= m {
                return Err(GraphError::IndexOutOfRange(old));
            }
            inverse[old] = k;
        }
        if perm.len() != m || inverse.contains(&usize::MAX) {
            return Err(GraphError::IndexOutOfRange(perm.len()));
        }
        let names = perm.iter().map(|&o| self.names[o].clone()).collect();
        MixedGraph::new(
            names,
            self.directed.iter().map(|&(u, v)| (inverse[u], inverse[v])),
            self.bidirected.iter().map(|&(u, v)| (inverse[u], inverse[v])),
        )
    }
}

impl fmt::Display for MixedGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "nodes:")?;
        for n in &self.names {
            write!(f, " {n}")?;
        }
        writeln!(f)?;
        for &(u, v) in &self.directed {
            writeln!(f, "{} -> {}", self.names[u], self.names[v])?;
        }
        for &(u, v) in &self.bidirected {
            writeln!(f, "{} <-> {}", self.names[u], self.names[v])?;
        }
        Ok(())
    }
}
