//! Co-visibility knowledge graph over the object vocabulary.
//!
//! Two categories become connected once they are seen in the same frame. Edge
//! counts keep how many frames produced each edge; the adjacency used by the
//! GCN only records whether a count is positive.

use std::fmt::Write as _;
use std::sync::Mutex;

use thiserror::Error;

use crate::nn::{Matrix, Record};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KgError {
    #[error("visible vector has length {got}, graph has {expected} nodes")]
    Dimension { expected: usize, got: usize },
    #[error("graph dump line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    size: usize,
    edge_counts: Vec<u64>,
}

impl KnowledgeGraph {
    pub fn new(size: usize) -> Self {
        KnowledgeGraph { size, edge_counts: vec![0; size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn edge_count(&self, i: usize, j: usize) -> u64 {
        self.edge_counts[i * self.size + j]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edge_count(i, j) > 0
    }

    pub fn edge_total(&self) -> usize {
        (0..self.size).flat_map(|i| (i + 1..self.size).map(move |j| (i, j))).filter(|&(i, j)| self.has_edge(i, j)).count()
    }

    /// Connects every pair of co-visible categories.
    pub fn update(&mut self, visible: &[bool]) -> Result<(), KgError> {
        if visible.len() != self.size {
            return Err(KgError::Dimension { expected: self.size, got: visible.len() });
        }
        let seen: Vec<usize> = visible.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i).collect();
        for (k, &i) in seen.iter().enumerate() {
            for &j in &seen[k + 1..] {
                self.edge_counts[i * self.size + j] += 1;
                self.edge_counts[j * self.size + i] += 1;
            }
        }
        Ok(())
    }

    /// Binary symmetric adjacency with a zero diagonal.
    pub fn adjacency(&self) -> Matrix {
        let data = self.edge_counts.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect();
        Matrix { rows: self.size, cols: self.size, data }
    }

    /// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
    pub fn normalized_adjacency(&self) -> Matrix {
        let n = self.size;
        let mut a = self.adjacency();
        for i in 0..n {
            a.set(i, i, 1.0);
        }
        let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt()).collect();
        for i in 0..n {
            for j in 0..n {
                let v = a.get(i, j);
                if v != 0.0 {
                    a.set(i, j, v * inv_sqrt[i] * inv_sqrt[j]);
                }
            }
        }
        a
    }

    /// Text edge list: a `size N` header then `i j count` for each edge with `i < j`.
    pub fn dump(&self) -> String {
        let mut out = format!("size {}\n", self.size);
        for i in 0..self.size {
            for j in i + 1..self.size {
                let c = self.edge_count(i, j);
                if c > 0 {
                    let _ = writeln!(out, "{i} {j} {c}");
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, KgError> {
        let mut graph: Option<KnowledgeGraph> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |msg: String| KgError::Parse { line, msg };
            let toks: Vec<&str> = raw.split_whitespace().collect();
            if toks.is_empty() || toks[0].starts_with('#') {
                continue;
            }
            match (&mut graph, toks.as_slice()) {
                (None, ["size", n]) => {
                    let n = n.parse().map_err(|_| err(format!("bad size {n:?}")))?;
                    graph = Some(KnowledgeGraph::new(n));
                }
                (None, _) => return Err(err("expected `size N` header".into())),
                (Some(g), [i, j, c]) => {
                    let parse = |t: &str| t.parse::<u64>().map_err(|_| err(format!("bad number {t:?}")));
                    let (i, j, c) = (parse(i)? as usize, parse(j)? as usize, parse(c)?);
                    if i >= g.size || j >= g.size || i == j {
                        return Err(err(format!("invalid edge ({i}, {j})")));
                    }
                    g.edge_counts[i * g.size + j] = c;
                    g.edge_counts[j * g.size + i] = c;
                }
                (Some(_), _) => return Err(err(format!("expected `i j count`, got {raw:?}"))),
            }
        }
        graph.ok_or(KgError::Parse { line: 0, msg: "empty graph dump".into() })
    }

    pub fn to_record(&self) -> Record {
        Record {
            name: "kg.edge_counts".into(),
            shape: vec![self.size, self.size],
            values: self.edge_counts.iter().map(|&c| c as f32).collect(),
        }
    }

    pub fn from_record(record: &Record) -> Option<Self> {
        match record.shape[..] {
            [n, m] if n == m && record.values.len() == n * n => Some(KnowledgeGraph {
                size: n,
                edge_counts: record.values.iter().map(|&v| v.max(0.0) as u64).collect(),
            }),
            _ => None,
        }
    }
}

/// One-hot node features: the `size x size` identity.
pub fn node_feature_init(size: usize) -> Matrix {
    Matrix::identity(size)
}

/// Graph shared by all workers. Each update is applied under one lock, so
/// snapshots always see whole frames.
#[derive(Debug)]
pub struct SharedGraph {
    inner: Mutex<KnowledgeGraph>,
}

impl SharedGraph {
    pub fn new(graph: KnowledgeGraph) -> Self {
        SharedGraph { inner: Mutex::new(graph) }
    }

    pub fn update(&self, visible: &[bool]) -> Result<(), KgError> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).update(visible)
    }

    pub fn snapshot(&self) -> KnowledgeGraph {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn into_inner(self) -> KnowledgeGraph {
        self.inner.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(n: usize, on: &[usize]) -> Vec<bool> {
        (0..n).map(|i| on.contains(&i)).collect()
    }

    #[test]
    fn single_visible_adds_nothing() {
        let mut g = KnowledgeGraph::new(4);
        g.update(&mask(4, &[2])).unwrap();
        assert_eq!(g, KnowledgeGraph::new(4));
    }

    #[test]
    fn pair_and_repeat() {
        let mut g = KnowledgeGraph::new(4);
        g.update(&mask(4, &[1, 3])).unwrap();
        assert!(g.has_edge(1, 3) && g.has_edge(3, 1));
        let once = g.adjacency();
        g.update(&mask(4, &[1, 3])).unwrap();
        assert_eq!(g.adjacency(), once);
        assert_eq!(g.edge_count(1, 3), 2);
        assert_eq!(g.edge_count(3, 1), 2);
        assert_eq!(g.update(&[true]), Err(KgError::Dimension { expected: 4, got: 1 }));
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(KnowledgeGraph::new(3).normalized_adjacency(), Matrix::identity(3));
        let mut g = KnowledgeGraph::new(2);
        g.update(&[true, true]).unwrap();
        let a = g.normalized_adjacency();
        assert!(a.data.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn node_features_are_one_hot() {
        assert_eq!(node_feature_init(1).data, vec![1.0]);
        let h = node_feature_init(4);
        for i in 0..4 {
            let nz: Vec<usize> = (0..4).filter(|&j| h.get(i, j) != 0.0).collect();
            assert_eq!(nz, vec![i]);
            assert_eq!(h.get(i, i), 1.0);
        }
    }

    #[test]
    fn dump_round_trip() {
        let mut g = KnowledgeGraph::new(5);
        g.update(&mask(5, &[0, 2, 4])).unwrap();
        g.update(&mask(5, &[0, 2])).unwrap();
        let text = g.dump();
        assert_eq!(text, "size 5\n0 2 2\n0 4 1\n2 4 1\n");
        assert_eq!(KnowledgeGraph::parse(&text).unwrap(), g);
        assert!(KnowledgeGraph::parse("size 2\n0 0 1\n").is_err());
        assert!(KnowledgeGraph::parse("0 1 1\n").is_err());
        assert_eq!(KnowledgeGraph::from_record(&g.to_record()).unwrap(), g);
    }

    proptest! {
        #[test]
        fn normalized_adjacency_properties(
            frames in prop::collection::vec(prop::collection::vec(any::<bool>(), 8), 0..12),
        ) {
            let mut g = KnowledgeGraph::new(8);
            let mut edges_before = 0;
            for f in &frames {
                g.update(f).unwrap();
                // edges never disappear
                prop_assert!(g.edge_total() >= edges_before);
                edges_before = g.edge_total();
            }
            let a = g.normalized_adjacency();
            prop_assert_eq!(a.transpose(), a.clone());
            for i in 0..8 {
                prop_assert!(g.adjacency().get(i, i) == 0.0);
                let row: f64 = a.row(i).iter().sum();
                prop_assert!(row > 0.0);
                let isolated = (0..8).all(|j| !g.has_edge(i, j));
                if isolated {
                    prop_assert_eq!(row, 1.0);
                }
            }
            // doubling counts leaves the normalisation unchanged
            let mut twice = g.clone();
            for f in &frames {
                twice.update(f).unwrap();
            }
            prop_assert_eq!(twice.normalized_adjacency(), a);
        }
    }
}
