//! Feature relation graph and the quadratic penalty matrices derived from it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::FeatureInfo;
use crate::real::Real;
use crate::sparse::CsrMatrix;

/// Default number of leading code characters defining a shared ancestor.
pub const DEFAULT_PREFIX_LEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    SameCode,
    SharedAncestor,
}

impl Relation {
    pub fn as_str(self) -> &'static str {
        match self {
            Relation::SameCode => "same_code",
            Relation::SharedAncestor => "shared_ancestor",
        }
    }
}

impl FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "same_code" => Ok(Relation::SameCode),
            "shared_ancestor" => Ok(Relation::SharedAncestor),
            _ => Err(format!("unknown relation tag {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    /// Always `a < b`.
    pub a: usize,
    pub b: usize,
    pub relation: Relation,
}

/// Symmetric, binary, loop-free relation graph over feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetwork {
    dim: usize,
    edges: Vec<Edge>,
}

fn code_prefix(code: &str, len: usize) -> String {
    code.chars().filter(|c| *c != '.').take(len).collect()
}

/// Links filter features that share a code across periods (same code) or
/// share a `prefix_len` code prefix within one coding type and period
/// (shared ancestor). Statistic and interaction columns stay isolated.
pub fn build_network(features: &[FeatureInfo], prefix_len: usize) -> FeatureNetwork {
    let mut by_code: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    let mut by_branch: BTreeMap<(String, String, String), Vec<(usize, String)>> = BTreeMap::new();
    for (j, f) in features.iter().enumerate() {
        let (Some(t), Some(period)) = (f.event_type(), f.period()) else {
            continue;
        };
        let channel = t.channel.to_string();
        by_code
            .entry((channel.clone(), t.code.clone()))
            .or_default()
            .push(j);
        by_branch
            .entry((channel, code_prefix(&t.code, prefix_len), period))
            .or_default()
            .push((j, t.code));
    }
    let mut edges = Vec::new();
    for members in by_code.values() {
        for (x, &a) in members.iter().enumerate() {
            for &b in &members[x + 1..] {
                edges.push(Edge {
                    a: a.min(b),
                    b: a.max(b),
                    relation: Relation::SameCode,
                });
            }
        }
    }
    for members in by_branch.values() {
        for (x, (a, ca)) in members.iter().enumerate() {
            for (b, cb) in &members[x + 1..] {
                if ca != cb {
                    edges.push(Edge {
                        a: *a.min(b),
                        b: *a.max(b),
                        relation: Relation::SharedAncestor,
                    });
                }
            }
        }
    }
    edges.sort();
    edges.dedup_by_key(|e| (e.a, e.b));
    FeatureNetwork {
        dim: features.len(),
        edges,
    }
}

impl FeatureNetwork {
    pub fn from_edges(dim: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut out = Vec::new();
        for e in edges {
            if e.a == e.b {
                return Err(Error::Data(format!("self-loop on feature {}", e.a)));
            }
            if e.a.max(e.b) >= dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: e.a.max(e.b) + 1,
                });
            }
            out.push(Edge {
                a: e.a.min(e.b),
                b: e.a.max(e.b),
                relation: e.relation,
            });
        }
        out.sort();
        out.dedup_by_key(|e| (e.a, e.b));
        Ok(Self { dim, edges: out })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Keeps the columns in `keep` (ascending), renumbered.
    pub fn restrict(&self, keep: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.dim];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| map[e.a] != usize::MAX && map[e.b] != usize::MAX)
            .map(|e| Edge {
                a: map[e.a].min(map[e.b]),
                b: map[e.a].max(map[e.b]),
                relation: e.relation,
            })
            .collect::<Vec<_>>();
        let mut net = Self {
            dim: keep.len(),
            edges,
        };
        net.edges.sort();
        net
    }

    /// Symmetric relation matrix `W`.
    pub fn adjacency<T: Real>(&self) -> CsrMatrix<T> {
        CsrMatrix::from_triplets(
            self.dim,
            self.dim,
            self.edges
                .iter()
                .flat_map(|e| [(e.a, e.b, T::one()), (e.b, e.a, T::one())]),
        )
    }

    pub fn write_edges(&self, features: &[FeatureInfo], path: &Path) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: features.len(),
            });
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["feature_id_a", "feature_id_b", "weight", "relation_tag"])?;
        for e in &self.edges {
            w.write_record([
                features[e.a].id.as_str(),
                features[e.b].id.as_str(),
                "1",
                e.relation.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_edges(features: &[FeatureInfo], path: &Path) -> Result<Self> {
        let index: BTreeMap<&str, usize> = features
            .iter()
            .enumerate()
            .map(|(j, f)| (f.id.as_str(), j))
            .collect();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let mut edges = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let find = |id: &str| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::format(path, format!("unknown feature id {id}")))
            };
            let relation = row[3].parse().map_err(|m: String| Error::format(path, m))?;
            edges.push(Edge {
                a: find(&row[0])?,
                b: find(&row[1])?,
                relation,
            });
        }
        Self::from_edges(features.len(), edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    None,
    Laplacian,
    RandomWalk,
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegularizerKind::None => "none",
            RegularizerKind::Laplacian => "laplacian",
            RegularizerKind::RandomWalk => "random_walk",
        })
    }
}

impl FromStr for RegularizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(Self::None),
            "laplacian" => Ok(Self::Laplacian),
            "random_walk" => Ok(Self::RandomWalk),
            _ => Err(format!("unknown regularizer {s:?}")),
        }
    }
}

/// Positive semidefinite penalty matrix `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerMatrix<T> {
    pub kind: RegularizerKind,
    s: CsrMatrix<T>,
}

/// `S = D - W`, so `w^T S w = 1/2 sum_jk W_jk (w_j - w_k)^2`.
pub fn laplacian_transform<T: Real>(net: &FeatureNetwork) -> RegularizerMatrix<T> {
    let w = net.adjacency::<T>();
    let mut trips: Vec<(usize, usize, T)> = w.triplets().map(|(i, j, v)| (i, j, -v)).collect();
    trips.extend((0..net.dim()).map(|i| (i, i, w.row_sum(i))));
    RegularizerMatrix {
        kind: RegularizerKind::Laplacian,
        s: CsrMatrix::from_triplets(net.dim(), net.dim(), trips),
    }
}

/// `S = (I - P)^T (I - P)` with `P` the row-normalized `W`.
///
/// Isolated features get an identity row in `P`, so they add nothing.
pub fn random_walk_transform<T: Real>(net: &FeatureNetwork) -> RegularizerMatrix<T> {
    let w = net.adjacency::<T>();
    let mut trips = Vec::new();
    for i in 0..net.dim() {
        let deg = w.row_sum(i);
        if deg <= T::zero() {
            continue;
        }
        trips.push((i, i, T::one()));
        trips.extend(w.row(i).map(|(j, v)| (i, j, -v / deg)));
    }
    let a = CsrMatrix::from_triplets(net.dim(), net.dim(), trips);
    RegularizerMatrix {
        kind: RegularizerKind::RandomWalk,
        s: a.gram(),
    }
}

impl<T: Real> RegularizerMatrix<T> {
    pub fn build(kind: RegularizerKind, net: &FeatureNetwork) -> Option<Self> {
        match kind {
            RegularizerKind::None => None,
            RegularizerKind::Laplacian => Some(laplacian_transform(net)),
            RegularizerKind::RandomWalk => Some(random_walk_transform(net)),
        }
    }

    pub fn matrix(&self) -> &CsrMatrix<T> {
        &self.s
    }

    pub fn dim(&self) -> usize {
        self.s.n_rows()
    }

    fn check(&self, w: &[T]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: w.len(),
            });
        }
        Ok(())
    }

    /// `w^T S w`.
    pub fn penalty(&self, w: &[T]) -> Result<T> {
        self.check(w)?;
        Ok(self.s.quad_form(w))
    }

    /// `2 S w`.
    pub fn penalty_gradient(&self, w: &[T]) -> Result<Vec<T>> {
        self.check(w)?;
        let two = T::lit(2.0);
        Ok(self.s.matvec(w).into_iter().map(|v| two * v).collect())
    }

    /// Adds `scale * w^T S w` to the return value and `scale * 2 S w` into `grad`.
    pub(crate) fn accumulate(&self, w: &[T], scale: T, grad: &mut [T]) -> T {
        let mut total = T::zero();
        let two = T::lit(2.0);
        for i in 0..self.dim() {
            let sw: T = self.s.row(i).map(|(j, v)| v * w[j]).sum();
            total += w[i] * sw;
            grad[i] += scale * two * sw;
        }
        scale * total
    }

    pub fn cast<U: Real>(&self) -> RegularizerMatrix<U> {
        RegularizerMatrix {
            kind: self.kind,
            s: self.s.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Channel, EventType};
    use crate::filterbank::{default_filters, FilterSpec};

    fn feat(code: &str, spec: FilterSpec) -> FeatureInfo {
        FeatureInfo::filter(&EventType::new(Channel::Diagnosis, code), spec)
    }

    #[test]
    fn shared_ancestor_examples() {
        let p = FilterSpec::uniform(3.0, 0.0);
        let net = build_network(&[feat("F31", p), feat("F32", p)], 2);
        assert_eq!(net.n_edges(), 1);
        assert_eq!(net.edges()[0].relation, Relation::SharedAncestor);
        let net = build_network(&[feat("F31", p), feat("F20", p)], 2);
        assert_eq!(net.n_edges(), 0);
    }

    #[test]
    fn same_code_clique_over_five_periods() {
        let feats: Vec<FeatureInfo> = default_filters().into_iter().map(|s| feat("F31", s)).collect();
        let net = build_network(&feats, 2);
        // brute-force pair enumeration
        let mut expected = 0;
        for a in 0..feats.len() {
            for b in a + 1..feats.len() {
                if feats[a].code == feats[b].code && feats[a].period() != feats[b].period() {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 10);
        assert_eq!(net.n_edges(), expected);
        assert!(net.edges().iter().all(|e| e.relation == Relation::SameCode));
    }

    #[test]
    fn different_channels_or_periods_are_not_ancestors() {
        let p = FilterSpec::uniform(3.0, 0.0);
        let q = FilterSpec::uniform(3.0, 3.0);
        let a = feat("F31", p);
        let b = FeatureInfo::filter(&EventType::new(Channel::Procedure, "F32"), p);
        let c = feat("F32", q);
        assert_eq!(build_network(&[a.clone(), b], 2).n_edges(), 0);
        assert_eq!(build_network(&[a, c], 2).n_edges(), 0);
    }

    #[test]
    fn laplacian_single_edge() {
        let net = FeatureNetwork::from_edges(
            2,
            [Edge {
                a: 0,
                b: 1,
                relation: Relation::SameCode,
            }],
        )
        .unwrap();
        let s = laplacian_transform::<f64>(&net);
        assert_eq!(s.penalty(&[1.0, -1.0]).unwrap(), 4.0);
        assert_eq!(s.penalty_gradient(&[1.0, -1.0]).unwrap(), vec![4.0, -4.0]);
        assert_eq!(s.penalty(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(s.penalty_gradient(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(s.penalty(&[2.5, 2.5]).unwrap(), 0.0);
        for i in 0..2 {
            assert_eq!(s.matrix().row_sum(i), 0.0);
        }
    }

    #[test]
    fn random_walk_two_nodes() {
        let net = FeatureNetwork::from_edges(
            2,
            [Edge {
                a: 0,
                b: 1,
                relation: Relation::SameCode,
            }],
        )
        .unwrap();
        let s = random_walk_transform::<f64>(&net);
        assert!((s.penalty(&[1.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(s.penalty(&[3.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn random_walk_isolated_node_is_free() {
        let net = FeatureNetwork::from_edges(
            3,
            [Edge {
                a: 0,
                b: 1,
                relation: Relation::SameCode,
            }],
        )
        .unwrap();
        let s = random_walk_transform::<f64>(&net);
        assert_eq!(s.penalty(&[0.0, 0.0, 7.0]).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = FeatureNetwork::from_edges(3, []).unwrap();
        let s = laplacian_transform::<f64>(&net);
        assert!(matches!(
            s.penalty(&[1.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 1 })
        ));
        assert!(s.penalty_gradient(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn self_loops_rejected() {
        let r = FeatureNetwork::from_edges(
            2,
            [Edge {
                a: 1,
                b: 1,
                relation: Relation::SameCode,
            }],
        );
        assert!(r.is_err());
    }

    #[test]
    fn restrict_renumbers() {
        let feats: Vec<FeatureInfo> = default_filters().into_iter().map(|s| feat("A1", s)).collect();
        let net = build_network(&feats, 2).restrict(&[1, 3, 4]);
        assert_eq!(net.dim(), 3);
        assert_eq!(net.n_edges(), 3);
    }

    #[test]
    fn edge_list_round_trip() {
        let p = FilterSpec::uniform(3.0, 0.0);
        let feats: Vec<FeatureInfo> = ["F31", "F32", "F33", "G10"]
            .iter()
            .flat_map(|c| [feat(c, p), feat(c, FilterSpec::uniform(3.0, 3.0))])
            .collect();
        let net = build_network(&feats, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.csv");
        net.write_edges(&feats, &path).unwrap();
        assert_eq!(FeatureNetwork::read_edges(&feats, &path).unwrap(), net);
    }
}
