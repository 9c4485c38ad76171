//! Road-network graph, its symmetric-normalized adjacency, and the walk
//! enumeration reference for multi-hop propagation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Above this node count the dense `N×N` propagation matrix is not built.
pub const DENSE_NODE_LIMIT: usize = 4096;

/// Default refusal threshold for walk enumeration.
pub const DEFAULT_WALK_CAP: usize = 6;

/// One row of an adjacency listing. `line` is used in error messages.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRecord {
    pub from: usize,
    pub to: usize,
    pub cost: Option<f64>,
    pub line: usize,
}

/// An undirected edge stored with `a <= b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub cost: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GraphOptions {
    pub self_loops: bool,
}

/// Which kernel applies the normalized adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Dense up to [`DENSE_NODE_LIMIT`] nodes, neighbor lists above.
    #[default]
    Auto,
    Dense,
    Sparse,
}

/// Normalized adjacency in neighbor-list form, with an optional dense copy.
#[derive(Debug)]
struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    dense: Option<Vec<f64>>,
}

/// Undirected spatial graph with degrees and cached `D^-1/2 A D^-1/2`.
///
/// Immutable after construction; cloning shares the cached adjacency.
#[derive(Clone, Debug)]
pub struct SpatialGraph {
    num_nodes: usize,
    edges: Vec<Edge>,
    degrees: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    adjacency: Arc<NormalizedAdjacency>,
    propagation: Propagation,
}

/// Builds an undirected graph from an edge listing.
///
/// Duplicates and reversed duplicates collapse to one edge (the first cost
/// seen is kept). Self-loops are dropped with a warning unless enabled.
pub fn build_graph(
    num_nodes: usize,
    edges: &[EdgeRecord],
    opts: GraphOptions,
) -> Result<SpatialGraph> {
    if num_nodes == 0 {
        return Err(Error::Graph("graph needs at least one node".into()));
    }
    let mut canon: BTreeMap<(usize, usize), Option<f64>> = BTreeMap::new();
    for rec in edges {
        for id in [rec.from, rec.to] {
            if id >= num_nodes {
                return Err(Error::IngestionLine {
                    line: rec.line,
                    msg: format!("node id {id} out of range for {num_nodes} nodes"),
                });
            }
        }
        if rec.from == rec.to && !opts.self_loops {
            log::warn!("line {}: dropping self-loop on node {}", rec.line, rec.from);
            continue;
        }
        let key = (rec.from.min(rec.to), rec.from.max(rec.to));
        canon.entry(key).or_insert(rec.cost);
    }

    let mut neighbors = vec![Vec::new(); num_nodes];
    let mut out_edges = Vec::with_capacity(canon.len());
    for (&(a, b), &cost) in &canon {
        neighbors[a].push(b);
        if a != b {
            neighbors[b].push(a);
        }
        out_edges.push(Edge { a, b, cost });
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }
    let degrees: Vec<usize> = neighbors.iter().map(Vec::len).collect();
    let isolated = degrees.iter().filter(|&&d| d == 0).count();
    if isolated > 0 {
        log::warn!("{isolated} isolated node(s); their propagation rows are zero");
    }

    let mut row_ptr = Vec::with_capacity(num_nodes + 1);
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    row_ptr.push(0);
    for (i, list) in neighbors.iter().enumerate() {
        for &j in list {
            cols.push(j);
            weights.push(1.0 / ((degrees[i] * degrees[j]) as f64).sqrt());
        }
        row_ptr.push(cols.len());
    }
    let dense = (num_nodes <= DENSE_NODE_LIMIT).then(|| {
        let mut m = vec![0.0; num_nodes * num_nodes];
        for i in 0..num_nodes {
            for p in row_ptr[i]..row_ptr[i + 1] {
                m[i * num_nodes + cols[p]] = weights[p];
            }
        }
        m
    });

    Ok(SpatialGraph {
        num_nodes,
        edges: out_edges,
        degrees,
        neighbors,
        adjacency: Arc::new(NormalizedAdjacency {
            n: num_nodes,
            row_ptr,
            cols,
            weights,
            dense,
        }),
        propagation: Propagation::Auto,
    })
}

impl SpatialGraph {
    /// Convenience constructor from plain node pairs.
    pub fn from_pairs(num_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let recs: Vec<EdgeRecord> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(from, to))| EdgeRecord {
                from,
                to,
                cost: None,
                line: i + 1,
            })
            .collect();
        build_graph(num_nodes, &recs, GraphOptions::default())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn neighbors(&self, n: usize) -> &[usize] {
        &self.neighbors[n]
    }

    pub fn is_adjacent(&self, n: usize, j: usize) -> bool {
        self.neighbors[n].binary_search(&j).is_ok()
    }

    pub fn propagation(&self) -> Propagation {
        self.propagation
    }

    /// Same graph with a different propagation kernel.
    pub fn with_propagation(&self, mode: Propagation) -> Result<Self> {
        if mode == Propagation::Dense && self.adjacency.dense.is_none() {
            return Err(Error::Graph(format!(
                "dense propagation unavailable above {DENSE_NODE_LIMIT} nodes"
            )));
        }
        let mut g = self.clone();
        g.propagation = mode;
        Ok(g)
    }

    fn uses_dense(&self) -> bool {
        match self.propagation {
            Propagation::Dense => true,
            Propagation::Sparse => false,
            Propagation::Auto => self.adjacency.dense.is_some(),
        }
    }

    /// Normalization weight `1/sqrt(d_n d_j)` of an adjacent pair.
    pub fn pair_weight(&self, n: usize, j: usize) -> Result<f64> {
        if n >= self.num_nodes || j >= self.num_nodes || !self.is_adjacent(n, j) {
            return Err(Error::Graph(format!(
                "nodes {n} and {j} are not adjacent; weight undefined"
            )));
        }
        Ok(1.0 / ((self.degrees[n] * self.degrees[j]) as f64).sqrt())
    }

    /// The normalized adjacency as a dense `N×N` tensor.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.num_nodes;
        let adj = &self.adjacency;
        let data = match &adj.dense {
            Some(d) => d.clone(),
            None => {
                let mut m = vec![0.0; n * n];
                for i in 0..n {
                    for p in adj.row_ptr[i]..adj.row_ptr[i + 1] {
                        m[i * n + adj.cols[p]] = adj.weights[p];
                    }
                }
                m
            }
        };
        Tensor::new([n, n], data).expect("square adjacency")
    }

    /// Applies the normalized adjacency to each of `blocks` consecutive
    /// `N×width` blocks of `x`, writing (or adding) into `out`.
    pub(crate) fn propagate_into(
        &self,
        x: &[f64],
        width: usize,
        out: &mut [f64],
        accumulate: bool,
    ) {
        let n = self.num_nodes;
        let block = n * width;
        debug_assert_eq!(x.len() % block, 0);
        debug_assert_eq!(x.len(), out.len());
        let adj = &self.adjacency;
        let dense = if self.uses_dense() {
            adj.dense.as_deref()
        } else {
            None
        };
        for (xb, ob) in x.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
            match dense {
                Some(a) => gemm(n, n, width, a, false, xb, false, ob, accumulate),
                None => {
                    if !accumulate {
                        ob.fill(0.0);
                    }
                    for i in 0..adj.n {
                        let orow = &mut ob[i * width..(i + 1) * width];
                        for p in adj.row_ptr[i]..adj.row_ptr[i + 1] {
                            let w = adj.weights[p];
                            let xrow = &xb[adj.cols[p] * width..(adj.cols[p] + 1) * width];
                            for (o, &v) in orow.iter_mut().zip(xrow) {
                                *o += w * v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Applies the normalized adjacency to a `[blocks·N × width]` tensor.
    pub fn propagate(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, width) = x.dims2()?;
        if rows % self.num_nodes != 0 {
            return Err(Error::shape(format!(
                "propagation input has {rows} rows, not a multiple of {} nodes",
                self.num_nodes
            )));
        }
        let mut out = vec![0.0; x.len()];
        self.propagate_into(x.data(), width, &mut out, false);
        Tensor::new([rows, width], out)
    }

    /// Writes the graph in `from,to,cost` form. Missing costs are written as 1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = String::from("from,to,cost\n");
        for e in &self.edges {
            buf.push_str(&format!("{},{},{}\n", e.a, e.b, e.cost.unwrap_or(1.0)));
        }
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads an adjacency CSV with header `from,to,cost` (cost column optional).
pub fn load_adjacency_csv(
    path: &Path,
    num_nodes: usize,
    opts: GraphOptions,
) -> Result<SpatialGraph> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_io(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(fi), Some(ti)) = (col("from"), col("to")) else {
        return Err(Error::IngestionLine {
            line: 1,
            msg: format!(
                "expected header `from,to,cost`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    };
    let ci = col("cost");

    let mut recs = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::IngestionLine {
            line,
            msg: e.to_string(),
        })?;
        let parse_id = |idx: usize| -> Result<usize> {
            let cell = row.get(idx).unwrap_or("");
            // Some distributions write ids as floats ("3.0").
            cell.parse::<usize>()
                .ok()
                .or_else(|| {
                    cell.parse::<f64>()
                        .ok()
                        .filter(|v| v.fract() == 0.0 && *v >= 0.0)
                        .map(|v| v as usize)
                })
                .ok_or_else(|| Error::IngestionLine {
                    line,
                    msg: format!("invalid node id `{cell}`"),
                })
        };
        let from = parse_id(fi)?;
        let to = parse_id(ti)?;
        let cost = match ci.and_then(|c| row.get(c)) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<f64>().map_err(|_| Error::IngestionLine {
                line,
                msg: format!("invalid cost `{s}`"),
            })?),
        };
        recs.push(EdgeRecord {
            from,
            to,
            cost,
            line,
        });
    }
    build_graph(num_nodes, &recs, opts)
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Multi-hop propagation computed by enumerating every walk of exactly
/// `depth` edges and multiplying the per-edge weights `1/sqrt(d_k d_h)`.
///
/// Equals `Â^depth · e0`; exists as an independent reference for the matrix
/// form. Refuses depths above `cap` because the walk count grows as
/// `degree^depth`.
pub fn path_expansion_oracle(
    g: &SpatialGraph,
    depth: usize,
    e0: &Tensor,
    cap: usize,
) -> Result<Tensor> {
    if depth == 0 {
        return Err(Error::Contract("walk depth must be >= 1".into()));
    }
    if depth > cap {
        return Err(Error::Contract(format!(
            "walk depth {depth} exceeds enumeration cap {cap}"
        )));
    }
    let (rows, width) = e0.dims2()?;
    if rows != g.num_nodes() {
        return Err(Error::shape(format!(
            "embedding has {rows} rows but graph has {} nodes",
            g.num_nodes()
        )));
    }

    fn walk(
        g: &SpatialGraph,
        node: usize,
        remaining: usize,
        weight: f64,
        e0: &Tensor,
        acc: &mut [f64],
    ) {
        if remaining == 0 {
            let width = acc.len();
            for (a, &v) in acc
                .iter_mut()
                .zip(&e0.data()[node * width..(node + 1) * width])
            {
                *a += weight * v;
            }
            return;
        }
        let dn = g.degrees[node] as f64;
        for &next in g.neighbors(node) {
            let w = weight / (dn * g.degrees[next] as f64).sqrt();
            walk(g, next, remaining - 1, w, e0, acc);
        }
    }

    let mut out = vec![0.0; rows * width];
    for n in 0..rows {
        walk(g, n, depth, 1.0, e0, &mut out[n * width..(n + 1) * width]);
    }
    Tensor::new([rows, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge() {
        let g = SpatialGraph::from_pairs(2, &[(0, 1)]).unwrap();
        assert_eq!(g.degrees(), &[1, 1]);
        assert_eq!(g.normalized_adjacency().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn triangle_weights_are_half() {
        let g = SpatialGraph::from_pairs(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let a = g.normalized_adjacency();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert_eq!(a.get(&[i, j]), want);
            }
        }
    }

    #[test]
    fn star_center_weight() {
        let g = SpatialGraph::from_pairs(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let a = g.normalized_adjacency();
        for leaf in 1..4 {
            assert!((a.get(&[0, leaf]) - 0.577_350_269_189_625_8).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicates_and_reversals_collapse() {
        let g = SpatialGraph::from_pairs(3, &[(0, 1), (1, 0), (0, 1), (1, 2)]).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.degrees(), &[1, 2, 1]);
    }

    #[test]
    fn self_loops_dropped_unless_enabled() {
        let recs = vec![
            EdgeRecord {
                from: 0,
                to: 0,
                cost: None,
                line: 2,
            },
            EdgeRecord {
                from: 0,
                to: 1,
                cost: None,
                line: 3,
            },
        ];
        let g = build_graph(2, &recs, GraphOptions::default()).unwrap();
        assert_eq!(g.num_edges(), 1);
        let g = build_graph(2, &recs, GraphOptions { self_loops: true }).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.degrees(), &[2, 1]);
        assert!((g.normalized_adjacency().get(&[0, 0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_reports_line() {
        let recs = vec![EdgeRecord {
            from: 0,
            to: 5,
            cost: Some(1.0),
            line: 7,
        }];
        let err = build_graph(3, &recs, GraphOptions::default()).unwrap_err();
        assert!(matches!(err, Error::IngestionLine { line: 7, .. }), "{err}");
    }

    #[test]
    fn isolated_node_has_zero_row() {
        let g = SpatialGraph::from_pairs(3, &[(0, 1)]).unwrap();
        let a = g.normalized_adjacency();
        assert!((0..3).all(|j| a.get(&[2, j]) == 0.0 && a.get(&[j, 2]) == 0.0));
    }

    #[test]
    fn pair_weight_values() {
        // Two hubs of degree 4 joined by an edge.
        let mut pairs = vec![(0, 1)];
        pairs.extend((2..5).map(|k| (0, k)));
        pairs.extend((5..8).map(|k| (1, k)));
        let g = SpatialGraph::from_pairs(8, &pairs).unwrap();
        assert_eq!(g.pair_weight(0, 1).unwrap(), 0.25);
        assert_eq!(g.pair_weight(1, 0).unwrap(), 0.25);

        let g = SpatialGraph::from_pairs(2, &[(0, 1)]).unwrap();
        assert_eq!(g.pair_weight(0, 1).unwrap(), 1.0);

        // Degrees 2 and 3: 0-1, 0-2, 1-3, 1-4.
        let g = SpatialGraph::from_pairs(5, &[(0, 1), (0, 2), (1, 3), (1, 4)]).unwrap();
        assert!((g.pair_weight(0, 1).unwrap() - 0.408_248_290_463_863).abs() < 1e-12);
        assert!(g.pair_weight(0, 3).is_err());
    }

    #[test]
    fn walk_oracle_edge_and_zero() {
        let g = SpatialGraph::from_pairs(2, &[(0, 1)]).unwrap();
        let e0 = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = path_expansion_oracle(&g, 1, &e0, DEFAULT_WALK_CAP).unwrap();
        assert_eq!(&out.data()[0..2], &[3.0, 4.0]);

        let z = Tensor::zeros([2, 3]);
        let out = path_expansion_oracle(&g, 3, &z, DEFAULT_WALK_CAP).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn walk_oracle_triangle_matches_square() {
        let g = SpatialGraph::from_pairs(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let e0 = Tensor::identity(3);
        let a = g.normalized_adjacency();
        let want = a.matmul(&a).unwrap();
        let got = path_expansion_oracle(&g, 2, &e0, DEFAULT_WALK_CAP).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn walk_oracle_refuses_deep_walks() {
        let g = SpatialGraph::from_pairs(2, &[(0, 1)]).unwrap();
        let e0 = Tensor::zeros([2, 1]);
        assert!(path_expansion_oracle(&g, 7, &e0, DEFAULT_WALK_CAP).is_err());
        assert!(path_expansion_oracle(&g, 0, &e0, DEFAULT_WALK_CAP).is_err());
    }

    #[test]
    fn dense_and_sparse_kernels_agree() {
        let g =
            SpatialGraph::from_pairs(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)]).unwrap();
        let mut rng = rand::rng();
        let x = Tensor::randn([10, 3], 1.0, &mut rng);
        let dense = g
            .with_propagation(Propagation::Dense)
            .unwrap()
            .propagate(&x)
            .unwrap();
        let sparse = g
            .with_propagation(Propagation::Sparse)
            .unwrap()
            .propagate(&x)
            .unwrap();
        assert!(dense.max_abs_diff(&sparse) < 1e-12);
    }

    #[test]
    fn adjacency_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("adj.csv");
        std::fs::write(&p, "from,to,cost\n0,1,12.5\n1,2,3\n2,0,\n").unwrap();
        let g = load_adjacency_csv(&p, 3, GraphOptions::default()).unwrap();
        assert_eq!(g.num_edges(), 3);
        assert_eq!(g.edges()[0].cost, Some(12.5));

        std::fs::write(&p, "from,to,cost\n0,1,1\n0,9,1\n").unwrap();
        let err = load_adjacency_csv(&p, 3, GraphOptions::default()).unwrap_err();
        assert!(matches!(err, Error::IngestionLine { line: 3, .. }), "{err}");
    }
}
