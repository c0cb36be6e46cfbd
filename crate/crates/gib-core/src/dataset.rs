//! Graph corpora: flat-file ingestion (TU collection layout), a synthetic
//! planted-community generator for desk-scale runs, and stratified k-fold
//! splits.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("missing required file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {msg}")]
    Structure { file: String, line: usize, msg: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("split error: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labeled graph: symmetric 0/1 adjacency, per-node features, class.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub node_count: usize,
    /// Undirected edges as (i, j) with i < j, deduplicated, no self-loops.
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Array2<f64>,
    pub features: Array2<f64>,
    pub label: usize,
}

impl Graph {
    /// Build from an edge list; the adjacency matrix is derived.
    pub fn from_edges(
        node_count: usize,
        raw_edges: &[(usize, usize)],
        features: Array2<f64>,
        label: usize,
    ) -> Self {
        assert_eq!(features.nrows(), node_count, "feature rows != node count");
        let mut edges: Vec<(usize, usize)> = raw_edges
            .iter()
            .filter(|(a, b)| a != b)
            .map(|&(a, b)| if a < b { (a, b) } else { (b, a) })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        let mut adjacency = Array2::zeros((node_count, node_count));
        for &(a, b) in &edges {
            adjacency[(a, b)] = 1.0;
            adjacency[(b, a)] = 1.0;
        }
        Graph { node_count, edges, adjacency, features, label }
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency.row(v).iter().filter(|&&x| x > 0.0).count()
    }
}

/// A set of graphs sharing a feature dimension and label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub graphs: Vec<Graph>,
    pub class_n: usize,
    pub feature_dim: usize,
    pub name: String,
}

impl Corpus {
    /// Check the structural invariants: symmetric zero-diagonal adjacency,
    /// consistent feature dimension, labels within range, all classes used.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = vec![false; self.class_n];
        if self.class_n < 2 {
            return Err(DatasetError::Argument(format!(
                "corpus {} has {} classes, need at least 2",
                self.name, self.class_n
            )));
        }
        for (gi, g) in self.graphs.iter().enumerate() {
            if g.features.ncols() != self.feature_dim {
                return Err(DatasetError::Argument(format!(
                    "graph {gi}: feature dim {} != corpus dim {}",
                    g.features.ncols(),
                    self.feature_dim
                )));
            }
            if g.label >= self.class_n {
                return Err(DatasetError::Argument(format!(
                    "graph {gi}: label {} out of range {}",
                    g.label, self.class_n
                )));
            }
            seen[g.label] = true;
            for i in 0..g.node_count {
                if g.adjacency[(i, i)] != 0.0 {
                    return Err(DatasetError::Argument(format!(
                        "graph {gi}: nonzero diagonal at {i}"
                    )));
                }
                for j in 0..g.node_count {
                    if g.adjacency[(i, j)] != g.adjacency[(j, i)] {
                        return Err(DatasetError::Argument(format!(
                            "graph {gi}: asymmetric adjacency at ({i},{j})"
                        )));
                    }
                }
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(DatasetError::Argument(format!(
                "corpus {}: class {missing} has no graphs",
                self.name
            )));
        }
        Ok(())
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_n];
        for g in &self.graphs {
            counts[g.label] += 1;
        }
        counts
    }
}

/// Assignment of each graph to one of `fold_count` folds.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    pub fold_count: usize,
    pub assignments: Vec<usize>,
}

impl FoldSplit {
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self, eval_fold: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != eval_fold)
            .map(|(i, _)| i)
            .collect()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let content = fs::read_to_string(path)?;
    Ok(content
        .lines()
        .map(|l| l.trim_end_matches('\r').trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Per-graph derived feature when no attributes/labels are available:
/// `[1, deg(v)/max_deg]` with the max taken over the graph (1 if edgeless).
fn degree_features(node_count: usize, edges: &[(usize, usize)]) -> Array2<f64> {
    let mut deg = vec![0usize; node_count];
    for &(a, b) in edges {
        if a != b {
            deg[a] += 1;
            deg[b] += 1;
        }
    }
    let max_deg = deg.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut feats = Array2::zeros((node_count, 2));
    for v in 0..node_count {
        feats[(v, 0)] = 1.0;
        feats[(v, 1)] = deg[v] as f64 / max_deg;
    }
    feats
}

/// Ingest a corpus in the TU collection flat-file layout.
///
/// Mandatory files under `root_path`: `<name>_A.txt`,
/// `<name>_graph_indicator.txt`, `<name>_graph_labels.txt`. Optional:
/// `<name>_node_labels.txt`, `<name>_node_attributes.txt`. Node features are
/// one-hot node labels concatenated with attributes when either is present,
/// otherwise `[1, deg/max_deg]`. Graph labels are remapped to contiguous
/// 0-based classes by sorted order.
pub fn parse_tudataset(root_path: &Path, name: &str) -> Result<Corpus, DatasetError> {
    let file = |suffix: &str| root_path.join(format!("{name}_{suffix}.txt"));

    let indicator_path = file("graph_indicator");
    let indicator = read_lines(&indicator_path)?;
    let labels_path = file("graph_labels");
    let label_lines = read_lines(&labels_path)?;
    let edges_path = file("A");
    let edge_lines = read_lines(&edges_path)?;

    // graph id per node, 1-indexed in the file
    let mut node_graph = Vec::with_capacity(indicator.len());
    for (i, line) in indicator.iter().enumerate() {
        let gid: usize = line.parse().map_err(|_| DatasetError::Structure {
            file: indicator_path.display().to_string(),
            line: i + 1,
            msg: format!("bad graph id '{line}'"),
        })?;
        if gid == 0 {
            return Err(DatasetError::Structure {
                file: indicator_path.display().to_string(),
                line: i + 1,
                msg: "graph ids are 1-indexed".into(),
            });
        }
        node_graph.push(gid - 1);
    }
    let total_nodes = node_graph.len();
    let graph_count = node_graph.iter().copied().max().map_or(0, |m| m + 1);
    if label_lines.len() != graph_count {
        return Err(DatasetError::Structure {
            file: labels_path.display().to_string(),
            line: label_lines.len(),
            msg: format!("{} labels for {} graphs", label_lines.len(), graph_count),
        });
    }

    // local node index within each graph
    let mut local_index = vec![0usize; total_nodes];
    let mut node_counts = vec![0usize; graph_count];
    for (n, &g) in node_graph.iter().enumerate() {
        local_index[n] = node_counts[g];
        node_counts[g] += 1;
    }

    let mut edges_per_graph: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph_count];
    for (i, line) in edge_lines.iter().enumerate() {
        let mut parts = line.split(',').map(str::trim);
        let parse_id = |tok: Option<&str>| -> Result<usize, DatasetError> {
            let tok = tok.ok_or_else(|| DatasetError::Structure {
                file: edges_path.display().to_string(),
                line: i + 1,
                msg: format!("expected 'u, v', got '{line}'"),
            })?;
            tok.parse::<usize>().map_err(|_| DatasetError::Structure {
                file: edges_path.display().to_string(),
                line: i + 1,
                msg: format!("bad node id '{tok}'"),
            })
        };
        let u = parse_id(parts.next())?;
        let v = parse_id(parts.next())?;
        if u == 0 || v == 0 || u > total_nodes || v > total_nodes {
            return Err(DatasetError::Structure {
                file: edges_path.display().to_string(),
                line: i + 1,
                msg: format!("node id out of range in '{line}'"),
            });
        }
        let (u, v) = (u - 1, v - 1);
        if node_graph[u] != node_graph[v] {
            return Err(DatasetError::Structure {
                file: edges_path.display().to_string(),
                line: i + 1,
                msg: format!(
                    "edge joins nodes of graphs {} and {}",
                    node_graph[u] + 1,
                    node_graph[v] + 1
                ),
            });
        }
        edges_per_graph[node_graph[u]].push((local_index[u], local_index[v]));
    }

    // labels: arbitrary integers remapped to 0-based by sorted order
    let mut raw_labels = Vec::with_capacity(graph_count);
    for (i, line) in label_lines.iter().enumerate() {
        let l: i64 = line.parse().map_err(|_| DatasetError::Structure {
            file: labels_path.display().to_string(),
            line: i + 1,
            msg: format!("bad graph label '{line}'"),
        })?;
        raw_labels.push(l);
    }
    let mut distinct: Vec<i64> = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let remap: BTreeMap<i64, usize> =
        distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let class_n = distinct.len();

    // optional per-node labels / attributes
    let node_labels = {
        let p = file("node_labels");
        if p.is_file() {
            let lines = read_lines(&p)?;
            if lines.len() != total_nodes {
                return Err(DatasetError::Structure {
                    file: p.display().to_string(),
                    line: lines.len(),
                    msg: format!("{} node labels for {} nodes", lines.len(), total_nodes),
                });
            }
            let mut vals = Vec::with_capacity(total_nodes);
            for (i, line) in lines.iter().enumerate() {
                let v: i64 = line.parse().map_err(|_| DatasetError::Structure {
                    file: p.display().to_string(),
                    line: i + 1,
                    msg: format!("bad node label '{line}'"),
                })?;
                vals.push(v);
            }
            Some(vals)
        } else {
            None
        }
    };
    let node_attrs = {
        let p = file("node_attributes");
        if p.is_file() {
            let lines = read_lines(&p)?;
            if lines.len() != total_nodes {
                return Err(DatasetError::Structure {
                    file: p.display().to_string(),
                    line: lines.len(),
                    msg: format!("{} attribute rows for {} nodes", lines.len(), total_nodes),
                });
            }
            let mut rows = Vec::with_capacity(total_nodes);
            for (i, line) in lines.iter().enumerate() {
                let row: Result<Vec<f64>, _> =
                    line.split(',').map(|t| t.trim().parse::<f64>()).collect();
                rows.push(row.map_err(|_| DatasetError::Structure {
                    file: p.display().to_string(),
                    line: i + 1,
                    msg: format!("bad attribute row '{line}'"),
                })?);
            }
            Some(rows)
        } else {
            None
        }
    };

    // node label one-hot dictionary over the whole corpus
    let label_dict: Option<BTreeMap<i64, usize>> = node_labels.as_ref().map(|vals| {
        let mut d: Vec<i64> = vals.clone();
        d.sort_unstable();
        d.dedup();
        d.iter().enumerate().map(|(i, &l)| (l, i)).collect()
    });
    let onehot_dim = label_dict.as_ref().map_or(0, |d| d.len());
    let attr_dim = node_attrs.as_ref().map_or(0, |rows| rows.first().map_or(0, Vec::len));

    let mut graphs = Vec::with_capacity(graph_count);
    let mut node_cursor = vec![Vec::new(); graph_count];
    for (n, &g) in node_graph.iter().enumerate() {
        node_cursor[g].push(n);
    }
    for g in 0..graph_count {
        let m = node_counts[g];
        let features = if onehot_dim + attr_dim > 0 {
            let mut f = Array2::zeros((m, onehot_dim + attr_dim));
            for (local, &global) in node_cursor[g].iter().enumerate() {
                if let (Some(vals), Some(dict)) = (&node_labels, &label_dict) {
                    f[(local, dict[&vals[global]])] = 1.0;
                }
                if let Some(rows) = &node_attrs {
                    for (k, &a) in rows[global].iter().enumerate() {
                        f[(local, onehot_dim + k)] = a;
                    }
                }
            }
            f
        } else {
            degree_features(m, &edges_per_graph[g])
        };
        graphs.push(Graph::from_edges(m, &edges_per_graph[g], features, remap[&raw_labels[g]]));
    }

    let feature_dim = graphs.first().map_or(0, |g| g.features.ncols());
    let corpus = Corpus { graphs, class_n, feature_dim, name: name.to_string() };
    corpus.validate()?;
    Ok(corpus)
}

/// Serialize a corpus back into the flat-file layout. Features are written
/// as `_node_attributes.txt`, so a reparse reconstructs the same matrices.
pub fn write_tudataset(corpus: &Corpus, dir: &Path, name: &str) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let mut a = fs::File::create(dir.join(format!("{name}_A.txt")))?;
    let mut indicator = fs::File::create(dir.join(format!("{name}_graph_indicator.txt")))?;
    let mut labels = fs::File::create(dir.join(format!("{name}_graph_labels.txt")))?;
    let mut attrs = fs::File::create(dir.join(format!("{name}_node_attributes.txt")))?;

    let mut offset = 1usize; // global node ids are 1-indexed
    for (gi, g) in corpus.graphs.iter().enumerate() {
        for &(u, v) in &g.edges {
            // both directions, as distributed corpora do
            writeln!(a, "{}, {}", offset + u, offset + v)?;
            writeln!(a, "{}, {}", offset + v, offset + u)?;
        }
        for local in 0..g.node_count {
            writeln!(indicator, "{}", gi + 1)?;
            let row: Vec<String> =
                g.features.row(local).iter().map(|x| format!("{x}")).collect();
            writeln!(attrs, "{}", row.join(", "))?;
        }
        writeln!(labels, "{}", g.label)?;
        offset += g.node_count;
    }
    Ok(())
}

/// Deterministic two-class corpus of 20-node graphs. Class 1 plants a dense
/// 6-node community (edge probability 0.9 inside) over sparse background
/// (0.1); class 0 is uniform background at 0.15. Features follow the
/// degree convention used for attribute-free corpora.
pub fn generate_synthetic(graph_count: usize, seed: u64) -> Result<Corpus, DatasetError> {
    if !graph_count.is_multiple_of(2) {
        return Err(DatasetError::Argument(format!(
            "graph_count must be even, got {graph_count}"
        )));
    }
    if graph_count < 20 {
        return Err(DatasetError::Argument(format!(
            "graph_count must be at least 20, got {graph_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = 20usize;
    let community = 6usize;
    let mut graphs = Vec::with_capacity(graph_count);
    for gi in 0..graph_count {
        let label = gi % 2;
        let mut edges = Vec::new();
        for i in 0..nodes {
            for j in (i + 1)..nodes {
                let p = if label == 1 {
                    if i < community && j < community {
                        0.9
                    } else {
                        0.1
                    }
                } else {
                    0.15
                };
                if rng.random_range(0.0..1.0) < p {
                    edges.push((i, j));
                }
            }
        }
        let features = degree_features(nodes, &edges);
        graphs.push(Graph::from_edges(nodes, &edges, features, label));
    }
    let corpus = Corpus {
        graphs,
        class_n: 2,
        feature_dim: 2,
        name: format!("synthetic-{graph_count}-{seed}"),
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Stratified k-fold assignment, deterministic under `seed`. Per-class
/// index lists are shuffled then dealt round-robin, so per-fold class
/// counts differ by at most one from proportionality.
pub fn kfold_split(corpus: &Corpus, k: usize, seed: u64) -> Result<FoldSplit, DatasetError> {
    if k < 2 {
        return Err(DatasetError::Split(format!("k must be at least 2, got {k}")));
    }
    let counts = corpus.label_counts();
    for (class, &count) in counts.iter().enumerate() {
        if count < k {
            return Err(DatasetError::Split(format!(
                "class {class} has {count} graphs, fewer than k={k}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0usize; corpus.graphs.len()];
    for class in 0..corpus.class_n {
        let mut members: Vec<usize> = corpus
            .graphs
            .iter()
            .enumerate()
            .filter(|(_, g)| g.label == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        for (pos, idx) in members.into_iter().enumerate() {
            assignments[idx] = pos % k;
        }
    }
    Ok(FoldSplit { fold_count: k, assignments })
}
