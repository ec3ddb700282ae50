//! Disjoint training subsets from an attribution matrix.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::attribution::AttributionMatrix;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<usize>,
    k: usize,
    method: String,
}

impl Partition {
    pub fn new(assignments: Vec<usize>, k: usize, method: impl Into<String>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config(
                "a partition needs at least one subset".into(),
            ));
        }
        if let Some((i, &s)) = assignments.iter().enumerate().find(|(_, &s)| s >= k) {
            return Err(Error::Input(format!(
                "example {i} assigned to subset {s}, but K = {k}"
            )));
        }
        let method = method.into();
        if method.is_empty() || method.contains([',', '\n']) {
            return Err(Error::Input(format!(
                "invalid partition method tag {method:?}"
            )));
        }
        Ok(Partition {
            assignments,
            k,
            method,
        })
    }

    /// Everything in subset 0.
    pub fn single(n: usize) -> Self {
        Partition {
            assignments: vec![0; n],
            k: 1,
            method: "single".into(),
        }
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn method(&self) -> &str {
        &self.method
    }

    /// Example indices of each subset, in ascending order.
    pub fn subsets(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &s) in self.assignments.iter().enumerate() {
            out[s].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &s in &self.assignments {
            sizes[s] += 1;
        }
        sizes
    }

    pub fn render(&self) -> String {
        let mut out = format!("{},{},{}\n", self.k, self.len(), self.method);
        for (i, s) in self.assignments.iter().enumerate() {
            out.push_str(&format!("{i},{s}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty partition file".into(),
        })?;
        let bad_header = || Error::Parse {
            line: 1,
            message: format!("expected header K,N,method, got {header:?}"),
        };
        let fields: Vec<&str> = header.splitn(3, ',').collect();
        if fields.len() != 3 {
            return Err(bad_header());
        }
        let k: usize = fields[0].trim().parse().map_err(|_| bad_header())?;
        let n: usize = fields[1].trim().parse().map_err(|_| bad_header())?;
        let mut assignments = vec![None; n];
        for (idx, line) in lines {
            let bad = |m: String| Error::Parse {
                line: idx + 1,
                message: m,
            };
            let (id, s) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("expected id,subset, got {line:?}")))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|e| bad(format!("bad example id: {e}")))?;
            let s: usize = s
                .trim()
                .parse()
                .map_err(|e| bad(format!("bad subset: {e}")))?;
            let slot = assignments
                .get_mut(id)
                .ok_or_else(|| bad(format!("example id {id} out of range for N = {n}")))?;
            if slot.replace(s).is_some() {
                return Err(bad(format!("example id {id} assigned twice")));
            }
        }
        let assignments: Option<Vec<usize>> = assignments.into_iter().collect();
        let assignments = assignments.ok_or(Error::Parse {
            line: 1,
            message: "some examples are unassigned".into(),
        })?;
        Partition::new(assignments, k, fields[2].trim())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Partition::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub matrix: AttributionMatrix,
    /// Rows with zero variance, which are mapped to all zeros.
    pub zero_variance_rows: Vec<usize>,
}

/// Standardizes every row to mean 0 and population standard deviation 1.
pub fn normalize_matrix(m: &AttributionMatrix) -> Normalized {
    let mut zero_variance_rows = Vec::new();
    let rows = m
        .rows()
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n = row.len().max(1) as f64;
            let mean = row.iter().sum::<f64>() / n;
            let sd = (row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            // relative test: a row of identical large values has sd of pure rounding
            if sd == 0.0 || sd <= 1e-12 * mean.abs() {
                zero_variance_rows.push(k);
                log::warn!("attribution row {k} has zero variance; normalized to zeros");
                vec![0.0; row.len()]
            } else {
                row.iter().map(|x| (x - mean) / sd).collect()
            }
        })
        .collect();
    let matrix = m
        .with_scores(rows)
        .expect("standardized rows keep shape and stay finite");
    Normalized {
        matrix,
        zero_variance_rows,
    }
}

/// Each example goes to the query row with the highest score, ties to the
/// lowest row.
pub fn assign_argmax(m: &AttributionMatrix) -> Result<Partition> {
    if m.n_queries() == 0 {
        return Err(Error::Input("argmax needs at least one query row".into()));
    }
    let assignments = (0..m.n_examples())
        .map(|i| {
            let mut best = 0;
            for k in 1..m.n_queries() {
                if m.get(k, i) > m.get(best, i) {
                    best = k;
                }
            }
            best
        })
        .collect();
    Partition::new(assignments, m.n_queries(), m.method().as_str())
}

/// Independent uniform assignment of every example.
pub fn partition_random(n: usize, k: usize, seed_value: u64) -> Result<Partition> {
    if k == 0 {
        return Err(Error::Config(
            "a partition needs at least one subset".into(),
        ));
    }
    let mut rng = seed::stream(seed_value, &[0x7a27]);
    Partition::new(
        (0..n).map(|_| rng.random_range(0..k)).collect(),
        k,
        "random",
    )
}

/// Sum over subsets of squared distances between every ordered pair of
/// member columns (pairs `i = j` included, they add 0).
pub fn clustering_objective(m: &AttributionMatrix, p: &Partition) -> Result<f64> {
    if p.len() != m.n_examples() {
        return Err(Error::Size(format!(
            "partition covers {} examples, matrix has {}",
            p.len(),
            m.n_examples()
        )));
    }
    let column = |i: usize| -> Vec<f64> { m.rows().iter().map(|r| r[i]).collect() };
    let mut total = 0.0;
    for members in p.subsets() {
        let cols: Vec<Vec<f64>> = members.iter().map(|&i| column(i)).collect();
        for a in &cols {
            for b in &cols {
                total += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionStats {
    pub sizes: Vec<usize>,
    pub min_size: usize,
    pub max_size: usize,
    pub mean_size: f64,
    pub purity: Option<f64>,
    pub objective: Option<f64>,
}

/// Sizes, plus purity when the corpus carries topics and the clustering
/// objective when a matrix is given.
pub fn partition_stats(
    p: &Partition,
    corpus: &Corpus,
    m: Option<&AttributionMatrix>,
) -> Result<PartitionStats> {
    if p.len() != corpus.len() {
        return Err(Error::Size(format!(
            "partition covers {} examples, corpus has {}",
            p.len(),
            corpus.len()
        )));
    }
    let sizes = p.sizes();
    let purity = corpus.has_topics().then(|| purity(p, corpus));
    let objective = m.map(|m| clustering_objective(m, p)).transpose()?;
    Ok(PartitionStats {
        min_size: sizes.iter().copied().min().unwrap_or(0),
        max_size: sizes.iter().copied().max().unwrap_or(0),
        mean_size: p.len() as f64 / p.k() as f64,
        sizes,
        purity,
        objective,
    })
}

fn purity(p: &Partition, corpus: &Corpus) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n_topics = corpus
        .examples
        .iter()
        .filter_map(|e| e.topic)
        .max()
        .map_or(0, |t| t + 1);
    let mut counts = vec![vec![0usize; n_topics]; p.k()];
    for (ex, &s) in corpus.examples.iter().zip(p.assignments()) {
        if let Some(t) = ex.topic {
            counts[s][t] += 1;
        }
    }
    let hits: usize = counts
        .iter()
        .map(|c| c.iter().copied().max().unwrap_or(0))
        .sum();
    hits as f64 / p.len() as f64
}
