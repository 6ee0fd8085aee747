//! Descriptor matching and retrieval scoring.
//!
//! Databases are ranked per query by L2 distance or cosine similarity, with
//! ties broken by ascending id so results never depend on input order. The
//! scores are non-interpolated average precision and recall within the top
//! four, both against explicit ground-truth relevance sets.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::par;

/// Distance used for ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Euclidean distance, ascending.
    L2,
    /// Cosine similarity, descending.
    Cosine,
}

/// A set of id-tagged descriptor vectors of one shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    ids: Vec<u64>,
    vectors: Vec<Vec<f32>>,
}

impl DescriptorSet {
    /// Validates ids (unique) and vectors (same nonzero dimension, finite).
    pub fn new(ids: Vec<u64>, vectors: Vec<Vec<f32>>) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::Argument(format!(
                "{} ids against {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::Argument(format!("duplicate descriptor id {id}")));
            }
        }
        if let Some(first) = vectors.first() {
            if first.is_empty() {
                return Err(Error::Argument("descriptors must be non-empty".into()));
            }
            if vectors.iter().any(|v| v.len() != first.len()) {
                return Err(Error::Argument(
                    "descriptors must share one dimension".into(),
                ));
            }
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("descriptors must be finite".into()));
        }
        Ok(DescriptorSet { ids, vectors })
    }

    /// An empty set.
    pub fn empty() -> Self {
        DescriptorSet {
            ids: Vec::new(),
            vectors: Vec::new(),
        }
    }

    /// Adds one entry, enforcing the set's invariants.
    pub fn push(&mut self, id: u64, vector: Vec<f32>) -> Result<()> {
        if self.ids.contains(&id) {
            return Err(Error::Argument(format!("duplicate descriptor id {id}")));
        }
        if let Some(first) = self.vectors.first() {
            if vector.len() != first.len() {
                return Err(Error::Argument(format!(
                    "descriptor of dimension {} in a set of dimension {}",
                    vector.len(),
                    first.len()
                )));
            }
        } else if vector.is_empty() {
            return Err(Error::Argument("descriptors must be non-empty".into()));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("descriptors must be finite".into()));
        }
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    /// Entry count.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// True when the set has no entries.
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Shared vector dimension (0 for an empty set).
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Entry by position.
    pub fn get(&self, i: usize) -> (u64, &[f32]) {
        (self.ids[i], &self.vectors[i])
    }

    /// Parses the line format: one `id v1 v2 ...` per line, blank lines and
    /// `#` comments skipped.
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut set = DescriptorSet::empty();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id_field = fields.next().expect("non-empty line has a field");
            let id: u64 = id_field.parse().map_err(|_| {
                Error::Parse(format!(
                    "line {}: '{}' is not a descriptor id",
                    lineno + 1,
                    id_field
                ))
            })?;
            let mut vector = Vec::new();
            for f in fields {
                let v: f32 = f.parse().map_err(|_| {
                    Error::Parse(format!("line {}: '{}' is not a number", lineno + 1, f))
                })?;
                vector.push(v);
            }
            if vector.is_empty() {
                return Err(Error::Parse(format!(
                    "line {}: descriptor {id} has no values",
                    lineno + 1
                )));
            }
            set.push(id, vector)
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(set)
    }

    /// Serializes to the line format. Floats use the shortest representation
    /// that parses back to the same value.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for (id, vector) in self.ids.iter().zip(&self.vectors) {
            out.push_str(&id.to_string());
            for v in vector {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Relevance sets keyed by query id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    /// For each query id, the ids considered relevant to it.
    pub relevant: BTreeMap<u64, BTreeSet<u64>>,
}

impl GroundTruth {
    /// Parses the line format: one `query_id rel_id rel_id ...` per line,
    /// blank lines and `#` comments skipped.
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut truth = GroundTruth::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut ids = line.split_whitespace().map(|f| {
                f.parse::<u64>()
                    .map_err(|_| Error::Parse(format!("line {}: '{f}' is not an id", lineno + 1)))
            });
            let qid = ids.next().expect("non-empty line has a field")?;
            let rel: BTreeSet<u64> = ids.collect::<Result<_>>()?;
            if truth.relevant.insert(qid, rel).is_some() {
                return Err(Error::Parse(format!(
                    "line {}: query {qid} listed twice",
                    lineno + 1
                )));
            }
        }
        Ok(truth)
    }

    /// Serializes to the line format, queries in ascending id order.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for (qid, rel) in &self.relevant {
            out.push_str(&qid.to_string());
            for id in rel {
                out.push(' ');
                out.push_str(&id.to_string());
            }
            out.push('\n');
        }
        out
    }
}

fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| *x as f64 * *x as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| *x as f64 * *x as f64).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Ranks the whole database for one query vector: best match first, ties by
/// ascending id. `exclude` drops one id (a query matching itself).
pub fn rank(
    query: &[f32],
    db: &DescriptorSet,
    metric: Metric,
    exclude: Option<u64>,
) -> Result<Vec<u64>> {
    if !db.is_empty() && query.len() != db.dim() {
        return Err(Error::Argument(format!(
            "query dimension {} against database dimension {}",
            query.len(),
            db.dim()
        )));
    }
    let mut keyed: Vec<(f64, u64)> = db
        .ids
        .iter()
        .zip(&db.vectors)
        .filter(|(id, _)| Some(**id) != exclude)
        .map(|(&id, v)| {
            let key = match metric {
                Metric::L2 => l2_distance(query, v),
                Metric::Cosine => -cosine_similarity(query, v),
            };
            (key, id)
        })
        .collect();
    keyed.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite keys by construction")
            .then(a.1.cmp(&b.1))
    });
    Ok(keyed.into_iter().map(|(_, id)| id).collect())
}

/// Non-interpolated average precision of a ranking: the mean of precision at
/// each relevant hit, divided by the total relevant count (relevant items
/// missing from the ranking count against the score).
pub fn average_precision(ranked: &[u64], relevant: &BTreeSet<u64>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Argument(
            "average precision needs at least one relevant item".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (i, id) in ranked.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// How many relevant items land in the top four of a ranking.
pub fn recall_at_4(ranked: &[u64], relevant: &BTreeSet<u64>) -> usize {
    ranked
        .iter()
        .take(4)
        .filter(|id| relevant.contains(id))
        .count()
}

fn query_relevant(truth: &GroundTruth, qid: u64) -> Result<BTreeSet<u64>> {
    let raw = truth.relevant.get(&qid).ok_or_else(|| {
        Error::Argument(format!("query {qid} has no ground-truth entry"))
    })?;
    // The query never ranks itself (it is excluded from the database), so
    // its own id cannot count as a retrievable relevant item.
    let rel: BTreeSet<u64> = raw.iter().copied().filter(|&id| id != qid).collect();
    if rel.is_empty() {
        return Err(Error::Argument(format!(
            "query {qid} has no relevant items besides itself"
        )));
    }
    Ok(rel)
}

/// Mean average precision over all queries. Each query is excluded from its
/// own ranking by id.
pub fn mean_average_precision(
    queries: &DescriptorSet,
    db: &DescriptorSet,
    truth: &GroundTruth,
    metric: Metric,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Argument("no queries to score".into()));
    }
    let scores = par::map_range(queries.len(), |i| -> Result<f64> {
        let (qid, v) = queries.get(i);
        let rel = query_relevant(truth, qid)?;
        let ranked = rank(v, db, metric, Some(qid))?;
        average_precision(&ranked, &rel)
    });
    let mut sum = 0.0f64;
    for s in scores {
        sum += s?;
    }
    Ok(sum / queries.len() as f64)
}

/// Mean count of relevant items in each query's top four.
pub fn mean_recall_at_4(
    queries: &DescriptorSet,
    db: &DescriptorSet,
    truth: &GroundTruth,
    metric: Metric,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Argument("no queries to score".into()));
    }
    let counts = par::map_range(queries.len(), |i| -> Result<usize> {
        let (qid, v) = queries.get(i);
        let rel = query_relevant(truth, qid)?;
        let ranked = rank(v, db, metric, Some(qid))?;
        Ok(recall_at_4(&ranked, &rel))
    });
    let mut sum = 0usize;
    for c in counts {
        sum += c?;
    }
    Ok(sum as f64 / queries.len() as f64)
}
