//! Aliased embedding pool and softmax-normalized ranking.
//!
//! A query scores every pool record with `raw_logit = <q, e> / tau`; the
//! softmax runs over the whole pool (or the whole filtered pool), so a
//! displayed top-k score is comparable across different `k`. Results are
//! ordered by logit descending, ties by alias ascending. Retrieval is a
//! linear scan, `O(m * d)` per query.
//!
//! Pool file format:
//!
//! ```text
//! markmatch-pool v1 dim=<d>
//! <alias> <ballot_id> <enrolled_at> <d floats>
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::encoder::EmbeddingVector;
use crate::error::{Error, Result};
use crate::objective::{softmax, LossConfig};

pub const POOL_MAGIC: &str = "markmatch-pool";
pub const POOL_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub alias: String,
    pub embedding: EmbeddingVector,
    pub ballot_id: String,
    /// UTC seconds.
    pub enrolled_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedMatch {
    pub rank: usize,
    pub alias: String,
    pub softmax_score: f64,
    pub raw_logit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapMatrix {
    pub pool_aliases: Vec<String>,
    pub query_aliases: Vec<String>,
    /// `cells[row][col]`: pool record `row`, query `col`.
    pub cells: Vec<Vec<f64>>,
}

impl HeatmapMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pool_alias");
        for q in &self.query_aliases {
            s.push(',');
            s.push_str(q);
        }
        s.push('\n');
        for (alias, row) in self.pool_aliases.iter().zip(&self.cells) {
            s.push_str(alias);
            for v in row {
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pool {
    dim: usize,
    records: Vec<PoolRecord>,
    /// Ballot id -> 0-based ballot number, in order of first enrollment.
    ballots: HashMap<String, usize>,
    keys: HashSet<(usize, usize)>,
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn parse_alias(alias: &str) -> Option<(usize, usize)> {
    let rest = alias.strip_prefix("alias")?;
    let (b, m) = rest.split_once('_')?;
    Some((b.parse().ok()?, m.parse().ok()?))
}

impl Pool {
    pub fn new(dim: usize) -> Self {
        Pool {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in enrollment order.
    pub fn records(&self) -> &[PoolRecord] {
        &self.records
    }

    pub fn get(&self, alias: &str) -> Option<&PoolRecord> {
        self.records.iter().find(|r| r.alias == alias)
    }

    /// Number of marks already enrolled from `ballot_id`.
    pub fn marks_for_ballot(&self, ballot_id: &str) -> usize {
        self.records.iter().filter(|r| r.ballot_id == ballot_id).count()
    }

    pub fn enroll(&mut self, embedding: EmbeddingVector, ballot_id: &str, mark_index: usize) -> Result<String> {
        self.enroll_at(embedding, ballot_id, mark_index, now_secs())
    }

    /// Enrolls with an explicit timestamp. The alias is
    /// `alias<ballot number>_<mark_index>`, ballots numbered from 0 in order
    /// of first enrollment.
    pub fn enroll_at(
        &mut self,
        embedding: EmbeddingVector,
        ballot_id: &str,
        mark_index: usize,
        enrolled_at: u64,
    ) -> Result<String> {
        if embedding.dim() != self.dim {
            return Err(Error::arg(format!("embedding dim {} does not match pool dim {}", embedding.dim(), self.dim)));
        }
        if ballot_id.is_empty() || ballot_id.chars().any(char::is_whitespace) {
            return Err(Error::arg(format!("ballot id {ballot_id:?} must be non-empty without whitespace")));
        }
        let next = self.ballots.len();
        let ballot_no = *self.ballots.get(ballot_id).unwrap_or(&next);
        if self.keys.contains(&(ballot_no, mark_index)) {
            return Err(Error::Conflict(format!("mark {mark_index} of ballot {ballot_id} is already enrolled")));
        }
        self.ballots.entry(ballot_id.to_string()).or_insert(ballot_no);
        self.keys.insert((ballot_no, mark_index));
        let alias = format!("alias{ballot_no}_{mark_index}");
        self.records.push(PoolRecord {
            alias: alias.clone(),
            embedding,
            ballot_id: ballot_id.to_string(),
            enrolled_at,
        });
        Ok(alias)
    }

    fn check_query(&self, q: &EmbeddingVector) -> Result<()> {
        if q.dim() != self.dim {
            return Err(Error::arg(format!("query dim {} does not match pool dim {}", q.dim(), self.dim)));
        }
        Ok(())
    }

    pub fn query(&self, query: &EmbeddingVector, k: usize, cfg: &LossConfig) -> Result<Vec<RankedMatch>> {
        self.query_filtered(query, k, cfg, |_| true)
    }

    /// Ranks only records accepted by `keep`; the softmax covers exactly
    /// those records.
    pub fn query_filtered(
        &self,
        query: &EmbeddingVector,
        k: usize,
        cfg: &LossConfig,
        keep: impl Fn(&PoolRecord) -> bool,
    ) -> Result<Vec<RankedMatch>> {
        cfg.validate()?;
        if k == 0 {
            return Err(Error::arg("k must be at least 1"));
        }
        self.check_query(query)?;
        let candidates: Vec<&PoolRecord> = self.records.iter().filter(|r| keep(r)).collect();
        if candidates.is_empty() {
            return Err(Error::State("pool has no candidate records".into()));
        }
        let logits: Vec<f64> = candidates
            .iter()
            .map(|r| query.dot(&r.embedding) / cfg.temperature)
            .collect();
        let probs = softmax(&logits);
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            logits[b]
                .total_cmp(&logits[a])
                .then_with(|| candidates[a].alias.cmp(&candidates[b].alias))
        });
        Ok(order
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(r, i)| RankedMatch {
                rank: r + 1,
                alias: candidates[i].alias.clone(),
                softmax_score: probs[i],
                raw_logit: logits[i],
            })
            .collect())
    }

    /// Column `j` is the softmax over the pool of query `j`'s logits; rows
    /// follow enrollment order.
    pub fn heatmap(&self, queries: &[(&str, &EmbeddingVector)], cfg: &LossConfig) -> Result<HeatmapMatrix> {
        cfg.validate()?;
        if self.records.is_empty() {
            return Err(Error::arg("heatmap needs a non-empty pool"));
        }
        if queries.is_empty() {
            return Err(Error::arg("heatmap needs at least one query"));
        }
        let m = self.records.len();
        let mut cells = vec![vec![0.0; queries.len()]; m];
        for (j, (_, q)) in queries.iter().enumerate() {
            self.check_query(q)?;
            let logits: Vec<f64> = self.records.iter().map(|r| q.dot(&r.embedding) / cfg.temperature).collect();
            for (i, p) in softmax(&logits).into_iter().enumerate() {
                cells[i][j] = p;
            }
        }
        Ok(HeatmapMatrix {
            pool_aliases: self.records.iter().map(|r| r.alias.clone()).collect(),
            query_aliases: queries.iter().map(|(a, _)| a.to_string()).collect(),
            cells,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{POOL_MAGIC} {POOL_VERSION} dim={}\n", self.dim);
        for r in &self.records {
            let _ = write!(s, "{} {} {}", r.alias, r.ballot_id, r.enrolled_at);
            for v in r.embedding.values() {
                let _ = write!(s, " {v:.16e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "empty pool file"))?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.first() != Some(&POOL_MAGIC) {
            return Err(Error::parse(1, "not a markmatch pool file"));
        }
        let ver = f.get(1).copied().unwrap_or("");
        if ver != POOL_VERSION {
            return Err(Error::Version {
                found: ver.to_string(),
                expected: POOL_VERSION.to_string(),
            });
        }
        let dim: usize = f
            .get(2)
            .and_then(|t| t.strip_prefix("dim="))
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(1, "header needs dim=<d>"))?;
        if f.len() != 3 {
            return Err(Error::parse(1, "unexpected fields in header"));
        }
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(Error::parse(text.lines().count(), "pool file truncated (missing final newline)"));
        }

        let mut pool = Pool::new(dim);
        for (i, line) in lines.enumerate() {
            let ln = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 + dim {
                return Err(Error::parse(ln, format!("expected {} fields, found {}", 3 + dim, f.len())));
            }
            let (ballot_no, mark_index) =
                parse_alias(f[0]).ok_or_else(|| Error::parse(ln, format!("bad alias {:?}", f[0])))?;
            let enrolled_at: u64 = f[2].parse().map_err(|_| Error::parse(ln, "bad timestamp"))?;
            let values = f[3..]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(ln, format!("bad float {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let embedding = EmbeddingVector::new(values).map_err(|e| Error::parse(ln, e))?;
            let expected_no = *pool.ballots.get(f[1]).unwrap_or(&pool.ballots.len());
            if expected_no != ballot_no {
                return Err(Error::parse(ln, format!("alias {} inconsistent with ballot order", f[0])));
            }
            pool.enroll_at(embedding, f[1], mark_index, enrolled_at)
                .map_err(|e| Error::parse(ln, e))?;
        }
        Ok(pool)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Writes via a sibling temp file and rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
