//! Append-only memory of successful cases with exact embedding recall.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::par::{self, Execution};

/// Stored embeddings must have unit norm to within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-6;

const HEADER_PREFIX: &str = "#casebank v1 dim=";

/// Banks at least this large are scanned in parallel during recall.
const PARALLEL_RECALL_MIN: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: u64,
    /// Opaque query representation.
    pub query: String,
    /// Opaque solution representation.
    pub solution: String,
    /// Always 1: only successes are retained.
    pub reward: u8,
    pub embedding: Vec<f64>,
    pub retained_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseBank {
    dim: usize,
    next_id: u64,
    cases: Vec<Case>,
}

pub fn is_unit(v: &[f64]) -> bool {
    (linalg::norm(v) - 1.0).abs() <= UNIT_NORM_TOL
}

impl CaseBank {
    pub fn new(embedding_dim: usize) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        Ok(Self {
            dim: embedding_dim,
            next_id: 0,
            cases: Vec::new(),
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn get(&self, id: u64) -> Option<&Case> {
        // Ids are strictly increasing, so binary search by id.
        self.cases
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.cases[i])
    }

    /// Append the case when `reward == 1`; a zero reward leaves the bank as is.
    /// Returns the new case id if one was stored.
    pub fn retain(
        &mut self,
        query: impl Into<String>,
        solution: impl Into<String>,
        reward: u8,
        embedding: &[f64],
        step: u64,
    ) -> Result<Option<u64>> {
        if embedding.len() != self.dim {
            return Err(invalid(format!(
                "embedding has dimension {}, bank uses {}",
                embedding.len(),
                self.dim
            )));
        }
        if !is_unit(embedding) {
            return Err(invalid(format!(
                "embedding norm {} is not 1",
                linalg::norm(embedding)
            )));
        }
        match reward {
            0 => return Ok(None),
            1 => {}
            r => return Err(invalid(format!("reward must be 0 or 1, got {r}"))),
        }
        let id = self.next_id;
        self.next_id += 1;
        self.cases.push(Case {
            id,
            query: query.into(),
            solution: solution.into(),
            reward: 1,
            embedding: embedding.to_vec(),
            retained_at: step,
        });
        Ok(Some(id))
    }

    /// The `min(k, len)` cases with the largest inner product against the
    /// query embedding, best first; ties go to the older case.
    pub fn recall(&self, query_emb: &[f64], k: usize) -> Result<Vec<&Case>> {
        if k == 0 {
            return Err(invalid("recall size must be positive"));
        }
        if query_emb.len() != self.dim {
            return Err(invalid("query embedding dimension mismatch"));
        }
        let exec = if self.cases.len() >= PARALLEL_RECALL_MIN {
            Execution::Parallel
        } else {
            Execution::Sequential
        };
        let sims = par::map(&self.cases, exec, |c| linalg::dot(query_emb, &c.embedding));
        let mut idx: Vec<usize> = (0..self.cases.len()).collect();
        let order = |&a: &usize, &b: &usize| sims[b].total_cmp(&sims[a]).then(a.cmp(&b));
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, order);
            idx.truncate(k);
        }
        idx.sort_by(order);
        Ok(idx.into_iter().map(|i| &self.cases[i]).collect())
    }

    /// Line-delimited text: a versioned header, then one tab-separated record
    /// per case: `id`, `retained_at`, `reward`, comma-separated embedding,
    /// escaped query, escaped solution.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{HEADER_PREFIX}{}", self.dim)?;
        for c in &self.cases {
            let emb: Vec<String> = c.embedding.iter().map(|v| format!("{v:e}")).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                c.id,
                c.retained_at,
                c.reward,
                emb.join(","),
                escape(&c.query),
                escape(&c.solution)
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read_from(BufReader::new(fs::File::open(path)?), path)
    }

    pub fn read_from(r: impl BufRead, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = r.lines();
        let header = match lines.next() {
            Some(l) => l?,
            None => return Err(err(1, "missing header".into())),
        };
        let dim: usize = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| err(1, format!("bad header {header:?}")))?;
        let mut bank = CaseBank::new(dim).map_err(|e| err(1, e.to_string()))?;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(err(
                    lineno,
                    format!("expected 6 fields, found {}", fields.len()),
                ));
            }
            let id: u64 = fields[0]
                .parse()
                .map_err(|_| err(lineno, format!("bad id {:?}", fields[0])))?;
            let retained_at: u64 = fields[1]
                .parse()
                .map_err(|_| err(lineno, format!("bad step {:?}", fields[1])))?;
            if fields[2] != "1" {
                return Err(err(
                    lineno,
                    format!("reward must be 1, found {:?}", fields[2]),
                ));
            }
            let embedding = fields[3]
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(lineno, format!("bad embedding: {e}")))?;
            if embedding.len() != dim {
                return Err(err(
                    lineno,
                    format!(
                        "embedding has {} entries, header says {dim}",
                        embedding.len()
                    ),
                ));
            }
            if !is_unit(&embedding) {
                return Err(err(lineno, "embedding is not unit norm".into()));
            }
            if bank.cases.last().is_some_and(|c| c.id >= id) {
                return Err(err(lineno, "case ids must be strictly increasing".into()));
            }
            let query = unescape(fields[4]).map_err(|m| err(lineno, m))?;
            let solution = unescape(fields[5]).map_err(|m| err(lineno, m))?;
            bank.cases.push(Case {
                id,
                query,
                solution,
                reward: 1,
                embedding,
                retained_at,
            });
            bank.next_id = id + 1;
        }
        Ok(bank)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(format!(
                    "bad escape sequence \\{}",
                    other.map_or(String::new(), String::from)
                ))
            }
        }
    }
    Ok(out)
}

/// Reranker input for a (query, case) pair: concatenate, normalize, then
/// duplicate the halves and divide by √2. The result has unit norm and
/// `x[j] == x[j + len/2]` exactly.
pub fn context_features(query_emb: &[f64], case_emb: &[f64]) -> Result<Vec<f64>> {
    if query_emb.len() != case_emb.len() {
        return Err(invalid("query and case embeddings differ in dimension"));
    }
    if !is_unit(query_emb) || !is_unit(case_emb) {
        return Err(invalid("context embeddings must be unit norm"));
    }
    let mut x: Vec<f64> = query_emb.iter().chain(case_emb).copied().collect();
    let n = linalg::norm(&x);
    let s = 1.0 / (n * std::f64::consts::SQRT_2);
    x.iter_mut().for_each(|v| *v *= s);
    let half = x.clone();
    x.extend_from_slice(&half);
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = linalg::norm(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn retain_only_successes() {
        let mut bank = CaseBank::new(2).unwrap();
        assert_eq!(bank.retain("q", "a", 1, &[1.0, 0.0], 1).unwrap(), Some(0));
        assert_eq!(bank.len(), 1);
        let before = bank.clone();
        assert_eq!(bank.retain("q2", "a2", 0, &[0.0, 1.0], 2).unwrap(), None);
        assert_eq!(bank, before);
        assert!(bank.retain("q", "a", 2, &[1.0, 0.0], 3).is_err());
        assert!(bank.retain("q", "a", 1, &[2.0, 0.0], 3).is_err());
        assert!(bank.retain("q", "a", 1, &[1.0], 3).is_err());
    }

    #[test]
    fn interleaved_retains_count_successes() {
        let mut bank = CaseBank::new(2).unwrap();
        let rewards: Vec<u8> = (0..100u32).map(|i| ((i * 7 + 3) % 5 < 2) as u8).collect();
        for (t, &r) in rewards.iter().enumerate() {
            let before = bank.len();
            bank.retain(format!("q{t}"), "a", r, &[0.6, 0.8], t as u64)
                .unwrap();
            assert_eq!(bank.len() - before, r as usize);
        }
        assert_eq!(bank.len(), rewards.iter().filter(|&&r| r == 1).count());
        assert!(bank.cases().windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn recall_examples() {
        let mut bank = CaseBank::new(2).unwrap();
        assert!(bank.recall(&[1.0, 0.0], 3).unwrap().is_empty());
        bank.retain("a", "", 1, &[1.0, 0.0], 0).unwrap();
        bank.retain("b", "", 1, &[0.0, 1.0], 1).unwrap();
        let got = bank.recall(&[1.0, 0.0], 1).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].embedding, vec![1.0, 0.0]);
        assert!(bank.recall(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn recall_returns_everything_when_bank_is_small() {
        let mut bank = CaseBank::new(2).unwrap();
        for i in 0..10 {
            let a = i as f64 * 0.15;
            bank.retain("", "", 1, &[a.cos(), a.sin()], i).unwrap();
        }
        let got = bank.recall(&[0.0, 1.0], 32).unwrap();
        assert_eq!(got.len(), 10);
        let sims: Vec<f64> = got.iter().map(|c| c.embedding[1]).collect();
        assert!(sims.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn recall_breaks_ties_by_id() {
        let mut bank = CaseBank::new(2).unwrap();
        for i in 0..5 {
            bank.retain("", "", 1, &[1.0, 0.0], i).unwrap();
        }
        let ids: Vec<u64> = bank
            .recall(&[1.0, 0.0], 3)
            .unwrap()
            .iter()
            .map(|c| c.id)
            .collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn context_features_example() {
        let x = context_features(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        let want = [0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.5];
        for (a, b) in x.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((linalg::norm(&x) - 1.0).abs() < 1e-12);
        assert!(context_features(&[1.0, 0.0], &[1.0]).is_err());
        assert!(context_features(&[2.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn round_trip_and_errors() {
        let mut bank = CaseBank::new(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.tsv");
        bank.save(&path).unwrap();
        assert_eq!(CaseBank::load(&path).unwrap(), bank);
        bank.retain(
            "tab\there",
            "new\nline \\ slash",
            1,
            &unit(&[1.0, 2.0, 3.0]),
            4,
        )
        .unwrap();
        bank.retain("plain", "ünïcode", 1, &unit(&[0.1, -0.7, 1e-9]), 9)
            .unwrap();
        bank.retain("", "", 1, &unit(&[1.0 / 3.0, 2.0, -5.0]), 11)
            .unwrap();
        bank.save(&path).unwrap();
        let back = CaseBank::load(&path).unwrap();
        assert_eq!(back, bank);

        let text = fs::read_to_string(&path).unwrap();
        let truncated = &text[..text.trim_end().len() - 4];
        fs::write(&path, truncated).unwrap();
        match CaseBank::load(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..1.0, d)
            .prop_filter("nonzero", |v| linalg::norm(v) > 1e-3)
            .prop_map(|v| unit(&v))
    }

    proptest! {
        #[test]
        fn context_features_are_unit_with_equal_halves(q in unit_vec(5), c in unit_vec(5)) {
            let x = context_features(&q, &c).unwrap();
            prop_assert_eq!(x.len(), 20);
            prop_assert_eq!(&x[..10], &x[10..]);
            prop_assert!((linalg::norm(&x) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn recall_matches_full_scan(
            embs in proptest::collection::vec(unit_vec(3), 0..60),
            q in unit_vec(3),
            k in 1usize..20,
        ) {
            let mut bank = CaseBank::new(3).unwrap();
            for (i, e) in embs.iter().enumerate() {
                bank.retain("", "", 1, e, i as u64).unwrap();
            }
            let got: Vec<u64> = bank.recall(&q, k).unwrap().iter().map(|c| c.id).collect();
            let mut all: Vec<(f64, u64)> =
                bank.cases().iter().map(|c| (linalg::dot(&q, &c.embedding), c.id)).collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<u64> = all.into_iter().take(k).map(|p| p.1).collect();
            prop_assert_eq!(got, want);
        }
    }
}
