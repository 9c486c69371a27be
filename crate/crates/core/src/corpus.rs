//! Knowledge corpus ingestion and TF-IDF retrieval.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::text::{default_stopwords, read_lines};

pub const INDEX_MAGIC: &str = "MIXCL-IDX v1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KnowledgeSnippet {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(skip)]
    pub tokens: Option<Vec<u32>>,
}

impl KnowledgeSnippet {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
            tokens: None,
        }
    }

    /// Token ids, computed on first use.
    pub fn token_ids(&mut self, tokenizer: &dyn Tokenizer) -> &[u32] {
        self.tokens.get_or_insert_with(|| tokenizer.encode(&self.text))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct KnowledgeCorpus {
    pub snippets: Vec<KnowledgeSnippet>,
}

impl KnowledgeCorpus {
    pub fn new(snippets: Vec<KnowledgeSnippet>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &snippets {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self { snippets })
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }
}

#[derive(Deserialize)]
struct CorpusRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    title: Option<String>,
    text: String,
}

/// Reads one snippet per non-empty JSON line. Missing ids become `k<n>`.
pub fn ingest_corpus(path: &Path) -> Result<KnowledgeCorpus> {
    let mut snippets = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line_no, line) in read_lines(path)? {
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::record(path, line_no, format!("malformed corpus record: {e}")))?;
        if rec.text.trim().is_empty() {
            return Err(Error::record(path, line_no, "empty `text` field"));
        }
        let id = rec.id.unwrap_or_else(|| format!("k{}", snippets.len()));
        if let Some(prev) = seen.insert(id.clone(), line_no) {
            return Err(Error::record(
                path,
                line_no,
                format!("duplicate snippet id `{id}` (first seen on line {prev})"),
            ));
        }
        snippets.push(KnowledgeSnippet::new(id, rec.title.unwrap_or_default(), rec.text));
    }
    KnowledgeCorpus::new(snippets)
}

pub fn write_corpus(path: &Path, corpus: &KnowledgeCorpus) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        title: &'a str,
        text: &'a str,
    }
    let rows: Vec<Row> = corpus
        .snippets
        .iter()
        .map(|s| Row {
            id: &s.id,
            title: &s.title,
            text: &s.text,
        })
        .collect();
    crate::text::write_jsonl(path, None::<&()>, &rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub score: f64,
}

/// Inverted index with smoothed idf `ln((1+N)/(1+df)) + 1`, raw tf and
/// cosine scoring. Immutable once built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TfIdfIndex {
    snippets: Vec<KnowledgeSnippet>,
    terms: Vec<String>,
    #[serde(skip)]
    vocabulary: HashMap<String, u32>,
    doc_freq: Vec<u32>,
    postings: Vec<Vec<(u32, u32)>>,
    doc_norm: Vec<f64>,
    stopwords: BTreeSet<String>,
}

pub fn build_index(corpus: &KnowledgeCorpus, tokenizer: &dyn Tokenizer) -> Result<TfIdfIndex> {
    build_index_with_stopwords(corpus, tokenizer, default_stopwords())
}

pub fn build_index_with_stopwords(
    corpus: &KnowledgeCorpus,
    tokenizer: &dyn Tokenizer,
    stopwords: HashSet<String>,
) -> Result<TfIdfIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let doc_terms: Vec<Vec<String>> = corpus
        .snippets
        .par_iter()
        .map(|s| {
            let all = tokenizer.split(&s.text);
            let content: Vec<String> = all.iter().filter(|t| !stopwords.contains(*t)).cloned().collect();
            // a snippet made only of stopwords is still indexed under them
            if content.is_empty() {
                all
            } else {
                content
            }
        })
        .collect();

    let mut terms: Vec<String> = Vec::new();
    let mut vocabulary: HashMap<String, u32> = HashMap::new();
    let mut postings: Vec<Vec<(u32, u32)>> = Vec::new();
    for (doc, toks) in doc_terms.iter().enumerate() {
        let mut tf: HashMap<u32, u32> = HashMap::new();
        for t in toks {
            let id = *vocabulary.entry(t.clone()).or_insert_with(|| {
                terms.push(t.clone());
                postings.push(Vec::new());
                (terms.len() - 1) as u32
            });
            *tf.entry(id).or_default() += 1;
        }
        let mut tf: Vec<(u32, u32)> = tf.into_iter().collect();
        tf.sort_unstable();
        for (term, count) in tf {
            postings[term as usize].push((doc as u32, count));
        }
    }
    let doc_freq: Vec<u32> = postings.iter().map(|p| p.len() as u32).collect();
    let n = corpus.len();
    let mut sq = vec![0.0f64; n];
    for (term, plist) in postings.iter().enumerate() {
        let w = idf(n, doc_freq[term]);
        for &(doc, tf) in plist {
            sq[doc as usize] += (tf as f64 * w).powi(2);
        }
    }
    Ok(TfIdfIndex {
        snippets: corpus.snippets.clone(),
        terms,
        vocabulary,
        doc_freq,
        postings,
        doc_norm: sq.into_iter().map(f64::sqrt).collect(),
        stopwords: stopwords.into_iter().collect(),
    })
}

fn idf(n_docs: usize, df: u32) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

impl TfIdfIndex {
    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn snippet(&self, index: usize) -> &KnowledgeSnippet {
        &self.snippets[index]
    }

    pub fn snippets(&self) -> &[KnowledgeSnippet] {
        &self.snippets
    }

    pub fn term_id(&self, term: &str) -> Option<u32> {
        self.vocabulary.get(term).copied()
    }

    pub fn doc_freq(&self, term: &str) -> Option<u32> {
        self.term_id(term).map(|t| self.doc_freq[t as usize])
    }

    pub fn vocabulary_len(&self) -> usize {
        self.terms.len()
    }

    pub fn postings(&self, term: &str) -> Option<&[(u32, u32)]> {
        self.term_id(term).map(|t| self.postings[t as usize].as_slice())
    }

    pub fn doc_norm(&self, index: usize) -> f64 {
        self.doc_norm[index]
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.doc_freq(term).map(|df| idf(self.len(), df))
    }

    /// Sparse tf-idf weights of `text` over the index vocabulary.
    pub fn query_vector(&self, text: &str, tokenizer: &dyn Tokenizer) -> Vec<(u32, f64)> {
        let mut tf: HashMap<u32, u32> = HashMap::new();
        for tok in tokenizer.split(text) {
            if self.stopwords.contains(&tok) {
                continue;
            }
            if let Some(&id) = self.vocabulary.get(&tok) {
                *tf.entry(id).or_default() += 1;
            }
        }
        let mut v: Vec<(u32, f64)> = tf
            .into_iter()
            .map(|(t, c)| (t, c as f64 * idf(self.len(), self.doc_freq[t as usize])))
            .collect();
        v.sort_unstable_by_key(|&(t, _)| t);
        v
    }

    /// Top-`k` snippets by cosine similarity; ties go to the lower index.
    /// Only positive scores are returned.
    pub fn retrieve(&self, query: &str, k: usize, tokenizer: &dyn Tokenizer) -> Vec<Hit> {
        if k == 0 {
            return Vec::new();
        }
        let q = self.query_vector(query, tokenizer);
        let q_norm = q.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if q_norm == 0.0 {
            return Vec::new();
        }
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for &(term, qw) in &q {
            let w = idf(self.len(), self.doc_freq[term as usize]);
            for &(doc, tf) in &self.postings[term as usize] {
                *scores.entry(doc).or_default() += qw * tf as f64 * w;
            }
        }
        let mut hits: Vec<Hit> = scores
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(doc, dot)| Hit {
                index: doc as usize,
                score: dot / (q_norm * self.doc_norm[doc as usize]),
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
        hits.truncate(k);
        hits
    }

    pub fn save(&self, path: &Path, provenance: &serde_json::Value) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let body = serde_json::to_string(self).expect("index serializes");
        writeln!(f, "{INDEX_MAGIC}")
            .and_then(|_| writeln!(f, "{provenance}"))
            .and_then(|_| writeln!(f, "{body}"))
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.splitn(3, '\n');
        if lines.next() != Some(INDEX_MAGIC) {
            return Err(Error::format(path, format!("missing `{INDEX_MAGIC}` header")));
        }
        let provenance: serde_json::Value = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| Error::format(path, format!("bad provenance block: {e}")))?;
        let mut index: TfIdfIndex = serde_json::from_str(lines.next().unwrap_or("").trim_end())
            .map_err(|e| Error::format(path, format!("bad index body: {e}")))?;
        index.vocabulary = index
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok((index, provenance))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WordTokenizer;
    use proptest::prelude::*;

    fn corpus(texts: &[&str]) -> KnowledgeCorpus {
        KnowledgeCorpus::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| KnowledgeSnippet::new(format!("s{i}"), "", *t))
                .collect(),
        )
        .unwrap()
    }

    fn tok() -> WordTokenizer {
        WordTokenizer::reserved_only()
    }

    fn corpus_file(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn ingest_counts_and_skips_blank_lines() {
        let f = corpus_file(&[r#"{"id":"a","text":"x"}"#, r#"{"text":"y","title":"t"}"#, r#"{"id":"c","text":"z"}"#]);
        assert_eq!(ingest_corpus(f.path()).unwrap().len(), 3);
        let f = corpus_file(&[r#"{"text":"x"}"#, "", r#"{"text":"y"}"#]);
        let c = ingest_corpus(f.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.snippets[1].id, "k1");
    }

    #[test]
    fn ingest_rejects_duplicates_and_malformed() {
        let f = corpus_file(&[r#"{"id":"a","text":"x"}"#, r#"{"id":"a","text":"y"}"#]);
        let err = ingest_corpus(f.path()).unwrap_err().to_string();
        assert!(err.contains("duplicate snippet id `a`"), "{err}");
        let f = corpus_file(&[r#"{"id":"a","text":"x"}"#, "not json"]);
        let err = ingest_corpus(f.path()).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(ingest_corpus(Path::new("/nonexistent/corpus.jsonl")).is_err());
    }

    #[test]
    fn doc_freq_hand_count() {
        let idx = build_index(&corpus(&["cat dog"]), &tok()).unwrap();
        assert_eq!(idx.vocabulary_len(), 2);
        assert_eq!(idx.doc_freq("cat"), Some(1));
        assert_eq!(idx.doc_freq("dog"), Some(1));

        let idx = build_index_with_stopwords(&corpus(&["a b", "a c"]), &tok(), HashSet::new()).unwrap();
        assert_eq!(idx.doc_freq("a"), Some(2));
        assert_eq!(idx.doc_freq("b"), Some(1));
        assert_eq!(idx.doc_freq("c"), Some(1));
        assert!((idx.idf("a").unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(build_index(&KnowledgeCorpus::default(), &tok()), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn retrieval_brute_force_example() {
        let c = corpus(&["thierry henry paris", "weather forecast rain"]);
        let idx = build_index(&c, &tok()).unwrap();
        let hits = idx.retrieve("thierry henry", 2, &tok());
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].index, 0);
        // brute force: idf of every term is ln(3/2)+1, doc vector (w,w,w), query (w,w)
        let expected = 2.0 / (3f64.sqrt() * 2f64.sqrt());
        assert!((hits[0].score - expected).abs() < 1e-12);
        assert!(idx.retrieve("volcano", 3, &tok()).is_empty());
        assert_eq!(idx.retrieve("paris rain", 10, &tok()).len(), 2);
    }

    #[test]
    fn save_and_load_round_trip() {
        let c = corpus(&["thierry henry paris", "weather forecast rain"]);
        let idx = build_index(&c, &tok()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx");
        idx.save(&path, &serde_json::json!({"seed": 1})).unwrap();
        let (back, prov) = TfIdfIndex::load(&path).unwrap();
        assert_eq!(prov["seed"], 1);
        assert_eq!(back.retrieve("henry", 1, &tok()), idx.retrieve("henry", 1, &tok()));
        std::fs::write(&path, "garbage\n").unwrap();
        assert!(TfIdfIndex::load(&path).is_err());
    }

    fn word_set() -> impl Strategy<Value = Vec<String>> {
        prop::collection::btree_set("[a-h]{1,3}", 1..6).prop_map(|s| s.into_iter().collect())
    }

    proptest! {
        #[test]
        fn index_invariants_and_self_retrieval(docs in prop::collection::btree_set(word_set(), 1..25)) {
            let texts: Vec<String> = docs.iter().map(|d| d.join(" ")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let idx = build_index_with_stopwords(&corpus(&refs), &tok(), HashSet::new()).unwrap();
            let mut covered = vec![false; idx.len()];
            for t in 0..idx.vocabulary_len() {
                let plist = &idx.postings[t];
                prop_assert!(idx.doc_freq[t] >= 1);
                prop_assert!(plist.windows(2).all(|w| w[0].0 < w[1].0));
                for &(d, _) in plist { covered[d as usize] = true; }
            }
            prop_assert!(covered.iter().all(|&c| c));
            prop_assert!(idx.doc_norm.iter().all(|&n| n > 0.0));
            for (i, text) in texts.iter().enumerate() {
                let hits = idx.retrieve(text, 5, &tok());
                prop_assert_eq!(hits[0].index, i);
                prop_assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
                prop_assert_eq!(&hits, &idx.retrieve(text, 5, &tok()));
            }
        }
    }
}
