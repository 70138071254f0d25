//! Bag-of-words baseline: tokenizer, document-frequency-bounded n-gram
//! vocabulary, count vectorizer, and chi-squared term selection.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// NLTK English stopword list (179 words).
const STOPWORDS: &[&str] = &[
    "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "you're", "you've", "you'll", "you'd",
    "your", "yours", "yourself", "yourselves", "he", "him", "his", "himself", "she", "she's", "her", "hers",
    "herself", "it", "it's", "its", "itself", "they", "them", "their", "theirs", "themselves", "what", "which",
    "who", "whom", "this", "that", "that'll", "these", "those", "am", "is", "are", "was", "were", "be", "been",
    "being", "have", "has", "had", "having", "do", "does", "did", "doing", "a", "an", "the", "and", "but", "if",
    "or", "because", "as", "until", "while", "of", "at", "by", "for", "with", "about", "against", "between",
    "into", "through", "during", "before", "after", "above", "below", "to", "from", "up", "down", "in", "out",
    "on", "off", "over", "under", "again", "further", "then", "once", "here", "there", "when", "where", "why",
    "how", "all", "any", "both", "each", "few", "more", "most", "other", "some", "such", "no", "nor", "not",
    "only", "own", "same", "so", "than", "too", "very", "s", "t", "can", "will", "just", "don", "don't",
    "should", "should've", "now", "d", "ll", "m", "o", "re", "ve", "y", "ain", "aren", "aren't", "couldn",
    "couldn't", "didn", "didn't", "doesn", "doesn't", "hadn", "hadn't", "hasn", "hasn't", "haven", "haven't",
    "isn", "isn't", "ma", "mightn", "mightn't", "mustn", "mustn't", "needn", "needn't", "shan", "shan't",
    "shouldn", "shouldn't", "wasn", "wasn't", "weren", "weren't", "won", "won't", "wouldn", "wouldn't",
];

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.iter().copied().collect())
}

/// Suffix rules tried in order; the first rule whose suffix matches and
/// leaves a stem of at least [`MIN_STEM`] characters is applied.
pub const STEM_RULES: &[(&str, &str)] = &[
    ("sses", "ss"),
    ("ies", "i"),
    ("ing", ""),
    ("ed", ""),
    ("ness", ""),
    ("ment", ""),
    ("s", ""),
];

pub const MIN_STEM: usize = 3;

/// Plural `s` is kept after these endings.
const KEEP_S_AFTER: &[&str] = &["ss", "us", "is"];

pub fn stem(word: &str) -> String {
    for &(suffix, replacement) in STEM_RULES {
        let Some(stem) = word.strip_suffix(suffix) else {
            continue;
        };
        if stem.chars().count() < MIN_STEM {
            continue;
        }
        if suffix == "s" && KEEP_S_AFTER.iter().any(|e| word.ends_with(e)) {
            continue;
        }
        return format!("{stem}{replacement}");
    }
    word.to_string()
}

/// Lowercases, splits on anything that is not a letter, digit, or
/// apostrophe, drops one-character tokens and stopwords, then stems.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\''))
        .filter(|t| t.chars().count() >= 2 && !stopwords().contains(t))
        .map(|t| stem(&t.replace('\'', "")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    /// A term must appear in strictly more documents than this.
    pub min_doc_count: usize,
    /// A term must appear in strictly less than this fraction of documents.
    pub max_doc_fraction: f64,
    pub max_size: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_doc_count: 5,
            max_doc_fraction: 0.8,
            max_size: 10_000,
            ngram_min: 1,
            ngram_max: 2,
        }
    }
}

fn ngrams(tokens: &[String], lo: usize, hi: usize) -> Vec<String> {
    let mut out = Vec::new();
    for n in lo..=hi {
        if n == 0 || n > tokens.len() {
            continue;
        }
        out.extend(tokens.windows(n).map(|w| w.join(" ")));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub config: VocabConfig,
    /// Ordered by total frequency descending, then lexicographically.
    pub terms: Vec<String>,
    pub doc_frequency: Vec<usize>,
    pub total_frequency: Vec<usize>,
    pub corpus_size: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.terms.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect()
    }
}

pub fn build_vocab(corpus: &[String], config: &VocabConfig) -> Result<Vocabulary, TextError> {
    if corpus.is_empty() {
        return Err(TextError::Input("empty corpus".into()));
    }
    if config.ngram_min == 0 || config.ngram_min > config.ngram_max {
        return Err(TextError::Input(format!(
            "bad n-gram range {}-{}",
            config.ngram_min, config.ngram_max
        )));
    }
    let per_doc: Vec<HashMap<String, usize>> = corpus
        .par_iter()
        .map(|doc| {
            let mut counts = HashMap::new();
            for g in ngrams(&tokenize(doc), config.ngram_min, config.ngram_max) {
                *counts.entry(g).or_insert(0) += 1;
            }
            counts
        })
        .collect();
    let mut stats: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for counts in per_doc {
        for (term, c) in counts {
            let e = stats.entry(term).or_default();
            e.0 += 1;
            e.1 += c;
        }
    }
    let n = corpus.len() as f64;
    let mut kept: Vec<(String, usize, usize)> = stats
        .into_iter()
        .filter(|(_, (df, _))| *df > config.min_doc_count && (*df as f64) / n < config.max_doc_fraction)
        .map(|(t, (df, tf))| (t, df, tf))
        .collect();
    kept.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    kept.truncate(config.max_size);
    Ok(Vocabulary {
        config: config.clone(),
        terms: kept.iter().map(|k| k.0.clone()).collect(),
        doc_frequency: kept.iter().map(|k| k.1).collect(),
        total_frequency: kept.iter().map(|k| k.2).collect(),
        corpus_size: corpus.len(),
    })
}

/// Sparse document-term counts; each row lists `(term index, count)` in
/// increasing term order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCounts {
    pub n_terms: usize,
    pub rows: Vec<Vec<(usize, u32)>>,
}

impl TermCounts {
    pub fn get(&self, doc: usize, term: usize) -> u32 {
        self.rows[doc]
            .binary_search_by_key(&term, |e| e.0)
            .map_or(0, |i| self.rows[doc][i].1)
    }
}

pub fn vectorize(corpus: &[String], vocab: &Vocabulary) -> TermCounts {
    let index = vocab.index();
    let rows = corpus
        .par_iter()
        .map(|doc| {
            let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
            for g in ngrams(&tokenize(doc), vocab.config.ngram_min, vocab.config.ngram_max) {
                if let Some(&i) = index.get(g.as_str()) {
                    *counts.entry(i).or_insert(0) += 1;
                }
            }
            counts.into_iter().collect()
        })
        .collect();
    TermCounts {
        n_terms: vocab.len(),
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedTerm {
    pub term: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub k: usize,
    pub selected: Vec<SelectedTerm>,
    /// Score for every vocabulary term, in vocabulary order.
    pub scores: Vec<f64>,
}

impl SelectionResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TextError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["term", "chi2", "rank"])?;
        for s in &self.selected {
            wtr.write_record([s.term.clone(), s.score.to_string(), s.rank.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Chi-squared scores between min-max scaled term columns and the labels,
/// keeping the `k` best (ties broken lexicographically).
pub fn chi2_select(
    counts: &TermCounts,
    vocab: &Vocabulary,
    labels: &[bool],
    k: usize,
) -> Result<SelectionResult, TextError> {
    if labels.len() != counts.rows.len() {
        return Err(TextError::Input(format!(
            "{} labels for {} documents",
            labels.len(),
            counts.rows.len()
        )));
    }
    if counts.n_terms != vocab.len() {
        return Err(TextError::Input("term counts do not match the vocabulary".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n = labels.len();
    if n_pos == 0 || n_pos == n {
        return Err(TextError::Input("chi-squared selection needs both classes".into()));
    }
    let t = counts.n_terms;
    // absent terms count as zero, so the column minimum is zero unless the
    // term occurs in every document
    let mut max = vec![0u32; t];
    let mut min = vec![u32::MAX; t];
    let mut present = vec![0usize; t];
    for row in &counts.rows {
        for &(j, c) in row {
            max[j] = max[j].max(c);
            min[j] = min[j].min(c);
            present[j] += 1;
        }
    }
    for j in 0..t {
        if present[j] < n {
            min[j] = 0;
        }
    }
    let mut obs_pos = vec![0.0; t];
    let mut total = vec![0.0; t];
    for (row, &y) in counts.rows.iter().zip(labels) {
        for &(j, c) in row {
            let range = f64::from(max[j] - min[j]);
            if range == 0.0 {
                continue;
            }
            let v = f64::from(c - min[j]) / range;
            total[j] += v;
            if y {
                obs_pos[j] += v;
            }
        }
    }
    let p_pos = n_pos as f64 / n as f64;
    let scores: Vec<f64> = (0..t)
        .map(|j| {
            if total[j] == 0.0 {
                return 0.0;
            }
            let e_pos = total[j] * p_pos;
            let e_neg = total[j] * (1.0 - p_pos);
            let o_neg = total[j] - obs_pos[j];
            (obs_pos[j] - e_pos).powi(2) / e_pos + (o_neg - e_neg).powi(2) / e_neg
        })
        .collect();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| vocab.terms[a].cmp(&vocab.terms[b])));
    let selected = order
        .iter()
        .take(k)
        .enumerate()
        .map(|(rank, &j)| SelectedTerm {
            term: vocab.terms[j].clone(),
            score: scores[j],
            rank: rank + 1,
        })
        .collect();
    Ok(SelectionResult { k, selected, scores })
}
