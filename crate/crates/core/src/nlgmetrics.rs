//! Report-generation metrics: corpus BLEU-1..4, METEOR (exact + stem stages),
//! ROUGE-L, CIDEr and unigram TF-IDF cosine, all over one shared tokenizer.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// Lowercased tokens with no empties.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(pub Vec<String>);

impl TokenSeq {
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        Self(words.iter().map(|w| w.as_ref().to_lowercase()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

/// Lowercase and split on every maximal run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> TokenSeq {
    TokenSeq(
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect(),
    )
}

pub const MAX_ORDER: usize = 4;

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram totals for one pair at order `n`.
fn clipped_matches(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

fn check_bleu_args(candidates: usize, references: usize, n: usize) -> Result<()> {
    if candidates != references {
        return input_err(format!(
            "{candidates} candidates but {references} references"
        ));
    }
    if !(1..=MAX_ORDER).contains(&n) {
        return input_err(format!("BLEU order must be 1..={MAX_ORDER}, got {n}"));
    }
    Ok(())
}

fn bleu_from_counts(matched: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (&m, &t) in matched.iter().zip(totals) {
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp();
    bp * (log_sum / matched.len() as f64).exp()
}

/// Corpus-level BLEU-n with uniform weights, brevity penalty and no smoothing.
pub fn bleu_n(candidates: &[TokenSeq], references: &[TokenSeq], n: usize) -> Result<f64> {
    check_bleu_args(candidates.len(), references.len(), n)?;
    let mut matched = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        for k in 1..=n {
            let (m, t) = clipped_matches(&c.0, &r.0, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
        }
        c_len += c.len();
        r_len += r.len();
    }
    Ok(bleu_from_counts(&matched, &totals, c_len, r_len))
}

/// Sentence-level BLEU-n averaged over pairs.
pub fn sentence_bleu_n(candidates: &[TokenSeq], references: &[TokenSeq], n: usize) -> Result<f64> {
    check_bleu_args(candidates.len(), references.len(), n)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += bleu_n(std::slice::from_ref(c), std::slice::from_ref(r), n)?;
    }
    Ok(sum / candidates.len() as f64)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with β = 1.2.
pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    let l = lcs_len(&candidate.0, &reference.0);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn stemmer() -> &'static Stemmer {
    static STEMMER: OnceLock<Stemmer> = OnceLock::new();
    STEMMER.get_or_init(|| Stemmer::create(Algorithm::English))
}

/// Snowball (Porter2) English stem.
pub fn stem(word: &str) -> String {
    stemmer().stem(word).into_owned()
}

/// Aligned `(candidate index, reference index)` pairs sorted by candidate index.
pub fn meteor_alignment(candidate: &TokenSeq, reference: &TokenSeq) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut cand_match: Vec<Option<usize>> = vec![None; candidate.len()];
    let stages: [&dyn Fn(&str) -> String; 2] = [&|w: &str| w.to_string(), &|w: &str| stem(w)];
    for key in stages {
        let ref_keys: Vec<String> = reference.0.iter().map(|w| key(w)).collect();
        for (i, w) in candidate.0.iter().enumerate() {
            if cand_match[i].is_some() {
                continue;
            }
            let k = key(w);
            if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && ref_keys[j] == k) {
                ref_used[j] = true;
                cand_match[i] = Some(j);
            }
        }
    }
    cand_match
        .into_iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect()
}

/// METEOR without the synonym stage; a lower bound on full METEOR.
pub fn meteor_lite(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    let align = meteor_alignment(candidate, reference);
    let m = align.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let chunks = 1 + align
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// Document frequencies of n-grams (orders 1..=4) over a reference corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusStats {
    pub document_frequency: BTreeMap<Vec<String>, usize>,
    pub document_count: usize,
}

impl CorpusStats {
    pub fn from_documents(docs: &[TokenSeq]) -> Self {
        let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for d in docs {
            for n in 1..=MAX_ORDER {
                for g in ngram_counts(&d.0, n).into_keys() {
                    *df.entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Self {
            document_frequency: df,
            document_count: docs.len(),
        }
    }

    pub fn df(&self, gram: &[String]) -> usize {
        self.document_frequency.get(gram).copied().unwrap_or(0)
    }
}

fn cosine_sparse(a: &BTreeMap<Ngram<'_>, f64>, b: &BTreeMap<Ngram<'_>, f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .iter()
        .filter_map(|(g, v)| large.get(g).map(|w| v * w))
        .sum();
    dot / (na * nb)
}

fn cider_vector<'a>(
    tokens: &'a [String],
    n: usize,
    stats: &CorpusStats,
) -> BTreeMap<Ngram<'a>, f64> {
    let counts = ngram_counts(tokens, n);
    let total = tokens.len().saturating_sub(n - 1) as f64;
    let n_docs = stats.document_count as f64;
    counts
        .into_iter()
        .map(|(g, c)| {
            let idf = (n_docs / stats.df(g).max(1) as f64).ln();
            (g, c as f64 / total * idf)
        })
        .collect()
}

/// Unscaled CIDEr: mean over pairs of the mean over n = 1..4 of TF-IDF cosine.
pub fn cider(candidates: &[TokenSeq], references: &[TokenSeq], stats: &CorpusStats) -> Result<f64> {
    if stats.document_count == 0 {
        return input_err("CIDEr needs nonempty corpus statistics");
    }
    if candidates.len() != references.len() {
        return input_err("candidate and reference counts differ");
    }
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        let mut pair = 0.0;
        for n in 1..=MAX_ORDER {
            pair += cosine_sparse(&cider_vector(&c.0, n, stats), &cider_vector(&r.0, n, stats));
        }
        total += pair / MAX_ORDER as f64;
    }
    Ok(total / candidates.len() as f64)
}

fn tfidf_vector<'a>(tokens: &'a [String], stats: &CorpusStats) -> BTreeMap<Ngram<'a>, f64> {
    let n_docs = stats.document_count as f64;
    ngram_counts(tokens, 1)
        .into_iter()
        .map(|(g, c)| {
            let idf = ((1.0 + n_docs) / (1.0 + stats.df(g) as f64)).ln() + 1.0;
            (g, c as f64 * idf)
        })
        .collect()
}

/// Cosine of smoothed unigram TF-IDF vectors.
pub fn tfidf_similarity(a: &TokenSeq, b: &TokenSeq, stats: &CorpusStats) -> f64 {
    cosine_sparse(&tfidf_vector(&a.0, stats), &tfidf_vector(&b.0, stats)).min(1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub tfidf: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 8] = [
        "bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider", "tfidf",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.meteor,
            self.rouge_l,
            self.cider,
            self.tfidf,
        ]
    }

    pub fn csv_header() -> String {
        Self::COLUMNS.join(",")
    }

    /// Full-precision CSV row in column order.
    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Three-decimal table row, e.g. `0.241 & 0.157 & ...`.
    pub fn table_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
            .join(" & ")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in Self::COLUMNS.iter().zip(self.values()) {
            writeln!(f, "{name:>8}: {v:.3}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuLevel {
    #[default]
    Corpus,
    Sentence,
}

/// Scores `(generated, reference)` report pairs with every metric.
pub fn evaluate_report_set(pairs: &[(String, String)]) -> Result<MetricReport> {
    evaluate_report_set_with(pairs, BleuLevel::Corpus)
}

pub fn evaluate_report_set_with(
    pairs: &[(String, String)],
    level: BleuLevel,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return input_err("no report pairs to evaluate");
    }
    let cands: Vec<TokenSeq> = pairs.iter().map(|(g, _)| tokenize(g)).collect();
    let refs: Vec<TokenSeq> = pairs.iter().map(|(_, r)| tokenize(r)).collect();
    let stats = CorpusStats::from_documents(&refs);
    let bleu = |n| match level {
        BleuLevel::Corpus => bleu_n(&cands, &refs, n),
        BleuLevel::Sentence => sentence_bleu_n(&cands, &refs, n),
    };
    let k = pairs.len() as f64;
    let mean = |f: &dyn Fn(&TokenSeq, &TokenSeq) -> f64| {
        cands.iter().zip(&refs).map(|(c, r)| f(c, r)).sum::<f64>() / k
    };
    Ok(MetricReport {
        bleu1: bleu(1)?,
        bleu2: bleu(2)?,
        bleu3: bleu(3)?,
        bleu4: bleu(4)?,
        meteor: mean(&meteor_lite),
        rouge_l: mean(&rouge_l),
        cider: cider(&cands, &refs, &stats)?,
        tfidf: mean(&|c, r| tfidf_similarity(c, r, &stats)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> TokenSeq {
        tokenize(s)
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(ts("No acute disease.").0, vec!["no", "acute", "disease"]);
        assert!(ts("").is_empty());
        assert_eq!(ts("X-ray").0, vec!["x", "ray"]);
    }

    #[test]
    fn bleu_examples() {
        let a = vec![
            ts("the cat sat on the mat"),
            ts("no acute cardiopulmonary process"),
        ];
        for n in 1..=4 {
            assert_eq!(bleu_n(&a, &a, n).unwrap(), 1.0);
        }
        let c = vec![ts("the the the")];
        let r = vec![ts("the cat")];
        assert!((bleu_n(&c, &r, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let c = vec![ts("heart normal")];
        let r = vec![ts("lungs clear")];
        for n in 1..=4 {
            assert_eq!(bleu_n(&c, &r, n).unwrap(), 0.0);
        }
        assert!(bleu_n(&c, &[], 1).is_err());
        assert!(bleu_n(&c, &r, 5).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        let c = vec![ts("the cat")];
        let r = vec![ts("the cat sat down")];
        let expect = (1.0f64 - 4.0 / 2.0).exp();
        assert!((bleu_n(&c, &r, 1).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&ts("a b c"), &ts("a b c")), 1.0);
        assert_eq!(rouge_l(&ts("a b"), &ts("c d")), 0.0);
        assert!((rouge_l(&ts("a b c"), &ts("a c d")) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn meteor_examples() {
        let v = meteor_lite(&ts("a b c"), &ts("a b c"));
        assert!((v - (1.0 - 0.5 / 27.0)).abs() < 1e-15);
        assert!((v - 0.98148).abs() < 1e-5);
        assert_eq!(meteor_lite(&ts("x y"), &ts("z")), 0.0);
        assert_eq!(meteor_lite(&ts("cats"), &ts("cat")), 0.5);
    }

    #[test]
    fn cider_examples() {
        let refs = vec![
            ts("left lower lobe opacity is seen"),
            ts("heart size is normal today"),
        ];
        let stats = CorpusStats::from_documents(&refs);
        let c = vec![refs[0].clone()];
        let r = vec![refs[0].clone()];
        // "is" is in every reference; all other grams are unique
        assert!((cider(&c, &r, &stats).unwrap() - 1.0).abs() < 1e-12);
        let c = vec![ts("pleural effusion absent")];
        assert_eq!(cider(&c, &r, &stats).unwrap(), 0.0);
        let only_common = vec![ts("is")];
        assert_eq!(cider(&only_common, &[ts("is")], &stats).unwrap(), 0.0);
        assert!(cider(&c, &r, &CorpusStats::default()).is_err());
    }

    #[test]
    fn tfidf_examples() {
        let docs = vec![ts("a b"), ts("a c")];
        let stats = CorpusStats::from_documents(&docs);
        assert!((tfidf_similarity(&docs[0], &docs[0], &stats) - 1.0).abs() < 1e-12);
        assert_eq!(tfidf_similarity(&ts("x"), &ts("y"), &stats), 0.0);
        // idf(a) = ln(3/3)+1 = 1, idf(b) = idf(c) = ln(3/2)+1
        let w = (1.5f64).ln() + 1.0;
        let expect = 1.0 / (1.0 + w * w);
        assert!((tfidf_similarity(&docs[0], &docs[1], &stats) - expect).abs() < 1e-12);
    }

    #[test]
    fn report_identity_and_format() {
        let pairs: Vec<(String, String)> = [
            "the heart size is normal",
            "there is a small left pleural effusion",
            "no focal consolidation pneumothorax or effusion",
        ]
        .iter()
        .map(|s| (s.to_string(), s.to_string()))
        .collect();
        let m = evaluate_report_set(&pairs).unwrap();
        assert_eq!([m.bleu1, m.bleu2, m.bleu3, m.bleu4], [1.0; 4]);
        assert_eq!(m.rouge_l, 1.0);
        assert!((m.tfidf - 1.0).abs() < 1e-12);
        assert!((m.cider - 1.0).abs() < 1e-12);
        assert!(m.meteor > 0.98 && m.meteor < 1.0);
        assert!(evaluate_report_set(&[]).is_err());
        let row = MetricReport {
            bleu1: 0.2414,
            ..Default::default()
        }
        .table_row();
        assert!(row.starts_with("0.241 & 0.000"));
    }
}
