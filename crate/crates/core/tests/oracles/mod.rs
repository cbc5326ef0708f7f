//! Naive reference implementations of the text metrics, written from the
//! definitions with no shared code beyond the stemmer.
#![allow(dead_code)]

use crrg_core::nlgmetrics::stem;

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else if !cur.is_empty() {
            out.push(cur.to_lowercase());
            cur.clear();
        }
    }
    if !cur.is_empty() {
        out.push(cur.to_lowercase());
    }
    out
}

/// All n-grams in order of occurrence, duplicates included.
fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu(cands: &[Vec<String>], refs: &[Vec<String>], n: usize) -> f64 {
    let mut precisions = Vec::new();
    for k in 1..=n {
        let (mut hit, mut total) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            let cg = grams(c, k);
            let rg = grams(r, k);
            for g in distinct(&cg) {
                hit += count(&cg, &g).min(count(&rg, &g));
            }
            total += cg.len();
        }
        if hit == 0 {
            return 0.0;
        }
        precisions.push(hit as f64 / total as f64);
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / n as f64;
    bp * log_mean.exp()
}

/// Full-table LCS.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn rouge_l(c: &[String], r: &[String]) -> f64 {
    let l = lcs(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rc) = (l / c.len() as f64, l / r.len() as f64);
    let b2 = 1.2f64 * 1.2;
    (1.0 + b2) * p * rc / (rc + b2 * p)
}

pub fn meteor(c: &[String], r: &[String]) -> f64 {
    let mut link: Vec<Option<usize>> = vec![None; c.len()];
    let mut taken = vec![false; r.len()];
    for stage in 0..2 {
        for i in 0..c.len() {
            if link[i].is_some() {
                continue;
            }
            for j in 0..r.len() {
                let same = if stage == 0 {
                    c[i] == r[j]
                } else {
                    stem(&c[i]) == stem(&r[j])
                };
                if !taken[j] && same {
                    taken[j] = true;
                    link[i] = Some(j);
                    break;
                }
            }
        }
    }
    let m = link.iter().filter(|x| x.is_some()).count();
    if m == 0 {
        return 0.0;
    }
    // a chunk starts at every aligned candidate token that does not continue the previous one
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for (i, l) in link.iter().enumerate() {
        if let Some(j) = *l {
            let continues = matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j);
            if !continues {
                chunks += 1;
            }
            prev = Some((i, j));
        }
    }
    let p = m as f64 / c.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

fn doc_freq(docs: &[Vec<String>], g: &[String]) -> usize {
    docs.iter()
        .filter(|d| count(&grams(d, g.len()), g) > 0)
        .count()
}

fn dense_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Dense vectors over every n-gram of the two texts.
pub fn cider(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let n_docs = refs.len() as f64;
    let mut total = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let mut s = 0.0;
        for n in 1..=4 {
            let (cg, rg) = (grams(c, n), grams(r, n));
            let mut space = cg.clone();
            space.extend(rg.iter().cloned());
            let space = distinct(&space);
            let vec_of = |gs: &[Vec<String>]| -> Vec<f64> {
                space
                    .iter()
                    .map(|g| {
                        if gs.is_empty() {
                            return 0.0;
                        }
                        let tf = count(gs, g) as f64 / gs.len() as f64;
                        tf * (n_docs / doc_freq(refs, g).max(1) as f64).ln()
                    })
                    .collect()
            };
            s += dense_cosine(&vec_of(&cg), &vec_of(&rg));
        }
        total += s / 4.0;
    }
    total / cands.len() as f64
}

pub fn tfidf(a: &[String], b: &[String], corpus: &[Vec<String>]) -> f64 {
    let n = corpus.len() as f64;
    let mut space: Vec<Vec<String>> = grams(a, 1);
    space.extend(grams(b, 1));
    let space = distinct(&space);
    let vec_of = |t: &[String]| -> Vec<f64> {
        let gs = grams(t, 1);
        space
            .iter()
            .map(|g| {
                count(&gs, g) as f64 * (((1.0 + n) / (1.0 + doc_freq(corpus, g) as f64)).ln() + 1.0)
            })
            .collect()
    };
    dense_cosine(&vec_of(a), &vec_of(b)).min(1.0)
}

/// All eight metrics in report order for (generated, reference) pairs.
pub fn report(pairs: &[(String, String)]) -> [f64; 8] {
    let cands: Vec<Vec<String>> = pairs.iter().map(|(g, _)| tokenize(g)).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|(_, r)| tokenize(r)).collect();
    let k = pairs.len() as f64;
    let mean = |f: &dyn Fn(&[String], &[String]) -> f64| {
        cands.iter().zip(&refs).map(|(c, r)| f(c, r)).sum::<f64>() / k
    };
    [
        bleu(&cands, &refs, 1),
        bleu(&cands, &refs, 2),
        bleu(&cands, &refs, 3),
        bleu(&cands, &refs, 4),
        mean(&meteor),
        mean(&rouge_l),
        cider(&cands, &refs),
        mean(&|c, r| tfidf(c, r, &refs)),
    ]
}

pub mod geometry;
