//! Retrieval, correlation, probing, zero-shot and clustering metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::Serialize;

use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{dot, softmax, Matrix, Rng};

/// Relevant document ids per query (binary relevance).
pub type Qrels = BTreeMap<String, BTreeSet<String>>;
/// Ranked document ids per query, best first.
pub type Rankings = BTreeMap<String, Vec<String>>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub k: Option<usize>,
    pub n: usize,
    pub seed: Option<u64>,
    pub dataset: String,
}

/// Parses `query_id<TAB>doc_id` lines. Blank lines are skipped.
pub fn read_qrels<R: BufRead>(input: R) -> Result<Qrels> {
    let mut q = Qrels::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (query, doc) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("qrels line {}: expected `query<TAB>doc`", i + 1)))?;
        q.entry(query.to_string()).or_default().insert(doc.trim_end().to_string());
    }
    Ok(q)
}

/// Every judged document must exist in the corpus.
pub fn validate_qrels(qrels: &Qrels, corpus_ids: &[String]) -> Result<()> {
    let corpus: BTreeSet<&String> = corpus_ids.iter().collect();
    for (q, docs) in qrels {
        if let Some(d) = docs.iter().find(|d| !corpus.contains(d)) {
            return Err(invalid(format!("query `{q}` judges unknown document `{d}`")));
        }
    }
    Ok(())
}

/// Ranks documents by descending cosine; ties go to the smaller doc id.
pub fn rank_by_cosine(
    query_ids: &[String],
    queries: &Matrix,
    doc_ids: &[String],
    docs: &Matrix,
) -> Result<Rankings> {
    if query_ids.len() != queries.rows() || doc_ids.len() != docs.rows() {
        return Err(shape("ids and embedding rows differ in count"));
    }
    let q = queries.normalize_rows()?;
    let d = docs.normalize_rows()?;
    let sims = q.matmul_t(&d)?;
    let mut out = Rankings::new();
    for (i, qid) in query_ids.iter().enumerate() {
        let mut order: Vec<usize> = (0..doc_ids.len()).collect();
        let row = sims.row(i);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then_with(|| doc_ids[a].cmp(&doc_ids[b])));
        out.insert(qid.clone(), order.into_iter().map(|j| doc_ids[j].clone()).collect());
    }
    Ok(out)
}

fn judged<'a>(rankings: &'a Rankings, qrels: &'a Qrels, k: usize) -> Result<Vec<(&'a [String], &'a BTreeSet<String>)>> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let mut out = Vec::new();
    for (q, rel) in qrels.iter().filter(|(_, r)| !r.is_empty()) {
        let ranking = rankings.get(q).ok_or_else(|| invalid(format!("query `{q}` has no ranking")))?;
        out.push((ranking.as_slice(), rel));
    }
    if out.is_empty() {
        return Err(invalid("no query has relevance judgements"));
    }
    Ok(out)
}

/// Mean binary-gain nDCG@k over judged queries.
pub fn ndcg_at_k(rankings: &Rankings, qrels: &Qrels, k: usize) -> Result<f64> {
    let queries = judged(rankings, qrels, k)?;
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let mut total = 0.0;
    for (ranking, rel) in &queries {
        let dcg: f64 = ranking
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, d)| rel.contains(*d))
            .map(|(i, _)| discount(i + 1))
            .sum();
        let idcg: f64 = (1..=rel.len().min(k)).map(discount).sum();
        total += dcg / idcg;
    }
    Ok(total / queries.len() as f64)
}

/// Fraction of judged queries with a relevant document in the top `k`.
pub fn recall_at_k(rankings: &Rankings, qrels: &Qrels, k: usize) -> Result<f64> {
    let queries = judged(rankings, qrels, k)?;
    let hits = queries.iter().filter(|(r, rel)| r.iter().take(k).any(|d| rel.contains(d))).count();
    Ok(hits as f64 / queries.len() as f64)
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&t| ranks[t] = mean);
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(shape(format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(invalid("correlation needs at least 2 points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(invalid("correlation undefined for a constant input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(shape(format!("lengths {} and {}", pred.len(), gold.len())));
    }
    pearson(&average_ranks(pred), &average_ranks(gold))
}

/// Multinomial logistic regression settings for [`linear_probe`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub shots: usize,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { shots: 16, iterations: 500, lr: 0.1, l2: 1e-4 }
    }
}

/// Mean cross-entropy plus `(l2/2)·‖W‖²` and its gradient. `w` is `C × d`,
/// `b` has `C` entries, labels index rows of `w`.
pub fn probe_loss_and_grad(w: &Matrix, b: &[f64], x: &Matrix, y: &[usize], l2: f64) -> Result<(f64, Matrix, Vec<f64>)> {
    if x.rows() != y.len() || x.cols() != w.cols() || b.len() != w.rows() {
        return Err(shape("probe inputs disagree in shape"));
    }
    let n = x.rows() as f64;
    let mut logits = x.matmul_t(w)?;
    logits.add_row_broadcast(b)?;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &label) in y.iter().enumerate() {
        let p = softmax(logits.row(i));
        loss -= p[label].ln();
        let row = dlogits.row_mut(i);
        for (d, pc) in row.iter_mut().zip(&p) {
            *d = pc / n;
        }
        row[label] -= 1.0 / n;
    }
    loss = loss / n + 0.5 * l2 * w.frobenius_sq();
    let mut dw = dlogits.t_matmul(x)?;
    dw.add_scaled(w, l2)?;
    Ok((loss, dw, dlogits.col_sums()))
}

/// Argmax where values within `1e-9` (relative) of the maximum count as
/// tied; ties go to the lowest index.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * max.abs().max(1.0);
    v.iter().position(|&x| x >= max - tol).unwrap_or(0)
}

/// Few-shot linear probe accuracy. Embeddings are L2-normalized first so
/// the result does not depend on their scale.
pub fn linear_probe(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    test_labels: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if train.rows() != train_labels.len() || test.rows() != test_labels.len() {
        return Err(shape("labels and embeddings differ in count"));
    }
    if train.cols() != test.cols() {
        return Err(shape("train and test dims differ"));
    }
    if test.rows() == 0 || cfg.shots == 0 {
        return Err(invalid("probe needs test items and at least one shot"));
    }
    let classes: Vec<usize> = train_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let class_index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    if let Some(c) = test_labels.iter().find(|c| !class_index.contains_key(c)) {
        return Err(invalid(format!("test class {c} absent from training data")));
    }
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (ci, &c) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..train_labels.len()).filter(|&i| train_labels[i] == c).collect();
        if members.len() < cfg.shots {
            return Err(invalid(format!("class {c} has {} examples, {} shots needed", members.len(), cfg.shots)));
        }
        for j in rng.sample_distinct(members.len(), cfg.shots) {
            rows.push(members[j]);
            y.push(ci);
        }
    }
    let x = train.select_rows(&rows).normalize_rows()?;
    let mut w = Matrix::zeros(classes.len(), x.cols());
    let mut b = vec![0.0; classes.len()];
    for _ in 0..cfg.iterations {
        let (_, dw, db) = probe_loss_and_grad(&w, &b, &x, &y, cfg.l2)?;
        w.add_scaled(&dw, -cfg.lr)?;
        b.iter_mut().zip(&db).for_each(|(bi, g)| *bi -= cfg.lr * g);
    }
    let xt = test.normalize_rows()?;
    let mut logits = xt.matmul_t(&w)?;
    logits.add_row_broadcast(&b)?;
    let correct = test_labels
        .iter()
        .enumerate()
        .filter(|(i, c)| classes[argmax_lowest(logits.row(*i))] == **c)
        .count();
    Ok(correct as f64 / test_labels.len() as f64)
}

/// Predicts the prompt with the highest cosine (exact ties to the lowest
/// index) and returns accuracy against `gold`.
pub fn zeroshot_classify(items: &Matrix, prompts: &Matrix, gold: &[usize]) -> Result<f64> {
    if prompts.rows() == 0 {
        return Err(invalid("zero-shot needs at least one class prompt"));
    }
    if items.cols() != prompts.cols() {
        return Err(shape("item and prompt dims differ"));
    }
    if items.rows() != gold.len() || gold.is_empty() {
        return Err(shape("gold labels do not match items"));
    }
    let p = prompts.normalize_rows()?;
    let x = items.normalize_rows()?;
    let mut correct = 0;
    for (i, &g) in gold.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..p.rows() {
            let s = dot(x.row(i), p.row(c));
            if s > best.0 {
                best = (s, c);
            }
        }
        if best.1 == g {
            correct += 1;
        }
    }
    Ok(correct as f64 / gold.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmiNorm {
    /// `I / sqrt(H₁·H₂)`
    Sqrt,
    /// `I / ((H₁ + H₂) / 2)`
    Arithmetic,
}

impl NmiNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(NmiNorm::Sqrt),
            "arithmetic" => Ok(NmiNorm::Arithmetic),
            other => Err(Error::Config(format!("unknown NMI normalization `{other}` (sqrt | arithmetic)"))),
        }
    }
}

/// Normalized mutual information between two labelings; 0 when either has
/// zero entropy.
pub fn nmi(a: &[usize], b: &[usize], norm: NmiNorm) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(invalid("empty labeling"));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut ma: BTreeMap<usize, f64> = BTreeMap::new();
    let mut mb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *ma.entry(x).or_default() += 1.0;
        *mb.entry(y).or_default() += 1.0;
    }
    let entropy = |m: &BTreeMap<usize, f64>| -> f64 { m.values().map(|c| -(c / n) * (c / n).ln()).sum() };
    let (ha, hb) = (entropy(&ma), entropy(&mb));
    if ha <= 0.0 || hb <= 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint.iter().map(|(&(x, y), &c)| (c / n) * (n * c / (ma[&x] * mb[&y])).ln()).sum();
    let denom = match norm {
        NmiNorm::Sqrt => (ha * hb).sqrt(),
        NmiNorm::Arithmetic => 0.5 * (ha + hb),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the summed squared centroid shift falls to this value.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { restarts: 10, max_iter: 300, tol: 1e-6 }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_center(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(x, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(x: &Matrix, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centers = vec![x.row(rng.below(n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.below(n)
        };
        centers.push(x.row(pick).to_vec());
        let c = centers.last().unwrap();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), c));
        }
    }
    centers
}

/// Lloyd's algorithm from one k-means++ start; returns (assignments, inertia).
fn lloyd(x: &Matrix, k: usize, cfg: &KMeansConfig, rng: &mut Rng) -> (Vec<usize>, f64) {
    let mut centers = kmeans_pp(x, k, rng);
    let mut assign = vec![0; x.rows()];
    for _ in 0..cfg.max_iter {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest_center(x.row(i), &centers).0;
        }
        let mut sums = vec![vec![0.0; x.cols()]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            sums[a].iter_mut().zip(x.row(i)).for_each(|(s, v)| *s += v);
        }
        let mut shift = 0.0;
        for c in 0..k {
            let new = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // empty cluster: restart it at the worst-fit point
                let far = (0..x.rows())
                    .max_by(|&a, &b| {
                        nearest_center(x.row(a), &centers).1.total_cmp(&nearest_center(x.row(b), &centers).1)
                    })
                    .unwrap();
                x.row(far).to_vec()
            };
            shift += sq_dist(&new, &centers[c]);
            centers[c] = new;
        }
        if shift <= cfg.tol {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, a) in assign.iter_mut().enumerate() {
        let (c, d) = nearest_center(x.row(i), &centers);
        *a = c;
        inertia += d;
    }
    (assign, inertia)
}

/// Best-of-restarts k-means assignment on L2-normalized rows.
pub fn kmeans(embs: &Matrix, n_clusters: usize, cfg: &KMeansConfig, seed: u64) -> Result<Vec<usize>> {
    if n_clusters == 0 {
        return Err(invalid("n_clusters must be at least 1"));
    }
    if embs.rows() < n_clusters {
        return Err(invalid(format!("{} points for {n_clusters} clusters", embs.rows())));
    }
    let x = embs.normalize_rows()?;
    let mut rng = Rng::new(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = lloyd(&x, n_clusters, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    Ok(best.unwrap().0)
}

pub fn kmeans_nmi(embs: &Matrix, gold: &[usize], n_clusters: usize, norm: NmiNorm, seed: u64) -> Result<f64> {
    if embs.rows() != gold.len() {
        return Err(shape("gold labels do not match embeddings"));
    }
    let pred = kmeans(embs, n_clusters, &KMeansConfig::default(), seed)?;
    nmi(&pred, gold, norm)
}
