//! Automatic language grouping: mean-pooled encoder states, PCA, a diagonal
//! Gaussian mixture fitted by EM, then one cluster per language by majority.
//!
//! External vectors use a plain text format: a header line `n dim`, then one
//! whitespace-separated vector per line, grouped under `#lang <code>` lines.

mod gmm;
mod pca;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub use gmm::{gmm_fit_em, gmm_soft_assign, GmmModel, RESTARTS, VARIANCE_FLOOR};
pub use pca::{pca_fit, pca_project, PcaModel};

use crate::langreg::{GroupingKind, GroupingScheme, LanguageRegistry};
use crate::model::{Mode, Seq2SeqModel};
use crate::numcore::{Graph, Tensor};
use crate::{Error, Result, Rng};

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    OwnEncoder,
    External(PathBuf),
}

/// Sentence vectors per language.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub langs: Vec<(String, Tensor)>,
    pub provenance: Provenance,
}

impl EmbeddingBatch {
    pub fn new(langs: Vec<(String, Tensor)>, provenance: Provenance) -> Result<Self> {
        let b = EmbeddingBatch { langs, provenance };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let Some((_, first)) = self.langs.first() else {
            return Err(Error::Contract("no languages in embedding batch".into()));
        };
        let dim = first.cols();
        for (code, m) in &self.langs {
            if m.shape().len() != 2 || m.cols() != dim {
                return Err(Error::Shape {
                    op: "embedding_batch",
                    left: m.shape().to_vec(),
                    right: vec![dim],
                });
            }
            if m.rows() < 2 {
                return Err(Error::Contract(format!("language {code} needs at least 2 vectors")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.langs.first().map_or(0, |(_, m)| m.cols())
    }

    /// All vectors stacked, with the language of each row.
    pub fn stacked(&self) -> (Tensor, Vec<String>) {
        let mut data = Vec::new();
        let mut owners = Vec::new();
        for (code, m) in &self.langs {
            data.extend_from_slice(m.data());
            owners.extend(std::iter::repeat_n(code.clone(), m.rows()));
        }
        let n = owners.len();
        (Tensor::new(vec![n, self.dim()], data).expect("validated dims"), owners)
    }

    pub fn to_text(&self) -> String {
        let n: usize = self.langs.iter().map(|(_, m)| m.rows()).sum();
        let mut s = format!("{n} {}\n", self.dim());
        for (code, m) in &self.langs {
            s.push_str(&format!("#lang {code}\n"));
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
                s.push_str(&row.join(" "));
                s.push('\n');
            }
        }
        s
    }

    pub fn parse(text: &str, provenance: Provenance) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let perr = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        let (hl, header) = lines.next().ok_or_else(|| perr(0, "empty embedding file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(hl, format!("bad header {header:?}")))?;
        let [n, dim] = dims[..] else {
            return Err(perr(hl, "header must be `n dim`".into()));
        };
        let mut langs: Vec<(String, Vec<f64>)> = Vec::new();
        let mut count = 0;
        for (ln, line) in lines {
            let t = line.trim();
            if let Some(code) = t.strip_prefix("#lang") {
                let code = code.trim();
                if code.is_empty() {
                    return Err(perr(ln, "missing language code".into()));
                }
                if langs.iter().any(|(c, _)| c == code) {
                    return Err(perr(ln, format!("language {code} listed twice")));
                }
                langs.push((code.to_string(), Vec::new()));
                continue;
            }
            let Some((_, buf)) = langs.last_mut() else {
                return Err(perr(ln, "vector before any #lang line".into()));
            };
            let row: Vec<f64> = t
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| perr(ln, "malformed number".into()))?;
            if row.len() != dim {
                return Err(perr(ln, format!("expected {dim} values, found {}", row.len())));
            }
            buf.extend(row);
            count += 1;
        }
        if count != n {
            return Err(perr(hl, format!("header promises {n} vectors, found {count}")));
        }
        let langs = langs
            .into_iter()
            .map(|(c, d)| {
                let rows = d.len() / dim;
                Tensor::new(vec![rows, dim], d).map(|t| (c, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(langs, provenance)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, Provenance::External(path.to_path_buf()))
    }
}

const POOL_CHUNK: usize = 32;

/// Mean of the final encoder states over each sentence's own tokens
/// (the language tag position and padding are excluded). Returns `[n × h]`.
pub fn mean_pool_embed(model: &Seq2SeqModel, sentences: &[Vec<usize>], lang_tag: usize) -> Result<Tensor> {
    if let Some(i) = sentences.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("sentence {i} is empty")));
    }
    let h = model.config().model_dim;
    let mut out = Vec::with_capacity(sentences.len() * h);
    for chunk in sentences.chunks(POOL_CHUNK) {
        let mut g = Graph::new();
        let srcs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let tags = vec![lang_tag; chunk.len()];
        let enc = model.encode_graph(&mut g, model.active_adapters(), &srcs, &tags, &mut Mode::Eval, None)?;
        let states = g.value(enc.states);
        for (b, &len) in enc.lens.iter().enumerate() {
            let mut acc = vec![0.0; h];
            for p in 1..len {
                for (a, v) in acc.iter_mut().zip(states.row(b * enc.max_len + p)) {
                    *a += v;
                }
            }
            out.extend(acc.into_iter().map(|a| a / (len - 1) as f64));
        }
    }
    Tensor::new(vec![sentences.len(), h], out)
}

/// Per sentence the argmax component, per language the modal component
/// (ties go to the lowest id on both levels).
pub fn hard_assign_majority(resp: &Tensor, sentence_langs: &[String]) -> Result<BTreeMap<String, usize>> {
    if resp.rows() != sentence_langs.len() {
        return Err(Error::Shape {
            op: "hard_assign_majority",
            left: resp.shape().to_vec(),
            right: vec![sentence_langs.len()],
        });
    }
    let k = resp.cols();
    let mut votes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, lang) in sentence_langs.iter().enumerate() {
        let row = resp.row(i);
        let best = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        votes.entry(lang).or_insert_with(|| vec![0; k])[best] += 1;
    }
    Ok(votes
        .into_iter()
        .map(|(l, v)| {
            let modal = (0..k).fold(0, |b, c| if v[c] > v[b] { c } else { b });
            (l.to_string(), modal)
        })
        .collect())
}

/// Clusters vs. families, with clusters aligned to families by maximum agreement.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    pub families: Vec<String>,
    pub clusters: Vec<usize>,
    /// `counts[f][c]`: languages of family `f` assigned to cluster `clusters[c]`.
    pub counts: Vec<Vec<usize>>,
    /// Family index → aligned cluster column.
    pub alignment: Vec<Option<usize>>,
    pub misallocated: Vec<String>,
    pub scheme: GroupingScheme,
}

impl ClusterReport {
    pub fn agreements(&self) -> usize {
        self.alignment
            .iter()
            .enumerate()
            .filter_map(|(f, c)| c.map(|c| self.counts[f][c]))
            .sum()
    }

    pub fn off_diagonal(&self) -> usize {
        let total: usize = self.counts.iter().flatten().sum();
        total - self.agreements()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("family");
        for c in &self.clusters {
            s.push_str(&format!("\tc{c}"));
        }
        s.push('\n');
        for (f, fam) in self.families.iter().enumerate() {
            s.push_str(fam);
            for n in &self.counts[f] {
                s.push_str(&format!("\t{n}"));
            }
            s.push('\n');
        }
        s.push_str(&format!("misallocated\t{}\n", self.misallocated.join(" ")));
        s
    }
}

fn best_alignment(counts: &[Vec<usize>], f: usize, used: u64, memo: &mut BTreeMap<(usize, u64), (usize, Vec<Option<usize>>)>) -> (usize, Vec<Option<usize>>) {
    if f == counts.len() {
        return (0, Vec::new());
    }
    if let Some(hit) = memo.get(&(f, used)) {
        return hit.clone();
    }
    let (mut score, mut rest) = best_alignment(counts, f + 1, used, memo);
    let mut pick = None;
    for c in 0..counts[f].len() {
        if used & (1 << c) != 0 {
            continue;
        }
        let (s, r) = best_alignment(counts, f + 1, used | (1 << c), memo);
        if s + counts[f][c] > score {
            score = s + counts[f][c];
            rest = r;
            pick = Some(c);
        }
    }
    let mut out = vec![pick];
    out.extend(rest);
    memo.insert((f, used), (score, out.clone()));
    (score, out)
}

/// Confusion table of `assignment` against registry families plus the
/// assignment as a custom grouping (`gmm-{cluster}` groups).
pub fn cluster_report(assignment: &BTreeMap<String, usize>, registry: &LanguageRegistry) -> Result<ClusterReport> {
    for l in registry.languages() {
        if !assignment.contains_key(&l.code) {
            return Err(Error::Coverage(format!("language {} has no cluster", l.code)));
        }
    }
    if let Some(extra) = assignment.keys().find(|c| registry.get(c).is_none()) {
        return Err(Error::Coverage(format!("unknown language {extra} in assignment")));
    }
    let families = registry.families();
    let mut clusters: Vec<usize> = assignment.values().copied().collect();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() > 63 {
        return Err(Error::Domain("too many clusters to align".into()));
    }
    let mut counts = vec![vec![0; clusters.len()]; families.len()];
    for l in registry.languages() {
        let f = families.iter().position(|x| *x == l.family).expect("family listed");
        let c = clusters.binary_search(&assignment[&l.code]).expect("cluster listed");
        counts[f][c] += 1;
    }
    let (_, alignment) = best_alignment(&counts, 0, 0, &mut BTreeMap::new());
    let misallocated = registry
        .languages()
        .iter()
        .filter(|l| {
            let f = families.iter().position(|x| *x == l.family).expect("family listed");
            let c = clusters.binary_search(&assignment[&l.code]).expect("cluster listed");
            alignment[f] != Some(c)
        })
        .map(|l| l.code.clone())
        .collect();
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for l in registry.languages() {
        groups.entry(format!("gmm-{}", assignment[&l.code])).or_default().push(l.code.clone());
    }
    let scheme = GroupingScheme {
        kind: GroupingKind::Custom,
        groups,
    };
    scheme.check_partition(registry)?;
    Ok(ClusterReport {
        families,
        clusters,
        counts,
        alignment,
        misallocated,
        scheme,
    })
}

/// Output of the full grouping pipeline.
#[derive(Clone, Debug)]
pub struct ClusterRun {
    pub pca: PcaModel,
    pub projected: Tensor,
    pub sentence_langs: Vec<String>,
    pub gmm: GmmModel,
    pub responsibilities: Tensor,
    pub assignment: BTreeMap<String, usize>,
}

/// PCA to `pca_dim` (clipped to what the data supports), EM with
/// `components`, then majority assignment.
pub fn cluster_languages(
    batch: &EmbeddingBatch,
    pca_dim: usize,
    components: usize,
    rng: &mut Rng,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterRun> {
    batch.validate()?;
    let (x, sentence_langs) = batch.stacked();
    let k = pca_dim.min(x.rows() - 1).min(x.cols());
    let pca = pca_fit(&x, k)?;
    let projected = pca_project(&pca, &x)?;
    let gmm = gmm_fit_em(&projected, components, rng, max_iter, tol)?;
    let responsibilities = gmm_soft_assign(&gmm, &projected)?;
    let assignment = hard_assign_majority(&responsibilities, &sentence_langs)?;
    Ok(ClusterRun {
        pca,
        projected,
        sentence_langs,
        gmm,
        responsibilities,
        assignment,
    })
}
