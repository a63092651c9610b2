use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::langreg::{BudgetReport, LanguageRegistry};
use crate::{Error, Result};

/// BLEU per `(regime, language)`.
pub type ScoreTable = BTreeMap<(String, String), f64>;

/// Numbers behind the emitted files.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub baseline: String,
    pub regimes: Vec<String>,
    pub langs: Vec<String>,
    /// `(regime, family) → mean(score − baseline score)` over the family's pairs.
    pub family_deltas: BTreeMap<(String, String), f64>,
    /// `(regime, "seen" | "unseen") → mean delta`.
    pub seen_deltas: BTreeMap<(String, String), f64>,
    pub files: Vec<PathBuf>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Regimes in first-appearance order and the languages they cover.
fn coverage(results: &ScoreTable) -> Result<(Vec<String>, BTreeSet<String>)> {
    let mut per: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for (r, l) in results.keys() {
        per.entry(r).or_default().insert(l.clone());
    }
    let mut it = per.values();
    let first = it.next().ok_or_else(|| Error::Coverage("no results to report".into()))?.clone();
    if it.any(|s| *s != first) {
        return Err(Error::Coverage("regimes cover different language pairs".into()));
    }
    Ok((per.keys().map(|s| s.to_string()).collect(), first))
}

/// Per-pair scores, per-family and seen/unseen deltas against `baseline`,
/// computed without writing anything.
pub fn summarize(
    results: &ScoreTable,
    registry: &LanguageRegistry,
    baseline: &str,
) -> Result<ReportSummary> {
    let (regimes, covered) = coverage(results)?;
    if !regimes.iter().any(|r| r == baseline) {
        return Err(Error::Coverage(format!("baseline regime {baseline} has no results")));
    }
    if let Some(l) = covered.iter().find(|l| registry.get(l).is_none()) {
        return Err(Error::Coverage(format!("results for {l}, which the registry lacks")));
    }
    let langs: Vec<String> = registry.codes().into_iter().filter(|c| covered.contains(c)).collect();
    let delta = |r: &str, l: &str| results[&(r.to_string(), l.to_string())] - results[&(baseline.to_string(), l.to_string())];
    let mut family_deltas = BTreeMap::new();
    let mut seen_deltas = BTreeMap::new();
    for r in &regimes {
        for fam in registry.families() {
            let d: Vec<f64> = langs
                .iter()
                .filter(|l| registry.get(l).is_some_and(|i| i.family == fam))
                .map(|l| delta(r, l))
                .collect();
            if !d.is_empty() {
                family_deltas.insert((r.clone(), fam), mean(&d));
            }
        }
        for (key, seen) in [("seen", true), ("unseen", false)] {
            let d: Vec<f64> = langs
                .iter()
                .filter(|l| registry.get(l).is_some_and(|i| i.seen == seen))
                .map(|l| delta(r, l))
                .collect();
            if !d.is_empty() {
                seen_deltas.insert((r.clone(), key.to_string()), mean(&d));
            }
        }
    }
    Ok(ReportSummary {
        baseline: baseline.to_string(),
        regimes,
        langs,
        family_deltas,
        seen_deltas,
        files: Vec::new(),
    })
}

fn write(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(())
}

fn delta_tsv(deltas: &BTreeMap<(String, String), f64>, col: &str) -> String {
    let mut s = format!("regime\t{col}\tdelta\n");
    for ((r, g), d) in deltas {
        s.push_str(&format!("{r}\t{g}\t{d:.4}\n"));
    }
    s
}

/// Grouped bar chart: one cluster of bars per category, one bar per series.
pub fn bar_chart_svg(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    const COLORS: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];
    let (w, h, top, bottom, left) = (720.0, 360.0, 40.0, 60.0, 60.0);
    let plot_h = h - top - bottom;
    let vals: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let hi = vals.iter().cloned().fold(0.0, f64::max);
    let lo = vals.iter().cloned().fold(0.0, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y = |v: f64| top + (hi - v) / span * plot_h;
    let slot = (w - left - 20.0) / categories.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        escape(title)
    );
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{0:.2}\" x2=\"{1}\" y2=\"{0:.2}\" stroke=\"black\"/>\n",
        y(0.0),
        w - 20.0
    ));
    for (ci, cat) in categories.iter().enumerate() {
        let x0 = left + ci as f64 * slot + slot * 0.1;
        for (si, (_, v)) in series.iter().enumerate() {
            let val = v.get(ci).copied().unwrap_or(0.0);
            let (ya, yb) = (y(val.max(0.0)), y(val.min(0.0)));
            s.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{ya:.2}\" width=\"{bar:.2}\" height=\"{:.2}\" fill=\"{}\"><title>{:.3}</title></rect>\n",
                x0 + si as f64 * bar,
                (yb - ya).max(0.5),
                COLORS[si % COLORS.len()],
                val
            ));
        }
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            x0 + slot * 0.4,
            h - bottom + 18.0,
            escape(cat)
        ));
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let lx = left + si as f64 * 130.0;
        s.push_str(&format!(
            "<rect x=\"{lx}\" y=\"{0}\" width=\"12\" height=\"12\" fill=\"{1}\"/><text x=\"{2}\" y=\"{3}\" font-family=\"sans-serif\" font-size=\"12\">{4}</text>\n",
            h - 24.0,
            COLORS[si % COLORS.len()],
            lx + 16.0,
            h - 14.0,
            escape(name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn chart_for(deltas: &BTreeMap<(String, String), f64>, groups: &[String], regimes: &[String], title: &str) -> String {
    let series: Vec<(String, Vec<f64>)> = regimes
        .iter()
        .map(|r| {
            let v = groups
                .iter()
                .map(|g| deltas.get(&(r.clone(), g.clone())).copied().unwrap_or(0.0))
                .collect();
            (r.clone(), v)
        })
        .collect();
    bar_chart_svg(title, groups, &series)
}

/// Write `scores.tsv`, `family_deltas.{tsv,svg}`, `seen_deltas.{tsv,svg}`
/// and, when budgets are given, `budget.tsv` into `out_dir`.
pub fn report_emit(
    results: &ScoreTable,
    registry: &LanguageRegistry,
    baseline: &str,
    budgets: &[(String, BudgetReport)],
    out_dir: &Path,
) -> Result<ReportSummary> {
    let mut sum = summarize(results, registry, baseline)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut s = String::from("pair\tfamily\tseen");
    for r in &sum.regimes {
        s.push_str(&format!("\t{r}"));
    }
    s.push('\n');
    for l in &sum.langs {
        let info = registry.get(l).expect("checked coverage");
        s.push_str(&format!("en-{l}\t{}\t{}", info.family, if info.seen { "seen" } else { "unseen" }));
        for r in &sum.regimes {
            s.push_str(&format!("\t{:.2}", results[&(r.clone(), l.clone())]));
        }
        s.push('\n');
    }
    write(out_dir.join("scores.tsv"), &s, &mut files)?;
    let others: Vec<String> = sum.regimes.iter().filter(|r| **r != sum.baseline).cloned().collect();
    let fams: Vec<String> = registry
        .families()
        .into_iter()
        .filter(|f| sum.family_deltas.keys().any(|(_, g)| g == f))
        .collect();
    write(out_dir.join("family_deltas.tsv"), &delta_tsv(&sum.family_deltas, "family"), &mut files)?;
    write(
        out_dir.join("family_deltas.svg"),
        &chart_for(&sum.family_deltas, &fams, &others, &format!("BLEU difference vs {} by family", sum.baseline)),
        &mut files,
    )?;
    let seen: Vec<String> = ["seen", "unseen"]
        .iter()
        .map(|s| s.to_string())
        .filter(|k| sum.seen_deltas.keys().any(|(_, g)| g == k))
        .collect();
    write(out_dir.join("seen_deltas.tsv"), &delta_tsv(&sum.seen_deltas, "split"), &mut files)?;
    write(
        out_dir.join("seen_deltas.svg"),
        &chart_for(&sum.seen_deltas, &seen, &others, &format!("BLEU difference vs {} by seen/unseen", sum.baseline)),
        &mut files,
    )?;
    if !budgets.is_empty() {
        let mut b = String::from("regime\tgroups\tper_set\ttotal\tbackbone\tfraction\n");
        for (r, rep) in budgets {
            b.push_str(&format!(
                "{r}\t{}\t{}\t{}\t{}\t{:.6}\n",
                rep.groups, rep.per_set, rep.total, rep.backbone_total, rep.trainable_fraction
            ));
        }
        write(out_dir.join("budget.tsv"), &b, &mut files)?;
    }
    sum.files = files;
    Ok(sum)
}
