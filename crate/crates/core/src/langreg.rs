//! Language metadata, grouping schemes and trainable-parameter budgets.
//!
//! Registry files are plain columnar text: `#` comments, a header row naming
//! the columns `code family script seen size` (any order), then one language
//! per row. `seen` is `seen`/`unseen` (or `true`/`false`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::adapter::{adapter_param_count, AdapterConfig};
use crate::model::{backbone_param_count, ModelConfig};
use crate::{Error, Result, Rng};

const TED_REGISTRY: &str = include_str!("../data/registry_ted.tsv");
const OPUS_REGISTRY: &str = include_str!("../data/registry_opus100.tsv");

/// Source language of every pair.
pub const SOURCE_LANG: &str = "en";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageInfo {
    pub code: String,
    pub family: String,
    pub script: String,
    pub seen: bool,
    pub train_size: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageRegistry {
    langs: Vec<LanguageInfo>,
}

const COLUMNS: [&str; 5] = ["code", "family", "script", "seen", "size"];

impl LanguageRegistry {
    pub fn new(langs: Vec<LanguageInfo>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (i, l) in langs.iter().enumerate() {
            if !seen.insert(l.code.clone()) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate language code {}", l.code),
                });
            }
        }
        Ok(LanguageRegistry { langs })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header: Option<Vec<usize>> = None;
        let mut langs: Vec<LanguageInfo> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let Some(order) = &header else {
                let mut order = Vec::with_capacity(COLUMNS.len());
                for col in COLUMNS {
                    match fields.iter().position(|f| *f == col) {
                        Some(p) => order.push(p),
                        None => {
                            return Err(Error::Parse {
                                line,
                                msg: format!("header is missing column {col:?}"),
                            })
                        }
                    }
                }
                if let Some(unknown) = fields.iter().find(|f| !COLUMNS.contains(f)) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown field {unknown:?}"),
                    });
                }
                header = Some(order);
                continue;
            };
            if fields.len() != COLUMNS.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields, found {}", COLUMNS.len(), fields.len()),
                });
            }
            let get = |c: usize| fields[order[c]];
            let seen = match get(3) {
                "seen" | "true" | "yes" => true,
                "unseen" | "false" | "no" => false,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("seen must be seen/unseen, got {other:?}"),
                    })
                }
            };
            let train_size = get(4).parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad size {:?}", get(4)),
            })?;
            let code = get(0).to_string();
            if langs.iter().any(|l| l.code == code) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate language code {code}"),
                });
            }
            langs.push(LanguageInfo {
                code,
                family: get(1).to_string(),
                script: get(2).to_string(),
                seen,
                train_size,
            });
        }
        if langs.is_empty() {
            return Err(Error::Parse {
                line: text.lines().count().max(1),
                msg: "registry lists no languages".into(),
            });
        }
        Ok(LanguageRegistry { langs })
    }

    /// The 17-language registry with TED training sizes.
    pub fn bundled_ted() -> Self {
        Self::parse(TED_REGISTRY).expect("bundled registry parses")
    }

    /// The 16-language registry (no Filipino) with OPUS-100 training sizes.
    pub fn bundled_opus100() -> Self {
        Self::parse(OPUS_REGISTRY).expect("bundled registry parses")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("code\tfamily\tscript\tseen\tsize\n");
        for l in &self.langs {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                l.code,
                l.family,
                l.script,
                if l.seen { "seen" } else { "unseen" },
                l.train_size
            ));
        }
        s
    }

    pub fn languages(&self) -> &[LanguageInfo] {
        &self.langs
    }

    pub fn len(&self) -> usize {
        self.langs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.langs.is_empty()
    }

    pub fn get(&self, code: &str) -> Option<&LanguageInfo> {
        self.langs.iter().find(|l| l.code == code)
    }

    pub fn codes(&self) -> Vec<String> {
        self.langs.iter().map(|l| l.code.clone()).collect()
    }

    /// Distinct families in order of first appearance.
    pub fn families(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in &self.langs {
            if !out.contains(&l.family) {
                out.push(l.family.clone());
            }
        }
        out
    }

    pub fn unseen_codes(&self) -> Vec<String> {
        self.langs.iter().filter(|l| !l.seen).map(|l| l.code.clone()).collect()
    }
}

/// Load a registry file; `bundled:ted` and `bundled:opus100` name the built-ins.
pub fn load_registry(path: &Path) -> Result<LanguageRegistry> {
    match path.to_str() {
        Some("bundled:ted") | Some("bundled") => return Ok(LanguageRegistry::bundled_ted()),
        Some("bundled:opus100") => return Ok(LanguageRegistry::bundled_opus100()),
        _ => {}
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LanguageRegistry::parse(&text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupingKind {
    Family,
    Agnostic,
    Pair,
    Random,
    Custom,
}

impl GroupingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupingKind::Family => "family",
            GroupingKind::Agnostic => "agnostic",
            GroupingKind::Pair => "pair",
            GroupingKind::Random => "random",
            GroupingKind::Custom => "custom",
        }
    }
}

/// Partition of registry languages into adapter groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupingScheme {
    pub kind: GroupingKind,
    pub groups: BTreeMap<String, Vec<String>>,
}

impl GroupingScheme {
    pub fn group_of(&self, code: &str) -> Option<&str> {
        self.groups
            .iter()
            .find(|(_, m)| m.iter().any(|c| c == code))
            .map(|(g, _)| g.as_str())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group sizes in descending order.
    pub fn size_profile(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.groups.values().map(Vec::len).collect();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s
    }

    /// Every registry language appears in exactly one non-empty group.
    pub fn check_partition(&self, registry: &LanguageRegistry) -> Result<()> {
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (g, members) in &self.groups {
            if members.is_empty() {
                return Err(Error::Coverage(format!("group {g} is empty")));
            }
            for c in members {
                if registry.get(c).is_none() {
                    return Err(Error::Coverage(format!("group {g} lists unknown language {c}")));
                }
                if let Some(prev) = seen.insert(c, g) {
                    return Err(Error::Coverage(format!("language {c} is in groups {prev} and {g}")));
                }
            }
        }
        if let Some(missing) = registry.languages().iter().find(|l| !seen.contains_key(l.code.as_str())) {
            return Err(Error::Coverage(format!("language {} is in no group", missing.code)));
        }
        Ok(())
    }

    /// `group<TAB>code code ...` per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("# kind={}\n", self.kind.as_str());
        for (g, m) in &self.groups {
            s.push_str(&format!("{g}\t{}\n", m.join(" ")));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut groups = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let g = it.next().expect("non-empty line").to_string();
            let members: Vec<String> = it.map(str::to_string).collect();
            if members.is_empty() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("group {g} has no languages"),
                });
            }
            if groups.insert(g.clone(), members).is_some() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("duplicate group {g}"),
                });
            }
        }
        if groups.is_empty() {
            return Err(Error::Parse {
                line: 1,
                msg: "grouping lists no groups".into(),
            });
        }
        Ok(GroupingScheme {
            kind: GroupingKind::Custom,
            groups,
        })
    }
}

pub fn pair_id(code: &str) -> String {
    format!("{SOURCE_LANG}-{code}")
}

/// Build the grouping of `kind` over `registry`.
///
/// `Random` shuffles languages with `rng` and cuts them into the family
/// grouping's group sizes; `Custom` requires (and validates) `custom`.
pub fn build_grouping(
    registry: &LanguageRegistry,
    kind: GroupingKind,
    rng: &mut Rng,
    custom: Option<BTreeMap<String, Vec<String>>>,
) -> Result<GroupingScheme> {
    if custom.is_some() != (kind == GroupingKind::Custom) {
        return Err(Error::Contract("custom groups are required iff kind is custom".into()));
    }
    let in_order = |members: Vec<String>| -> Vec<String> {
        registry
            .codes()
            .into_iter()
            .filter(|c| members.contains(c))
            .collect()
    };
    let mut groups = BTreeMap::new();
    match kind {
        GroupingKind::Family => {
            for fam in registry.families() {
                let members = registry
                    .languages()
                    .iter()
                    .filter(|l| l.family == fam)
                    .map(|l| l.code.clone())
                    .collect();
                groups.insert(fam, members);
            }
        }
        GroupingKind::Agnostic => {
            groups.insert("all".to_string(), registry.codes());
        }
        GroupingKind::Pair => {
            for c in registry.codes() {
                groups.insert(pair_id(&c), vec![c]);
            }
        }
        GroupingKind::Random => {
            let mut codes = registry.codes();
            codes.shuffle(rng);
            let mut rest = codes.as_slice();
            for (i, fam) in registry.families().iter().enumerate() {
                let n = registry.languages().iter().filter(|l| &l.family == fam).count();
                let (head, tail) = rest.split_at(n);
                groups.insert(format!("random-{i}"), in_order(head.to_vec()));
                rest = tail;
            }
        }
        GroupingKind::Custom => {
            for (g, m) in custom.expect("checked above") {
                groups.insert(g, in_order(m.clone()).into_iter().chain(m.into_iter().filter(|c| registry.get(c).is_none())).collect());
            }
        }
    }
    let scheme = GroupingScheme { kind, groups };
    scheme.check_partition(registry)?;
    Ok(scheme)
}

/// Trainable-parameter accounting for one regime.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetReport {
    pub layer_adapter: usize,
    pub embedding_adapter: usize,
    pub per_set: usize,
    pub groups: usize,
    pub total: usize,
    pub backbone_total: usize,
    pub trainable_fraction: f64,
}

pub fn budget_report(
    model: &ModelConfig,
    adapter: &AdapterConfig,
    scheme: &GroupingScheme,
) -> BudgetReport {
    let layer_adapter = adapter_param_count(adapter);
    let embedding_adapter = if model.use_embedding_adapters {
        layer_adapter
    } else {
        0
    };
    let per_set = (model.enc_layers + model.dec_layers) * layer_adapter + 2 * embedding_adapter;
    let groups = scheme.len();
    let total = per_set * groups;
    let backbone_total = backbone_param_count(model);
    BudgetReport {
        layer_adapter,
        embedding_adapter,
        per_set,
        groups,
        total,
        backbone_total,
        trainable_fraction: total as f64 / backbone_total as f64,
    }
}
