//! Edit ordering: corpus importance scores, the Global and Local-Global
//! rankings, and parsing of selector replies for the Local strategy.

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{EditSelector, ImagePayload, RetryPolicy, SelectorQuery, SelectorRequest, ServiceError};
use crate::concept::ConceptId;
use crate::editplan::{closest_target, is_applicable, ConceptAnnotation, Edit, EditKind, EditSet, PlanError};
use crate::taxonomy::{CostPolicy, DirectedEdit, Taxonomy};

/// Reserved partner name for insertions and deletions in tabular output.
pub const NO_PARTNER: &str = "∅";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingStrategy {
    Local,
    Global,
    LocalGlobal,
}

impl fmt::Display for OrderingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderingStrategy::Local => "local",
            OrderingStrategy::Global => "global",
            OrderingStrategy::LocalGlobal => "local-global",
        })
    }
}

impl std::str::FromStr for OrderingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "local" => Ok(OrderingStrategy::Local),
            "global" => Ok(OrderingStrategy::Global),
            "local-global" | "localglobal" => Ok(OrderingStrategy::LocalGlobal),
            other => Err(format!("unknown strategy `{other}` (expected local, global or local-global)")),
        }
    }
}

/// Unordered concept pair. Insertions and deletions use `(c, None)`;
/// substitutions use the two concepts in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairKey {
    pub first: ConceptId,
    pub second: Option<ConceptId>,
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.second {
            Some(b) => write!(f, "{{{}, {b}}}", self.first),
            None => write!(f, "{{{}, {NO_PARTNER}}}", self.first),
        }
    }
}

/// Which counter an edit lands in, and whether a positive score endorses it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Insert,
    Delete,
    Forward,
    Backward,
}

impl Slot {
    fn sign(self) -> i64 {
        match self {
            Slot::Insert | Slot::Forward => 1,
            Slot::Delete | Slot::Backward => -1,
        }
    }
}

fn classify(edit: &Edit) -> Option<(PairKey, Slot)> {
    match (edit.kind, &edit.source, &edit.target) {
        (EditKind::Insert, _, Some(c)) => Some((PairKey { first: c.clone(), second: None }, Slot::Insert)),
        (EditKind::Delete, Some(c), _) => Some((PairKey { first: c.clone(), second: None }, Slot::Delete)),
        (EditKind::Substitute, Some(a), Some(b)) if a < b => {
            Some((PairKey { first: a.clone(), second: Some(b.clone()) }, Slot::Forward))
        }
        (EditKind::Substitute, Some(a), Some(b)) => {
            Some((PairKey { first: b.clone(), second: Some(a.clone()) }, Slot::Backward))
        }
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTally {
    pub insert: u64,
    pub delete: u64,
    pub sub_forward: u64,
    pub sub_backward: u64,
}

impl PairTally {
    pub fn occurrences(&self) -> u64 {
        self.insert + self.delete + self.sub_forward + self.sub_backward
    }

    /// Signed net tally over occurrences, in [-1, 1].
    pub fn score(&self) -> Ratio<i64> {
        let net = self.insert as i64 - self.delete as i64 + self.sub_forward as i64 - self.sub_backward as i64;
        Ratio::new(net, self.occurrences().max(1) as i64)
    }

    /// Spread of the per-occurrence +1/-1 indicators around the score.
    pub fn dispersion(&self) -> f64 {
        let s = ratio_to_f64(self.score());
        (1.0 - s * s).max(0.0).sqrt()
    }

    fn bump(&mut self, slot: Slot) {
        match slot {
            Slot::Insert => self.insert += 1,
            Slot::Delete => self.delete += 1,
            Slot::Forward => self.sub_forward += 1,
            Slot::Backward => self.sub_backward += 1,
        }
    }
}

pub fn ratio_to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportanceTable {
    pub source_label: String,
    pub target_label: String,
    pub entries: BTreeMap<PairKey, PairTally>,
    /// Number of source images whose edit sets were tallied.
    pub images: usize,
    /// Source images with no feasible target, left out of the tallies.
    pub skipped: Vec<String>,
}

#[derive(Debug, Error)]
pub enum OrderingError {
    #[error("the {0} corpus is empty")]
    EmptyCorpus(&'static str),
    #[error("image `{image_id}` in the {corpus} corpus has label `{found}`, expected `{expected}`")]
    MixedLabels {
        corpus: &'static str,
        image_id: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("importance table, line {line}: {message}")]
    Table { line: usize, message: String },
}

fn check_labels(corpus: &[ConceptAnnotation], name: &'static str) -> Result<String, OrderingError> {
    let first = corpus.first().ok_or(OrderingError::EmptyCorpus(name))?;
    if let Some(bad) = corpus.iter().find(|a| a.label != first.label) {
        return Err(OrderingError::MixedLabels {
            corpus: name,
            image_id: bad.image_id.clone(),
            expected: first.label.clone(),
            found: bad.label.clone(),
        });
    }
    Ok(first.label.clone())
}

/// Tallies the closest-target edit set of every source image.
pub fn compute_importance(
    t: &Taxonomy,
    policy: &CostPolicy,
    corpus_l: &[ConceptAnnotation],
    corpus_lstar: &[ConceptAnnotation],
) -> Result<ImportanceTable, OrderingError> {
    let source_label = check_labels(corpus_l, "source")?;
    let target_label = check_labels(corpus_lstar, "target")?;
    let plans: Vec<Result<EditSet, PlanError>> = corpus_l
        .par_iter()
        .map(|src| closest_target(t, policy, src, corpus_lstar).map(|(_, plan)| plan))
        .collect();

    let mut table = ImportanceTable {
        source_label,
        target_label,
        entries: BTreeMap::new(),
        images: 0,
        skipped: Vec::new(),
    };
    for (src, plan) in corpus_l.iter().zip(plans) {
        match plan {
            Ok(plan) => {
                table.images += 1;
                table.tally(&plan.edits);
            }
            Err(PlanError::Infeasible { .. }) => table.skipped.push(src.image_id.clone()),
            Err(e) => return Err(e.into()),
        }
    }
    table.skipped.sort();
    Ok(table)
}

impl ImportanceTable {
    pub fn empty(source_label: impl Into<String>, target_label: impl Into<String>) -> Self {
        Self {
            source_label: source_label.into(),
            target_label: target_label.into(),
            entries: BTreeMap::new(),
            images: 0,
            skipped: Vec::new(),
        }
    }

    pub fn tally(&mut self, edits: &[Edit]) {
        for edit in edits {
            if let Some((key, slot)) = classify(edit) {
                self.entries.entry(key).or_default().bump(slot);
            }
        }
    }

    pub fn get(&self, key: &PairKey) -> Option<&PairTally> {
        self.entries.get(key)
    }

    /// Score of the edit's pair, signed so positive means the table endorses
    /// this direction. `None` when the pair never occurred.
    pub fn directional_score(&self, edit: &Edit) -> Option<Ratio<i64>> {
        let (key, slot) = classify(edit)?;
        self.entries.get(&key).map(|tally| tally.score() * slot.sign())
    }

    fn rank_key(&self, edit: &Edit) -> (bool, Reverse<Ratio<i64>>, Reverse<u64>, Edit) {
        let entry = classify(edit).and_then(|(key, slot)| self.entries.get(&key).map(|t| (t, slot)));
        match entry {
            Some((tally, slot)) => (
                false,
                Reverse(tally.score() * slot.sign()),
                Reverse(tally.occurrences()),
                edit.clone(),
            ),
            None => (true, Reverse(Ratio::from_integer(0)), Reverse(0), edit.clone()),
        }
    }

    /// The edit each nonzero-scored pair endorses, best first.
    pub fn endorsed(&self) -> Vec<(DirectedEdit, PairKey)> {
        let mut out: Vec<(DirectedEdit, PairKey, Ratio<i64>, u64)> = Vec::new();
        for (key, tally) in &self.entries {
            let score = tally.score();
            if score == Ratio::from_integer(0) {
                continue;
            }
            let positive = score > Ratio::from_integer(0);
            let directed = match (&key.second, positive) {
                (None, true) => DirectedEdit::insert(key.first.clone()),
                (None, false) => DirectedEdit::delete(key.first.clone()),
                (Some(b), true) => DirectedEdit::substitute(key.first.clone(), b.clone()),
                (Some(b), false) => DirectedEdit::substitute(b.clone(), key.first.clone()),
            };
            out.push((directed, key.clone(), if positive { score } else { -score }, tally.occurrences()));
        }
        out.sort_by(|a, b| (Reverse(a.2), Reverse(a.3), &a.0).cmp(&(Reverse(b.2), Reverse(b.3), &b.0)));
        out.into_iter().map(|(d, k, _, _)| (d, k)).collect()
    }

    /// Pairs ordered by descending |score|, then occurrences.
    pub fn ranked(&self) -> Vec<(&PairKey, &PairTally)> {
        let mut rows: Vec<_> = self.entries.iter().collect();
        rows.sort_by_key(|(k, t)| {
            let s = t.score();
            (Reverse(if s < Ratio::from_integer(0) { -s } else { s }), Reverse(t.occurrences()), (*k).clone())
        });
        rows
    }

    /// Tab-separated document with a `#` metadata line.
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# source_label={} target_label={} images={} skipped={}\n",
            self.source_label,
            self.target_label,
            self.images,
            self.skipped.join(",")
        );
        let mut writer = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
        writer
            .write_record(["pair_a", "pair_b", "insert", "delete", "sub_forward", "sub_backward", "occurrences", "score"])
            .expect("in-memory write");
        for (key, tally) in &self.entries {
            let score = tally.score();
            writer
                .write_record([
                    key.first.to_string(),
                    key.second.as_ref().map_or(NO_PARTNER.to_string(), |c| c.to_string()),
                    tally.insert.to_string(),
                    tally.delete.to_string(),
                    tally.sub_forward.to_string(),
                    tally.sub_backward.to_string(),
                    tally.occurrences().to_string(),
                    format!("{}/{}", score.numer(), score.denom()),
                ])
                .expect("in-memory write");
        }
        out.push_str(&String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8"));
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, OrderingError> {
        let err = |line: usize, message: String| OrderingError::Table { line, message };
        let meta_line = text.lines().next().unwrap_or_default();
        let meta = meta_line
            .strip_prefix('#')
            .ok_or_else(|| err(1, "missing `#` metadata line".into()))?;
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for part in meta.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| err(1, format!("malformed metadata `{part}`")))?;
            fields.insert(k, v);
        }
        let field = |k: &str| fields.get(k).copied().ok_or_else(|| err(1, format!("metadata lacks `{k}`")));
        let mut table = ImportanceTable::empty(field("source_label")?, field("target_label")?);
        table.images = field("images")?.parse().map_err(|_| err(1, "bad `images` count".into()))?;
        table.skipped = fields
            .get("skipped")
            .map(|s| s.split(',').filter(|x| !x.is_empty()).map(String::from).collect())
            .unwrap_or_default();

        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        for (i, record) in reader.records().enumerate() {
            let line = i + 3;
            let record = record.map_err(|e| err(line, e.to_string()))?;
            if record.len() != 8 {
                return Err(err(line, format!("expected 8 columns, found {}", record.len())));
            }
            let concept = |s: &str| ConceptId::new(s).map_err(|e| err(line, e.to_string()));
            let count = |s: &str| s.parse::<u64>().map_err(|_| err(line, format!("bad count `{s}`")));
            let key = PairKey {
                first: concept(&record[0])?,
                second: if &record[1] == NO_PARTNER { None } else { Some(concept(&record[1])?) },
            };
            if let Some(b) = &key.second {
                if b <= &key.first {
                    return Err(err(line, format!("pair {key} is not in ascending order")));
                }
            }
            let tally = PairTally {
                insert: count(&record[2])?,
                delete: count(&record[3])?,
                sub_forward: count(&record[4])?,
                sub_backward: count(&record[5])?,
            };
            if key.second.is_some() && (tally.insert > 0 || tally.delete > 0) {
                return Err(err(line, format!("pair {key} cannot carry insert/delete counts")));
            }
            if key.second.is_none() && (tally.sub_forward > 0 || tally.sub_backward > 0) {
                return Err(err(line, format!("pair {key} cannot carry substitution counts")));
            }
            if tally.occurrences() == 0 || count(&record[6])? != tally.occurrences() {
                return Err(err(line, "occurrences do not match the counts".into()));
            }
            let expected = tally.score();
            if record[7] != format!("{}/{}", expected.numer(), expected.denom()) {
                return Err(err(line, format!("score `{}` does not match the counts", &record[7])));
            }
            if table.entries.insert(key.clone(), tally).is_some() {
                return Err(err(line, format!("pair {key} listed twice")));
            }
        }
        Ok(table)
    }
}

/// Sorts the plan by how strongly the table endorses each edit; pairs the
/// table has never seen go last, ties by edit.
pub fn order_global(plan: &EditSet, table: &ImportanceTable) -> Vec<Edit> {
    let mut edits = plan.edits.clone();
    edits.sort_by_cached_key(|e| table.rank_key(e));
    edits
}

/// Same rule as [`order_global`]; kept separate so traces record which
/// strategy produced the order.
pub fn order_local_global(plan: &EditSet, table: &ImportanceTable) -> Vec<Edit> {
    order_global(plan, table)
}

/// Step-by-step Global chooser. Candidates are the table's endorsed edits
/// that apply to the current scene plus the plan's remaining edits; the
/// best-ranked one is taken.
#[derive(Debug, Clone)]
pub struct GlobalSelector<'a> {
    table: &'a ImportanceTable,
    endorsed: Vec<Edit>,
    remaining: Vec<Edit>,
}

impl<'a> GlobalSelector<'a> {
    pub fn new(t: &Taxonomy, policy: &CostPolicy, table: &'a ImportanceTable, plan: &EditSet) -> Self {
        let endorsed = table
            .endorsed()
            .into_iter()
            .filter(|(d, _)| policy.is_actionable(d))
            .filter_map(|(d, _)| Edit::costed(t, &d).ok())
            .collect();
        Self {
            table,
            endorsed,
            remaining: plan.edits.clone(),
        }
    }

    pub fn remaining(&self) -> &[Edit] {
        &self.remaining
    }

    pub fn next(&mut self, current: &ConceptAnnotation) -> Option<Edit> {
        let from_plan = self.remaining.iter().filter(|e| is_applicable(current, e));
        let from_table = self.endorsed.iter().filter(|e| {
            let fresh = !self.remaining.iter().any(|r| r.same_action(e));
            let applies = match e.kind {
                EditKind::Insert => e.target.as_ref().is_some_and(|c| !current.contains(c)),
                _ => is_applicable(current, e),
            };
            fresh && applies
        });
        let chosen = from_plan.chain(from_table).min_by_key(|e| self.table.rank_key(e))?.clone();
        if let Some(pos) = self.remaining.iter().position(|r| r.same_action(&chosen)) {
            self.remaining.remove(pos);
        }
        Some(chosen)
    }
}

/// A parsed selector reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectorTriple {
    Add { object: ConceptId, anchor: String },
    Remove { object: ConceptId, backdrop: String },
    Replace { from: ConceptId, to: ConceptId },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplyError {
    #[error("unparsable selector reply: {0}")]
    Unparsable(String),
    #[error("selector named an edit that is not pending: {0}")]
    UnknownEdit(String),
}

fn split_items(inner: &str) -> Result<Vec<String>, ReplyError> {
    let bad = |m: &str| ReplyError::Unparsable(m.to_string());
    let mut items = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let mut item = String::new();
        match chars.peek().copied() {
            None if items.is_empty() => break,
            None => return Err(bad("trailing comma")),
            Some(q @ ('"' | '\'')) => {
                chars.next();
                loop {
                    match chars.next() {
                        Some(c) if c == q => break,
                        Some(c) => item.push(c),
                        None => return Err(bad("unterminated quote")),
                    }
                }
                while chars.peek().is_some_and(|c| c.is_whitespace()) {
                    chars.next();
                }
            }
            Some(_) => {
                while let Some(&c) = chars.peek() {
                    if c == ',' {
                        break;
                    }
                    if matches!(c, '"' | '\'' | '[' | ']') {
                        return Err(bad("stray quote or bracket"));
                    }
                    item.push(c);
                    chars.next();
                }
            }
        }
        items.push(item.trim().to_string());
        match chars.next() {
            None => break,
            Some(',') => continue,
            Some(c) => return Err(ReplyError::Unparsable(format!("unexpected `{c}` after item"))),
        }
    }
    Ok(items)
}

/// `Replace couch with bed`, the prose form used in the prompt's example.
fn parse_prose_replace(text: &str) -> Option<SelectorTriple> {
    let words: Vec<&str> = text.split_whitespace().collect();
    match words.as_slice() {
        [verb, from, with, to]
            if verb.eq_ignore_ascii_case("replace")
                && with.eq_ignore_ascii_case("with")
                && [from, to].iter().all(|w| w.chars().all(|c| c.is_alphanumeric() || c == '-' || c == '_')) =>
        {
            Some(SelectorTriple::Replace {
                from: ConceptId::new(from).ok()?,
                to: ConceptId::new(to).ok()?,
            })
        }
        _ => None,
    }
}

/// Parses `["add"|"remove"|"replace", x, y]`, optionally preceded by a
/// `Step:` prefix. Quotes may be single, double or absent. The prose
/// `Replace x with y` is also accepted.
pub fn parse_selector_reply(reply: &str) -> Result<SelectorTriple, ReplyError> {
    let bad = |m: String| ReplyError::Unparsable(m);
    let text = reply.trim();
    let text = text
        .strip_prefix("Step:")
        .or_else(|| text.strip_prefix("step:"))
        .unwrap_or(text)
        .trim()
        .trim_end_matches('.')
        .trim();
    if let Some(triple) = parse_prose_replace(text) {
        return Ok(triple);
    }
    let inner = text
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| bad(format!("not a bracketed list: `{reply}`")))?;
    if inner.contains('[') || inner.contains(']') {
        return Err(bad(format!("nested or repeated list: `{reply}`")));
    }
    let items = split_items(inner)?;
    if items.len() != 3 {
        return Err(bad(format!("expected 3 items, found {}", items.len())));
    }
    if items.iter().any(|s| s.is_empty()) {
        return Err(bad("empty item".into()));
    }
    let concept = |s: &str| ConceptId::new(s).map_err(|e| bad(e.to_string()));
    match items[0].to_ascii_lowercase().as_str() {
        "add" => Ok(SelectorTriple::Add { object: concept(&items[1])?, anchor: items[2].clone() }),
        "remove" => Ok(SelectorTriple::Remove { object: concept(&items[1])?, backdrop: items[2].clone() }),
        "replace" => Ok(SelectorTriple::Replace { from: concept(&items[1])?, to: concept(&items[2])? }),
        other => Err(bad(format!("unknown action `{other}`"))),
    }
}

/// The pending edit a triple names, plus its grounding context (anchor for
/// an insertion, backdrop for a deletion).
pub fn match_triple(triple: &SelectorTriple, remaining: &[Edit]) -> Result<(Edit, Option<String>), ReplyError> {
    let (wanted, context) = match triple {
        SelectorTriple::Add { object, anchor } => (DirectedEdit::insert(object.clone()), Some(anchor.clone())),
        SelectorTriple::Remove { object, backdrop } => (DirectedEdit::delete(object.clone()), Some(backdrop.clone())),
        SelectorTriple::Replace { from, to } => (DirectedEdit::substitute(from.clone(), to.clone()), None),
    };
    remaining
        .iter()
        .find(|e| e.directed() == wanted)
        .map(|e| (e.clone(), context))
        .ok_or_else(|| ReplyError::UnknownEdit(wanted.to_string()))
}

/// One Local-strategy decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalChoice {
    pub edit: Edit,
    pub context: Option<String>,
    /// Rejected replies, in order.
    pub rejected: Vec<String>,
    /// True when every attempt failed and the first pending edit was taken.
    pub fallback: bool,
}

/// A resolved edit and context, or the raw reply and why it was refused.
pub type LocalReply = Result<(Edit, Option<String>), (String, ReplyError)>;

/// Asks the selector once and resolves its reply against `remaining`.
pub fn next_edit_local(
    selector: &dyn EditSelector,
    retry: &RetryPolicy,
    image: &ImagePayload,
    current: &ConceptAnnotation,
    remaining: &[Edit],
) -> Result<LocalReply, ServiceError> {
    let query = SelectorQuery::next_edit(current, remaining);
    let request = SelectorRequest {
        image: image.clone(),
        prompt: query.render(),
    };
    let reply = retry.call(|| selector.complete(&request, &query))?.text;
    Ok(parse_selector_reply(&reply)
        .and_then(|triple| match_triple(&triple, remaining))
        .map_err(|e| (reply, e)))
}

/// Up to `attempts` selector rounds; after that the smallest pending edit
/// is used. Transport failures are returned as errors.
pub fn select_local(
    selector: &dyn EditSelector,
    retry: &RetryPolicy,
    attempts: u32,
    image: &ImagePayload,
    current: &ConceptAnnotation,
    remaining: &[Edit],
) -> Result<Option<LocalChoice>, ServiceError> {
    let Some(first) = remaining.iter().min() else {
        return Ok(None);
    };
    let mut rejected = Vec::new();
    for _ in 0..attempts.max(1) {
        match next_edit_local(selector, retry, image, current, remaining)? {
            Ok((edit, context)) => {
                return Ok(Some(LocalChoice { edit, context, rejected, fallback: false }));
            }
            Err((reply, e)) => {
                tracing::warn!(error = %e, "selector reply rejected");
                rejected.push(format!("{e}: {reply}"));
            }
        }
    }
    Ok(Some(LocalChoice {
        edit: first.clone(),
        context: None,
        rejected,
        fallback: true,
    }))
}
