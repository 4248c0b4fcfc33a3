//! The counterfactual loop: pick an edit, ground it, inpaint, re-classify,
//! and stop at the first label flip or when the plan is used up.

use std::collections::BTreeMap;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::prompts::display_name;
use crate::backends::{
    content_ref, ClassifyRequest, ClassifyResponse, Classifier, EditSelector, GroundRequest, GroundingParams,
    ImagePayload, ImageRef, InpaintParams, InpaintRequest, RetryPolicy, SelectorQuery, SelectorRequest,
    ServiceContracts, ServiceError,
};
use crate::concept::ConceptId;
use crate::editplan::{apply_edits, closest_target, is_applicable, ConceptAnnotation, Edit, EditKind, EditSet};
use crate::ordering::{order_local_global, select_local, GlobalSelector, ImportanceTable, OrderingStrategy};
use crate::taxonomy::{CostPolicy, Taxonomy};

pub const TRACE_VERSION: u32 = 1;

/// Used when a selector gives no usable anchor or backdrop.
pub const FALLBACK_CONTEXT: &str = "background";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: OrderingStrategy,
    #[serde(default = "default_runs")]
    pub consistency_runs: u32,
    /// Defaults to the plan size.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Selector rounds per Local step before falling back.
    #[serde(default = "default_attempts")]
    pub selector_attempts: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub grounding: GroundingParams,
    #[serde(default)]
    pub inpaint: InpaintParams,
}

fn default_runs() -> u32 {
    7
}

fn default_attempts() -> u32 {
    3
}

impl RunConfig {
    pub fn new(strategy: OrderingStrategy, seed: u64) -> Self {
        Self {
            strategy,
            consistency_runs: default_runs(),
            max_steps: None,
            seed,
            selector_attempts: default_attempts(),
            retry: RetryPolicy::default(),
            grounding: GroundingParams::default(),
            inpaint: InpaintParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check_runs(self.consistency_runs)?;
        if self.max_steps == Some(0) {
            return Err(ConfigError::ZeroSteps);
        }
        if self.selector_attempts == 0 {
            return Err(ConfigError::ZeroAttempts);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("consistency_runs must be odd and at least 1, got {0}")]
    EvenRuns(u32),
    #[error("max_steps must be at least 1")]
    ZeroSteps,
    #[error("selector_attempts must be at least 1")]
    ZeroAttempts,
}

fn check_runs(runs: u32) -> Result<(), ConfigError> {
    if runs == 0 || runs.is_multiple_of(2) {
        Err(ConfigError::EvenRuns(runs))
    } else {
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("the {0} strategy needs an importance table")]
    MissingTable(OrderingStrategy),
    #[error("the local strategy needs a selector service")]
    MissingSelector,
    #[error("cannot build services for `{image_id}`: {message}")]
    Services { image_id: String, message: String },
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

/// One classifier answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Label(String),
    Scores(BTreeMap<String, f64>),
    /// An answer that names none of the valid labels.
    Abstain(String),
}

impl Vote {
    /// The label this vote counts for, if any.
    pub fn choice(&self, labels: &[String]) -> Option<String> {
        match self {
            Vote::Label(l) => Some(l.clone()),
            Vote::Scores(scores) => labels
                .iter()
                .filter_map(|l| scores.get(l).filter(|s| s.is_finite()).map(|s| (l, *s)))
                .fold(None::<(&String, f64)>, |best, (l, s)| match best {
                    Some((_, b)) if b >= s => best,
                    _ => Some((l, s)),
                })
                .map(|(l, _)| l.clone()),
            Vote::Abstain(_) => None,
        }
    }
}

/// Majority label over repeated classifications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub verdict: String,
    /// Votes agreeing with the verdict.
    pub agree: u32,
    /// Votes naming a valid label.
    pub valid: u32,
    pub ambiguity: f64,
    pub votes: Vec<Vote>,
}

impl Classification {
    pub fn ambiguity_ratio(&self) -> Ratio<u32> {
        Ratio::new(self.agree, self.valid)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("no majority among votes {0:?}")]
    NoMajority(Vec<Vote>),
}

/// Majority label with the count agreeing with it and the count of valid
/// votes.
pub fn tally_votes(votes: &[Vote], labels: &[String]) -> Result<(String, u32, u32), ClassifyError> {
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    for vote in votes {
        if let Some(label) = vote.choice(labels) {
            *counts.entry(label).or_default() += 1;
        }
    }
    let valid: u32 = counts.values().sum();
    let top = counts.values().copied().max().unwrap_or(0);
    let mut leaders = counts.iter().filter(|(_, &c)| c == top);
    match (leaders.next(), leaders.next()) {
        (Some((label, &count)), None) if count > 0 => Ok((label.clone(), count, valid)),
        _ => Err(ClassifyError::NoMajority(votes.to_vec())),
    }
}

fn normalize_label(raw: &str, labels: &[String]) -> Option<String> {
    let cleaned = raw
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '`')
        .trim();
    labels.iter().find(|l| l.trim().eq_ignore_ascii_case(cleaned)).cloned()
}

/// Queries the classifier `runs` times and takes the majority.
pub fn classify_consistent(
    classifier: &dyn Classifier,
    retry: &RetryPolicy,
    image: &ImagePayload,
    labels: &[String],
    runs: u32,
) -> Result<Classification, ClassifyError> {
    check_runs(runs)?;
    let request = ClassifyRequest {
        image: image.clone(),
        labels: labels.to_vec(),
        prompt: None,
    };
    let mut votes = Vec::with_capacity(runs as usize);
    for _ in 0..runs {
        let vote = match retry.call(|| classifier.classify(&request))? {
            ClassifyResponse::Label { label } => match normalize_label(&label, labels) {
                Some(l) => Vote::Label(l),
                None => Vote::Abstain(label),
            },
            ClassifyResponse::Scores { scores } => Vote::Scores(scores),
        };
        votes.push(vote);
    }
    let (verdict, agree, valid) = tally_votes(&votes, labels)?;
    Ok(Classification {
        verdict,
        agree,
        valid,
        ambiguity: agree as f64 / valid as f64,
        votes,
    })
}

/// How the grounding query or prompt of a step was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    /// Both endpoints come from the edit itself.
    Edit,
    /// Supplied alongside the selector's choice of edit.
    Selection,
    /// Answered by a dedicated selector query.
    Selector,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditContext {
    /// What the grounder should locate.
    pub grounding_query: String,
    /// What the inpainter should paint there.
    pub prompt: String,
    pub source: ContextSource,
}

/// Accepts a short object name: at most three words and 32 characters of
/// letters, spaces, `-` and `_`.
pub fn parse_single_item(reply: &str) -> Option<String> {
    let item = reply
        .trim()
        .trim_end_matches('.')
        .trim()
        .trim_matches(|c| c == '"' || c == '\'')
        .trim()
        .to_lowercase();
    let ok = !item.is_empty()
        && item.chars().count() <= 32
        && item.split_whitespace().count() <= 3
        && item.chars().all(|c| c.is_alphabetic() || c == ' ' || c == '-' || c == '_');
    ok.then(|| item.split_whitespace().collect::<Vec<_>>().join(" "))
}

/// Grounding target and prompt for one edit. Insertions need an anchor and
/// deletions a backdrop; a usable `hint` is taken as is, otherwise the
/// selector is asked, and failing that the fallback is used.
pub fn resolve_edit_context(
    selector: Option<&dyn EditSelector>,
    retry: &RetryPolicy,
    image: &ImagePayload,
    edit: &Edit,
    hint: Option<&str>,
    notes: &mut Vec<String>,
) -> Result<EditContext, ServiceError> {
    let name = |c: &Option<ConceptId>| c.as_ref().map(display_name).unwrap_or_default();
    let query = match edit.kind {
        EditKind::Substitute => {
            return Ok(EditContext {
                grounding_query: name(&edit.source),
                prompt: name(&edit.target),
                source: ContextSource::Edit,
            })
        }
        EditKind::Insert => SelectorQuery::Anchor { object: edit.target.clone().expect("insert has a target") },
        EditKind::Delete => SelectorQuery::Backdrop { object: edit.source.clone().expect("delete has a source") },
    };

    let mut resolved = hint.and_then(parse_single_item).map(|c| (c, ContextSource::Selection));
    if resolved.is_none() {
        if let Some(selector) = selector {
            let request = SelectorRequest {
                image: image.clone(),
                prompt: query.render(),
            };
            let reply = retry.call(|| selector.complete(&request, &query))?.text;
            match parse_single_item(&reply) {
                Some(item) => resolved = Some((item, ContextSource::Selector)),
                None => {
                    tracing::warn!(reply = %reply, "unusable context reply, using fallback");
                    notes.push(format!("context reply rejected, using `{FALLBACK_CONTEXT}`: {reply}"));
                }
            }
        }
    }
    let (context, source) = resolved.unwrap_or_else(|| (FALLBACK_CONTEXT.to_string(), ContextSource::Fallback));
    Ok(match edit.kind {
        EditKind::Insert => EditContext {
            grounding_query: context,
            prompt: name(&edit.target),
            source,
        },
        _ => EditContext {
            grounding_query: name(&edit.source),
            prompt: context,
            source,
        },
    })
}

/// How a step's edit was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Next in the ranked plan.
    Plan,
    /// Endorsed by the importance table, outside the plan.
    Table,
    Selector,
    /// The selector never gave a usable answer.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub edit: Edit,
    pub selection: Selection,
    pub context: EditContext,
    pub boxes: usize,
    pub image_ref: ImageRef,
    #[serde(flatten)]
    pub classification: Classification,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Flipped,
    Exhausted,
    SourceMisclassified { predicted: String },
    Failed { step: usize, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub trace_version: u32,
    pub strategy: OrderingStrategy,
    pub seed: u64,
    pub source: ConceptAnnotation,
    pub target_label: Option<String>,
    pub target_image: Option<String>,
    pub edit_plan: Option<EditSet>,
    pub source_image_ref: Option<ImageRef>,
    /// Step 0: the unedited source.
    pub source_check: Option<Classification>,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub flipped: bool,
    pub steps_to_flip: Option<usize>,
}

impl RunTrace {
    fn new(src: &ConceptAnnotation, config: &RunConfig) -> Self {
        Self {
            trace_version: TRACE_VERSION,
            strategy: config.strategy,
            seed: config.seed,
            source: src.clone(),
            target_label: None,
            target_image: None,
            edit_plan: None,
            source_image_ref: None,
            source_check: None,
            steps: Vec::new(),
            outcome: Outcome::Exhausted,
            flipped: false,
            steps_to_flip: None,
        }
    }

    fn fail(mut self, step: usize, error: impl ToString) -> Self {
        self.outcome = Outcome::Failed { step, error: error.to_string() };
        self
    }

    /// Whether this run counts toward success-rate denominators.
    pub fn is_valid(&self) -> bool {
        matches!(self.outcome, Outcome::Flipped | Outcome::Exhausted)
    }
}

/// 64-bit seed from the first eight bytes of `sha256(root ‖ tag)`.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let digest = Sha256::new().chain_update(root.to_le_bytes()).chain_update(tag.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

enum Chooser<'a> {
    Global(GlobalSelector<'a>),
    Ranked(Vec<Edit>),
    Local { selector: &'a dyn EditSelector, remaining: Vec<Edit> },
}

struct Choice {
    edit: Edit,
    selection: Selection,
    hint: Option<String>,
    notes: Vec<String>,
}

impl Chooser<'_> {
    fn next(&mut self, current: &ConceptAnnotation, image: &ImagePayload, config: &RunConfig) -> Result<Option<Choice>, ServiceError> {
        match self {
            Chooser::Global(selector) => {
                let before = selector.remaining().len();
                Ok(selector.next(current).map(|edit| Choice {
                    edit,
                    selection: if selector.remaining().len() < before { Selection::Plan } else { Selection::Table },
                    hint: None,
                    notes: Vec::new(),
                }))
            }
            Chooser::Ranked(order) => {
                let Some(pos) = order.iter().position(|e| is_applicable(current, e)) else {
                    return Ok(None);
                };
                Ok(Some(Choice {
                    edit: order.remove(pos),
                    selection: Selection::Plan,
                    hint: None,
                    notes: Vec::new(),
                }))
            }
            Chooser::Local { selector, remaining } => {
                let Some(choice) =
                    select_local(*selector, &config.retry, config.selector_attempts, image, current, remaining)?
                else {
                    return Ok(None);
                };
                if let Some(pos) = remaining.iter().position(|e| e == &choice.edit) {
                    remaining.remove(pos);
                }
                let mut notes = choice.rejected;
                if choice.fallback {
                    notes.push(format!("selector fallback to {}", choice.edit.directed()));
                }
                Ok(Some(Choice {
                    edit: choice.edit,
                    selection: if choice.fallback { Selection::Fallback } else { Selection::Selector },
                    hint: choice.context,
                    notes,
                }))
            }
        }
    }
}

/// Runs one source image to a flip, exhaustion, or failure. Service and
/// planning failures are recorded in the trace; only invocation problems
/// are returned as errors.
pub fn run_counterfactual(
    t: &Taxonomy,
    policy: &CostPolicy,
    src: &ConceptAnnotation,
    candidates: &[ConceptAnnotation],
    table: Option<&ImportanceTable>,
    contracts: &ServiceContracts,
    config: &RunConfig,
) -> Result<RunTrace, RunError> {
    config.validate()?;
    let mut trace = RunTrace::new(src, config);
    let mut chooser = match config.strategy {
        OrderingStrategy::Local => Chooser::Local {
            selector: contracts.selector.as_deref().ok_or(RunError::MissingSelector)?,
            remaining: Vec::new(),
        },
        strategy => {
            table.ok_or(RunError::MissingTable(strategy))?;
            Chooser::Ranked(Vec::new())
        }
    };

    let (target, plan) = match closest_target(t, policy, src, candidates) {
        Ok(found) => found,
        Err(e) => return Ok(trace.fail(0, e)),
    };
    trace.target_label = Some(target.label.clone());
    trace.target_image = Some(target.image_id.clone());
    let cap = config.max_steps.unwrap_or(plan.len()).min(plan.len());
    match &mut chooser {
        Chooser::Local { remaining, .. } => remaining.clone_from(&plan.edits),
        _ => match config.strategy {
            OrderingStrategy::Global => {
                chooser = Chooser::Global(GlobalSelector::new(t, policy, table.expect("checked"), &plan));
            }
            _ => chooser = Chooser::Ranked(order_local_global(&plan, table.expect("checked"))),
        },
    }
    trace.edit_plan = Some(plan);

    let labels = vec![src.label.clone(), target.label.clone()];
    let mut image = match config.retry.call(|| contracts.images.source_image(src)) {
        Ok(image) => image,
        Err(e) => return Ok(trace.fail(0, e)),
    };
    match content_ref(&image) {
        Ok(r) => trace.source_image_ref = Some(r),
        Err(e) => return Ok(trace.fail(0, e)),
    }
    let check = match classify_consistent(contracts.classifier.as_ref(), &config.retry, &image, &labels, config.consistency_runs) {
        Ok(c) => c,
        Err(e) => return Ok(trace.fail(0, e)),
    };
    let predicted = check.verdict.clone();
    trace.source_check = Some(check);
    if predicted != src.label {
        trace.outcome = Outcome::SourceMisclassified { predicted };
        return Ok(trace);
    }

    let mut current = src.clone();
    for index in 1..=cap {
        let step = match execute_step(index, &mut chooser, &current, &image, &labels, contracts, config) {
            Ok(Some(step)) => step,
            Ok(None) => break,
            Err(e) => return Ok(trace.fail(index, e)),
        };
        let (record, next_image) = step;
        match apply_edits(&current, std::slice::from_ref(&record.edit)) {
            Ok(next) => current = next,
            Err(e) => tracing::warn!(error = %e, "symbolic scene update skipped"),
        }
        image = next_image;
        let flipped = record.classification.verdict == target.label;
        trace.steps.push(record);
        if flipped {
            trace.outcome = Outcome::Flipped;
            trace.flipped = true;
            trace.steps_to_flip = Some(index);
            return Ok(trace);
        }
    }
    trace.outcome = Outcome::Exhausted;
    Ok(trace)
}

#[derive(Debug, Error)]
enum StepError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

fn execute_step(
    index: usize,
    chooser: &mut Chooser<'_>,
    current: &ConceptAnnotation,
    image: &ImagePayload,
    labels: &[String],
    contracts: &ServiceContracts,
    config: &RunConfig,
) -> Result<Option<(StepRecord, ImagePayload)>, StepError> {
    let Some(choice) = chooser.next(current, image, config)? else {
        return Ok(None);
    };
    let mut notes = choice.notes;
    let context = resolve_edit_context(
        contracts.selector.as_deref(),
        &config.retry,
        image,
        &choice.edit,
        choice.hint.as_deref(),
        &mut notes,
    )?;
    let grounded = config
        .retry
        .call(|| contracts.grounder.ground(&GroundRequest::new(image.clone(), &context.grounding_query, &config.grounding)))?;
    let request = InpaintRequest::new(
        image.clone(),
        grounded.mask.clone(),
        &context.prompt,
        &config.inpaint,
        derive_seed(config.seed, &format!("step-{index}")),
    );
    let painted = config.retry.call(|| contracts.inpainter.inpaint(&request, &choice.edit))?;
    let image_ref = content_ref(&painted.image)?;
    let classification =
        classify_consistent(contracts.classifier.as_ref(), &config.retry, &painted.image, labels, config.consistency_runs)?;
    Ok(Some((
        StepRecord {
            index,
            edit: choice.edit,
            selection: choice.selection,
            context,
            boxes: grounded.boxes.len(),
            image_ref,
            classification,
            notes,
        },
        painted.image,
    )))
}

/// Runs every source, at most `jobs` at a time. Each run gets its own seed
/// derived from `config.seed` and the image id, and its own services from
/// `services`. Output order follows `sources`.
#[allow(clippy::too_many_arguments)]
pub fn run_batch<F>(
    t: &Taxonomy,
    policy: &CostPolicy,
    sources: &[ConceptAnnotation],
    candidates: &[ConceptAnnotation],
    table: Option<&ImportanceTable>,
    services: F,
    config: &RunConfig,
    jobs: usize,
) -> Result<Vec<RunTrace>, RunError>
where
    F: Fn(u64) -> Result<ServiceContracts, String> + Sync,
{
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    pool.install(|| {
        sources
            .par_iter()
            .map(|src| {
                let mut run_config = config.clone();
                run_config.seed = derive_seed(config.seed, &src.image_id);
                let contracts = services(run_config.seed).map_err(|message| RunError::Services {
                    image_id: src.image_id.clone(),
                    message,
                })?;
                run_counterfactual(t, policy, src, candidates, table, &contracts, &run_config)
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockClassifierConfig, MockConfig, MockOutput, Predicate, Rule, ScriptedSelector};
    use crate::concept::concept;

    fn labels() -> Vec<String> {
        vec!["stop".into(), "move".into()]
    }

    fn votes(stop: usize, total: usize) -> Vec<Vote> {
        (0..total)
            .map(|i| Vote::Label(if i < stop { "stop" } else { "move" }.into()))
            .collect()
    }

    #[test]
    fn vote_counting() {
        for (k, expected) in [(7, Ratio::new(7, 7)), (6, Ratio::new(6, 7)), (5, Ratio::new(5, 7)), (4, Ratio::new(4, 7))] {
            let (label, agree, valid) = tally_votes(&votes(k, 7), &labels()).unwrap();
            assert_eq!(label, "stop");
            assert_eq!(Ratio::new(agree, valid), expected);
        }
        let (label, agree, valid) = tally_votes(&votes(3, 7), &labels()).unwrap();
        assert_eq!((label.as_str(), agree, valid), ("move", 4, 7));
    }

    #[test]
    fn abstentions_and_ties() {
        let mut v = votes(2, 4);
        v.push(Vote::Abstain("maybe".into()));
        assert!(matches!(tally_votes(&v, &labels()), Err(ClassifyError::NoMajority(_))));
        v.push(Vote::Label("stop".into()));
        assert_eq!(tally_votes(&v, &labels()).unwrap(), ("stop".into(), 3, 5));
        assert!(tally_votes(&[Vote::Abstain("x".into())], &labels()).is_err());
    }

    #[test]
    fn score_votes_take_argmax() {
        let scores: BTreeMap<String, f64> = [("stop".to_string(), 0.2), ("move".to_string(), 0.8)].into();
        assert_eq!(Vote::Scores(scores).choice(&labels()).as_deref(), Some("move"));
    }

    #[test]
    fn even_runs_rejected() {
        assert_eq!(check_runs(4), Err(ConfigError::EvenRuns(4)));
        assert_eq!(check_runs(0), Err(ConfigError::EvenRuns(0)));
        let mut config = RunConfig::new(OrderingStrategy::Global, 1);
        config.consistency_runs = 6;
        assert!(config.validate().is_err());
    }

    #[test]
    fn label_normalization() {
        assert_eq!(normalize_label(" \"Stop.\" ", &labels()).as_deref(), Some("stop"));
        assert_eq!(normalize_label("the car stops", &labels()), None);
    }

    #[test]
    fn single_item_replies() {
        assert_eq!(parse_single_item("\"wall\"").as_deref(), Some("wall"));
        assert_eq!(parse_single_item(" Bed. ").as_deref(), Some("bed"));
        assert_eq!(parse_single_item("night stand").as_deref(), Some("night stand"));
        assert_eq!(parse_single_item("The object behind the painting is most likely a wall"), None);
        assert_eq!(parse_single_item(""), None);
        assert_eq!(parse_single_item("wall, floor"), None);
    }

    #[test]
    fn context_for_each_kind() {
        let image = ImagePayload::Path("x.png".into());
        let retry = RetryPolicy { attempts: 1, base_delay_ms: 0 };
        let mut notes = Vec::new();

        let sub = Edit::substitute(concept("couch"), concept("bed"), 2);
        let ctx = resolve_edit_context(None, &retry, &image, &sub, None, &mut notes).unwrap();
        assert_eq!((ctx.grounding_query.as_str(), ctx.prompt.as_str()), ("couch", "bed"));

        let selector = ScriptedSelector::script(["bed", "\"wall\""]);
        let ins = Edit::insert(concept("pillow"), 2);
        let ctx = resolve_edit_context(Some(&selector), &retry, &image, &ins, None, &mut notes).unwrap();
        assert_eq!((ctx.grounding_query.as_str(), ctx.prompt.as_str(), ctx.source), ("bed", "pillow", ContextSource::Selector));
        let del = Edit::delete(concept("painting"), 2);
        let ctx = resolve_edit_context(Some(&selector), &retry, &image, &del, None, &mut notes).unwrap();
        assert_eq!((ctx.grounding_query.as_str(), ctx.prompt.as_str()), ("painting", "wall"));
        assert!(notes.is_empty());

        let ctx = resolve_edit_context(None, &retry, &image, &ins, Some("window"), &mut notes).unwrap();
        assert_eq!((ctx.grounding_query.as_str(), ctx.source), ("window", ContextSource::Selection));

        let essay = ScriptedSelector::script(["Well, it depends on the layout of the room and the lighting."]);
        let ctx = resolve_edit_context(Some(&essay), &retry, &image, &del, None, &mut notes).unwrap();
        assert_eq!((ctx.prompt.as_str(), ctx.source), (FALLBACK_CONTEXT, ContextSource::Fallback));
        assert_eq!(notes.len(), 1);
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "a"), derive_seed(7, "a"));
        assert_ne!(derive_seed(7, "a"), derive_seed(7, "b"));
        assert_ne!(derive_seed(7, "a"), derive_seed(8, "a"));
    }

    fn carstop() -> (Taxonomy, MockConfig) {
        let t = Taxonomy::parse("root vehicle\nvehicle car\nvehicle bus\nroot nature\nnature tree\nnature sky").unwrap();
        let config = MockConfig {
            classifier: MockClassifierConfig {
                rules: vec![
                    Rule { when: Predicate::Present(concept("car")), label: "stop".into() },
                    Rule { when: Predicate::Always, label: "move".into() },
                ],
                noise: 0.0,
                output: MockOutput::Label,
            },
            editor: Default::default(),
            selector: Default::default(),
        };
        (t, config)
    }

    fn ann(id: &str, label: &str, cs: &[&str]) -> ConceptAnnotation {
        ConceptAnnotation::new(id, label, cs.iter().map(|c| concept(c)).collect())
    }

    #[test]
    fn flips_once_the_car_is_gone() {
        let (t, mock) = carstop();
        let src = ann("s", "stop", &["car", "tree"]);
        let candidates = vec![ann("m", "move", &["tree", "sky"])];
        let mut table = ImportanceTable::empty("stop", "move");
        table.tally(&[Edit::delete(concept("car"), 2)]);
        for strategy in [OrderingStrategy::Global, OrderingStrategy::LocalGlobal, OrderingStrategy::Local] {
            let contracts = mock.contracts(3).unwrap();
            let mut config = RunConfig::new(strategy, 3);
            config.retry.base_delay_ms = 0;
            let trace = run_counterfactual(&t, &CostPolicy::default(), &src, &candidates, Some(&table), &contracts, &config).unwrap();
            assert!(trace.flipped, "{strategy}: {:?}", trace.outcome);
            assert_eq!(trace.steps_to_flip, Some(1), "{strategy}");
            assert_eq!(trace.steps[0].edit.source, Some(concept("car")));
            assert_eq!(trace.source_check.as_ref().unwrap().verdict, "stop");
        }
    }

    #[test]
    fn never_flipping_classifier_exhausts_the_plan() {
        let (t, mut mock) = carstop();
        mock.classifier.rules = vec![Rule { when: Predicate::Always, label: "stop".into() }];
        let src = ann("s", "stop", &["car", "tree", "bus"]);
        let candidates = vec![ann("m", "move", &["sky", "sky", "sky"])];
        let table = ImportanceTable::empty("stop", "move");
        let mut config = RunConfig::new(OrderingStrategy::LocalGlobal, 1);
        config.retry.base_delay_ms = 0;
        let trace = run_counterfactual(&t, &CostPolicy::default(), &src, &candidates, Some(&table), &mock.contracts(1).unwrap(), &config).unwrap();
        assert_eq!(trace.outcome, Outcome::Exhausted);
        assert_eq!(trace.steps.len(), 3);
        assert!(!trace.flipped);
    }

    #[test]
    fn misclassified_source_is_recorded() {
        let (t, mock) = carstop();
        let src = ann("s", "stop", &["tree"]);
        let candidates = vec![ann("m", "move", &["sky"])];
        let table = ImportanceTable::empty("stop", "move");
        let config = RunConfig::new(OrderingStrategy::Global, 1);
        let trace = run_counterfactual(&t, &CostPolicy::default(), &src, &candidates, Some(&table), &mock.contracts(1).unwrap(), &config).unwrap();
        assert_eq!(trace.outcome, Outcome::SourceMisclassified { predicted: "move".into() });
        assert!(trace.steps.is_empty());
        assert!(!trace.is_valid());
    }

    #[test]
    fn max_steps_caps_the_loop() {
        let (t, mut mock) = carstop();
        mock.classifier.rules = vec![Rule { when: Predicate::Always, label: "stop".into() }];
        let src = ann("s", "stop", &["car", "tree", "bus"]);
        let candidates = vec![ann("m", "move", &["sky", "sky", "sky"])];
        let table = ImportanceTable::empty("stop", "move");
        let mut config = RunConfig::new(OrderingStrategy::Global, 1);
        config.max_steps = Some(2);
        let trace = run_counterfactual(&t, &CostPolicy::default(), &src, &candidates, Some(&table), &mock.contracts(1).unwrap(), &config).unwrap();
        assert_eq!(trace.steps.len(), 2);
    }

    #[test]
    fn exhausted_selector_fails_the_trace() {
        let (t, mut mock) = carstop();
        mock.selector.script = Some(vec![]);
        let src = ann("s", "stop", &["car"]);
        let candidates = vec![ann("m", "move", &["sky"])];
        let mut config = RunConfig::new(OrderingStrategy::Local, 1);
        config.retry.base_delay_ms = 0;
        let trace = run_counterfactual(&t, &CostPolicy::default(), &src, &candidates, None, &mock.contracts(1).unwrap(), &config).unwrap();
        assert!(matches!(trace.outcome, Outcome::Failed { step: 1, .. }));
    }

    #[test]
    fn invocation_errors() {
        let (t, mock) = carstop();
        let src = ann("s", "stop", &["car"]);
        let candidates = vec![ann("m", "move", &["sky"])];
        let mut contracts = mock.contracts(1).unwrap();
        let config = RunConfig::new(OrderingStrategy::Global, 1);
        assert!(matches!(
            run_counterfactual(&t, &CostPolicy::default(), &src, &candidates, None, &contracts, &config),
            Err(RunError::MissingTable(OrderingStrategy::Global))
        ));
        contracts.selector = None;
        let config = RunConfig::new(OrderingStrategy::Local, 1);
        assert!(matches!(
            run_counterfactual(&t, &CostPolicy::default(), &src, &candidates, None, &contracts, &config),
            Err(RunError::MissingSelector)
        ));
    }

    #[test]
    fn batch_output_is_independent_of_parallelism() {
        let (t, mut mock) = carstop();
        mock.classifier.noise = 0.2;
        let sources: Vec<_> = (0..12).map(|i| ann(&format!("s{i}"), "stop", &["car", "tree", if i % 2 == 0 { "bus" } else { "sky" }])).collect();
        let candidates = vec![ann("m1", "move", &["tree", "sky"]), ann("m2", "move", &["bus"])];
        let table = ImportanceTable::empty("stop", "move");
        let mut config = RunConfig::new(OrderingStrategy::LocalGlobal, 42);
        config.retry.base_delay_ms = 0;
        let run = |jobs| {
            let traces = run_batch(&t, &CostPolicy::default(), &sources, &candidates, Some(&table), |seed| mock.contracts(seed).map_err(|e| e.to_string()), &config, jobs).unwrap();
            serde_json::to_string(&traces).unwrap()
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn trace_round_trips_through_json() {
        let (t, mock) = carstop();
        let src = ann("s", "stop", &["car", "tree"]);
        let candidates = vec![ann("m", "move", &["tree"])];
        let table = ImportanceTable::empty("stop", "move");
        let config = RunConfig::new(OrderingStrategy::Global, 5);
        let trace = run_counterfactual(&t, &CostPolicy::default(), &src, &candidates, Some(&table), &mock.contracts(5).unwrap(), &config).unwrap();
        let text = serde_json::to_string(&trace).unwrap();
        assert!(text.contains("\"trace_version\":1"));
        assert_eq!(serde_json::from_str::<RunTrace>(&text).unwrap(), trace);
    }
}
