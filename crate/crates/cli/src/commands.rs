//! One function per subcommand. Each returns the text to print; files go
//! under the output directory in `plans/`, `traces/`, `reports/` and
//! `importance/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cfedit::metrics::{frechet_distance, mean_cosine, rbf_mmd, render_table, EmbeddingSet, ReportRow};
use cfedit::ordering::{ratio_to_f64, ImportanceTable, NO_PARTNER};
use cfedit::pipeline::{run_batch, Outcome, RunTrace, TRACE_VERSION};
use cfedit::{closest_target, EditKind, OrderingStrategy};
use serde::Serialize;
use serde_json::json;

use crate::config::{BackendConfig, Project};
use crate::CliError;

pub struct Output {
    pub text: String,
    /// Runtime failure despite completing, e.g. every run failed.
    pub failed: bool,
}

impl Output {
    fn ok(text: String) -> Self {
        Self { text, failed: false }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// File-name-safe form of a label or id.
fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn validate(project: &Project) -> Result<Output, CliError> {
    let _services = project.service_factory()?;
    let c = &project.config;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &project.corpus {
        *counts.entry(a.label.as_str()).or_default() += 1;
    }
    let mut text = String::new();
    let _ = writeln!(text, "taxonomy: {} concepts, root `{}`", project.taxonomy.len(), project.taxonomy.root());
    let _ = writeln!(text, "corpus: {} images", project.corpus.len());
    for (label, n) in &counts {
        let _ = writeln!(text, "  {label}: {n}");
    }
    let _ = writeln!(text, "transition: {} -> {}", c.source_label, c.target_label);
    let _ = writeln!(text, "strategy: {}", c.strategy);
    let _ = writeln!(text, "candidates: {}", project.candidates().len());
    let mode = match c.backend {
        BackendConfig::Mock(_) => "mock",
        BackendConfig::Remote(_) => "remote",
    };
    let _ = writeln!(text, "backend: {mode}");
    if let Some(path) = &c.importance {
        project.importance()?;
        let _ = writeln!(text, "importance table: {}", path.display());
    }
    let _ = writeln!(text, "ok");
    Ok(Output::ok(text))
}

pub fn explain(project: &Project, image_id: &str) -> Result<Output, CliError> {
    let c = &project.config;
    let src = project
        .corpus
        .iter()
        .find(|a| a.image_id == image_id)
        .ok_or_else(|| CliError::Invalid(format!("unknown image `{image_id}`")))?;
    if src.label != c.source_label {
        return Err(CliError::Invalid(format!(
            "image `{image_id}` is labeled `{}`, expected `{}`",
            src.label, c.source_label
        )));
    }
    let candidates = project.candidates();
    let (target, plan) = closest_target(&project.taxonomy, &project.policy, src, &candidates)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut text = String::new();
    let _ = writeln!(text, "source: {} [{}] {}", src.image_id, src.label, concept_list(&src.concepts));
    let _ = writeln!(text, "target: {} [{}] {}", target.image_id, target.label, concept_list(&target.concepts));
    if plan.is_empty() {
        let _ = writeln!(text, "no edits needed");
    }
    for edit in &plan.edits {
        let what = match edit.kind {
            EditKind::Insert => format!("insert {}", edit.target.as_ref().expect("target")),
            EditKind::Delete => format!("delete {}", edit.source.as_ref().expect("source")),
            EditKind::Substitute => format!(
                "substitute {} -> {}",
                edit.source.as_ref().expect("source"),
                edit.target.as_ref().expect("target")
            ),
        };
        let _ = writeln!(text, "  {what:<40} cost {}", edit.cost);
    }
    let _ = writeln!(text, "total cost: {} ({} edits)", plan.total_cost, plan.len());

    let path = c.output_dir.join("plans").join(format!("{}.json", slug(image_id)));
    write_file(&path, &pretty(&json!({ "source": src, "target": target, "edit_set": plan })))?;
    let _ = writeln!(text, "wrote {}", path.display());
    Ok(Output::ok(text))
}

fn concept_list(cs: &[cfedit::ConceptId]) -> String {
    let names: Vec<&str> = cs.iter().map(|c| c.as_str()).collect();
    format!("{{{}}}", names.join(", "))
}

pub fn trace_path(project: &Project) -> PathBuf {
    project.config.output_dir.join("traces").join(format!("{}.jsonl", project.config.strategy))
}

pub fn run(project: &Project) -> Result<Output, CliError> {
    let c = &project.config;
    let table = match c.strategy {
        OrderingStrategy::Local => None,
        _ => Some(project.importance()?),
    };
    let factory = project.service_factory()?;
    let sources = project.sources();
    let traces = run_batch(
        &project.taxonomy,
        &project.policy,
        &sources,
        &project.candidates(),
        table.as_ref(),
        factory,
        &c.run_config(),
        c.jobs,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let lines: String = traces
        .iter()
        .map(|t| serde_json::to_string(t).expect("trace serializes") + "\n")
        .collect();
    let trace_file = trace_path(project);
    write_file(&trace_file, &lines)?;

    let row = ReportRow::from_traces(&c.classifier_tag, &c.strategy.to_string(), &traces);
    let failures: Vec<_> = traces
        .iter()
        .filter_map(|t| match &t.outcome {
            Outcome::Failed { step, error } => Some(json!({ "image_id": t.source.image_id, "step": step, "error": error })),
            _ => None,
        })
        .collect();
    let misclassified: Vec<&str> = traces
        .iter()
        .filter(|t| matches!(t.outcome, Outcome::SourceMisclassified { .. }))
        .map(|t| t.source.image_id.as_str())
        .collect();
    let report_file = c.output_dir.join("reports").join(format!("run-{}.json", c.strategy));
    write_file(
        &report_file,
        &pretty(&json!({
            "generated_at": now(),
            "trace_file": trace_file.display().to_string(),
            "seed": c.seed,
            "row": row,
            "misclassified": misclassified,
            "failures": failures,
        })),
    )?;

    let mut text = render_table(std::slice::from_ref(&row));
    let counts = row.counts;
    let _ = writeln!(
        text,
        "\n{} runs: {} flipped, {} exhausted, {} misclassified at step 0, {} failed",
        counts.runs, counts.flipped, counts.exhausted, counts.misclassified, counts.failed
    );
    for f in &failures {
        let _ = writeln!(text, "  failed: {} at step {}: {}", f["image_id"], f["step"], f["error"]);
    }
    let _ = writeln!(text, "wrote {}\nwrote {}", trace_file.display(), report_file.display());
    let failed = !traces.is_empty() && counts.failed == counts.runs;
    Ok(Output { text, failed })
}

pub fn importance(project: &Project, top: usize) -> Result<Output, CliError> {
    let c = &project.config;
    let table = cfedit::compute_importance(&project.taxonomy, &project.policy, &project.sources(), &project.candidates())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = c
        .output_dir
        .join("importance")
        .join(format!("{}_to_{}.tsv", slug(&c.source_label), slug(&c.target_label)));
    write_file(&path, &table.to_tsv())?;
    let mut text = importance_summary(&table, top);
    let _ = writeln!(text, "wrote {}", path.display());
    Ok(Output::ok(text))
}

pub fn importance_summary(table: &ImportanceTable, top: usize) -> String {
    let ranked = table.ranked();
    let nonzero = ranked.iter().filter(|(_, t)| *t.score().numer() != 0).count();
    let mut text = String::new();
    let _ = writeln!(
        text,
        "importance {} -> {}: {} images tallied, {} skipped",
        table.source_label,
        table.target_label,
        table.images,
        table.skipped.len()
    );
    let _ = writeln!(text, "pairs with |importance| > 0: {nonzero}");
    match ranked.first() {
        Some((key, tally)) => {
            let _ = writeln!(
                text,
                "top pair: {key}  importance {:.2} ± {:.2}",
                ratio_to_f64(tally.score()),
                tally.dispersion()
            );
        }
        None => {
            let _ = writeln!(text, "no edits were needed; the table is empty");
            return text;
        }
    }
    let _ = writeln!(
        text,
        "{:>4}  {:<28} {:>8} {:>6} {:>6} {:>6} {:>6} {:>6} {:>5}",
        "rank", "pair", "score", "std", "ins", "del", "fwd", "bwd", "occ"
    );
    for (i, (key, t)) in ranked.iter().take(top).enumerate() {
        let pair = format!("{}, {}", key.first, key.second.as_ref().map_or(NO_PARTNER, |c| c.as_str()));
        let _ = writeln!(
            text,
            "{:>4}  {:<28} {:>8.3} {:>6.3} {:>6} {:>6} {:>6} {:>6} {:>5}",
            i + 1,
            pair,
            ratio_to_f64(t.score()),
            t.dispersion(),
            t.insert,
            t.delete,
            t.sub_forward,
            t.sub_backward,
            t.occurrences()
        );
    }
    text
}

pub struct MetricsArgs {
    pub traces: Vec<PathBuf>,
    pub reference: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub bandwidth: Option<f64>,
    pub classifier_tag: String,
    pub output: Option<PathBuf>,
}

pub fn read_traces(path: &Path) -> Result<Vec<RunTrace>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut traces = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| CliError::Runtime(format!("{}:{}: schema mismatch: {e}", path.display(), i + 1)))?;
        if value.get("trace_version").and_then(|v| v.as_u64()) != Some(TRACE_VERSION as u64) {
            return Err(CliError::Runtime(format!(
                "{}:{}: schema mismatch: expected trace_version {TRACE_VERSION}",
                path.display(),
                i + 1
            )));
        }
        traces.push(
            serde_json::from_value(value)
                .map_err(|e| CliError::Runtime(format!("{}:{}: schema mismatch: {e}", path.display(), i + 1)))?,
        );
    }
    if traces.is_empty() {
        return Err(CliError::Runtime(format!("{}: no traces", path.display())));
    }
    Ok(traces)
}

fn read_embeddings(path: &Path) -> Result<EmbeddingSet, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    EmbeddingSet::parse(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn metrics(args: &MetricsArgs) -> Result<Output, CliError> {
    if args.traces.is_empty() {
        return Err(CliError::Invalid("at least one --traces file is required".into()));
    }
    let mut by_strategy: BTreeMap<String, Vec<RunTrace>> = BTreeMap::new();
    for path in &args.traces {
        for t in read_traces(path)? {
            by_strategy.entry(t.strategy.to_string()).or_default().push(t);
        }
    }

    let (mut fid, mut cmmd, mut s3) = (None, None, None);
    let mut notes = Vec::new();
    match (&args.reference, &args.generated) {
        (Some(r), Some(g)) => {
            let (r, g) = (read_embeddings(r)?, read_embeddings(g)?);
            let err = |e: cfedit::metrics::MetricsError| CliError::Runtime(e.to_string());
            fid = Some(frechet_distance(&r, &g).map_err(err)?);
            let mmd = rbf_mmd(&r, &g, args.bandwidth).map_err(err)?;
            if mmd.clamped {
                notes.push(format!("CMMD estimate {:.3e} clamped to 0", mmd.raw));
            }
            cmmd = Some(mmd.value);
            if r.len() == g.len() {
                s3 = Some(mean_cosine(&r, &g).map_err(err)?);
            } else {
                notes.push("S3 needs index-aligned sets of equal size; skipped".into());
            }
        }
        (None, None) => {}
        _ => return Err(CliError::Invalid("--reference and --generated must be given together".into())),
    }

    let rows: Vec<ReportRow> = by_strategy
        .iter()
        .map(|(strategy, traces)| {
            let mut row = ReportRow::from_traces(&args.classifier_tag, strategy, traces);
            row.fid = fid;
            row.cmmd = cmmd;
            row.s3 = s3;
            row
        })
        .collect();

    let mut text = render_table(&rows);
    for n in &notes {
        let _ = writeln!(text, "note: {n}");
    }
    if let Some(path) = &args.output {
        write_file(path, &pretty(&json!({ "generated_at": now(), "rows": rows, "notes": notes })))?;
        let _ = writeln!(text, "wrote {}", path.display());
    }
    Ok(Output::ok(text))
}
