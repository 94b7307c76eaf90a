use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use skipscope_core::attention::{mean_var_profile, var_profile, write_var_csv, VarProfile};
use skipscope_core::infotheory::{layer_bounds, write_bounds_csv};
use skipscope_core::oracle::{run_suite, Check};
use skipscope_core::pid::{pid_decompose, TripleJoint};
use skipscope_core::planner::{
    evaluate_conditions, load_external_metrics, plan_skips, write_rationale_csv, Thresholds,
};
use skipscope_core::redundancy::{redundancy_profile, write_profile_csv, RedundancyProfile};
use skipscope_core::toy::{build_model, evaluate_accuracy, synth_dataset, ForwardMode, ToyModelConfig};
use skipscope_core::trace::{read_trace_file, write_trace};
use skipscope_core::{AttentionTrace, Error, HiddenTrace, Modality};

use crate::output::{json_bytes, line_chart, write_atomic, Series};
use crate::{
    resolve_seed, AnalyzeArgs, Failure, Format, InfoBoundsArgs, Mode, Outcome, OutputArgs, PidArgs, PlanArgs,
    SimulateArgs, VerifyArgs,
};

type Loaded = Vec<(HiddenTrace, Option<AttentionTrace>)>;

fn load_traces(paths: &[PathBuf]) -> Result<Loaded, Failure> {
    paths
        .iter()
        .map(|p| {
            read_trace_file(p).map_err(|e| match e {
                Error::Io(io) => {
                    Failure::Data(Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", p.display()))))
                }
                other => other.into(),
            })
        })
        .collect()
}

/// Mean answer-token VAR over traces; `None` when no trace stores attention.
fn pooled_var(traces: &Loaded, query: Option<usize>) -> Result<Option<VarProfile>, Failure> {
    let with: Vec<_> = traces.iter().filter(|(_, a)| a.is_some()).collect();
    if with.is_empty() {
        return Ok(None);
    }
    if with.len() != traces.len() {
        return Err(Error::ShapeMismatch("some traces carry attention and some do not".into()).into());
    }
    let profiles = traces
        .iter()
        .map(|(h, a)| {
            let a = a.as_ref().expect("checked above");
            let q =
                query.or(h.answer_token_index.filter(|i| a.query_slot(*i).is_some())).unwrap_or(a.query_token_ids[0]);
            var_profile(a, q)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(mean_var_profile(&profiles)?))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> skipscope_core::Result<()>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Writes each file and returns the list of written names.
fn emit(dir: &Path, files: Vec<(String, Vec<u8>)>) -> Result<Vec<String>, Failure> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in &files {
        write_atomic(dir, name, bytes)?;
    }
    Ok(files.into_iter().map(|(n, _)| n).collect())
}

fn profile_charts(profile: &RedundancyProfile) -> Vec<(String, Vec<u8>)> {
    let series = |f: fn(&skipscope_core::redundancy::ProfileEntry) -> f64| -> Vec<(Modality, Vec<(f64, f64)>)> {
        Modality::ALL
            .into_iter()
            .map(|m| {
                let pts = profile.entries.iter().filter(|e| e.modality == m).map(|e| (e.layer as f64, f(e))).collect();
                (m, pts)
            })
            .filter(|(_, p): &(Modality, Vec<(f64, f64)>)| !p.is_empty())
            .collect()
    };
    let chart = |title: &str, y: &str, data: Vec<(Modality, Vec<(f64, f64)>)>| {
        let s: Vec<Series<'_>> = data.into_iter().map(|(m, points)| Series { name: m.as_str(), points }).collect();
        line_chart(title, "layer", y, &s).into_bytes()
    };
    vec![
        (
            "redundancy.svg".into(),
            chart("Mean adjacent-layer cosine distance", "mean cosine distance", series(|e| e.mean_cos_dist)),
        ),
        (
            "proximal.svg".into(),
            chart(
                &format!("Fraction of tokens with distance < {}", profile.t),
                "proximal fraction",
                series(|e| e.proximal_frac),
            ),
        ),
    ]
}

fn var_chart(var: &VarProfile) -> (String, Vec<u8>) {
    let points = var.entries.iter().map(|e| (e.layer as f64, e.var_normalized)).collect();
    let svg = line_chart("Visual attention ratio", "layer", "VAR / heads", &[Series { name: "VAR", points }]);
    ("var.svg".into(), svg.into_bytes())
}

pub(crate) fn analyze(args: AnalyzeArgs) -> Outcome {
    let traces = load_traces(&args.trace)?;
    let hidden: Vec<HiddenTrace> = traces.iter().map(|(h, _)| h.clone()).collect();
    let profile = redundancy_profile(&hidden, args.t)?;
    let var = pooled_var(&traces, args.query_token)?;
    let out = &args.output;
    let mut files = Vec::new();
    if out.wants(Format::Csv) {
        files.push(("profile.csv".into(), csv_bytes(|b| write_profile_csv(&profile, b))?));
        if let Some(v) = &var {
            files.push(("var.csv".into(), csv_bytes(|b| write_var_csv(v, b))?));
        }
    }
    if out.wants(Format::Json) {
        files.push(("profile.json".into(), json_bytes(&profile)));
        if let Some(v) = &var {
            files.push(("var.json".into(), json_bytes(v)));
        }
    }
    if out.wants(Format::Svg) {
        files.extend(profile_charts(&profile));
        if let Some(v) = &var {
            files.push(var_chart(v));
        }
    }
    let written = emit(&out.out, files)?;
    Ok(json!({
        "command": "analyze",
        "traces": traces.len(),
        "t": profile.t,
        "layers": profile.layers_for(Modality::Text).len().max(profile.layers_for(Modality::Vision).len()),
        "var": var.is_some(),
        "files": written,
    }))
}

fn parse_modality(s: &str) -> Result<Modality, Failure> {
    Modality::parse(s).ok_or_else(|| Failure::Usage(format!("unknown modality {s:?}; use vision or text")))
}

pub(crate) fn plan(args: PlanArgs) -> Outcome {
    let modality = parse_modality(&args.modality)?;
    let (profile, var) = match (&args.profile, &args.var) {
        (Some(p), Some(v)) => {
            let open = |p: &PathBuf| {
                std::fs::File::open(p).map_err(|e| {
                    Failure::Data(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))
                })
            };
            load_external_metrics(open(p)?, open(v)?)?
        }
        _ => {
            let traces = load_traces(&args.trace)?;
            let hidden: Vec<HiddenTrace> = traces.iter().map(|(h, _)| h.clone()).collect();
            let profile = redundancy_profile(&hidden, args.t.unwrap_or(0.05))?;
            let var = pooled_var(&traces, args.query_token)?
                .ok_or_else(|| Failure::Data(Error::EmptyInput("traces carry no attention rows".into())))?;
            (profile, var)
        }
    };
    let thresholds = Thresholds {
        eps_geo: args.eps_geo,
        eps_prox: args.eps_prox,
        tau_var: args.tau_var,
        t: args.t.unwrap_or(profile.t),
    };
    thresholds.validate()?;
    let plan = plan_skips(&evaluate_conditions(&profile, &var, thresholds, modality)?);
    let mut files = Vec::new();
    if args.output.wants(Format::Json) {
        files.push(("plan.json".into(), json_bytes(&plan)));
    }
    if args.output.wants(Format::Csv) {
        files.push(("rationale.csv".into(), csv_bytes(|b| write_rationale_csv(&plan, b))?));
    }
    if args.output.wants(Format::Svg) {
        files.extend(profile_charts(&profile));
        files.push(var_chart(&var));
    }
    let written = emit(&args.output.out, files)?;
    Ok(json!({
        "command": "plan",
        "modality": plan.modality,
        "late_entry_layer": plan.late_entry_layer,
        "early_exit_layer": plan.early_exit_layer,
        "late_entry_viable": plan.late_entry_viable,
        "early_exit_viable": plan.early_exit_viable,
        "files": written,
    }))
}

pub(crate) fn verify(args: VerifyArgs) -> Outcome {
    let checks: Vec<Check> = if args.theorem == "all" {
        Check::ALL.to_vec()
    } else {
        vec![Check::parse(&args.theorem).ok_or_else(|| Failure::Usage(format!("unknown check {:?}", args.theorem)))?]
    };
    if args.instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    let seed = resolve_seed(args.seed)?;
    let mut suites = Vec::new();
    let mut failing: Vec<Value> = Vec::new();
    for c in checks {
        let run = run_suite(c, args.instances, seed)?;
        suites.push(run.summary);
        failing.extend(run.failing);
    }
    let summary = json!({ "command": "verify", "seed": seed, "instances": args.instances, "suites": suites });
    let mut files = vec![("verify.json".to_string(), json_bytes(&summary))];
    if !failing.is_empty() {
        files.push(("failing-instances.json".into(), json_bytes(&failing)));
    }
    let written = emit(&args.out, files)?;
    let mut summary = summary;
    summary["files"] = json!(written);
    if failing.is_empty() {
        Ok(summary)
    } else {
        Err(Failure::Verification(format!("{} failing instances, see failing-instances.json", failing.len()), summary))
    }
}

pub(crate) fn simulate(args: SimulateArgs) -> Outcome {
    let seed = resolve_seed(args.seed)?;
    let config = ToyModelConfig {
        layer_count: args.layers,
        dim: args.dim,
        head_count: args.heads,
        copy_block: (args.copy_block[0], args.copy_block[1]),
        noise_scale: args.noise,
        seed,
    };
    let mode = match (args.mode, args.layer) {
        (Mode::Baseline, None) => ForwardMode::Baseline,
        (Mode::Baseline, Some(_)) => return Err(Failure::Usage("--layer is not used in baseline mode".into())),
        (Mode::LateEntry, Some(l)) => ForwardMode::LateEntry(l),
        (Mode::EarlyExit, Some(l)) => ForwardMode::EarlyExit(l),
        (_, None) => return Err(Failure::Usage("skip modes need --layer".into())),
    };
    if args.samples == 0 {
        return Err(Failure::Usage("--samples must be at least 1".into()));
    }
    let model = build_model(config.clone())?;
    let dataset = synth_dataset(seed, args.samples)?;
    let accuracy = evaluate_accuracy(&model, &dataset, mode)?;
    let baseline = evaluate_accuracy(&model, &dataset, ForwardMode::Baseline)?;

    let mut files = Vec::new();
    let mut trace_names = Vec::new();
    for (i, s) in dataset.iter().take(args.max_traces).enumerate() {
        let out = model.forward(s, mode)?;
        let mut bytes = Vec::new();
        write_trace(&out.hidden, Some(&out.attention), &mut bytes)?;
        let name = format!("traces/sample-{i:04}.vlmt");
        trace_names.push(name.clone());
        files.push((name, bytes));
    }
    let summary = json!({
        "command": "simulate",
        "config": config,
        "mode": mode,
        "samples": dataset.len(),
        "accuracy": accuracy,
        "baseline_accuracy": baseline,
        "traces": trace_names,
    });
    files.push(("accuracy.json".into(), json_bytes(&summary)));
    emit(&args.out, files)?;
    Ok(summary)
}

pub(crate) fn pid(args: PidArgs) -> Outcome {
    let text = std::fs::read_to_string(&args.input)?;
    let joint = TripleJoint::from_json(&text)?;
    let result = pid_decompose(&joint)?;
    let summary = json!({ "command": "pid", "shape": joint.shape(), "result": result });
    let written = emit(&args.out, vec![("pid.json".into(), json_bytes(&summary))])?;
    let mut summary = summary;
    summary["files"] = json!(written);
    Ok(summary)
}

pub(crate) fn info_bounds(args: InfoBoundsArgs) -> Outcome {
    let seed = resolve_seed(args.seed)?;
    let (trace, _) = read_trace_file(&args.trace)?;
    let modalities: Vec<Modality> = match &args.modality {
        Some(m) => vec![parse_modality(m)?],
        None => Modality::ALL.into_iter().filter(|&m| trace.count_of(m) > 0).collect(),
    };
    let layers: Vec<usize> = match args.layer {
        Some(l) => vec![l],
        None => (1..trace.layer_count).collect(),
    };
    let mut rows = Vec::new();
    for &l in &layers {
        for &m in &modalities {
            rows.push(layer_bounds(&trace, l, m, args.k, args.t, seed)?);
        }
    }
    let violations = rows.iter().filter(|r| !r.report.holds(1e-9)).count();
    let out: &OutputArgs = &args.output;
    let mut files = Vec::new();
    if out.wants(Format::Csv) {
        files.push(("bounds.csv".into(), csv_bytes(|b| write_bounds_csv(&rows, b))?));
    }
    if out.wants(Format::Json) {
        files.push(("bounds.json".into(), json_bytes(&rows)));
    }
    let written = emit(&out.out, files)?;
    Ok(json!({
        "command": "info-bounds",
        "rows": rows.len(),
        "violations": violations,
        "seed": seed,
        "files": written,
    }))
}
