use std::path::Path;

use serde_json::json;
use zsfuse_core::attribution::{
    self, AttributionSettings, ImageMaskSchedule, TextMaskSchedule, TokenImportance,
};
use zsfuse_core::baselines::MatchMetric;
use zsfuse_core::eval::DEFAULT_MAX_FAILURE_FRACTION;
use zsfuse_core::prompts::LabelTemplate;
use zsfuse_core::{
    build_classifier, classify as classify_image, emit_report, evaluate as run_evaluation,
    load_manifest, ClassFeatureMode, ClassifierModel, EvalConfig, EvalMethod, ReportFormat,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{AttributeArgs, BuildArgs, CacheCommand, ClassifyArgs, EvaluateArgs, ModeArg};

const TOP_SHOWN: usize = 5;

fn read_input(path: &Path, what: &str) -> Result<Vec<u8>, CliError> {
    std::fs::read(path)
        .map_err(|e| CliError::usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn print_json(value: &impl serde::Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("output serializes")
    );
}

fn load_model(path: &Path) -> Result<ClassifierModel, CliError> {
    Ok(ClassifierModel::load(path)?)
}

pub fn build(args: &BuildArgs, mut config: RunConfig, json: bool) -> Result<(), CliError> {
    let (labels, manifest) = match (&args.labels, &args.manifest) {
        (Some(path), _) => {
            let text = String::from_utf8(read_input(path, "labels file")?)
                .map_err(|_| CliError::usage(format!("{} is not UTF-8", path.display())))?;
            let labels: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect();
            (labels, None)
        }
        (None, Some(path)) => {
            let m = load_manifest(path)?;
            (m.labels.clone(), Some(m))
        }
        (None, None) => return Err(CliError::usage("pass --labels or --manifest")),
    };

    let template = || -> Result<LabelTemplate, CliError> {
        if let Some(pattern) = &args.template {
            return LabelTemplate::new(pattern.clone(), args.dataset.clone())
                .map_err(CliError::usage);
        }
        if let Some(m) = manifest.as_ref().filter(|m| m.template_override.is_some()) {
            return Ok(m.label_template()?);
        }
        Ok(match (&args.dataset, &manifest) {
            (Some(tag), _) => LabelTemplate::for_dataset(tag),
            (None, Some(m)) => LabelTemplate::for_dataset(&m.name),
            (None, None) => LabelTemplate::default_template(),
        })
    };
    let mode = match args.mode {
        ModeArg::Labels => ClassFeatureMode::Labels,
        ModeArg::Template => ClassFeatureMode::Template {
            template: template()?,
        },
        ModeArg::Descriptions => ClassFeatureMode::Descriptions { k: args.k },
        ModeArg::Combined => ClassFeatureMode::Combined {
            k: args.k,
            template: template()?,
        },
    };
    mode.validate()?;

    let backends = config.backends()?;
    log::info!("building {} classes in {} mode", labels.len(), mode.name());
    let model = build_classifier(&labels, &mode, &backends, config.parallelism)?;
    write_output(&args.out, &model.to_bytes())?;
    config.mode = Some(mode);

    let counters = backends.counters();
    if json {
        print_json(&json!({
            "out": args.out,
            "classes": model.num_classes(),
            "dim": model.dim(),
            "mode": model.mode(),
            "backends": backends.identity(),
            "counters": counters,
            "run": config,
        }));
    } else {
        println!(
            "built {} classes x {} dims, mode {}, backends {}",
            model.num_classes(),
            model.dim(),
            model.mode().name(),
            backends.identity()
        );
        println!("wrote {}", args.out.display());
    }
    Ok(())
}

pub fn classify(args: &ClassifyArgs, config: &RunConfig, json: bool) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let image = read_input(&args.image, "image")?;
    let backends = config.backends()?;
    let prediction = classify_image(&image, &model, &config.inference, &backends)?;
    if json {
        print_json(&prediction);
        return Ok(());
    }
    println!("{}", prediction.class_label);
    for (rank, i) in prediction.top_k(TOP_SHOWN).into_iter().enumerate() {
        println!(
            "  {}. {} {:.6}",
            rank + 1,
            model.labels()[i],
            prediction.scores.as_slice()[i]
        );
    }
    for kind in &prediction.degraded {
        println!("note: {kind} feature unavailable, scored without it");
    }
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs, mut config: RunConfig, json: bool) -> Result<(), CliError> {
    let manifest = load_manifest(&args.manifest)?;
    let method = match &args.baseline {
        Some(b) => EvalMethod::Baseline {
            metric: b.parse::<MatchMetric>().map_err(CliError::usage)?,
        },
        None => EvalMethod::Fusion {
            options: config.inference,
        },
    };
    let model = match (&args.model, &method) {
        (Some(p), _) => Some(load_model(p)?),
        (None, EvalMethod::Fusion { .. }) => {
            return Err(CliError::usage("--model is required without --baseline"))
        }
        (None, EvalMethod::Baseline { .. }) => None,
    };
    let max_failure_fraction = args
        .max_failure_fraction
        .or(config.max_failure_fraction)
        .unwrap_or(DEFAULT_MAX_FAILURE_FRACTION);
    if !(0.0..=1.0).contains(&max_failure_fraction) {
        return Err(CliError::usage(format!(
            "max failure fraction {max_failure_fraction} is outside [0, 1]"
        )));
    }
    let eval_config = EvalConfig {
        method,
        max_failure_fraction,
        parallelism: config.parallelism,
    };

    let backends = config.backends()?;
    log::info!("evaluating {} images with {method}", manifest.records.len());
    let mut report = run_evaluation(&manifest, model.as_ref(), &eval_config, &backends)?;
    config.mode = model.as_ref().map(|m| m.mode().clone());
    report.config.run = Some(serde_json::to_value(&config).expect("run config serializes"));

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", args.out_dir.display())))?;
    let json_path = args.out_dir.join("report.json");
    let csv_path = args.out_dir.join("report.csv");
    write_output(&json_path, &emit_report(&report, ReportFormat::Json))?;
    write_output(&csv_path, &emit_report(&report, ReportFormat::Csv))?;

    if json {
        print_json(&json!({
            "method": method.to_string(),
            "evaluated": report.evaluated,
            "failed": report.failed,
            "degraded": report.degraded,
            "top1": report.top1,
            "top5": report.top5,
            "kappa": report.kappa,
            "counters": report.counters,
            "report_json": json_path,
            "report_csv": csv_path,
        }));
    } else {
        println!(
            "{method}: top1={:.4} top5={:.4} kappa={:.4} evaluated={} failed={} degraded={}",
            report.top1,
            report.top5,
            report.kappa,
            report.evaluated,
            report.failed,
            report.degraded
        );
    }
    Ok(())
}

fn top_words(tokens: &[TokenImportance], threshold: f64) -> Vec<&TokenImportance> {
    let mut hits: Vec<&TokenImportance> =
        tokens.iter().filter(|t| t.importance > threshold).collect();
    // Stable, so ties keep text order.
    hits.sort_by(|a, b| b.importance.total_cmp(&a.importance));
    hits.truncate(TOP_SHOWN);
    hits
}

pub fn attribute(args: &AttributeArgs, config: &RunConfig, json: bool) -> Result<(), CliError> {
    let settings = AttributionSettings {
        image: ImageMaskSchedule {
            kernel: args.kernel,
            stride: args.stride,
            growth: args.growth,
            max_kernel: args.max_kernel,
        },
        text: TextMaskSchedule {
            start_width: args.text_width,
            min_width: args.min_text_width,
        },
        threshold: args.threshold,
        strategy: config.inference.strategy,
        parallelism: config.parallelism,
        ..Default::default()
    };
    settings.image.validate()?;
    settings.text.validate()?;
    let model = load_model(&args.model)?;
    let image = read_input(&args.image, "image")?;
    let backends = config.backends()?;

    let map = attribution::attribute(&image, &model, &backends, &settings)?;
    let heatmap = attribution::render_heatmap(&map, &image)?;
    let sidecar = args.out.with_extension("json");
    write_output(&args.out, &heatmap)?;
    write_output(&sidecar, map.to_json().as_bytes())?;

    let description = top_words(&map.tokens.description, settings.threshold);
    let prediction = top_words(&map.tokens.prediction, settings.threshold);
    if json {
        print_json(&json!({
            "class_label": map.baseline_label,
            "score": map.baseline_score,
            "kernel_used": map.kernel_used,
            "image_highlighted": map.image_highlighted(),
            "top_words": { "description": description, "prediction": prediction },
            "heatmap": args.out,
            "sidecar": sidecar,
        }));
        return Ok(());
    }
    println!("{} {:.6}", map.baseline_label, map.baseline_score);
    println!("kernel_used: {}", map.kernel_used);
    if !map.image_highlighted() {
        println!("image: no highlights above {}", settings.threshold);
    }
    for (role, words) in [("description", description), ("prediction", prediction)] {
        if words.is_empty() {
            println!("{role}: no highlights above {}", settings.threshold);
        } else {
            let shown: Vec<String> = words
                .iter()
                .map(|t| format!("{} ({:.4})", t.word, t.importance))
                .collect();
            println!("{role}: {}", shown.join(", "));
        }
    }
    println!("wrote {} and {}", args.out.display(), sidecar.display());
    Ok(())
}

pub fn cache(command: &CacheCommand, config: &RunConfig, json: bool) -> Result<(), CliError> {
    let store = config.open_cache()?;
    match command {
        CacheCommand::Stats => {
            let stats = store.stats()?;
            if json {
                print_json(&stats);
            } else {
                println!("entries: {}", stats.entries);
                println!("bytes: {}", stats.bytes);
                for (identity, s) in &stats.by_identity {
                    println!("  {identity}: {} entries, {} bytes", s.entries, s.bytes);
                }
            }
            Ok(())
        }
        CacheCommand::Verify => {
            let report = store.verify()?;
            if json {
                print_json(&report);
            } else {
                println!(
                    "checked {} entries, {} corrupt",
                    report.checked,
                    report.corrupt.len()
                );
                for key in &report.corrupt {
                    println!("  corrupt: {key}");
                }
            }
            if report.corrupt.is_empty() {
                Ok(())
            } else {
                Err(CliError::runtime(format!(
                    "{} corrupt cache entries",
                    report.corrupt.len()
                )))
            }
        }
        CacheCommand::Clear { yes } => {
            if !yes {
                return Err(CliError::usage(format!(
                    "refusing to clear {} without --yes",
                    store.root().display()
                )));
            }
            let removed = store.clear()?;
            if json {
                print_json(&json!({ "removed": removed }));
            } else {
                println!("removed {removed} entries");
            }
            Ok(())
        }
    }
}
