use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use serde::Serialize;

use pothole_core::dataset::{
    self, AnnotationLine, ConversionMode, Dataset, DatasetError, Detection, DetectionLine, Issue,
    IssueKind,
};
use pothole_core::geometry::{self, BoundingBox};
use pothole_core::hazard::{self, PipelineConfig, ReplaySummary};
use pothole_core::losses::{run_self_check, CheckOutcome};
use pothole_core::metrics::{self, Evaluation, OperatingPoint, Protocol, RECALL_SAMPLES};
use pothole_core::output::{self, RealFormat};
use pothole_core::stats::{self, BoxplotSummary, TuningRecommendation};

use crate::{
    Command, Context, ConvertArgs, CurvesArgs, EvalArgs, Failure, KindArg, LossCheckArgs, ModeArg,
    NmsArgs, ProtocolArg, SimulateArgs, StatsArgs, ValidateArgs, EXIT_INVALID, EXIT_OK,
};

type Outcome = Result<i32, Failure>;

pub(crate) fn execute(command: Command, ctx: &mut Context<'_>) -> Outcome {
    match command {
        Command::Validate(a) => validate(a, ctx),
        Command::Stats(a) => stats(a, ctx),
        Command::Eval(a) => eval(a, ctx),
        Command::Curves(a) => curves(a, ctx),
        Command::Nms(a) => nms(a, ctx),
        Command::LossCheck(a) => loss_check(a, ctx),
        Command::Simulate(a) => simulate(a, ctx),
        Command::Convert(a) => convert(a, ctx),
    }
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("opening {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
}

/// Writes the JSON report to `path`, or to standard output.
fn emit<T: Serialize>(
    ctx: &mut Context<'_>,
    value: &T,
    path: Option<&Path>,
) -> Result<(), Failure> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            output::write_pretty(&mut w, value, ctx.reals)?;
            writeln!(w)?;
            w.flush()
                .with_context(|| format!("writing {}", p.display()))?;
        }
        None => {
            output::write_pretty(&mut *ctx.out, value, ctx.reals)?;
            writeln!(ctx.out)?;
        }
    }
    Ok(())
}

fn note(ctx: &mut Context<'_>, text: impl AsRef<str>) {
    let _ = writeln!(ctx.err, "{}", text.as_ref());
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    dataset::load_annotations(path).with_context(|| format!("annotations {}", path.display()))
}

fn load_detections(
    ctx: &mut Context<'_>,
    path: &Path,
    ds: &Dataset,
) -> anyhow::Result<Vec<Detection>> {
    let loaded = dataset::load_detections(path, ds)
        .with_context(|| format!("detections {}", path.display()))?;
    for w in &loaded.warnings {
        note(ctx, format!("warning: {}: {w}", path.display()));
    }
    Ok(loaded.detections)
}

// ---------------------------------------------------------------- validate

#[derive(Serialize)]
struct FileCheck {
    path: String,
    records: usize,
    boxes: usize,
    errors: Vec<Issue>,
    warnings: Vec<Issue>,
}

#[derive(Serialize)]
struct ValidateReport {
    valid: bool,
    annotations: FileCheck,
    #[serde(skip_serializing_if = "Option::is_none")]
    detections: Option<FileCheck>,
}

fn validate(args: ValidateArgs, ctx: &mut Context<'_>) -> Outcome {
    let (ds, ann_issues) = dataset::parse_annotations(open(&args.annotations)?)
        .with_context(|| format!("reading {}", args.annotations.display()))?;
    let annotations = FileCheck {
        path: args.annotations.display().to_string(),
        records: ds.images().len(),
        boxes: ds.annotations().len(),
        errors: ann_issues,
        warnings: Vec::new(),
    };
    let detections = match &args.detections {
        Some(path) => {
            let (loaded, issues) = dataset::parse_detections(open(path)?, &ds)
                .with_context(|| format!("reading {}", path.display()))?;
            Some(FileCheck {
                path: path.display().to_string(),
                records: loaded.detections.len() + issues.len(),
                boxes: loaded.detections.len(),
                errors: issues,
                warnings: loaded.warnings,
            })
        }
        None => None,
    };
    let checks = std::iter::once(&annotations).chain(detections.as_ref());
    let mut n_errors = 0;
    for check in checks {
        for issue in &check.errors {
            note(ctx, format!("{}: {issue}", check.path));
        }
        for issue in &check.warnings {
            note(ctx, format!("{}: warning: {issue}", check.path));
        }
        n_errors += check.errors.len();
    }
    note(
        ctx,
        format!(
            "validate: {} image(s), {} annotation(s){}; {} error(s)",
            annotations.records,
            annotations.boxes,
            detections
                .as_ref()
                .map_or(String::new(), |d| format!(", {} detection(s)", d.boxes)),
            n_errors
        ),
    );
    let report = ValidateReport {
        valid: n_errors == 0,
        annotations,
        detections,
    };
    emit(ctx, &report, args.out.as_deref())?;
    Ok(if report.valid { EXIT_OK } else { EXIT_INVALID })
}

// ---------------------------------------------------------------- stats

#[derive(Serialize)]
struct StatsReport {
    images: usize,
    annotations: usize,
    aspect_ratio: BoxplotSummary,
    area_px: BoxplotSummary,
    area_fraction: BoxplotSummary,
    recommendation: TuningRecommendation,
}

fn stats(args: StatsArgs, ctx: &mut Context<'_>) -> Outcome {
    let ds = load_dataset(&args.annotations)?;
    if ds.annotations().is_empty() {
        return Err(Failure::Invalid(anyhow!(
            "{} has no boxes to summarize",
            args.annotations.display()
        )));
    }
    let ratios = stats::aspect_ratios(&ds)?;
    let areas = stats::areas(&ds)?;
    let fractions = stats::area_fractions(&ds)?;
    let report = StatsReport {
        images: ds.images().len(),
        annotations: ds.annotations().len(),
        aspect_ratio: stats::boxplot(&ratios)?,
        area_px: stats::boxplot(&areas)?,
        area_fraction: stats::boxplot(&fractions)?,
        recommendation: stats::recommend_tuning(&ds, &args.resolution)?,
    };

    if let Some(path) = &args.csv_out {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record([
            "image_id",
            "image_width",
            "image_height",
            "box_width",
            "box_height",
            "aspect_ratio",
            "area_px",
            "area_fraction",
        ])
        .context("writing box CSV")?;
        for (i, a) in ds.annotations().iter().enumerate() {
            let img = ds.image(&a.image_id).expect("annotation image exists");
            w.write_record([
                a.image_id.clone(),
                img.width.to_string(),
                img.height.to_string(),
                a.bbox.width().to_string(),
                a.bbox.height().to_string(),
                ratios[i].to_string(),
                areas[i].to_string(),
                fractions[i].to_string(),
            ])
            .context("writing box CSV")?;
        }
        w.flush()
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.summary_csv {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record([
            "quantity",
            "n",
            "q1",
            "median",
            "q3",
            "iqr",
            "lower_limit",
            "upper_limit",
            "lower_whisker",
            "upper_whisker",
            "outliers",
        ])
        .context("writing summary CSV")?;
        for (name, b) in [
            ("aspect_ratio", &report.aspect_ratio),
            ("area_px", &report.area_px),
            ("area_fraction", &report.area_fraction),
        ] {
            let mut row = vec![name.to_string(), b.n.to_string()];
            row.extend(
                [
                    b.q1,
                    b.median,
                    b.q3,
                    b.iqr,
                    b.lower_limit,
                    b.upper_limit,
                    b.lower_whisker,
                    b.upper_whisker,
                ]
                .iter()
                .map(f64::to_string),
            );
            row.push(
                b.outliers
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(" "),
            );
            w.write_record(&row).context("writing summary CSV")?;
        }
        w.flush()
            .with_context(|| format!("writing {}", path.display()))?;
    }

    let rec = &report.recommendation;
    note(
        ctx,
        format!(
            "stats: {} box(es) in {} image(s); aspect ratio quartiles {:.3} / {:.3} / {:.3}; anchor ratios {:?}",
            report.annotations,
            report.images,
            report.aspect_ratio.q1,
            report.aspect_ratio.median,
            report.aspect_ratio.q3,
            rec.aspect_ratio_set
        ),
    );
    for p in &rec.projected_area_at {
        note(
            ctx,
            format!(
                "  median box at {}x{}: {:.1} px² (~{:.0}² px)",
                p.width,
                p.height,
                p.median_area_px,
                p.median_area_px.sqrt()
            ),
        );
    }
    emit(ctx, &report, args.out.as_deref())?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- eval / curves

#[derive(Serialize)]
struct ThresholdResult {
    iou_threshold: f64,
    ap: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    interpolated_precision: [f64; RECALL_SAMPLES],
    operating_point: Option<OperatingPoint>,
}

impl From<&Evaluation> for ThresholdResult {
    fn from(e: &Evaluation) -> Self {
        Self {
            iou_threshold: e.curve.iou_threshold,
            ap: e.result.ap,
            tp: e.curve.tp(),
            fp: e.curve.fp(),
            fn_: e.curve.fn_count(),
            interpolated_precision: e.curve.interpolated,
            operating_point: e.curve.operating_point(),
        }
    }
}

#[derive(Serialize)]
struct EvalReport {
    protocol: Protocol,
    images: usize,
    annotations: usize,
    detections: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    map: Option<f64>,
    results: Vec<ThresholdResult>,
}

/// `base` itself for a single curve, otherwise `stem_iou<t>.ext`.
fn curve_path(base: &Path, threshold: f64, several: bool) -> PathBuf {
    if !several {
        return base.to_path_buf();
    }
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}_iou{threshold}.{}", ext.to_string_lossy()),
        None => format!("{stem}_iou{threshold}"),
    };
    base.with_file_name(name)
}

fn evaluate_all(
    ds: &Dataset,
    dets: &[Detection],
    thresholds: &[f64],
) -> anyhow::Result<Vec<Evaluation>> {
    thresholds
        .iter()
        .map(|&t| {
            metrics::pascal_map(ds, dets, t).with_context(|| format!("evaluating at IoU {t}"))
        })
        .collect()
}

fn write_curves(evals: &[Evaluation], base: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let several = evals.len() > 1;
    let mut written = Vec::new();
    for e in evals {
        let path = curve_path(base, e.curve.iou_threshold, several);
        metrics::export_curve(&e.curve, &path)
            .with_context(|| format!("writing curve {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

fn eval(args: EvalArgs, ctx: &mut Context<'_>) -> Outcome {
    let thresholds = match args.protocol {
        ProtocolArg::Pascal if args.iou.is_empty() => {
            vec![metrics::PASCAL_IOU, metrics::RELAXED_PASCAL_IOU]
        }
        ProtocolArg::Pascal => args.iou.clone(),
        ProtocolArg::Coco if args.iou.is_empty() => metrics::coco_thresholds().to_vec(),
        ProtocolArg::Coco => return Err(Failure::Usage(anyhow!(
            "--iou cannot be combined with --protocol coco (thresholds 0.50:0.05:0.95 are fixed)"
        ))),
    };
    let ds = load_dataset(&args.annotations)?;
    let dets = load_detections(ctx, &args.detections, &ds)?;
    let evals = evaluate_all(&ds, &dets, &thresholds)?;
    if let Some(base) = &args.curve_out {
        for path in write_curves(&evals, base)? {
            note(ctx, format!("curve written to {}", path.display()));
        }
    }

    let results: Vec<ThresholdResult> = evals.iter().map(ThresholdResult::from).collect();
    let (protocol, map) = match args.protocol {
        ProtocolArg::Pascal => (Protocol::Pascal, None),
        ProtocolArg::Coco => (
            Protocol::Coco,
            Some(results.iter().map(|r| r.ap).sum::<f64>() / results.len() as f64),
        ),
    };
    for r in &results {
        note(
            ctx,
            format!(
                "AP@{:<4} = {}  (tp {}, fp {}, fn {})",
                r.iou_threshold,
                ctx.reals.render(r.ap),
                r.tp,
                r.fp,
                r.fn_
            ),
        );
    }
    if let Some(m) = map {
        note(
            ctx,
            format!("COCO-style mAP@[.50:.95] = {}", ctx.reals.render(m)),
        );
    }
    let report = EvalReport {
        protocol,
        images: ds.images().len(),
        annotations: ds.annotations().len(),
        detections: dets.len(),
        map,
        results,
    };
    emit(ctx, &report, args.out.as_deref())?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct CurveSample {
    recall: f64,
    precision: f64,
}

#[derive(Serialize)]
struct CurveSummary {
    iou_threshold: f64,
    file: String,
    points: usize,
    ap: f64,
    interpolated: Vec<CurveSample>,
}

#[derive(Serialize)]
struct CurvesReport {
    curves: Vec<CurveSummary>,
}

fn curves(args: CurvesArgs, ctx: &mut Context<'_>) -> Outcome {
    let thresholds = if args.iou.is_empty() {
        vec![metrics::PASCAL_IOU]
    } else {
        args.iou.clone()
    };
    let ds = load_dataset(&args.annotations)?;
    let dets = load_detections(ctx, &args.detections, &ds)?;
    let evals = evaluate_all(&ds, &dets, &thresholds)?;
    let files = write_curves(&evals, &args.csv_out)?;
    let report = CurvesReport {
        curves: evals
            .iter()
            .zip(&files)
            .map(|(e, f)| CurveSummary {
                iou_threshold: e.curve.iou_threshold,
                file: f.display().to_string(),
                points: e.curve.points.len(),
                ap: e.result.ap,
                interpolated: e
                    .curve
                    .interpolated
                    .iter()
                    .enumerate()
                    .map(|(k, &precision)| CurveSample {
                        recall: metrics::recall_sample(k),
                        precision,
                    })
                    .collect(),
            })
            .collect(),
    };
    for c in &report.curves {
        note(
            ctx,
            format!("IoU {}: {} points -> {}", c.iou_threshold, c.points, c.file),
        );
    }
    emit(ctx, &report, args.out.as_deref())?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- nms

/// Reads a detection file without image information: only scores and box
/// shapes are checked.
fn read_free_detections(path: &Path) -> anyhow::Result<Vec<Detection>> {
    let (lines, mut issues) = dataset::read_json_lines::<DetectionLine, _>(open(path)?)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::with_capacity(lines.len());
    for (line, rec) in lines {
        if !(0.0..=1.0).contains(&rec.score) {
            issues.push(Issue {
                line,
                kind: IssueKind::Validation,
                message: format!("score {} outside [0, 1]", rec.score),
            });
            continue;
        }
        match rec.raw_box().to_box() {
            Ok(bbox) => out.push(Detection {
                image_id: rec.image_id,
                bbox,
                score: rec.score,
            }),
            Err(e) => issues.push(Issue {
                line,
                kind: IssueKind::Validation,
                message: e.to_string(),
            }),
        }
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        issues.sort_by_key(|i| i.line);
        Err(DatasetError::Invalid(issues)).with_context(|| format!("detections {}", path.display()))
    }
}

fn detection_line(d: &Detection) -> DetectionLine {
    DetectionLine {
        image_id: d.image_id.clone(),
        x_min: d.bbox.x_min(),
        y_min: d.bbox.y_min(),
        x_max: d.bbox.x_max(),
        y_max: d.bbox.y_max(),
        score: d.score,
    }
}

fn nms(args: NmsArgs, ctx: &mut Context<'_>) -> Outcome {
    let dets = match &args.annotations {
        Some(ann) => {
            let ds = load_dataset(ann)?;
            load_detections(ctx, &args.detections, &ds)?
        }
        None => read_free_detections(&args.detections)?,
    };

    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<(BoundingBox, f64)>> = HashMap::new();
    for d in &dets {
        groups
            .entry(d.image_id.as_str())
            .or_insert_with(|| {
                order.push(d.image_id.as_str());
                Vec::new()
            })
            .push((d.bbox, d.score));
    }
    let mut kept = Vec::new();
    for id in &order {
        for (bbox, score) in geometry::nms(&groups[id], args.iou) {
            kept.push(Detection {
                image_id: id.to_string(),
                bbox,
                score,
            });
        }
    }

    // Coordinates are data, not a report: always write them exactly.
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            for d in &kept {
                output::write_line(&mut w, &detection_line(d), RealFormat::Shortest)?;
            }
            w.flush()
                .with_context(|| format!("writing {}", path.display()))?;
        }
        None => {
            for d in &kept {
                output::write_line(&mut *ctx.out, &detection_line(d), RealFormat::Shortest)?;
            }
        }
    }
    note(
        ctx,
        format!(
            "nms: kept {} of {} detection(s) across {} image(s) at IoU {}",
            kept.len(),
            dets.len(),
            order.len(),
            args.iou
        ),
    );
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- loss-check

#[derive(Serialize)]
struct LossCheckReport {
    seed: u64,
    points: usize,
    passed: bool,
    checks: Vec<CheckOutcome>,
}

fn loss_check(args: LossCheckArgs, ctx: &mut Context<'_>) -> Outcome {
    if args.points == 0 {
        return Err(Failure::Usage(anyhow!("--points must be at least 1")));
    }
    let checks = run_self_check(args.seed, args.points);
    let width = checks
        .iter()
        .map(|c| c.name.chars().count())
        .max()
        .unwrap_or(0);
    for c in &checks {
        note(
            ctx,
            format!(
                "{:<width$}  {}  {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.detail
            ),
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    note(
        ctx,
        format!(
            "loss-check: {} passed, {} failed",
            checks.len() - failed,
            failed
        ),
    );
    let report = LossCheckReport {
        seed: args.seed,
        points: args.points,
        passed: failed == 0,
        checks,
    };
    emit(ctx, &report, args.out.as_deref())?;
    Ok(if report.passed { EXIT_OK } else { EXIT_INVALID })
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct SimulateReport {
    config: PipelineConfig,
    summary: ReplaySummary,
    warnings: Vec<hazard::WarningMessage>,
    cells: Vec<hazard::CellState>,
}

fn simulate(args: SimulateArgs, ctx: &mut Context<'_>) -> Outcome {
    let defaults = PipelineConfig::default();
    let config = PipelineConfig {
        cell_size_m: args.cell_size.unwrap_or(defaults.cell_size_m),
        report_threshold: args.threshold.unwrap_or(defaults.report_threshold),
        half_life_hours: args.half_life_hours.unwrap_or(defaults.half_life_hours),
        debounce_seconds: args.debounce_seconds.unwrap_or(defaults.debounce_seconds),
        rearm_confidence: args.rearm_confidence.unwrap_or(defaults.rearm_confidence),
    };
    config.validate().map_err(|e| Failure::Usage(e.into()))?;
    let report = hazard::replay(&args.events, config)
        .with_context(|| format!("replaying {}", args.events.display()))?;

    if let Some(path) = &args.warnings_out {
        let mut w = create(path)?;
        for warning in &report.warnings {
            output::write_line(&mut w, warning, ctx.reals)?;
        }
        w.flush()
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let s = report.summary;
    note(
        ctx,
        format!(
            "simulate: {} event(s), {} cell(s), {} warning(s)",
            s.events_ingested, s.cells_touched, s.warnings_emitted
        ),
    );
    let out = SimulateReport {
        config,
        summary: s,
        warnings: report.warnings,
        cells: report.cells,
    };
    emit(ctx, &out, args.out.as_deref())?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- convert

#[derive(Serialize)]
struct ConvertReport {
    input: String,
    output: String,
    kind: &'static str,
    mode: &'static str,
    records: usize,
    boxes: usize,
}

fn convert_lines<T, F>(reader: impl BufRead, mut convert: F) -> anyhow::Result<Vec<T>>
where
    T: serde::de::DeserializeOwned,
    F: FnMut(T) -> Result<T, DatasetError>,
{
    let (lines, mut issues) = dataset::read_json_lines::<T, _>(reader)?;
    let mut out = Vec::with_capacity(lines.len());
    for (line, rec) in lines {
        match convert(rec) {
            Ok(r) => out.push(r),
            Err(e) => issues.push(Issue {
                line,
                kind: IssueKind::Validation,
                message: e.to_string(),
            }),
        }
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        issues.sort_by_key(|i| i.line);
        Err(DatasetError::Invalid(issues).into())
    }
}

fn convert(args: ConvertArgs, ctx: &mut Context<'_>) -> Outcome {
    let mode = match args.mode {
        ModeArg::InclusiveToHalfOpen => ConversionMode::InclusiveToHalfOpen,
        ModeArg::HalfOpenToInclusive => ConversionMode::HalfOpenToInclusive,
    };
    let reader = open(&args.input)?;
    let context = || format!("converting {}", args.input.display());
    let (records, boxes, text) = match args.kind {
        KindArg::Annotations => {
            let lines = convert_lines(reader, |l: AnnotationLine| {
                dataset::convert_annotation_line(l, mode)
            })
            .with_context(context)?;
            let boxes = lines.iter().map(|l| l.boxes.len()).sum();
            let mut buf = Vec::new();
            for l in &lines {
                output::write_line(&mut buf, l, RealFormat::Shortest)?;
            }
            (lines.len(), boxes, buf)
        }
        KindArg::Detections => {
            let lines = convert_lines(reader, |l: DetectionLine| {
                dataset::convert_detection_line(l, mode)
            })
            .with_context(context)?;
            let mut buf = Vec::new();
            for l in &lines {
                output::write_line(&mut buf, l, RealFormat::Shortest)?;
            }
            (lines.len(), lines.len(), buf)
        }
    };
    std::fs::write(&args.output, text)
        .with_context(|| format!("writing {}", args.output.display()))?;
    note(
        ctx,
        format!(
            "convert: {records} record(s), {boxes} box(es) -> {}",
            args.output.display()
        ),
    );
    let report = ConvertReport {
        input: args.input.display().to_string(),
        output: args.output.display().to_string(),
        kind: match args.kind {
            KindArg::Annotations => "annotations",
            KindArg::Detections => "detections",
        },
        mode: match args.mode {
            ModeArg::InclusiveToHalfOpen => "inclusive-to-half-open",
            ModeArg::HalfOpenToInclusive => "half-open-to-inclusive",
        },
        records,
        boxes,
    };
    emit(ctx, &report, args.out.as_deref())?;
    Ok(EXIT_OK)
}
