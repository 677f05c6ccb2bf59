//! Command-line front end. [`run`] parses arguments and returns the process
//! exit code: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    load_ppm, load_record, parse_voc_xml, parse_yolo_txt, read_manifest, read_ppm_size, save_ppm,
    stratified_split_indices, synthetic_corpus, write_manifest, write_voc_xml, write_yolo_txt, AnnotationFormat,
    AnnotationRecord, ManifestEntry, SyntheticSceneSpec,
};
use crate::error::{ConfigError, Error, Result};
use crate::metrics::{
    parse_ground_truth, parse_results, write_ground_truth, write_results, DetectionResultSet, ImageResults,
    MetricsReport,
};
use crate::model::{classify_frame, Detector, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{
    apply_setting, eval_input, evaluate, fit, load_checkpoint, parse_config, prepare_samples, query_detections,
    save_checkpoint, write_config, OptimizerState, Sample, TrainConfig,
};
use crate::viz::{activation_map, heatmap_overlay, render_overlay, OverlayStyle};

#[derive(Parser, Debug)]
#[command(
    name = "bleedscope",
    version,
    about = "Bleeding-region detection for capsule-endoscopy frames"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a detector and write a checkpoint plus a per-epoch metrics log.
    Train(TrainArgs),
    /// Report accuracy, recall, F1, AP@50, mAP and recall@[.5:.95].
    Eval(EvalArgs),
    /// Predict frame labels and regions, optionally drawing overlays.
    Infer(InferArgs),
    /// Generate a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Convert annotations between VOC XML and YOLO txt.
    Convert(ConvertArgs),
    /// Write bleed activation maps blended over the input frames.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest (`image<TAB>annotation<TAB>format` lines).
    #[arg(long, conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    /// Use this many generated scenes instead of a manifest.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Seed of the generated scenes.
    #[arg(long, default_value_t = 0)]
    synthetic_seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Flat key=value training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Fraction of each frame label used for training.
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Output directory for model.ckpt, metrics.log and config.txt.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint's weights and optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Ground-truth file (`image_id category x0 y0 x1 y1`).
    #[arg(long, requires = "results", conflicts_with_all = ["checkpoint", "manifest"])]
    ground_truth: Option<PathBuf>,
    /// Detection results (`image_id category score x0 y0 x1 y1`).
    #[arg(long, requires = "ground_truth")]
    results: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frame decision threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-query detections of a checkpoint evaluation.
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Images to process (PPM).
    #[arg(long, num_args = 1.., required_unless_present = "manifest")]
    images: Vec<PathBuf>,
    #[arg(long, conflicts_with = "images")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Output directory for decisions.txt and overlays.
    #[arg(long)]
    out: PathBuf,
    /// Draw box overlays into `<out>/overlays`.
    #[arg(long)]
    overlay: bool,
    /// Include non-bleed regions in overlays.
    #[arg(long)]
    non_bleed: bool,
    #[arg(long)]
    scores: bool,
    #[arg(long, default_value_t = 1)]
    thickness: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Voc)]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Convert every annotation of a manifest into `--out` and write a new manifest there.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    manifest: Option<PathBuf>,
    /// Convert one annotation file.
    #[arg(long, requires = "output")]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Format of `--input`; guessed from the extension when absent.
    #[arg(long, value_enum)]
    from: Option<FormatArg>,
    #[arg(long, value_enum)]
    to: FormatArg,
    /// Image the single-file YOLO input belongs to (for its size).
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, num_args = 1.., required_unless_present = "manifest")]
    images: Vec<PathBuf>,
    #[arg(long, conflicts_with = "images")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Backbone stage to explain; the last one by default.
    #[arg(long)]
    stage: Option<usize>,
    /// Heatmap blending weight.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Voc,
    Yolo,
}

impl From<FormatArg> for AnnotationFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Voc => AnnotationFormat::Voc,
            FormatArg::Yolo => AnnotationFormat::Yolo,
        }
    }
}

fn extension(f: AnnotationFormat) -> &'static str {
    match f {
        AnnotationFormat::Voc => "xml",
        AnnotationFormat::Yolo | AnnotationFormat::Txt => "txt",
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) if matches!(e, Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Synth(a) => synth(a),
        Command::Convert(a) => convert(a),
        Command::Explain(a) => explain(a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn load_configs(path: Option<&Path>) -> Result<(TrainConfig, ModelConfig)> {
    match path {
        Some(p) => Ok(parse_config(&read_text(p)?)?),
        None => Ok((TrainConfig::default(), ModelConfig::default())),
    }
}

fn load_manifest_pairs(path: &Path) -> Result<Vec<(Tensor, AnnotationRecord)>> {
    read_manifest(path)?
        .iter()
        .map(|e| Ok((load_ppm(&e.image_path)?, load_record(e)?)))
        .collect()
}

fn load_data(args: &DataArgs, image_size: usize) -> Result<Vec<(Tensor, AnnotationRecord)>> {
    match (&args.manifest, args.synthetic) {
        (Some(m), _) => load_manifest_pairs(m),
        (None, Some(n)) => {
            let spec = SyntheticSceneSpec {
                image_size,
                seed: args.synthetic_seed,
                ..SyntheticSceneSpec::default()
            };
            spec.validate().map_err(ConfigError::Invalid)?;
            Ok(synthetic_corpus(&spec, n))
        }
        (None, None) => Err(ConfigError::Invalid("either --manifest or --synthetic is required".into()).into()),
    }
}

fn split_samples(samples: Vec<Sample>, ratio: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let labels: Vec<_> = samples.iter().map(|s| s.record.frame_label).collect();
    let (tr, va) = stratified_split_indices(&labels, ratio, seed)?;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| {
        idx.iter()
            .map(|&i| slots[i].take().expect("disjoint split"))
            .collect::<Vec<_>>()
    };
    let train = take(&tr);
    let val = take(&va);
    Ok((train, val))
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut cfg, mut mcfg) = load_configs(a.config.as_deref())?;
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: kv.clone(),
        })?;
        apply_setting(&mut cfg, &mut mcfg, k.trim(), v.trim())?;
    }
    cfg.validate()?;
    mcfg.validate()?;
    let (mut model, mut state) = match &a.resume {
        Some(p) => {
            let (m, s) = load_checkpoint(p)?;
            if m.config() != &mcfg {
                return Err(crate::error::CheckpointError::ConfigMismatch {
                    found: m.config().to_string(),
                    expected: mcfg.to_string(),
                }
                .into());
            }
            (m, s)
        }
        None => {
            let m = Detector::new(mcfg.clone(), cfg.seed)?;
            let s = OptimizerState::new(m.params());
            (m, s)
        }
    };
    let samples = prepare_samples(load_data(&a.data, mcfg.input_size)?, mcfg.input_size)?;
    let (train_set, val_set) = split_samples(samples, a.train_ratio, a.split_seed)?;
    log::info!(
        "training on {} images, validating on {}",
        train_set.len(),
        val_set.len()
    );
    create_dir(&a.out)?;
    write_text(&a.out.join("config.txt"), &write_config(&cfg, &mcfg))?;
    let log_path = a.out.join("metrics.log");
    let mut log_file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let t0 = Instant::now();
    fit(&mut model, &mut state, &train_set, &val_set, &cfg, |rec, _, _| {
        let line = rec.to_log_line();
        writeln!(log_file, "{line}").map_err(io_err(&log_path))?;
        log_file.flush().map_err(io_err(&log_path))?;
        log::info!("[{:.0}s] {line}", t0.elapsed().as_secs_f64());
        Ok(())
    })?;
    save_checkpoint(&a.out.join("model.ckpt"), &model, &state)?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let (mut cfg, _) = load_configs(a.config.as_deref())?;
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    let report = match (&a.ground_truth, &a.results, &a.checkpoint, &a.manifest) {
        (Some(g), Some(r), _, _) => {
            let results =
                DetectionResultSet::from_lines(parse_ground_truth(&read_text(g)?)?, parse_results(&read_text(r)?)?);
            let (preds, gts) = results.frame_labels(cfg.threshold);
            MetricsReport::compute(&preds, &gts, &results)?
        }
        (_, _, Some(c), Some(m)) => {
            let (model, _) = load_checkpoint(c)?;
            let size = model.config().input_size;
            let samples = prepare_samples(load_manifest_pairs(m)?, size)?;
            let (report, results) = evaluate(&model, &samples, &cfg)?;
            if let Some(d) = &a.detections {
                write_text(d, &write_results(&results))?;
            }
            report
        }
        _ => {
            return Err(
                ConfigError::Invalid("eval needs --ground-truth/--results or --checkpoint/--manifest".into()).into(),
            )
        }
    };
    emit(a.out.as_deref(), &report.to_key_values())
}

fn input_records(images: &[PathBuf], manifest: Option<&Path>) -> Result<Vec<(Tensor, AnnotationRecord)>> {
    if let Some(m) = manifest {
        return load_manifest_pairs(m);
    }
    images
        .iter()
        .map(|p| {
            let img = load_ppm(p)?;
            let size = read_ppm_size(p)?;
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let rec = AnnotationRecord::from_regions(id, p.to_string_lossy(), vec![], size)?;
            Ok((img, rec))
        })
        .collect()
}

fn infer(a: InferArgs) -> Result<()> {
    let (mut cfg, _) = load_configs(a.config.as_deref())?;
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    let style = OverlayStyle {
        thickness: a.thickness,
        show_scores: a.scores,
        include_non_bleed: a.non_bleed,
        ..OverlayStyle::default()
    };
    style.validate()?;
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let size = model.config().input_size;
    let pairs = input_records(&a.images, a.manifest.as_deref())?;
    create_dir(&a.out)?;
    if a.overlay {
        create_dir(&a.out.join("overlays"))?;
    }
    let mut decisions = String::new();
    let mut images = Vec::new();
    for (original, record) in pairs {
        let sample = Sample::new(original.clone(), record, size)?;
        let preds = model.predict(&eval_input(&sample, &cfg)?)?;
        let decision = classify_frame(&preds, cfg.threshold);
        let id = &sample.record.image_id;
        decisions.push_str(&format!(
            "{id}\t{}\t{}\n",
            decision.frame_label,
            decision.bleed_regions().count()
        ));
        if a.overlay {
            let drawn = render_overlay(&original, &decision, &style)?;
            save_ppm(&drawn, &a.out.join("overlays").join(format!("{id}.ppm")))?;
        }
        let detections = query_detections(&preds, sample.record.image_size);
        images.push(ImageResults {
            image_id: id.clone(),
            detections,
            ground_truth: sample.record.regions.clone(),
        });
    }
    write_text(&a.out.join("decisions.txt"), &decisions)?;
    write_text(
        &a.out.join("detections.txt"),
        &write_results(&DetectionResultSet { images }),
    )?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSceneSpec {
        image_size: a.size,
        seed: a.seed,
        ..SyntheticSceneSpec::default()
    };
    spec.validate().map_err(ConfigError::Invalid)?;
    let format = AnnotationFormat::from(a.format);
    for sub in ["images", "annotations"] {
        create_dir(&a.out.join(sub))?;
    }
    let mut entries = Vec::with_capacity(a.count);
    let mut gt = Vec::with_capacity(a.count);
    for (img, rec) in synthetic_corpus(&spec, a.count) {
        let image_rel = PathBuf::from("images").join(format!("{}.ppm", rec.image_id));
        let ann_rel = PathBuf::from("annotations").join(format!("{}.{}", rec.image_id, extension(format)));
        save_ppm(&img, &a.out.join(&image_rel))?;
        let mut rec = rec;
        rec.image_path = image_rel.to_string_lossy().into_owned();
        let text = match format {
            AnnotationFormat::Voc => write_voc_xml(&rec),
            _ => write_yolo_txt(&rec),
        };
        write_text(&a.out.join(&ann_rel), &text)?;
        entries.push(ManifestEntry {
            image_path: image_rel,
            annotation_path: ann_rel,
            format,
        });
        gt.push(ImageResults {
            image_id: rec.image_id.clone(),
            detections: vec![],
            ground_truth: rec.regions.clone(),
        });
    }
    write_manifest(&a.out.join("manifest.tsv"), &entries)?;
    write_text(
        &a.out.join("ground_truth.txt"),
        &write_ground_truth(&DetectionResultSet { images: gt }),
    )?;
    Ok(())
}

fn render(rec: &AnnotationRecord, to: AnnotationFormat) -> String {
    match to {
        AnnotationFormat::Voc => write_voc_xml(rec),
        _ => write_yolo_txt(rec),
    }
}

fn convert(a: ConvertArgs) -> Result<()> {
    let to = AnnotationFormat::from(a.to);
    if let Some(m) = &a.manifest {
        let out = a
            .out
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("--manifest conversion needs --out".into()))?;
        create_dir(&out.join("annotations"))?;
        let mut entries = Vec::new();
        for e in read_manifest(m)? {
            let rec = load_record(&e)?;
            let ann_rel = PathBuf::from("annotations").join(format!("{}.{}", rec.image_id, extension(to)));
            write_text(&out.join(&ann_rel), &render(&rec, to))?;
            let image_path = fs::canonicalize(&e.image_path).map_err(io_err(&e.image_path))?;
            entries.push(ManifestEntry {
                image_path,
                annotation_path: ann_rel,
                format: to,
            });
        }
        write_manifest(&out.join("manifest.tsv"), &entries)?;
        return Ok(());
    }
    let input = a.input.as_ref().expect("clap requires --input or --manifest");
    let output = a.output.as_ref().expect("clap requires --output with --input");
    let from = match a.from {
        Some(f) => AnnotationFormat::from(f),
        None => match input.extension().and_then(|e| e.to_str()) {
            Some("xml") => AnnotationFormat::Voc,
            Some("txt") => AnnotationFormat::Yolo,
            _ => {
                return Err(ConfigError::Invalid(format!(
                    "cannot guess the format of {}; pass --from",
                    input.display()
                ))
                .into())
            }
        },
    };
    let text = read_text(input)?;
    let rec = match from {
        AnnotationFormat::Voc => parse_voc_xml(&text)?,
        _ => {
            let image = a
                .image
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("YOLO input needs --image for the frame size".into()))?;
            let size = read_ppm_size(image)?;
            let id = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            AnnotationRecord::from_regions(id, image.to_string_lossy(), parse_yolo_txt(&text, size)?, size)?
        }
    };
    write_text(output, &render(&rec, to))
}

fn explain(a: ExplainArgs) -> Result<()> {
    let (cfg, _) = load_configs(a.config.as_deref())?;
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(ConfigError::Invalid(format!("alpha {} outside [0, 1]", a.alpha)).into());
    }
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let size = model.config().input_size;
    create_dir(&a.out)?;
    for (original, record) in input_records(&a.images, a.manifest.as_deref())? {
        let sample = Sample::new(original, record, size)?;
        let map = activation_map(&model, &eval_input(&sample, &cfg)?, a.stage)?;
        let blended = heatmap_overlay(&sample.image, &map, a.alpha)?;
        save_ppm(&blended, &a.out.join(format!("{}.ppm", sample.record.image_id)))?;
    }
    Ok(())
}
