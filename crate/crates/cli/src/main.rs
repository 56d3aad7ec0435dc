//! `fishdet`: command-line front end for the detection pipeline toolkit.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fishdet_core::PartitionRule;

#[derive(Parser)]
#[command(name = "fishdet", version, about = "Fisheye vehicle-detection pipeline tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate detections against ground truth.
    Eval(EvalArgs),
    /// Fuse several models' detections image by image.
    Ensemble(EnsembleArgs),
    /// Split images into day and night lists with a separator checkpoint.
    Route(RouteArgs),
    /// Greedy non-maximum suppression per image.
    Nms(NmsArgs),
    /// Turn raw head grids into detections.
    Decode(DecodeArgs),
    /// Cluster box sizes into nine anchors.
    Anchors(AnchorsArgs),
    /// Train the day-night separator.
    SeparatorTrain(SeparatorTrainArgs),
    /// Keep the records of one data partition.
    Partition(PartitionArgs),
    /// List images whose per-image mAP falls below a threshold.
    SelectChallenging(SelectChallengingArgs),
    /// Repeat challenging records in a manifest.
    Upsample(UpsampleArgs),
    /// Space-to-depth rearrangement of an image or tensor.
    Focus(FocusArgs),
    /// Turn detections into a pseudo-labelled manifest.
    IngestPseudo(IngestPseudoArgs),
}

#[derive(Args)]
struct ManifestOut {
    /// Record file to write (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Annotation file to write.
    #[arg(long)]
    annotations_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    det: PathBuf,
    /// IoU for a true positive.
    #[arg(long, default_value_t = fishdet_core::evaluation::DEFAULT_EVAL_IOU)]
    iou: f64,
    /// Confidence cutoff for the TP/FP/FN counts.
    #[arg(long, default_value_t = fishdet_core::postprocess::DEFAULT_CONF_THRESHOLD)]
    conf: f64,
    /// Comma-separated confidence sweep for mean precision and recall.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
pub struct EnsembleArgs {
    /// Detection file of one model; repeat for each model.
    #[arg(long = "det", required = true)]
    dets: Vec<PathBuf>,
    #[arg(long, default_value_t = fishdet_core::postprocess::DEFAULT_ENSEMBLE_IOU)]
    iou: f64,
    /// Run NMS at this IoU on each model's detections before fusing.
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct RouteArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image list: `path` or `image_id path` per line.
    #[arg(long)]
    images: PathBuf,
    /// Day probability at or above which an image is routed to day.
    #[arg(long, default_value_t = fishdet_core::separator::DEFAULT_DAY_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    day_out: Option<PathBuf>,
    #[arg(long)]
    night_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct NmsArgs {
    #[arg(long)]
    det: PathBuf,
    #[arg(long, default_value_t = fishdet_core::postprocess::DEFAULT_NMS_IOU)]
    iou: f64,
    /// Drop detections below this confidence first.
    #[arg(long)]
    conf: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Raw grid dump.
    #[arg(long)]
    raw: PathBuf,
    #[arg(long, default_value_t = fishdet_core::postprocess::DEFAULT_CONF_THRESHOLD)]
    conf: f64,
    /// Run NMS at this IoU on each image's decoded boxes.
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Divide coordinates by the network input size (grid size x stride).
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnchorsArgs {
    /// Ground-truth file with normalized boxes.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    gt: Option<PathBuf>,
    /// Pixel width the `--gt` boxes are scaled to.
    #[arg(long, default_value_t = 640)]
    width: u32,
    /// Pixel height the `--gt` boxes are scaled to.
    #[arg(long, default_value_t = 640)]
    height: u32,
    /// Manifest records; boxes are scaled by each record's own size.
    #[arg(long, requires = "annotations")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SeparatorTrainArgs {
    /// Manifest whose `day`/`night` records are the training set.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = fishdet_core::separator::DEFAULT_INPUT_SIDE)]
    input_side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct PartitionArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    rule: PartitionRule,
    #[command(flatten)]
    output: ManifestOut,
}

#[derive(Args)]
pub struct SelectChallengingArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    det: PathBuf,
    #[arg(long, default_value_t = fishdet_core::evaluation::DEFAULT_EVAL_IOU)]
    iou: f64,
    /// Images scoring strictly below this are selected.
    #[arg(long, default_value_t = config::DEFAULT_CHALLENGING_MAP)]
    map_threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct UpsampleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// File with one challenging image id per line.
    #[arg(long)]
    challenging: PathBuf,
    #[arg(long, default_value_t = fishdet_core::datasets::DEFAULT_UPSAMPLE_FACTOR)]
    factor: usize,
    #[command(flatten)]
    output: ManifestOut,
}

#[derive(Args)]
pub struct FocusArgs {
    /// PNG/JPEG image or `.tensor` text file.
    #[arg(long)]
    input: PathBuf,
    /// Apply the inverse rearrangement.
    #[arg(long)]
    inverse: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct IngestPseudoArgs {
    #[arg(long)]
    det: PathBuf,
    /// Manifest naming the images the detections belong to.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = fishdet_core::datasets::DEFAULT_PSEUDO_MIN_CONFIDENCE)]
    min_conf: f64,
    #[command(flatten)]
    output: ManifestOut,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(a) => commands::eval(a),
        Command::Ensemble(a) => commands::ensemble(a),
        Command::Route(a) => commands::route(a),
        Command::Nms(a) => commands::nms(a),
        Command::Decode(a) => commands::decode(a),
        Command::Anchors(a) => commands::anchors(a),
        Command::SeparatorTrain(a) => commands::separator_train(a),
        Command::Partition(a) => commands::partition(a),
        Command::SelectChallenging(a) => commands::select_challenging(a),
        Command::Upsample(a) => commands::upsample(a),
        Command::Focus(a) => commands::focus(a),
        Command::IngestPseudo(a) => commands::ingest_pseudo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fishdet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
