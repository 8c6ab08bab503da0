use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "fliplearn", version, about = "Segment nodules by erasing superpixels until a classifier flips")]
pub struct Cli {
    /// Plain-text `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides one config key, e.g. `--set agent_steps=2000`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Re-runs the command recorded in a run manifest and checks that its
    /// outputs come out identical.
    #[arg(long, value_name = "MANIFEST", conflicts_with_all = ["config", "overrides"])]
    pub from_manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Clone, Debug, PartialEq, Eq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generates phantoms with masks, boxes and nodule-free twins, split
    /// into train/val/test by synthetic patient.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the nodule/normal classifier.
    TrainClassifier {
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the pair of erasing agents for one stage.
    TrainAgents {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Stage-1 agents, required for stage 2.
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segments one image (`--image` and `--bbox`) or every record of a
    /// dataset manifest (`--manifest`).
    Segment {
        #[arg(long, conflicts_with = "manifest", requires = "bbox")]
        image: Option<PathBuf>,
        /// `x0,y0,w,h`
        #[arg(long)]
        bbox: Option<String>,
        /// Ground-truth mask for the single image.
        #[arg(long, requires = "image")]
        gt: Option<PathBuf>,
        #[arg(long, required_unless_present = "image")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores masks written by `segment` against a manifest's ground truth.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory of `segment`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segments with boxes shifted by a random offset from each band.
    BoxShiftStudy {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        /// Shift bands in pixels of a `shift_reference_width` wide image.
        #[arg(long, default_value = "0-10,10-20,20-30")]
        bands: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plots an erase-curve CSV as SVG.
    Curves {
        /// Curve CSV written by `segment`.
        #[arg(long)]
        curve: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainClassifier { .. } => "train-classifier",
            Command::TrainAgents { .. } => "train-agents",
            Command::Segment { .. } => "segment",
            Command::Evaluate { .. } => "evaluate",
            Command::BoxShiftStudy { .. } => "box-shift-study",
            Command::Curves { .. } => "curves",
        }
    }
}
