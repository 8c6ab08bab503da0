//! Command-line experiments: dataset generation, training, segmentation,
//! evaluation, the box-shift study and erase-curve plots. Every command
//! writes a [`RunManifest`] next to its outputs.

pub mod cli;
pub mod config;
pub mod curves;
pub mod manifest;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Parser;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{self, QNetwork};
use crate::classifier::{self, ClassifierModel, Example};
use crate::env::Scene;
use crate::error::{Error, Result};
use crate::fill::{self, MIN_FLANK};
use crate::imaging::{self, BoundingBox, GrayImage, Mask};
use crate::metrics::{self, Aggregate, MetricReport, Summary};
use crate::pipeline::{self, StageResult};

pub use cli::{Cli, Command};
pub use config::{derive_seed, Config};
pub use manifest::{FileDigest, RunManifest};

/// Flank kept free on both sides of every generated box so that shifted
/// boxes still have fill sources.
pub const GEN_FLANK: usize = 2 * MIN_FLANK;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Param(_) => 2,
        Error::Divergence { .. } => 4,
        Error::MissingArtifact { .. } => 5,
        _ => 3,
    }
}

/// Parses `args` (program name first), runs, reports errors on stderr and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_cli(cli) {
        Ok(m) => {
            eprintln!("{}: wrote {} files", m.command.name(), m.outputs.len());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run_cli(cli: Cli) -> Result<RunManifest> {
    if let Some(path) = cli.from_manifest {
        if cli.command.is_some() {
            return Err(Error::Usage("--from-manifest replays a recorded command; drop the subcommand".into()));
        }
        return replay(&path);
    }
    let command = cli
        .command
        .ok_or_else(|| Error::Usage("a subcommand or --from-manifest is required".into()))?;
    let mut config = Config::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| not_found(path, e))?;
        config.apply_text(&text)?;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    execute(&command, &config)
}

/// Re-runs a recorded command with its recorded config and fails unless
/// every output comes out byte-identical.
pub fn replay(path: &Path) -> Result<RunManifest> {
    let old = RunManifest::load(path)?;
    let new = execute(&old.command, &old.config)?;
    let fresh: BTreeMap<&Path, &str> = new.outputs.iter().map(|d| (d.path.as_path(), d.sha256.as_str())).collect();
    let differing: Vec<String> = old
        .outputs
        .iter()
        .filter(|d| fresh.get(d.path.as_path()) != Some(&d.sha256.as_str()))
        .map(|d| d.path.display().to_string())
        .collect();
    if !differing.is_empty() {
        return Err(Error::Data(format!("replay produced different outputs: {}", differing.join(", "))));
    }
    Ok(new)
}

fn not_found(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact {
            path: path.to_path_buf(),
            detail: "file not found".into(),
        }
    } else {
        Error::Io(e)
    }
}

/// Files and seeds touched by one command.
#[derive(Default)]
struct Run {
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    seeds: BTreeMap<String, u64>,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(path, contents)?;
        self.output(path)
    }

    fn seed(&mut self, root: u64, purpose: &str) -> u64 {
        let s = derive_seed(root, purpose);
        self.seeds.insert(purpose.to_string(), s);
        s
    }
}

pub fn execute(command: &Command, config: &Config) -> Result<RunManifest> {
    let started_unix = manifest::unix_now();
    let mut run = Run::default();
    run.seeds.insert("root".into(), config.seed);
    let (out, manifest_name) = match command {
        Command::GenData { out } => {
            gen_data(out, config, &mut run)?;
            (out, "gen-data".to_string())
        }
        Command::TrainClassifier { data, out } => {
            train_classifier(data, out, config, &mut run)?;
            (out, "train-classifier".to_string())
        }
        Command::TrainAgents {
            stage,
            data,
            classifier,
            stage1,
            out,
        } => {
            train_agents(*stage, data, classifier, stage1.as_deref(), out, config, &mut run)?;
            (out, format!("train-agents-stage{stage}"))
        }
        Command::Segment {
            image,
            bbox,
            gt,
            manifest,
            classifier,
            stage1,
            stage2,
            out,
        } => {
            let bbox = match (image, bbox) {
                (Some(_), None) => return Err(Error::Usage("--image needs --bbox".into())),
                (Some(_), Some(b)) => Some(parse_bbox(b)?),
                (None, _) => None,
            };
            let models = Models::load(classifier, stage1, stage2, &mut run)?;
            let samples = match (image, manifest) {
                (Some(image), _) => vec![single_sample(image, bbox.expect("checked above"), gt.as_deref(), &mut run)?],
                (None, Some(m)) => load_samples(m, false, &mut run)?,
                (None, None) => return Err(Error::Usage("segment needs --image or --manifest".into())),
            };
            segment(&samples, &models, out, config, &mut run)?;
            (out, "segment".to_string())
        }
        Command::Evaluate { manifest, pred, out } => {
            evaluate(manifest, pred, out, &mut run)?;
            (out, "evaluate".to_string())
        }
        Command::BoxShiftStudy {
            manifest,
            classifier,
            stage1,
            stage2,
            bands,
            out,
        } => {
            let bands = parse_bands(bands)?;
            let models = Models::load(classifier, stage1, stage2, &mut run)?;
            let samples = load_samples(manifest, false, &mut run)?;
            box_shift_study(&samples, &models, &bands, out, config, &mut run)?;
            (out, "box-shift-study".to_string())
        }
        Command::Curves { curve, out } => {
            run.input(curve)?;
            let text = std::fs::read_to_string(curve).map_err(|e| not_found(curve, e))?;
            let rows = curves::parse_curve_csv(&text, &curve.display().to_string())?;
            let svg = curves::render_svg(&rows, config.beta)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            run.write(out, svg)?;
            let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let stem = out.file_stem().map_or("curves".into(), |s| s.to_string_lossy().into_owned());
            let m = finish(command, config, run, started_unix);
            m.save(&dir.join(format!("{stem}.manifest.json")))?;
            return Ok(m);
        }
    };
    let m = finish(command, config, run, started_unix);
    m.save(&out.join(format!("{manifest_name}.manifest.json")))?;
    Ok(m)
}

fn finish(command: &Command, config: &Config, run: Run, started_unix: u64) -> RunManifest {
    RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        content_hash: manifest::content_hash(command, config, &run.inputs),
        command: command.clone(),
        config: config.clone(),
        seeds: run.seeds,
        inputs: run.inputs,
        outputs: run.outputs,
        started_unix,
        finished_unix: manifest::unix_now(),
    }
}

/// Applies `f` to every item on a pool of scoped worker threads; results
/// come back in input order.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                done.lock().expect("worker panicked").push((i, r));
            });
        }
    });
    let mut done = done.into_inner().expect("worker panicked");
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}

// ---------------------------------------------------------------------------
// Datasets

/// One dataset record with its pixels loaded.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask: Option<Mask>,
    pub bbox: BoundingBox,
    /// Same tissue without the nodule, when the generator wrote one.
    pub normal: Option<GrayImage>,
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn read_image(path: &Path, run: &mut Run) -> Result<GrayImage> {
    if !path.exists() {
        return Err(not_found(path, std::io::ErrorKind::NotFound.into()));
    }
    run.input(path)?;
    imaging::load_image(path)
}

fn read_mask(path: &Path, run: &mut Run) -> Result<Mask> {
    if !path.exists() {
        return Err(not_found(path, std::io::ErrorKind::NotFound.into()));
    }
    run.input(path)?;
    imaging::load_mask(path)
}

/// Loads every record of a dataset manifest; paths resolve against the
/// manifest's directory, twins are looked up under `normal/`.
pub fn load_samples_from(manifest: &Path, with_normal: bool) -> Result<Vec<Sample>> {
    load_samples(manifest, with_normal, &mut Run::default())
}

fn load_samples(manifest: &Path, with_normal: bool, run: &mut Run) -> Result<Vec<Sample>> {
    if !manifest.exists() {
        return Err(not_found(manifest, std::io::ErrorKind::NotFound.into()));
    }
    run.input(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for r in imaging::read_manifest(manifest)? {
        let id = stem(&r.image);
        let image = read_image(&dir.join(&r.image), run)?;
        let mask = read_mask(&dir.join(&r.mask), run)?;
        if !r.bbox.fits(image.width(), image.height()) {
            return Err(Error::Data(format!("{id}: box {} outside the image", r.bbox)));
        }
        let twin = dir.join("normal").join(format!("{id}.pgm"));
        let normal = if with_normal && twin.exists() {
            Some(read_image(&twin, run)?)
        } else {
            None
        };
        out.push(Sample {
            id,
            image,
            mask: Some(mask),
            bbox: r.bbox,
            normal,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} lists no records", manifest.display())));
    }
    Ok(out)
}

fn parse_bbox(text: &str) -> Result<BoundingBox> {
    let bad = || Error::Usage(format!("--bbox expects x0,y0,w,h, got {text:?}"));
    let nums: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let [x0, y0, w, h] = nums[..] else { return Err(bad()) };
    Ok(BoundingBox::new(x0, y0, w, h))
}

fn single_sample(image: &Path, b: BoundingBox, gt: Option<&Path>, run: &mut Run) -> Result<Sample> {
    let img = read_image(image, run)?;
    if !b.fits(img.width(), img.height()) {
        return Err(Error::Data(format!("box {b} outside the {}x{} image", img.width(), img.height())));
    }
    let mask = gt.map(|p| read_mask(p, run)).transpose()?;
    Ok(Sample {
        id: stem(image),
        image: img,
        mask,
        bbox: b,
        normal: None,
    })
}

fn gen_data(out: &Path, config: &Config, run: &mut Run) -> Result<()> {
    for sub in ["images", "masks", "normal"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed(config.seed, "data"));
    let sampler = config.sampler();

    let mut order: Vec<usize> = (0..config.patients).collect();
    order.shuffle(&mut rng);
    let count = |f: f64| ((config.patients as f64 * f).round() as usize).max(1);
    let (n_test, n_val) = (count(config.test_fraction), count(config.val_fraction));
    if n_test + n_val >= config.patients {
        return Err(Error::Usage("too few patients for a train/val/test split".into()));
    }
    let mut split = vec!["train"; config.patients];
    for (k, &p) in order.iter().enumerate() {
        if k < n_test {
            split[p] = "test";
        } else if k < n_test + n_val {
            split[p] = "val";
        }
    }

    let mut records: BTreeMap<&str, Vec<imaging::DatasetRecord>> = BTreeMap::new();
    let mut groups = String::from("id,patient,split,family,mean_fg,mean_bg,speckle\n");
    for p in 0..config.patients {
        let profile = sampler.profile(&mut rng);
        for k in 0..config.per_patient {
            let mut attempts = 0;
            let (spec, phantom) = loop {
                let spec = sampler.sample(&mut rng, &profile, GEN_FLANK);
                match imaging::generate_phantom(&spec) {
                    Ok(ph) => break (spec, ph),
                    Err(Error::PhantomRejected(_)) if attempts < 100 => attempts += 1,
                    Err(e) => return Err(e),
                }
            };
            let normal = imaging::generate_normal_tissue(&spec)?;
            let id = format!("p{p:03}_{k:02}");
            let image = PathBuf::from("images").join(format!("{id}.pgm"));
            let mask = PathBuf::from("masks").join(format!("{id}.pgm"));
            imaging::save_image(out.join(&image), &phantom.image)?;
            run.output(&out.join(&image))?;
            imaging::save_mask(out.join(&mask), &phantom.mask)?;
            run.output(&out.join(&mask))?;
            let twin = out.join("normal").join(format!("{id}.pgm"));
            imaging::save_image(&twin, &normal)?;
            run.output(&twin)?;
            let family = match spec.shape {
                imaging::NoduleShape::Ellipse { .. } => "ellipse",
                imaging::NoduleShape::Lobulated { .. } => "lobulated",
            };
            let _ = writeln!(
                groups,
                "{id},{p},{},{family},{:.3},{:.3},{:.3}",
                split[p], spec.mean_fg, spec.mean_bg, spec.speckle
            );
            records.entry(split[p]).or_default().push(imaging::DatasetRecord {
                image,
                mask,
                bbox: phantom.bbox,
            });
        }
    }
    for name in ["train", "val", "test"] {
        let path = out.join(format!("{name}.txt"));
        imaging::write_manifest(&path, records.get(name).map_or(&[][..], |v| v))?;
        run.output(&path)?;
    }
    run.write(&out.join("patients.csv"), groups)
}

// ---------------------------------------------------------------------------
// Classifier

/// Replaces exactly the mask's pixels with the synthesized background.
pub fn oracle_erase(image: &GrayImage, mask: &Mask, bbox: &BoundingBox) -> Result<GrayImage> {
    let bg = fill::build_background(image, bbox)?;
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(x, y) {
                out.set(x, y, bg.image.get(x, y));
            }
        }
    }
    Ok(out)
}

/// Classifier examples; held-out sets skip the mixed boxes so accuracy is
/// measured on whole positives and negatives only.
fn examples(samples: &[Sample], config: &Config, held_out: bool, rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
    let mut ex = config.examples();
    if held_out {
        ex.mixed = 0;
    }
    let mut out = Vec::new();
    for s in samples {
        out.extend(classifier::phantom_examples(&s.image, s.normal.as_ref(), &s.bbox, &ex, rng)?);
    }
    Ok(out)
}

/// Held-out classifier statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierEval {
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Share of test boxes scored above 0.5.
    pub intact_positive: f64,
    /// Share of test boxes scored below `beta` once the true nodule is
    /// replaced by background.
    pub oracle_flip: f64,
}

impl ClassifierEval {
    pub fn csv(&self) -> String {
        format!(
            "metric,value\nval_accuracy,{:.6}\ntest_accuracy,{:.6}\nintact_positive,{:.6}\noracle_flip,{:.6}\n",
            self.val_accuracy, self.test_accuracy, self.intact_positive, self.oracle_flip
        )
    }
}

fn train_classifier(data: &Path, out: &Path, config: &Config, run: &mut Run) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let train = load_samples(&data.join("train.txt"), true, run)?;
    let val = load_samples(&data.join("val.txt"), true, run)?;
    let test = load_samples(&data.join("test.txt"), true, run)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed(config.seed, "examples"));
    let tr = examples(&train, config, false, &mut rng)?;
    let va = examples(&val, config, true, &mut rng)?;
    let te = examples(&test, config, true, &mut rng)?;
    run.seeds.insert("classifier".into(), config.classifier().seed);
    let (model, log) = classifier::train_classifier(&tr, &va, &config.classifier())?;

    let ckpt = out.join("classifier.ckpt");
    model.save(&ckpt)?;
    run.output(&ckpt)?;
    run.write(&out.join("classifier_log.csv"), classifier::training_log_csv(&log))?;

    let mut intact = 0;
    let mut flipped = 0;
    for s in &test {
        if model.nodule_score(&s.image, &s.bbox)? > 0.5 {
            intact += 1;
        }
        let mask = s.mask.as_ref().expect("dataset records carry masks");
        if model.nodule_score(&oracle_erase(&s.image, mask, &s.bbox)?, &s.bbox)? < config.beta {
            flipped += 1;
        }
    }
    let eval = ClassifierEval {
        val_accuracy: classifier::accuracy(&model, &va)?,
        test_accuracy: classifier::accuracy(&model, &te)?,
        intact_positive: intact as f64 / test.len() as f64,
        oracle_flip: flipped as f64 / test.len() as f64,
    };
    run.write(&out.join("classifier_eval.csv"), eval.csv())
}

// ---------------------------------------------------------------------------
// Agents

fn load_classifier(path: &Path, run: &mut Run) -> Result<ClassifierModel> {
    let m = ClassifierModel::load(path)?;
    run.input(path)?;
    Ok(m)
}

fn load_qnet(path: &Path, channels: usize, run: &mut Run) -> Result<QNetwork> {
    let q = QNetwork::load(path)?;
    run.input(path)?;
    if q.channels() != channels {
        return Err(Error::Data(format!(
            "{} takes {} observation channels, expected {channels}",
            path.display(),
            q.channels()
        )));
    }
    Ok(q)
}

fn coarse_scene(s: &Sample, config: &Config) -> Result<Scene> {
    Scene::prepare(s.image.clone(), &s.bbox, &config.c2f().coarse)
}

fn fine_scene(s: &Sample, model: &ClassifierModel, stage1: &QNetwork, config: &Config) -> Result<Scene> {
    let params = config.c2f();
    let coarse = pipeline::run_stage(&coarse_scene(s, config)?, model, stage1, params.reward, None)?;
    pipeline::prepare_fine(s.image.clone(), &s.bbox, &coarse, &params)
}

fn train_agents(
    stage: u8,
    data: &Path,
    classifier_path: &Path,
    stage1_path: Option<&Path>,
    out: &Path,
    config: &Config,
    run: &mut Run,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let model = load_classifier(classifier_path, run)?;
    let train = load_samples(&data.join("train.txt"), false, run)?;
    let mut val = load_samples(&data.join("val.txt"), false, run)?;
    if config.validate_limit > 0 {
        val.truncate(config.validate_limit);
    }
    let reward = config.reward();
    let cfg = config.train_config(stage);
    run.seeds.insert(format!("agents-{stage}"), cfg.seed);

    let (scenes, val_scenes) = if stage == 1 {
        (
            par_map(&train, |s| coarse_scene(s, config))?,
            par_map(&val, |s| coarse_scene(s, config))?,
        )
    } else {
        let stage1_path =
            stage1_path.ok_or_else(|| Error::Usage("train-agents --stage 2 needs --stage1 <checkpoint>".into()))?;
        let stage1 = load_qnet(stage1_path, crate::env::AGENTS * crate::env::HISTORY, run)?;
        (
            par_map(&train, |s| fine_scene(s, &model, &stage1, config))?,
            par_map(&val, |s| fine_scene(s, &model, &stage1, config))?,
        )
    };
    let val_set: Vec<(&Scene, &Mask)> = val_scenes
        .iter()
        .zip(&val)
        .map(|(scene, s)| (scene, s.mask.as_ref().expect("dataset records carry masks")))
        .collect();
    let mut validate = |q: &QNetwork| -> Result<f64> {
        let dice = par_map(&val_set, |(scene, gt)| {
            let r = pipeline::run_stage(scene, &model, q, reward, Some(gt))?;
            Ok(metrics::overlap_metrics(&r.mask, gt)?.dice)
        })?;
        Ok(dice.iter().sum::<f64>() / dice.len().max(1) as f64)
    };
    let outcome = agent::train(&scenes, &model, reward, &cfg, Some(&mut validate))?;
    let ckpt = out.join(format!("agents_stage{stage}.ckpt"));
    outcome.qnet.save(&ckpt)?;
    run.output(&ckpt)?;
    run.write(
        &out.join(format!("agents_stage{stage}_log.csv")),
        agent::training_log_csv(&outcome.log),
    )
}

// ---------------------------------------------------------------------------
// Segmentation and evaluation

pub struct Models {
    pub classifier: ClassifierModel,
    pub stage1: QNetwork,
    pub stage2: QNetwork,
}

impl Models {
    fn load(classifier: &Path, stage1: &Path, stage2: &Path, run: &mut Run) -> Result<Models> {
        let c = load_classifier(classifier, run)?;
        let frames = crate::env::AGENTS * crate::env::HISTORY;
        Ok(Models {
            classifier: c,
            stage1: load_qnet(stage1, frames, run)?,
            stage2: load_qnet(stage2, frames + 1, run)?,
        })
    }
}

/// Both stages for one sample.
pub fn segment_sample(s: &Sample, bbox: &BoundingBox, models: &Models, config: &Config) -> Result<(StageResult, StageResult)> {
    pipeline::segment_c2f(
        &s.image,
        bbox,
        &models.classifier,
        &models.stage1,
        &models.stage2,
        &config.c2f(),
        s.mask.as_ref(),
    )
}

fn segment(samples: &[Sample], models: &Models, out: &Path, config: &Config, run: &mut Run) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let results = par_map(samples, |s| {
        let (coarse, fine) = segment_sample(s, &s.bbox, models, config)?;
        let record = pipeline::segmentation_record(&s.id, &s.bbox, &coarse, &fine, s.mask.as_ref())?;
        Ok((coarse, fine, record))
    })?;
    let mut records = Vec::new();
    for (s, (coarse, fine, record)) in samples.iter().zip(results) {
        let fine_path = out.join(format!("{}_mask.pgm", s.id));
        imaging::save_mask(&fine_path, &fine.mask)?;
        run.output(&fine_path)?;
        let coarse_path = out.join(format!("{}_coarse.pgm", s.id));
        imaging::save_mask(&coarse_path, &coarse.mask)?;
        run.output(&coarse_path)?;
        run.write(&out.join(format!("{}_curve.csv", s.id)), fine.curve_csv())?;
        run.write(&out.join(format!("{}_coarse_curve.csv", s.id)), coarse.curve_csv())?;
        let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Data(e.to_string()))?;
        run.write(&out.join(format!("{}.json", s.id)), json + "\n")?;
        records.push(record);
    }
    let mut csv = String::from("id,coarse_termination,coarse_steps,coarse_dice,fine_termination,fine_steps,fine_dice\n");
    for r in &records {
        let d = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.id,
            r.coarse.termination,
            r.coarse.steps,
            d(r.coarse.dice),
            r.fine.termination,
            r.fine.steps,
            d(r.fine.dice)
        );
    }
    run.write(&out.join("segment.csv"), csv)
}

/// Per-image metrics plus over-segmentation |P\G|/|G|.
pub fn score(pred: &Mask, gt: &Mask) -> Result<(MetricReport, f64)> {
    Ok((metrics::evaluate(pred, gt)?, metrics::over_segmentation(pred, gt)?))
}

/// Aggregate CSV with an extra over-segmentation row per label.
pub fn summary_csv(rows: &[(String, Aggregate, Summary)]) -> String {
    let agg: Vec<(String, Aggregate)> = rows.iter().map(|(l, a, _)| (l.clone(), *a)).collect();
    let mut s = metrics::aggregate_csv(&agg);
    for (label, _, o) in rows {
        let _ = writeln!(s, "{label},overseg,{:.6},{:.6},{}", o.mean, o.std, o.n);
    }
    s
}

fn evaluate(manifest: &Path, pred: &Path, out: &Path, run: &mut Run) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let samples = load_samples(manifest, false, run)?;
    let mut summary = Vec::new();
    for (label, suffix) in [("coarse", "coarse"), ("fine", "mask")] {
        let mut rows = Vec::new();
        let mut over = Vec::new();
        for s in &samples {
            let m = read_mask(&pred.join(format!("{}_{suffix}.pgm", s.id)), run)?;
            let (report, o) = score(&m, s.mask.as_ref().expect("dataset records carry masks"))?;
            rows.push((s.id.clone(), report));
            over.push(o);
        }
        run.write(&out.join(format!("metrics_{label}.csv")), metrics::per_image_csv(&rows))?;
        let reports: Vec<MetricReport> = rows.iter().map(|r| r.1).collect();
        summary.push((label.to_string(), metrics::aggregate(&reports), Summary::of(over)));
    }
    let agg: Vec<(String, Aggregate)> = summary.iter().map(|(l, a, _)| (l.clone(), *a)).collect();
    run.write(&out.join("summary.csv"), summary_csv(&summary))?;
    run.write(&out.join("table.txt"), metrics::pretty_table(&agg))
}

// ---------------------------------------------------------------------------
// Box-shift study

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

pub fn parse_bands(text: &str) -> Result<Vec<Band>> {
    let bad = || Error::Usage(format!("--bands expects lo-hi[,lo-hi...], got {text:?}"));
    text.split(',')
        .map(|part| {
            let (lo, hi) = part.trim().split_once('-').ok_or_else(bad)?;
            let (lo, hi): (f64, f64) = (lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?);
            if !(0.0 <= lo && lo <= hi) {
                return Err(bad());
            }
            Ok(Band { lo, hi })
        })
        .collect()
}

/// Random shift with length drawn uniformly from the band (scaled by
/// `scale`) in a uniformly random direction.
pub fn draw_shift<R: Rng>(band: &Band, scale: f64, rng: &mut R) -> (isize, isize) {
    let r = if band.hi > band.lo {
        rng.random_range(band.lo..band.hi)
    } else {
        band.lo
    } * scale;
    let a = rng.random_range(0.0..2.0 * PI);
    ((r * a.cos()).round() as isize, (r * a.sin()).round() as isize)
}

fn box_shift_study(
    samples: &[Sample],
    models: &Models,
    bands: &[Band],
    out: &Path,
    config: &Config,
    run: &mut Run,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let root = run.seed(config.seed, "box-shift");
    let scale = config.canvas as f64 / config.shift_reference_width as f64;
    let mut summary = Vec::new();
    let mut per_image = String::from("band,id,dx,dy,dice,overseg\n");
    for (bi, band) in bands.iter().enumerate() {
        let jobs: Vec<(&Sample, BoundingBox, isize, isize)> = samples
            .iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root, &format!("{bi}/{}", s.id)));
                let (dx, dy) = draw_shift(band, scale, &mut rng);
                let b = imaging::shift_box(s.bbox, dx, dy, s.image.width(), s.image.height());
                (s, b, dx, dy)
            })
            .collect();
        let results = par_map(&jobs, |(s, b, _, _)| {
            let (_, fine) = segment_sample(s, b, models, config)?;
            score(&fine.mask, s.mask.as_ref().expect("dataset records carry masks"))
        })?;
        let mut reports = Vec::new();
        let mut over = Vec::new();
        for ((s, _, dx, dy), (report, o)) in jobs.iter().zip(results) {
            let _ = writeln!(per_image, "{},{},{dx},{dy},{:.6},{:.6}", band.label(), s.id, report.dice, o);
            reports.push(report);
            over.push(o);
        }
        summary.push((band.label(), metrics::aggregate(&reports), Summary::of(over)));
    }
    let agg: Vec<(String, Aggregate)> = summary.iter().map(|(l, a, _)| (l.clone(), *a)).collect();
    run.write(&out.join("box_shift_per_image.csv"), per_image)?;
    run.write(&out.join("box_shift.csv"), summary_csv(&summary))?;
    run.write(&out.join("table.txt"), metrics::pretty_table(&agg))
}
