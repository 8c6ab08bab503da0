//! Binary nodule / normal-tissue classifier over bilinearly resized box
//! crops. Its nodule probability is the score the erasing agents try to
//! push below the flip threshold.

use std::fmt::Write as _;

use fliplearn_nn::loss::softmax;
use fliplearn_nn::optim::{Adam, AdamConfig};
use fliplearn_nn::{LayerSpec, Network, NetworkSpec, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fill::build_background;
use crate::imaging::{box_filter3, shift_box, BoundingBox, GrayImage};
use crate::superpixel::{seeds_segment, SeedsParams};

/// Side of the square classifier (and observation) input.
pub const INPUT_SIDE: usize = 64;
pub const INPUT_LEN: usize = INPUT_SIDE * INPUT_SIDE;
/// Boxes thinner than this after clamping cannot be scored.
pub const MIN_SCORE_SIDE: usize = 4;

pub const NODULE: usize = 0;
pub const NORMAL: usize = 1;

/// Convolutional body shared by the classifier and the Q-networks:
/// 64x64 input down to a 64-wide feature vector.
pub fn backbone() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(8, 3, 2, 1),
        LayerSpec::Relu,
        LayerSpec::max_pool(2),
        LayerSpec::conv(16, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::max_pool(2),
        LayerSpec::conv(32, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::max_pool(2),
        LayerSpec::conv(32, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::dense(64),
        LayerSpec::Relu,
    ]
}

pub fn classifier_spec() -> NetworkSpec {
    let mut layers = backbone();
    layers.push(LayerSpec::dense(2));
    NetworkSpec::single(vec![1, INPUT_SIDE, INPUT_SIDE], layers)
}

/// Bilinear resample of the `b` region of `img` to `out_w`x`out_h`,
/// pixel centers aligned, edges replicated. Values scaled to `[0,1]`.
pub fn resize_bilinear(img: &GrayImage, b: &BoundingBox, out_w: usize, out_h: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), out_w * out_h);
    let sx = b.w as f64 / out_w as f64;
    let sy = b.h as f64 / out_h as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (b.h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(b.h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (b.w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(b.w - 1);
            let tx = fx - x0 as f64;
            let p = |x: usize, y: usize| img.get(b.x0 + x, b.y0 + y) as f64;
            let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
            let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
            out[oy * out_w + ox] = ((top * (1.0 - ty) + bottom * ty) / 255.0) as f32;
        }
    }
}

/// Classifier input for box `b` of `img`: clamped to the image, resized to
/// 64x64.
pub fn box_input(img: &GrayImage, b: &BoundingBox) -> Result<Vec<f32>> {
    let clamped = b
        .clamp_to(img.width(), img.height())
        .filter(|c| c.w >= MIN_SCORE_SIDE && c.h >= MIN_SCORE_SIDE)
        .ok_or_else(|| Error::Input(format!("box {b} is degenerate inside a {}x{} image", img.width(), img.height())))?;
    let mut out = vec![0.0; INPUT_LEN];
    resize_bilinear(img, &clamped, INPUT_SIDE, INPUT_SIDE, &mut out);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    net: Network<f32>,
}

impl ClassifierModel {
    pub fn new(net: Network<f32>) -> Result<Self> {
        if net.spec() != &classifier_spec() {
            return Err(Error::Param("network is not a classifier".into()));
        }
        Ok(ClassifierModel { net })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let net = fliplearn_nn::checkpoint::load(path).map_err(|e| match e {
            fliplearn_nn::NnError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                detail: "classifier checkpoint not found".into(),
            },
            other => other.into(),
        })?;
        Self::new(net)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(fliplearn_nn::checkpoint::save(&self.net, path)?)
    }

    /// `(nodule, normal)` probabilities for each 64x64 input.
    pub fn probabilities(&self, inputs: &[f32]) -> Result<Vec<[f64; 2]>> {
        let n = inputs.len() / INPUT_LEN;
        let x = Tensor::new(vec![n, 1, INPUT_SIDE, INPUT_SIDE], inputs.to_vec())?;
        let logits = self.net.predict(&x)?.remove(0);
        Ok(logits
            .data()
            .chunks(2)
            .map(|l| {
                let (a, b) = (l[0] as f64, l[1] as f64);
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                [ea / (ea + eb), eb / (ea + eb)]
            })
            .collect())
    }

    /// Nodule probability of the box region of a (possibly erased) image.
    pub fn nodule_score(&self, img: &GrayImage, b: &BoundingBox) -> Result<f64> {
        Ok(self.probabilities(&box_input(img, b)?)?[0][0])
    }
}

#[derive(Clone, Debug)]
pub struct Example {
    pub input: Vec<f32>,
    /// Class of the larger target mass.
    pub label: usize,
    /// Target probability of [`NODULE`].
    pub target: f32,
}

impl Example {
    pub fn hard(input: Vec<f32>, label: usize) -> Example {
        Example {
            input,
            label,
            target: if label == NODULE { 1.0 } else { 0.0 },
        }
    }

    /// Mixed example whose nodule target is `target`.
    pub fn soft(input: Vec<f32>, target: f32) -> Example {
        Example {
            input,
            label: if target >= 0.5 { NODULE } else { NORMAL },
            target,
        }
    }
}

/// How many examples one phantom contributes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExampleConfig {
    /// Max box shift of the jittered positive and negative, pixels.
    pub jitter: usize,
    /// Boxes mixing the image with its background fill over random
    /// superpixels, labelled by the share of the box left untouched.
    pub mixed: usize,
}

impl Default for ExampleConfig {
    fn default() -> Self {
        ExampleConfig { jitter: 3, mixed: 2 }
    }
}

/// Per-pixel difference between the box and its fill after two 3x3 mean
/// passes, which suppresses speckle and keeps structure.
fn fill_evidence(image: &GrayImage, fill: &GrayImage, bbox: &BoundingBox) -> Vec<f64> {
    let smooth = |img: &GrayImage| {
        let raw: Vec<f64> = img.crop(bbox).data().iter().map(|&v| v as f64).collect();
        box_filter3(&box_filter3(&raw, bbox.w, bbox.h), bbox.w, bbox.h)
    };
    smooth(image).iter().zip(smooth(fill)).map(|(a, b)| (a - b).abs()).collect()
}

/// Examples for one phantom, using only its box. Positives are the box and a
/// jittered box. Negatives are the same box over nodule-free tissue when
/// available and over the background-filled composite the environment
/// produces on full erasure. Mixed examples paste the fill over random
/// coarse superpixels covering a uniform share of the box; their nodule
/// target is the share of the box's difference from its fill that
/// survives, so replacing tissue that already looks like background
/// barely moves it.
pub fn phantom_examples<R: Rng>(
    image: &GrayImage,
    normal: Option<&GrayImage>,
    bbox: &BoundingBox,
    config: &ExampleConfig,
    rng: &mut R,
) -> Result<Vec<Example>> {
    let mut out = vec![Example::hard(box_input(image, bbox)?, NODULE)];
    let j = config.jitter as i64;
    let jittered = |rng: &mut R| {
        if j == 0 {
            *bbox
        } else {
            let (dx, dy) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
            shift_box(*bbox, dx as isize, dy as isize, image.width(), image.height())
        }
    };
    let jb = jittered(rng);
    out.push(Example::hard(box_input(image, &jb)?, NODULE));
    if let Some(normal) = normal {
        let nb = jittered(rng);
        out.push(Example::hard(box_input(normal, &nb)?, NORMAL));
    }
    let bg = match build_background(image, bbox) {
        Ok(bg) => bg,
        Err(Error::FillSourceUnavailable) => return Ok(out),
        Err(e) => return Err(e),
    };
    out.push(Example::hard(box_input(&bg.image, bbox)?, NORMAL));
    if config.mixed > 0 {
        let region = image.crop(bbox);
        let params = SeedsParams::coarse().fit_to(region.width(), region.height());
        let map = seeds_segment(&region, &params)?;
        let evidence = fill_evidence(image, &bg.image, bbox);
        let total: f64 = evidence.iter().sum::<f64>().max(1e-9);
        for _ in 0..config.mixed {
            let budget = (rng.random::<f64>() * bbox.area() as f64) as usize;
            let mut labels: Vec<u32> = (1..=map.count() as u32).collect();
            labels.shuffle(rng);
            let mut img = image.clone();
            let mut used = 0;
            let mut removed = 0.0;
            for l in labels {
                let px = map.pixels_of_label(l);
                if used + px.len() > budget {
                    continue;
                }
                used += px.len();
                for &i in px {
                    removed += evidence[i];
                    let (x, y) = (bbox.x0 + i % bbox.w, bbox.y0 + i / bbox.w);
                    img.set(x, y, bg.image.get(x, y));
                }
            }
            let kept = (1.0 - removed / total).clamp(0.0, 1.0);
            out.push(Example::soft(box_input(&img, bbox)?, kept as f32));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability mass moved from the true class to the other one.
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 12,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-2,
            label_smoothing: 0.0,
            seed: 7,
        }
    }
}

/// Cross-entropy against `[t, 1 - t]` targets, with label smoothing moving
/// `smoothing` of the mass to the other class.
fn soft_cross_entropy(logits: &Tensor<f32>, targets: &[f32], smoothing: f64) -> Result<(f32, Tensor<f32>)> {
    let n = targets.len();
    let mut grad = Vec::with_capacity(n * 2);
    let mut loss = 0.0;
    for (row, &t) in logits.data().chunks(2).zip(targets) {
        let p = softmax(row);
        let t = t as f64 * (1.0 - 2.0 * smoothing) + smoothing;
        for (k, &pk) in p.iter().enumerate() {
            let y = if k == NODULE { t } else { 1.0 - t };
            loss -= y * (pk as f64).max(1e-12).ln();
            grad.push(((pk as f64 - y) / n as f64) as f32);
        }
    }
    Ok(((loss / n as f64) as f32, Tensor::new(vec![n, 2], grad)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_acc\n");
    for e in log {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", e.epoch, e.train_loss, e.val_loss, e.val_acc);
    }
    s
}

fn check_classes(set: &[Example], name: &str) -> Result<()> {
    for (class, label) in [(NODULE, "nodule"), (NORMAL, "normal")] {
        if !set.iter().any(|e| e.label == class) {
            return Err(Error::Data(format!("{name} set has no {label} examples")));
        }
    }
    Ok(())
}

pub fn accuracy(model: &ClassifierModel, set: &[Example]) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in set.chunks(64) {
        let inputs: Vec<f32> = chunk.iter().flat_map(|e| e.input.iter().copied()).collect();
        for (p, e) in model.probabilities(&inputs)?.iter().zip(chunk) {
            let predicted = if p[NODULE] > 0.5 { NODULE } else { NORMAL };
            correct += usize::from(predicted == e.label);
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Mean cross-entropy of the model against the examples' targets.
pub fn mean_loss(model: &ClassifierModel, set: &[Example]) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in set.chunks(64) {
        let inputs: Vec<f32> = chunk.iter().flat_map(|e| e.input.iter().copied()).collect();
        for (p, e) in model.probabilities(&inputs)?.iter().zip(chunk) {
            let t = e.target as f64;
            total -= t * p[NODULE].max(1e-12).ln() + (1.0 - t) * p[NORMAL].max(1e-12).ln();
        }
    }
    Ok(total / set.len() as f64)
}

/// AdamW training with shuffled minibatches; returns the epoch with the
/// best validation accuracy, lowest validation loss among equals, and the
/// per-epoch log.
pub fn train_classifier(
    train: &[Example],
    val: &[Example],
    config: &ClassifierConfig,
) -> Result<(ClassifierModel, Vec<EpochLog>)> {
    check_classes(train, "training")?;
    if !(0.0..0.5).contains(&config.label_smoothing) {
        return Err(Error::Param(format!("label smoothing {} outside [0, 0.5)", config.label_smoothing)));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Param("classifier epochs and batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Network::<f32>::new(classifier_spec(), &mut rng)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        net.num_params(),
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, f64, Vec<f32>)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            let mut x = Vec::with_capacity(idx.len() * INPUT_LEN);
            let mut targets = Vec::with_capacity(idx.len());
            for &i in idx {
                x.extend_from_slice(&train[i].input);
                targets.push(train[i].target);
            }
            let x = Tensor::new(vec![idx.len(), 1, INPUT_SIDE, INPUT_SIDE], x)?;
            let logits = net.forward(&x)?.remove(0);
            let (loss, grad) = soft_cross_entropy(&logits, &targets, config.label_smoothing)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "classifier",
                    index: epoch,
                    detail: "cross-entropy is not finite".into(),
                });
            }
            let grads = net.backward(&[Some(grad)])?;
            adam.step(net.params_mut(), &grads.params);
            loss_sum += loss as f64;
            batches += 1;
        }
        let model = ClassifierModel { net: net.clone() };
        let held_out = if val.is_empty() { train } else { val };
        let val_acc = accuracy(&model, held_out)?;
        let val_loss = mean_loss(&model, held_out)?;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_acc,
        });
        let better = best
            .as_ref()
            .is_none_or(|(acc, loss, _)| val_acc > *acc || (val_acc == *acc && val_loss < *loss));
        if better {
            best = Some((val_acc, val_loss, net.params().to_vec()));
        }
    }
    let (_, _, params) = best.expect("at least one epoch");
    net.set_params(&params)?;
    Ok((ClassifierModel { net }, log))
}
