//! Coarse-to-fine inference: a greedy episode on coarse superpixels, then a
//! fresh episode on fine superpixels conditioned on the coarse mask.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::Serialize;

use crate::agent::{run_episode, QNetwork};
use crate::classifier::ClassifierModel;
use crate::env::{RewardConfig, Scene, StepRecord, Termination};
use crate::error::{Error, Result};
use crate::imaging::{BoundingBox, GrayImage, Mask};
use crate::metrics::overlap_metrics;
use crate::superpixel::SeedsParams;

fn components(mask: &Mask) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width(), mask.height());
    let mut comp = vec![0u32; w * h];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if mask.data()[start] == 0 || comp[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        sizes.push(0);
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            sizes[id as usize] += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.data()[j] != 0 && comp[j] == 0 {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    (comp, sizes)
}

/// Keeps the largest 4-connected component (first in raster order on ties)
/// and fills the holes it encloses.
pub fn postprocess(mask: &Mask) -> Mask {
    if mask.is_empty() {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let (comp, sizes) = components(mask);
    let mut keep = 1;
    for (id, &s) in sizes.iter().enumerate().skip(1) {
        if s > sizes[keep] {
            keep = id;
        }
    }
    // Background reachable from the border through 8-neighbours stays.
    let fg = |i: usize| comp[i] == keep as u32;
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && !fg(y * w + x) {
                outside[y * w + x] = true;
                queue.push_back(y * w + x);
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (xx, yy) = (x + dx, y + dy);
                if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if !outside[j] && !fg(j) {
                    outside[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    let values = (0..w * h).map(|i| u8::from(!outside[i])).collect();
    Mask::from_values(w, h, values).expect("binary values")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub score: f64,
    pub erased_px: usize,
    pub dice: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StageResult {
    /// Post-processed union of erased superpixels.
    pub mask: Mask,
    /// Union of erased superpixels before post-processing.
    pub raw: Mask,
    pub curve: Vec<CurvePoint>,
    pub trace: Vec<StepRecord>,
    pub termination: Termination,
    pub initial_score: f64,
    pub superpixels: usize,
}

impl StageResult {
    pub fn steps(&self) -> usize {
        self.trace.len()
    }

    pub fn final_score(&self) -> f64 {
        self.curve.last().map_or(self.initial_score, |c| c.score)
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,score,erased_px,dice\n");
        for c in &self.curve {
            let _ = write!(s, "{},{:.9},{},", c.step, c.score, c.erased_px);
            if let Some(d) = c.dice {
                let _ = write!(s, "{d:.4}");
            }
            s.push('\n');
        }
        s
    }
}

/// Greedy episode on a prepared scene; the curve's DICE is of the raw
/// erased region against `gt` at every step.
pub fn run_stage(
    scene: &Scene,
    model: &ClassifierModel,
    qnet: &QNetwork,
    reward: RewardConfig,
    gt: Option<&Mask>,
) -> Result<StageResult> {
    let mut env = scene.env(model, reward)?;
    if qnet.channels() != env.channels() {
        return Err(Error::Input(format!(
            "Q-network takes {} channels, this stage observes {}",
            qnet.channels(),
            env.channels()
        )));
    }
    // A greedy policy never draws from the generator.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    run_episode(&mut env, qnet, 0.0, &mut rng)?;
    let termination = env.termination().expect("episode finished");
    let map = env.map();
    let b = map.bbox();
    let mut running = Mask::empty(scene.image.width(), scene.image.height());
    let mut curve = Vec::with_capacity(env.trace().len());
    for r in env.trace() {
        if r.action == crate::env::Action::Erase {
            for &i in map.pixels_of_index(r.index) {
                running.set(b.x0 + i % map.width(), b.y0 + i / map.width(), true);
            }
        }
        let dice = gt.map(|g| overlap_metrics(&running, g).map(|o| o.dice)).transpose()?;
        curve.push(CurvePoint {
            step: r.step,
            score: r.score,
            erased_px: r.erased_px,
            dice,
        });
    }
    let raw = env.erased_mask();
    Ok(StageResult {
        mask: postprocess(&raw),
        raw,
        curve,
        trace: env.trace().to_vec(),
        termination,
        initial_score: env.initial_score(),
        superpixels: map.count(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct C2fParams {
    pub coarse: SeedsParams,
    pub fine: SeedsParams,
    pub reward: RewardConfig,
}

impl Default for C2fParams {
    fn default() -> Self {
        C2fParams {
            coarse: SeedsParams::coarse(),
            fine: SeedsParams::fine(),
            reward: RewardConfig::default(),
        }
    }
}

/// Coarse scene plus the fine scene conditioned on its prediction.
pub fn prepare_fine(image: GrayImage, bbox: &BoundingBox, coarse: &StageResult, params: &C2fParams) -> Result<Scene> {
    let mut scene = Scene::prepare(image, bbox, &params.fine)?;
    scene.conditioning = Some(coarse.mask.clone());
    Ok(scene)
}

pub fn segment_c2f(
    image: &GrayImage,
    bbox: &BoundingBox,
    model: &ClassifierModel,
    stage1: &QNetwork,
    stage2: &QNetwork,
    params: &C2fParams,
    gt: Option<&Mask>,
) -> Result<(StageResult, StageResult)> {
    let coarse_scene = Scene::prepare(image.clone(), bbox, &params.coarse)?;
    let coarse = run_stage(&coarse_scene, model, stage1, params.reward, gt)?;
    let fine_scene = prepare_fine(image.clone(), bbox, &coarse, params)?;
    let fine = run_stage(&fine_scene, model, stage2, params.reward, gt)?;
    Ok((coarse, fine))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSummary {
    pub termination: &'static str,
    pub steps: usize,
    pub superpixels: usize,
    pub initial_score: f64,
    pub final_score: f64,
    pub erased_px: usize,
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentationRecord {
    pub id: String,
    pub bbox: [usize; 4],
    pub coarse: StageSummary,
    pub fine: StageSummary,
}

fn summary(r: &StageResult, gt: Option<&Mask>) -> Result<StageSummary> {
    Ok(StageSummary {
        termination: r.termination.name(),
        steps: r.steps(),
        superpixels: r.superpixels,
        initial_score: r.initial_score,
        final_score: r.final_score(),
        erased_px: r.raw.count(),
        dice: gt.map(|g| overlap_metrics(&r.mask, g).map(|o| o.dice)).transpose()?,
    })
}

pub fn segmentation_record(
    id: &str,
    bbox: &BoundingBox,
    coarse: &StageResult,
    fine: &StageResult,
    gt: Option<&Mask>,
) -> Result<SegmentationRecord> {
    Ok(SegmentationRecord {
        id: id.to_string(),
        bbox: [bbox.x0, bbox.y0, bbox.w, bbox.h],
        coarse: summary(coarse, gt)?,
        fine: summary(fine, gt)?,
    })
}
