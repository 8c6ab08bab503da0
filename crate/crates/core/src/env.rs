//! The superpixel-erasing environment. Two agents walk opposite halves of
//! the traversal order from the center superpixel, alternately erasing
//! (replacing with background) or passing. Rewards combine the sign of the
//! classifier score change with a penalty when the erased region's
//! intensity distribution jumps.

use std::fmt::Write as _;

use crate::classifier::{ClassifierModel, INPUT_SIDE};
use crate::error::{Error, Result};
use crate::fill::{build_background, BackgroundImage};
use crate::imaging::{BoundingBox, GrayImage, Mask};
use crate::superpixel::{assign_traversal, seeds_segment, SeedsParams, SuperpixelMap};

pub const AGENTS: usize = 2;
/// Frames of history kept per agent.
pub const HISTORY: usize = 3;
pub const OBS_SIDE: usize = INPUT_SIDE;
pub const FRAME_LEN: usize = OBS_SIDE * OBS_SIDE;
pub const BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardConfig {
    /// Wasserstein threshold in intensity units.
    pub theta: f64,
    /// Episode ends once the nodule score drops below this.
    pub beta: f64,
    pub max_traversals: usize,
    pub penalty: f64,
    /// Off disables the intensity-distribution term (ablation).
    pub idr: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            theta: 25.0,
            beta: 0.05,
            max_traversals: 2,
            penalty: 1.0,
            idr: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) || !(self.beta > 0.0 && self.beta < 1.0) || self.max_traversals == 0 || !(self.penalty >= 0.0)
        {
            return Err(Error::Param(format!("bad reward config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Erase,
    Pass,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Erase, Action::Pass];

    pub fn index(self) -> usize {
        match self {
            Action::Erase => 0,
            Action::Pass => 1,
        }
    }

    pub fn from_index(i: usize) -> Action {
        if i == 0 {
            Action::Erase
        } else {
            Action::Pass
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Erase => "erase",
            Action::Pass => "pass",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Flip,
    TraversalLimit,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::Flip => "flip",
            Termination::TraversalLimit => "traversal-limit",
        }
    }
}

/// Stacked u8 frames: agent 0's history (oldest first), agent 1's history,
/// then the conditioning frame when present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Observation {
    pub fn frame(&self, c: usize) -> &[u8] {
        &self.data[c * FRAME_LEN..(c + 1) * FRAME_LEN]
    }

    /// Appends the frames scaled to `[0,1]`.
    pub fn extend_f32(&self, out: &mut Vec<f32>) {
        out.extend(self.data.iter().map(|&v| v as f32 / 255.0));
    }
}

/// Sign of the score drop, -1, 0 or +1.
pub fn csr(prev: f64, now: f64) -> f64 {
    if prev > now {
        1.0
    } else if prev < now {
        -1.0
    } else {
        0.0
    }
}

/// Reward of one step: score-change sign plus the thresholded Wasserstein
/// penalty.
pub fn reward(prev_score: f64, score: f64, w: f64, config: &RewardConfig) -> f64 {
    let thr = if config.idr && w > config.theta { -config.penalty } else { 0.0 };
    csr(prev_score, score) + thr
}

/// Exact 1-D earth mover's distance between normalized histograms with unit
/// bin spacing: the L1 distance of their CDFs.
pub fn wasserstein_1d(h1: &[f64], h2: &[f64]) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(Error::Input(format!("histogram lengths {} and {}", h1.len(), h2.len())));
    }
    for h in [h1, h2] {
        let sum: f64 = h.iter().sum();
        if h.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("histogram is not normalized (sum {sum})")));
        }
    }
    let (mut c1, mut c2, mut w) = (0.0, 0.0, 0.0);
    for (a, b) in h1.iter().zip(h2) {
        c1 += a;
        c2 += b;
        w += (c1 - c2).abs();
    }
    Ok(w)
}

fn normalized(counts: &[u64; BINS]) -> Option<Vec<f64>> {
    let n: u64 = counts.iter().sum();
    (n > 0).then(|| counts.iter().map(|&c| c as f64 / n as f64).collect())
}

/// Wasserstein distance between two count histograms; 0 when either is
/// empty.
pub fn histogram_distance(prev: &[u64; BINS], now: &[u64; BINS]) -> f64 {
    match (normalized(prev), normalized(now)) {
        (Some(a), Some(b)) => wasserstein_1d(&a, &b).expect("normalized histograms"),
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub agent: usize,
    pub index: usize,
    pub action: Action,
    pub score: f64,
    pub w: f64,
    pub reward: f64,
    pub erased_px: usize,
}

pub fn trace_csv(trace: &[StepRecord]) -> String {
    let mut s = String::from("step,agent,superpixel,action,score,w,reward,erased_px\n");
    for r in trace {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.9},{:.6},{},{}",
            r.step,
            r.agent + 1,
            r.index,
            r.action.name(),
            r.score,
            r.w,
            r.reward,
            r.erased_px
        );
    }
    s
}

#[derive(Clone, Debug)]
struct Cursor {
    schedule: Vec<usize>,
    pos: usize,
    traversals: usize,
    finished: bool,
}

impl Cursor {
    fn current(&self) -> Option<usize> {
        (!self.finished).then(|| self.schedule[self.pos])
    }

    fn advance(&mut self, n: usize) {
        self.pos += 1;
        if self.pos == self.schedule.len() {
            self.pos = 0;
            self.traversals += 1;
            if self.traversals >= n {
                self.finished = true;
            }
        }
    }

    /// Skips erased superpixels; wrapping counts as a traversal.
    fn settle(&mut self, erased: &[bool], n: usize) {
        let mut guard = 0;
        while !self.finished && erased[self.schedule[self.pos]] {
            self.advance(n);
            guard += 1;
            if guard > self.schedule.len() {
                self.finished = true;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// The acting agent's observation after the step.
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub w: f64,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct ErasureEnv<'a> {
    source: &'a GrayImage,
    background: &'a BackgroundImage,
    map: &'a SuperpixelMap,
    model: &'a ClassifierModel,
    config: RewardConfig,
    conditioning: Option<&'a Mask>,
    working: GrayImage,
    /// Indexed by traversal index; slot 0 unused.
    erased: Vec<bool>,
    erased_px: usize,
    hist: [u64; BINS],
    score: f64,
    initial_score: f64,
    cursors: [Cursor; AGENTS],
    history: [Vec<Vec<u8>>; AGENTS],
    turn: usize,
    steps: usize,
    termination: Option<Termination>,
    trace: Vec<StepRecord>,
}

impl<'a> ErasureEnv<'a> {
    pub fn reset(
        source: &'a GrayImage,
        bbox: &BoundingBox,
        background: &'a BackgroundImage,
        map: &'a SuperpixelMap,
        model: &'a ClassifierModel,
        config: RewardConfig,
    ) -> Result<Self> {
        config.validate()?;
        if background.bbox != *bbox || map.bbox() != *bbox {
            return Err(Error::Input(format!(
                "component boxes differ: env {bbox}, background {}, superpixels {}",
                background.bbox,
                map.bbox()
            )));
        }
        if background.image.width() != source.width()
            || background.image.height() != source.height()
            || !bbox.fits(source.width(), source.height())
        {
            return Err(Error::Input("background and source sizes differ".into()));
        }
        let score = model.nodule_score(source, bbox)?;
        let s = map.count();
        let cursors = [0, 1].map(|a| Cursor {
            schedule: map.schedule(a),
            pos: 0,
            traversals: 0,
            finished: false,
        });
        let mut env = ErasureEnv {
            source,
            background,
            map,
            model,
            config,
            conditioning: None,
            working: source.clone(),
            erased: vec![false; s + 1],
            erased_px: 0,
            hist: [0; BINS],
            score,
            initial_score: score,
            cursors,
            history: [Vec::new(), Vec::new()],
            turn: 0,
            steps: 0,
            termination: None,
            trace: Vec::new(),
        };
        for a in 0..AGENTS {
            let f = env.crop_at(a);
            env.history[a] = vec![f; HISTORY];
        }
        if score < config.beta {
            env.termination = Some(Termination::Flip);
        }
        Ok(env)
    }

    /// Adds the coarse-mask conditioning frame to every observation.
    pub fn with_conditioning(mut self, mask: &'a Mask) -> Result<Self> {
        if mask.width() != self.source.width() || mask.height() != self.source.height() {
            return Err(Error::Input("conditioning mask size differs from image".into()));
        }
        self.conditioning = Some(mask);
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        AGENTS * HISTORY + usize::from(self.conditioning.is_some())
    }

    fn focus(&self, agent: usize) -> (isize, isize) {
        let c = &self.cursors[agent];
        // A finished agent keeps looking at its last scheduled superpixel.
        let index = c.schedule[c.pos];
        let (x, y) = self.map.centroid_in_image(index);
        (x.floor() as isize, y.floor() as isize)
    }

    fn crop_at(&self, agent: usize) -> Vec<u8> {
        let (cx, cy) = self.focus(agent);
        let half = (OBS_SIDE / 2) as isize;
        let mut f = Vec::with_capacity(FRAME_LEN);
        for y in 0..OBS_SIDE as isize {
            for x in 0..OBS_SIDE as isize {
                f.push(self.working.get_clamped(cx - half + x, cy - half + y));
            }
        }
        f
    }

    fn conditioning_frame(&self, agent: usize, mask: &Mask) -> Vec<u8> {
        let (cx, cy) = self.focus(agent);
        let half = (OBS_SIDE / 2) as isize;
        let (w, h) = (mask.width() as isize, mask.height() as isize);
        let mut f = Vec::with_capacity(FRAME_LEN);
        for y in 0..OBS_SIDE as isize {
            for x in 0..OBS_SIDE as isize {
                let xx = (cx - half + x).clamp(0, w - 1) as usize;
                let yy = (cy - half + y).clamp(0, h - 1) as usize;
                f.push(if mask.get(xx, yy) { 255 } else { 0 });
            }
        }
        f
    }

    /// Observation from `agent`'s point of view; only the conditioning
    /// frame depends on the agent.
    pub fn observation(&self, agent: usize) -> Observation {
        let mut data = Vec::with_capacity(self.channels() * FRAME_LEN);
        for frames in &self.history {
            for f in frames {
                data.extend_from_slice(f);
            }
        }
        if let Some(mask) = self.conditioning {
            data.extend(self.conditioning_frame(agent, mask));
        }
        Observation {
            channels: self.channels(),
            data,
        }
    }

    pub fn is_done(&self) -> bool {
        self.termination.is_some()
    }

    pub fn termination(&self) -> Option<Termination> {
        self.termination
    }

    /// Agent whose turn it is, `None` once the episode is over.
    pub fn current_agent(&self) -> Option<usize> {
        (!self.is_done()).then_some(self.turn)
    }

    /// Traversal index the agent would act on next.
    pub fn current_index(&self, agent: usize) -> Option<usize> {
        self.cursors[agent].current()
    }

    pub fn traversals(&self, agent: usize) -> usize {
        self.cursors[agent].traversals
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn initial_score(&self) -> f64 {
        self.initial_score
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn working(&self) -> &GrayImage {
        &self.working
    }

    pub fn map(&self) -> &SuperpixelMap {
        self.map
    }

    pub fn config(&self) -> &RewardConfig {
        &self.config
    }

    pub fn is_erased(&self, index: usize) -> bool {
        self.erased[index]
    }

    pub fn erased_indices(&self) -> Vec<usize> {
        (1..self.erased.len()).filter(|&i| self.erased[i]).collect()
    }

    pub fn erased_px(&self) -> usize {
        self.erased_px
    }

    pub fn histogram(&self) -> &[u64; BINS] {
        &self.hist
    }

    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    fn for_pixels(&self, index: usize, mut f: impl FnMut(usize, usize)) {
        let b = self.map.bbox();
        let w = self.map.width();
        for &i in self.map.pixels_of_index(index) {
            f(b.x0 + i % w, b.y0 + i / w);
        }
    }

    /// Union of erased superpixels over the full image.
    pub fn erased_mask(&self) -> Mask {
        let mut m = Mask::empty(self.source.width(), self.source.height());
        for i in self.erased_indices() {
            self.for_pixels(i, |x, y| m.set(x, y, true));
        }
        m
    }

    /// Working image rebuilt from source, erased set and background.
    pub fn recompute_working(&self) -> GrayImage {
        let mut img = self.source.clone();
        for i in self.erased_indices() {
            self.for_pixels(i, |x, y| img.set(x, y, self.background.image.get(x, y)));
        }
        img
    }

    pub fn recompute_histogram(&self) -> [u64; BINS] {
        let mut h = [0u64; BINS];
        for i in self.erased_indices() {
            self.for_pixels(i, |x, y| h[self.source.get(x, y) as usize] += 1);
        }
        h
    }

    pub fn step(&mut self, agent: usize, action: Action) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::State("step after the episode ended".into()));
        }
        if agent != self.turn {
            return Err(Error::State(format!("agent {} acted on agent {}'s turn", agent + 1, self.turn + 1)));
        }
        let index = self.cursors[agent]
            .current()
            .ok_or_else(|| Error::State(format!("agent {} has no superpixel left", agent + 1)))?;
        let prev_score = self.score;
        let mut w = 0.0;
        if action == Action::Erase {
            let prev_hist = self.hist;
            let b = self.map.bbox();
            let mw = self.map.width();
            for &i in self.map.pixels_of_index(index) {
                let (x, y) = (b.x0 + i % mw, b.y0 + i / mw);
                self.hist[self.source.get(x, y) as usize] += 1;
                self.working.set(x, y, self.background.image.get(x, y));
            }
            self.erased[index] = true;
            self.erased_px += self.map.pixels_of_index(index).len();
            self.score = self.model.nodule_score(&self.working, &b)?;
            w = histogram_distance(&prev_hist, &self.hist);
        }
        let r = reward(prev_score, self.score, w, &self.config);
        let n = self.config.max_traversals;
        self.cursors[agent].advance(n);
        for c in &mut self.cursors {
            c.settle(&self.erased, n);
        }
        for a in 0..AGENTS {
            let f = self.crop_at(a);
            self.history[a].remove(0);
            self.history[a].push(f);
        }
        self.steps += 1;
        self.trace.push(StepRecord {
            step: self.steps,
            agent,
            index,
            action,
            score: self.score,
            w,
            reward: r,
            erased_px: self.erased_px,
        });
        let other = 1 - agent;
        if self.score < self.config.beta {
            self.termination = Some(Termination::Flip);
        } else if self.cursors.iter().all(|c| c.finished) {
            self.termination = Some(Termination::TraversalLimit);
        } else if !self.cursors[other].finished {
            self.turn = other;
        }
        Ok(StepOutcome {
            observation: self.observation(agent),
            reward: r,
            done: self.is_done(),
            w,
            score: self.score,
        })
    }
}

/// Everything an episode needs besides the classifier: the image, its
/// synthesized background and the indexed superpixels of the box.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: GrayImage,
    pub background: BackgroundImage,
    pub map: SuperpixelMap,
    /// Coarse prediction fed to the second stage.
    pub conditioning: Option<Mask>,
}

impl Scene {
    pub fn prepare(image: GrayImage, bbox: &BoundingBox, params: &SeedsParams) -> Result<Scene> {
        if !bbox.fits(image.width(), image.height()) {
            return Err(Error::Input(format!(
                "box {bbox} leaves the {}x{} image",
                image.width(),
                image.height()
            )));
        }
        let background = build_background(&image, bbox)?;
        let region = image.crop(bbox);
        let fitted = params.fit_to(region.width(), region.height());
        let map = assign_traversal(&seeds_segment(&region, &fitted)?, bbox);
        Ok(Scene {
            image,
            background,
            map,
            conditioning: None,
        })
    }

    pub fn bbox(&self) -> BoundingBox {
        self.map.bbox()
    }

    pub fn env<'a>(&'a self, model: &'a ClassifierModel, config: RewardConfig) -> Result<ErasureEnv<'a>> {
        let env = ErasureEnv::reset(&self.image, &self.bbox(), &self.background, &self.map, model, config)?;
        match &self.conditioning {
            Some(m) => env.with_conditioning(m),
            None => Ok(env),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        let c = RewardConfig::default();
        assert_eq!(reward(0.9, 0.7, 5.0, &c), 1.0);
        assert_eq!(reward(0.7, 0.8, 5.0, &c), -1.0);
        assert_eq!(reward(0.9, 0.7, 30.0, &c), 0.0);
        assert_eq!(reward(0.5, 0.5, 0.0, &c), 0.0);
        let off = RewardConfig { idr: false, ..c };
        assert_eq!(reward(0.9, 0.7, 30.0, &off), 1.0);
    }

    #[test]
    fn wasserstein_examples() {
        let mut a = vec![0.0; 256];
        let mut b = vec![0.0; 256];
        a[10] = 1.0;
        b[35] = 1.0;
        assert_eq!(wasserstein_1d(&a, &b).unwrap(), 25.0);
        assert_eq!(wasserstein_1d(&a, &a).unwrap(), 0.0);
        b[35] = 0.5;
        assert!(matches!(wasserstein_1d(&a, &b), Err(Error::Input(_))));
        assert!(wasserstein_1d(&a, &b[..10]).is_err());
    }

    #[test]
    fn empty_previous_histogram_costs_nothing() {
        let mut h = [0u64; BINS];
        h[200] = 5;
        assert_eq!(histogram_distance(&[0; BINS], &h), 0.0);
    }

    #[test]
    fn cursor_skips_and_counts_wraps() {
        let mut c = Cursor {
            schedule: vec![3, 4, 5],
            pos: 0,
            traversals: 0,
            finished: false,
        };
        let mut erased = vec![false; 6];
        erased[4] = true;
        c.advance(2);
        c.settle(&erased, 2);
        assert_eq!(c.current(), Some(5));
        c.advance(2);
        assert_eq!((c.current(), c.traversals), (Some(3), 1));
        erased[3] = true;
        erased[5] = true;
        c.settle(&erased, 2);
        assert!(c.finished);
        assert_eq!(c.current(), None);
    }
}
