//! SEEDS superpixels for a box region: start from a regular grid, then
//! hill-climb block moves (coarse to fine) and finally pixel moves toward
//! the neighbouring label whose intensity histogram explains them better.
//! Moves that would disconnect the donor label are rejected, so every label
//! stays 4-connected and non-empty.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::imaging::{encode_pgm, BoundingBox, GrayImage, MIN_BOX_SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedsParams {
    pub superpixels: usize,
    pub block_levels: usize,
    pub bins: usize,
    pub iterations: usize,
}

impl SeedsParams {
    pub const fn coarse() -> Self {
        SeedsParams {
            superpixels: 40,
            block_levels: 2,
            bins: 16,
            iterations: 8,
        }
    }

    pub const fn fine() -> Self {
        SeedsParams {
            superpixels: 160,
            ..Self::coarse()
        }
    }

    /// Lowers the requested count until a grid with cells of at least
    /// 2x2 pixels fits a `w`x`h` region.
    pub fn fit_to(&self, w: usize, h: usize) -> SeedsParams {
        let mut p = *self;
        while p.superpixels > 1 && p.validate(w, h).is_err() {
            p.superpixels -= 1;
        }
        p
    }

    fn validate(&self, w: usize, h: usize) -> Result<(usize, usize)> {
        if self.superpixels == 0 || self.bins == 0 || self.bins > 256 {
            return Err(Error::Param(format!("bad SEEDS parameters {self:?}")));
        }
        if self.superpixels > w * h {
            return Err(Error::Param(format!(
                "{} superpixels requested for {} pixels",
                self.superpixels,
                w * h
            )));
        }
        let nx = ((self.superpixels as f64 * w as f64 / h as f64).sqrt().round() as usize).max(1);
        let ny = ((self.superpixels as f64 / nx as f64).round() as usize).max(1);
        if nx * 2 > w || ny * 2 > h {
            return Err(Error::Param(format!(
                "{} superpixels need a {nx}x{ny} grid, too fine for a {w}x{h} region",
                self.superpixels
            )));
        }
        Ok((nx, ny))
    }
}

/// Partition of a box region into `S` labelled superpixels plus the
/// traversal indexing used by the two agents.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelMap {
    width: usize,
    height: usize,
    /// Box the region was cut from, in image coordinates.
    bbox: BoundingBox,
    /// Per pixel, labels `1..=S`.
    labels: Vec<u32>,
    /// Per label (`label - 1`), region-flat pixel indices in raster order.
    pixels: Vec<Vec<usize>>,
    /// Per label, sorted 4-adjacent labels.
    adjacency: Vec<Vec<u32>>,
    /// `order[i]` is the label with traversal index `i + 1`.
    order: Vec<u32>,
}

impl SuperpixelMap {
    fn from_labels(width: usize, height: usize, labels: Vec<u32>, count: usize) -> Self {
        let mut pixels = vec![Vec::new(); count];
        for (i, &l) in labels.iter().enumerate() {
            pixels[l as usize - 1].push(i);
        }
        let mut adjacency = vec![Vec::new(); count];
        for y in 0..height {
            for x in 0..width {
                let l = labels[y * width + x];
                let mut link = |o: u32| {
                    if o != l {
                        adjacency[l as usize - 1].push(o);
                        adjacency[o as usize - 1].push(l);
                    }
                };
                if x + 1 < width {
                    link(labels[y * width + x + 1]);
                }
                if y + 1 < height {
                    link(labels[(y + 1) * width + x]);
                }
            }
        }
        for a in &mut adjacency {
            a.sort_unstable();
            a.dedup();
        }
        SuperpixelMap {
            width,
            height,
            bbox: BoundingBox::new(0, 0, width, height),
            labels,
            pixels,
            adjacency,
            order: (1..=count as u32).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    /// Number of superpixels `S`.
    pub fn count(&self) -> usize {
        self.pixels.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn pixels_of_label(&self, label: u32) -> &[usize] {
        &self.pixels[label as usize - 1]
    }

    pub fn neighbors(&self, label: u32) -> &[u32] {
        &self.adjacency[label as usize - 1]
    }

    pub fn traversal_order(&self) -> &[u32] {
        &self.order
    }

    /// Label carrying traversal index `index` (1-based).
    pub fn label_of_index(&self, index: usize) -> u32 {
        self.order[index - 1]
    }

    /// Region-flat pixels of the superpixel with traversal index `index`.
    pub fn pixels_of_index(&self, index: usize) -> &[usize] {
        self.pixels_of_label(self.label_of_index(index))
    }

    /// Centroid in region coordinates (pixel centers at integer + 0.5).
    pub fn centroid(&self, label: u32) -> (f64, f64) {
        let px = self.pixels_of_label(label);
        let (mut sx, mut sy) = (0.0, 0.0);
        for &i in px {
            sx += (i % self.width) as f64 + 0.5;
            sy += (i / self.width) as f64 + 0.5;
        }
        (sx / px.len() as f64, sy / px.len() as f64)
    }

    /// Centroid of traversal index `index` in image coordinates.
    pub fn centroid_in_image(&self, index: usize) -> (f64, f64) {
        let (x, y) = self.centroid(self.label_of_index(index));
        (x + self.bbox.x0 as f64, y + self.bbox.y0 as f64)
    }

    /// Index `ceil(S/2)` where both agents start.
    pub fn start_index(&self) -> usize {
        self.count().div_ceil(2)
    }

    /// Agent 0 walks `ceil(S/2)..=S`, agent 1 walks `ceil(S/2)..=1`.
    pub fn schedule(&self, agent: usize) -> Vec<usize> {
        let c = self.start_index();
        if agent == 0 {
            (c..=self.count()).collect()
        } else {
            (1..=c).rev().collect()
        }
    }

    /// Label raster as PGM (labels modulo 255) for inspection.
    pub fn debug_pgm(&self) -> Vec<u8> {
        let px: Vec<u8> = self.labels.iter().map(|&l| (l % 255) as u8).collect();
        encode_pgm(self.width, self.height, &px)
    }

    /// Checks partition, non-emptiness and 4-connectivity of every label.
    pub fn validate(&self) -> Result<()> {
        let s = self.count();
        if self.labels.len() != self.width * self.height {
            return Err(Error::State("label raster size".into()));
        }
        let mut seen = vec![0usize; s];
        for &l in &self.labels {
            if l == 0 || l as usize > s {
                return Err(Error::State(format!("label {l} outside 1..={s}")));
            }
            seen[l as usize - 1] += 1;
        }
        if let Some(i) = seen.iter().position(|&n| n == 0) {
            return Err(Error::State(format!("label {} is empty", i + 1)));
        }
        if !all_connected(&self.labels, self.width, self.height, s) {
            return Err(Error::State("a label is not 4-connected".into()));
        }
        let mut perm = self.order.clone();
        perm.sort_unstable();
        if perm != (1..=s as u32).collect::<Vec<_>>() {
            return Err(Error::State("traversal order is not a permutation".into()));
        }
        Ok(())
    }
}

fn all_connected(labels: &[u32], w: usize, h: usize, count: usize) -> bool {
    let mut visited = vec![false; w * h];
    let mut started = vec![false; count];
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if visited[start] {
            continue;
        }
        let l = labels[start];
        if started[l as usize - 1] {
            // A second component of a label already flooded.
            return false;
        }
        started[l as usize - 1] = true;
        visited[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !visited[j] && labels[j] == l {
                    visited[j] = true;
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
    true
}

/// Subdivision boundaries of `[0, len)` into `parts` cells, each refined
/// into `2^level` pieces, duplicates removed.
fn level_bounds(len: usize, parts: usize, level: usize) -> Vec<usize> {
    let mut b = Vec::new();
    let sub = 1usize << level;
    for c in 0..parts {
        let (lo, hi) = (c * len / parts, (c + 1) * len / parts);
        for k in 0..sub {
            b.push(lo + k * (hi - lo) / sub);
        }
    }
    b.push(len);
    b.dedup();
    b
}

struct Seeds<'a> {
    img: &'a GrayImage,
    w: usize,
    h: usize,
    bins: usize,
    labels: Vec<u32>,
    hist: Vec<Vec<u32>>,
    sizes: Vec<usize>,
    stamp: Vec<u32>,
    epoch: u32,
}

impl<'a> Seeds<'a> {
    #[inline]
    fn bin(&self, i: usize) -> usize {
        self.img.data()[i] as usize * self.bins / 256
    }

    /// Would `label` stay connected after removing `removed` (all of which
    /// currently carry `label`)?
    fn stays_connected(&mut self, label: u32, removed: &[usize]) -> bool {
        let remaining = self.sizes[label as usize - 1] - removed.len();
        if remaining == 0 {
            return false;
        }
        self.epoch = self.epoch.wrapping_add(2);
        if self.epoch < 2 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 2;
        }
        let (blocked, seen) = (self.epoch, self.epoch + 1);
        for &i in removed {
            self.stamp[i] = blocked;
        }
        // Seed from a remaining pixel adjacent to the removed set (must exist
        // when the label is connected and larger than the removed set).
        let w = self.w;
        let mut start = None;
        'find: for &i in removed {
            for j in neighbors4(i, w, self.h) {
                if self.labels[j] == label && self.stamp[j] != blocked {
                    start = Some(j);
                    break 'find;
                }
            }
        }
        let Some(start) = start else { return false };
        let mut stack = vec![start];
        self.stamp[start] = seen;
        let mut reached = 1;
        while let Some(i) = stack.pop() {
            for j in neighbors4(i, w, self.h) {
                if self.labels[j] == label && self.stamp[j] != blocked && self.stamp[j] != seen {
                    self.stamp[j] = seen;
                    reached += 1;
                    stack.push(j);
                }
            }
        }
        reached == remaining
    }

    /// Local simple-point test: the donor's pixels in the 8-ring around `i`
    /// form one 4-connected run, so removing `i` cannot split the donor.
    fn locally_simple(&self, i: usize, label: u32) -> bool {
        let (x, y) = ((i % self.w) as isize, (i / self.w) as isize);
        // Ring in cyclic order starting at the top-left corner.
        const RING: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];
        let inside = |dx: isize, dy: isize| {
            let (xx, yy) = (x + dx, y + dy);
            xx >= 0
                && yy >= 0
                && xx < self.w as isize
                && yy < self.h as isize
                && self.labels[yy as usize * self.w + xx as usize] == label
        };
        let on: Vec<bool> = RING.iter().map(|&(dx, dy)| inside(dx, dy)).collect();
        // A corner only links its two edge neighbours; drop isolated corners.
        let mut eff = on.clone();
        for k in [0usize, 2, 4, 6] {
            if on[k] && !on[(k + 1) % 8] && !on[(k + 7) % 8] {
                eff[k] = false;
            }
        }
        let runs = (0..8).filter(|&k| eff[k] && !eff[(k + 7) % 8]).count();
        let any = eff.iter().any(|&b| b);
        // Isolated corners are donor pixels reachable only through `i`.
        let isolated_corner = [0usize, 2, 4, 6]
            .iter()
            .any(|&k| on[k] && !on[(k + 1) % 8] && !on[(k + 7) % 8]);
        any && !isolated_corner && (runs == 1 || eff.iter().all(|&b| b))
    }

    fn move_pixels(&mut self, px: &[usize], from: u32, to: u32) {
        for &i in px {
            let b = self.bin(i);
            self.labels[i] = to;
            self.hist[from as usize - 1][b] -= 1;
            self.hist[to as usize - 1][b] += 1;
        }
        self.sizes[from as usize - 1] -= px.len();
        self.sizes[to as usize - 1] += px.len();
    }

    fn intersection(&self, block: &[u32], block_n: usize, label: u32, minus: Option<&[u32]>) -> f64 {
        let hist = &self.hist[label as usize - 1];
        let mut n = self.sizes[label as usize - 1];
        if minus.is_some() {
            n -= block_n;
        }
        if n == 0 {
            return f64::NEG_INFINITY;
        }
        let mut s = 0.0;
        for k in 0..self.bins {
            let hv = hist[k] - minus.map_or(0, |m| m[k]);
            s += (block[k] as f64 / block_n as f64).min(hv as f64 / n as f64);
        }
        s
    }

    fn block_sweep(&mut self, xs: &[usize], ys: &[usize]) {
        let (bw, bh) = (xs.len() - 1, ys.len() - 1);
        for by in 0..bh {
            for bx in 0..bw {
                let from = self.labels[ys[by] * self.w + xs[bx]];
                let mut px = Vec::new();
                let mut hist = vec![0u32; self.bins];
                for y in ys[by]..ys[by + 1] {
                    for x in xs[bx]..xs[bx + 1] {
                        let i = y * self.w + x;
                        debug_assert_eq!(self.labels[i], from, "blocks nest inside labels");
                        px.push(i);
                        hist[self.bin(i)] += 1;
                    }
                }
                if px.len() >= self.sizes[from as usize - 1] {
                    continue;
                }
                let mut candidates = Vec::new();
                let probe = |cx: isize, cy: isize| -> Option<u32> {
                    (cx >= 0 && cy >= 0 && (cx as usize) < bw && (cy as usize) < bh)
                        .then(|| self.labels[ys[cy as usize] * self.w + xs[cx as usize]])
                };
                for (dx, dy) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    if let Some(l) = probe(bx as isize + dx, by as isize + dy) {
                        if l != from && !candidates.contains(&l) {
                            candidates.push(l);
                        }
                    }
                }
                if candidates.is_empty() {
                    continue;
                }
                let stay = self.intersection(&hist, px.len(), from, Some(&hist));
                let mut best: Option<(f64, u32)> = None;
                for &t in &candidates {
                    let score = self.intersection(&hist, px.len(), t, None);
                    if score > stay && best.is_none_or(|(b, _)| score > b) {
                        best = Some((score, t));
                    }
                }
                if let Some((_, to)) = best {
                    if self.stays_connected(from, &px) {
                        self.move_pixels(&px, from, to);
                    }
                }
            }
        }
    }

    fn pixel_score(&self, i: usize, label: u32, exclude_self: bool) -> f64 {
        let b = self.bin(i);
        let (mut hv, mut n) = (self.hist[label as usize - 1][b] as f64, self.sizes[label as usize - 1] as f64);
        if exclude_self {
            hv -= 1.0;
            n -= 1.0;
        }
        if n <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let (x, y) = ((i % self.w) as isize, (i / self.w) as isize);
        let mut agree = 0;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (xx, yy) = (x + dx, y + dy);
                if (dx, dy) != (0, 0)
                    && xx >= 0
                    && yy >= 0
                    && xx < self.w as isize
                    && yy < self.h as isize
                    && self.labels[yy as usize * self.w + xx as usize] == label
                {
                    agree += 1;
                }
            }
        }
        hv / n * (1.0 + agree as f64)
    }

    fn pixel_sweep(&mut self) {
        for i in 0..self.w * self.h {
            let from = self.labels[i];
            if self.sizes[from as usize - 1] <= 1 {
                continue;
            }
            let mut candidates = Vec::with_capacity(4);
            for j in neighbors4(i, self.w, self.h) {
                let l = self.labels[j];
                if l != from && !candidates.contains(&l) {
                    candidates.push(l);
                }
            }
            if candidates.is_empty() {
                continue;
            }
            let stay = self.pixel_score(i, from, true);
            let mut best: Option<(f64, u32)> = None;
            for &t in &candidates {
                let s = self.pixel_score(i, t, false);
                if s > stay && best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, t));
                }
            }
            if let Some((_, to)) = best {
                if self.locally_simple(i, from) || self.stays_connected(from, &[i]) {
                    self.move_pixels(&[i], from, to);
                }
            }
        }
    }

    fn debug_check(&self) {
        debug_assert!(
            all_connected(&self.labels, self.w, self.h, self.sizes.len()) && self.sizes.iter().all(|&s| s > 0),
            "SEEDS partition invariant broken"
        );
    }
}

fn neighbors4(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// SEEDS over a region (typically the box crop). Labels are numbered in
/// raster order of the initial grid; the traversal order is the identity
/// until [`assign_traversal`] runs.
pub fn seeds_segment(region: &GrayImage, params: &SeedsParams) -> Result<SuperpixelMap> {
    let (w, h) = (region.width(), region.height());
    if w < MIN_BOX_SIDE || h < MIN_BOX_SIDE {
        return Err(Error::Param(format!("region {w}x{h} smaller than {MIN_BOX_SIDE}x{MIN_BOX_SIDE}")));
    }
    let (nx, ny) = params.validate(w, h)?;
    let count = nx * ny;
    let mut labels = vec![0u32; w * h];
    // Grid cells must match the integer bounds used for blocks.
    for y in 0..h {
        for x in 0..w {
            let cx = (0..nx).find(|&c| x < (c + 1) * w / nx).unwrap();
            let cy = (0..ny).find(|&c| y < (c + 1) * h / ny).unwrap();
            labels[y * w + x] = (cy * nx + cx) as u32 + 1;
        }
    }
    let mut seeds = Seeds {
        img: region,
        w,
        h,
        bins: params.bins,
        hist: vec![vec![0; params.bins]; count],
        sizes: vec![0; count],
        labels,
        stamp: vec![0; w * h],
        epoch: 0,
    };
    for i in 0..w * h {
        let (l, b) = (seeds.labels[i] as usize - 1, seeds.bin(i));
        seeds.hist[l][b] += 1;
        seeds.sizes[l] += 1;
    }
    if params.iterations > 0 {
        for level in 1..=params.block_levels {
            let xs = level_bounds(w, nx, level);
            let ys = level_bounds(h, ny, level);
            for _ in 0..params.iterations {
                seeds.block_sweep(&xs, &ys);
                seeds.debug_check();
            }
        }
        for _ in 0..params.iterations {
            seeds.pixel_sweep();
            seeds.debug_check();
        }
    }
    Ok(SuperpixelMap::from_labels(w, h, seeds.labels, count))
}

/// Indexes superpixels by raster order of their centroids (row of the
/// rounded centroid, then x), rotated so the superpixel under the box
/// center gets index `ceil(S/2)`. Also records the box as the map origin.
pub fn assign_traversal(map: &SuperpixelMap, b: &BoundingBox) -> SuperpixelMap {
    let s = map.count();
    let mut keyed: Vec<(i64, f64, u32)> = (1..=s as u32)
        .map(|l| {
            let (cx, cy) = map.centroid(l);
            (cy.round() as i64, cx, l)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let center_label = map.label_at((map.width / 2).min(map.width - 1), (map.height / 2).min(map.height - 1));
    let c = keyed.iter().position(|k| k.2 == center_label).unwrap();
    let start = s.div_ceil(2);
    let mut order = vec![0u32; s];
    for (p, k) in keyed.iter().enumerate() {
        let index = (p + s - c + start - 1) % s + 1;
        order[index - 1] = k.2;
    }
    let mut out = map.clone();
    out.order = order;
    out.bbox = BoundingBox::new(b.x0, b.y0, map.width, map.height);
    out
}

/// Distance (in pixels, Euclidean) from each ground-truth edge pixel to the
/// nearest superpixel boundary pixel is at most `tolerance` for this
/// fraction of edge pixels.
pub fn boundary_recall(map: &SuperpixelMap, gt_edges: &[(usize, usize)], tolerance: f64) -> f64 {
    if gt_edges.is_empty() {
        return 1.0;
    }
    let (w, h) = (map.width, map.height);
    let mut boundary = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = map.label_at(x, y);
            let i = y * w + x;
            if neighbors4(i, w, h).any(|j| map.labels[j] != l) {
                boundary.push((x, y));
            }
        }
    }
    let d2 = crate::metrics::squared_distance_map(w, h, &boundary);
    let ok = gt_edges
        .iter()
        .filter(|&&(x, y)| d2[y * w + x].sqrt() <= tolerance)
        .count();
    ok as f64 / gt_edges.len() as f64
}
