//! Raster types, synthetic ultrasound-like phantoms, PGM persistence and the
//! plain-text dataset manifest.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// 8-bit grayscale raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "{}x{} image needs {} bytes, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel with coordinates clamped into the image (edge replication).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn crop(&self, b: &BoundingBox) -> GrayImage {
        let mut data = Vec::with_capacity(b.w * b.h);
        for y in b.y0..b.y0 + b.h {
            data.extend_from_slice(&self.data[y * self.width + b.x0..y * self.width + b.x0 + b.w]);
        }
        GrayImage {
            width: b.w,
            height: b.h,
            data,
        }
    }

    pub fn extent(&self) -> BoundingBox {
        BoundingBox::new(0, 0, self.width, self.height)
    }
}

/// Binary label raster; stored values are 0 or 1.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    /// Any nonzero input value becomes 1.
    pub fn from_values(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Input(format!(
                "{}x{} mask needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            data: values.into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Tight box around the set pixels, `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BoundingBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    /// True when every set pixel lies inside `b`.
    pub fn within(&self, b: &BoundingBox) -> bool {
        (0..self.height).all(|y| (0..self.width).all(|x| !self.get(x, y) || b.contains(x, y)))
    }
}

/// Axis-aligned integer box: top-left corner and extent in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

/// Smallest box side accepted for annotations.
pub const MIN_BOX_SIDE: usize = 16;

impl BoundingBox {
    pub const fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        BoundingBox { x0, y0, w, h }
    }

    pub fn x1(&self) -> usize {
        self.x0 + self.w
    }

    pub fn y1(&self) -> usize {
        self.y0 + self.h
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1() && y >= self.y0 && y < self.y1()
    }

    /// Pixel holding the box center.
    pub fn center(&self) -> (usize, usize) {
        (self.x0 + self.w / 2, self.y0 + self.h / 2)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x1() <= width && self.y1() <= height
    }

    /// Grows the box by `margin` on every side, clamped to the image.
    pub fn dilate(&self, margin: usize, width: usize, height: usize) -> BoundingBox {
        let x0 = self.x0.saturating_sub(margin);
        let y0 = self.y0.saturating_sub(margin);
        let x1 = (self.x1() + margin).min(width);
        let y1 = (self.y1() + margin).min(height);
        BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Intersection with `[0,width) x [0,height)`; `None` when empty.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let x1 = self.x1().min(width);
        let y1 = self.y1().min(height);
        (self.x0 < x1 && self.y0 < y1).then(|| BoundingBox::new(self.x0, self.y0, x1 - self.x0, y1 - self.y0))
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.x0, self.y0, self.w, self.h)
    }
}

/// Translates `b` by `(dx, dy)` and clamps it inside a `width x height`
/// image. The size is kept unless the box is larger than the image.
pub fn shift_box(b: BoundingBox, dx: isize, dy: isize, width: usize, height: usize) -> BoundingBox {
    let w = b.w.min(width);
    let h = b.h.min(height);
    let x0 = (b.x0 as isize + dx).clamp(0, (width - w) as isize) as usize;
    let y0 = (b.y0 as isize + dy).clamp(0, (height - h) as isize) as usize;
    BoundingBox::new(x0, y0, w, h)
}

#[derive(Clone, Debug, PartialEq)]
pub enum NoduleShape {
    /// Radii in pixels, rotation in radians.
    Ellipse { rx: f64, ry: f64, angle: f64 },
    /// Radius modulated by `1 + sum(amp * cos(freq * phi + phase))`.
    Lobulated { radius: f64, lobes: Vec<Lobe> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lobe {
    pub amplitude: f64,
    pub frequency: u32,
    pub phase: f64,
}

impl NoduleShape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match self {
            NoduleShape::Ellipse { rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            NoduleShape::Lobulated { radius, lobes } => {
                let phi = dy.atan2(dx);
                let r = radius
                    * (1.0
                        + lobes
                            .iter()
                            .map(|l| l.amplitude * (l.frequency as f64 * phi + l.phase).cos())
                            .sum::<f64>());
                (dx * dx + dy * dy).sqrt() <= r
            }
        }
    }
}

/// Parameters of one synthetic phantom. The nodule is hypo- or hyperechoic
/// against a layered, speckled background.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    /// Nodule center in continuous coordinates (pixel `x` spans `[x, x+1)`).
    pub center: (f64, f64),
    pub shape: NoduleShape,
    pub mean_fg: f64,
    pub mean_bg: f64,
    /// 0 disables speckle, 1 is fully developed (Rayleigh) speckle.
    pub speckle: f64,
    /// Amplitude of the horizontal tissue layering of the background.
    pub layer_amplitude: f64,
    pub layer_phase: f64,
    pub margin: usize,
    pub min_contrast: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn contrast(&self) -> f64 {
        (self.mean_fg - self.mean_bg).abs()
    }

    fn validate(&self) -> Result<()> {
        if self.width < MIN_BOX_SIDE || self.height < MIN_BOX_SIDE {
            return Err(Error::Param(format!("canvas {}x{} too small", self.width, self.height)));
        }
        if !(self.min_contrast > 0.0) {
            return Err(Error::Param("minimum contrast must be positive".into()));
        }
        if self.contrast() < self.min_contrast {
            return Err(Error::Param(format!(
                "contrast {:.1} below minimum {:.1}",
                self.contrast(),
                self.min_contrast
            )));
        }
        for v in [self.mean_fg, self.mean_bg] {
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::Param(format!("mean intensity {v} outside [0,255]")));
            }
        }
        if !(0.0..=1.0).contains(&self.speckle) {
            return Err(Error::Param(format!("speckle {} outside [0,1]", self.speckle)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: GrayImage,
    pub mask: Mask,
    pub bbox: BoundingBox,
}

fn rayleigh_unit_mean<R: Rng>(rng: &mut R) -> f64 {
    // sigma * sqrt(pi/2) == 1
    let sigma = (2.0 / PI).sqrt();
    let u: f64 = rng.random::<f64>();
    sigma * (-2.0 * (1.0 - u).ln()).sqrt()
}

/// Smoothed multiplicative speckle field with unit mean.
fn speckle_field(spec: &PhantomSpec) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let raw: Vec<f64> = (0..w * h)
        .map(|_| 1.0 + spec.speckle * (rayleigh_unit_mean(&mut rng) - 1.0))
        .collect();
    box_filter3(&raw, w, h)
}

/// 3x3 mean with edge replication.
pub(crate) fn box_filter3(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -1isize..=1 {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    s += src[yy * w + xx];
                }
            }
            out[y * w + x] = s / 9.0;
        }
    }
    out
}

fn nodule_mask(spec: &PhantomSpec) -> Mask {
    let mut mask = Mask::empty(spec.width, spec.height);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let dx = x as f64 + 0.5 - spec.center.0;
            let dy = y as f64 + 0.5 - spec.center.1;
            if spec.shape.contains(dx, dy) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

fn render(spec: &PhantomSpec, mask: Option<&Mask>) -> GrayImage {
    let noise = speckle_field(spec);
    let period = spec.height as f64 / 2.0;
    let mut img = GrayImage::filled(spec.width, spec.height, 0);
    for y in 0..spec.height {
        let layer = spec.layer_amplitude * (2.0 * PI * y as f64 / period + spec.layer_phase).sin();
        for x in 0..spec.width {
            let tissue = if mask.is_some_and(|m| m.get(x, y)) {
                spec.mean_fg
            } else {
                spec.mean_bg + layer
            };
            let v = (tissue * noise[y * spec.width + x]).round().clamp(0.0, 255.0);
            img.set(x, y, v as u8);
        }
    }
    img
}

/// Renders the phantom; the box is the tight box of the nodule dilated by
/// `spec.margin`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mask = nodule_mask(spec);
    let tight = mask
        .tight_box()
        .ok_or_else(|| Error::PhantomRejected("nodule covers no pixel".into()))?;
    if tight.x0 == 0 || tight.y0 == 0 || tight.x1() >= spec.width || tight.y1() >= spec.height {
        return Err(Error::PhantomRejected(format!(
            "nodule {tight} does not fit a {}x{} canvas",
            spec.width, spec.height
        )));
    }
    let bbox = tight.dilate(spec.margin, spec.width, spec.height);
    if bbox.w < MIN_BOX_SIDE || bbox.h < MIN_BOX_SIDE {
        return Err(Error::PhantomRejected(format!("box {bbox} smaller than {MIN_BOX_SIDE} px")));
    }
    let image = render(spec, Some(&mask));
    Ok(Phantom { image, mask, bbox })
}

/// The same tissue and speckle realization without the nodule.
pub fn generate_normal_tissue(spec: &PhantomSpec) -> Result<GrayImage> {
    spec.validate()?;
    Ok(render(spec, None))
}

/// Ranges for drawing random phantom specs.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSampler {
    pub width: usize,
    pub height: usize,
    pub bg_mean: (f64, f64),
    pub contrast: (f64, f64),
    /// Probability that the nodule is darker than the background.
    pub hypoechoic_prob: f64,
    pub speckle: (f64, f64),
    pub layer_amplitude: (f64, f64),
    /// Ellipse radii / lobulated base radius, pixels.
    pub radius: (f64, f64),
    pub lobulated_prob: f64,
    pub margin: usize,
    pub min_contrast: f64,
}

impl Default for PhantomSampler {
    fn default() -> Self {
        PhantomSampler {
            width: 96,
            height: 96,
            bg_mean: (120.0, 170.0),
            contrast: (60.0, 100.0),
            hypoechoic_prob: 1.0,
            speckle: (0.6, 1.0),
            layer_amplitude: (0.0, 12.0),
            radius: (8.0, 18.0),
            lobulated_prob: 0.5,
            margin: 4,
            min_contrast: 40.0,
        }
    }
}

/// Tissue appearance shared by all phantoms of one synthetic patient.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueProfile {
    pub mean_bg: f64,
    pub mean_fg: f64,
    pub speckle: f64,
    pub layer_amplitude: f64,
    pub lobulated: bool,
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl PhantomSampler {
    pub fn profile<R: Rng>(&self, rng: &mut R) -> TissueProfile {
        let mean_bg = uniform(rng, self.bg_mean);
        let contrast = uniform(rng, self.contrast);
        let dark = rng.random::<f64>() < self.hypoechoic_prob;
        let mean_fg = if dark { mean_bg - contrast } else { mean_bg + contrast }.clamp(0.0, 255.0);
        TissueProfile {
            mean_bg,
            mean_fg,
            speckle: uniform(rng, self.speckle),
            layer_amplitude: uniform(rng, self.layer_amplitude),
            lobulated: rng.random::<f64>() < self.lobulated_prob,
        }
    }

    /// Draws a spec for `profile` whose box sits at least `flank` pixels
    /// from the left and right canvas edges.
    pub fn sample<R: Rng>(&self, rng: &mut R, profile: &TissueProfile, flank: usize) -> PhantomSpec {
        let shape = if profile.lobulated {
            let n = rng.random_range(2..=3);
            NoduleShape::Lobulated {
                radius: uniform(rng, (self.radius.0, self.radius.1 * 0.9)),
                lobes: (0..n)
                    .map(|_| Lobe {
                        amplitude: uniform(rng, (0.04, 0.12)),
                        frequency: rng.random_range(2..=5),
                        phase: uniform(rng, (0.0, 2.0 * PI)),
                    })
                    .collect(),
            }
        } else {
            NoduleShape::Ellipse {
                rx: uniform(rng, self.radius),
                ry: uniform(rng, self.radius),
                angle: uniform(rng, (0.0, PI)),
            }
        };
        let reach = match &shape {
            NoduleShape::Ellipse { rx, ry, .. } => rx.max(*ry),
            NoduleShape::Lobulated { radius, lobes } => {
                radius * (1.0 + lobes.iter().map(|l| l.amplitude).sum::<f64>())
            }
        };
        let pad_x = reach + (self.margin + flank) as f64 + 1.0;
        let pad_y = reach + self.margin as f64 + 2.0;
        let cx = uniform(rng, (pad_x, (self.width as f64 - pad_x).max(pad_x)));
        let cy = uniform(rng, (pad_y, (self.height as f64 - pad_y).max(pad_y)));
        PhantomSpec {
            width: self.width,
            height: self.height,
            center: (cx, cy),
            shape,
            mean_fg: profile.mean_fg,
            mean_bg: profile.mean_bg,
            speckle: profile.speckle,
            layer_amplitude: profile.layer_amplitude,
            layer_phase: uniform(rng, (0.0, 2.0 * PI)),
            margin: self.margin,
            min_contrast: self.min_contrast,
            seed: rng.random(),
        }
    }
}

// ---------------------------------------------------------------------------
// PGM

fn fmt_err(path: &str, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_string(),
        offset,
        msg: msg.into(),
    }
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a P5 file with maxval 255; `origin` labels error messages.
pub fn decode_pgm(buf: &[u8], origin: &str) -> Result<(usize, usize, Vec<u8>)> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(fmt_err(origin, 0, "expected P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments
        loop {
            match buf.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(origin, start, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&buf[start..pos]).unwrap();
        fields[i] = text
            .parse()
            .map_err(|_| fmt_err(origin, start, format!("{name} out of range")))?;
        if i == 2 && fields[2] != 255 {
            return Err(fmt_err(origin, start, format!("unsupported maxval {}", fields[2])));
        }
    }
    if !buf.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(fmt_err(origin, pos, "expected whitespace after header"));
    }
    pos += 1;
    let [w, h, _] = fields;
    if w == 0 || h == 0 {
        return Err(fmt_err(origin, pos, "zero image dimension"));
    }
    let payload = &buf[pos..];
    if payload.len() < w * h {
        return Err(fmt_err(
            origin,
            buf.len(),
            format!("truncated payload: {} of {} bytes", payload.len(), w * h),
        ));
    }
    if payload.len() > w * h {
        return Err(fmt_err(origin, pos + w * h, "trailing bytes after payload"));
    }
    Ok((w, h, payload.to_vec()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            detail: "file not found".into(),
        },
        _ => Error::Io(e),
    })
}

pub fn save_image(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(img.width, img.height, &img.data))?;
    Ok(())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let (w, h, data) = decode_pgm(&read_file(path)?, &path.display().to_string())?;
    GrayImage::new(w, h, data)
}

/// Masks are stored as PGM with values {0, 255}.
pub fn save_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let px: Vec<u8> = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(mask.width, mask.height, &px))?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let buf = read_file(path)?;
    let (w, h, data) = decode_pgm(&buf, &path.display().to_string())?;
    let header = buf.len() - data.len();
    if let Some(i) = data.iter().position(|&v| v != 0 && v != 255) {
        return Err(fmt_err(
            &path.display().to_string(),
            header + i,
            format!("mask value {} is not 0 or 255", data[i]),
        ));
    }
    Mask::from_values(w, h, data)
}

// ---------------------------------------------------------------------------
// Dataset manifest: one record per line, `<image> <mask> <x0> <y0> <w> <h>`,
// paths relative to the manifest's directory; `#` starts a comment.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub bbox: BoundingBox,
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let mut out = String::from("# image mask x0 y0 w h\n");
    for r in records {
        out.push_str(&format!("{} {} {}\n", r.image.display(), r.mask.display(), r.bbox));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let text = String::from_utf8(read_file(path)?)
        .map_err(|e| fmt_err(&path.display().to_string(), e.utf8_error().valid_up_to(), "not UTF-8"))?;
    let mut records = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap().trim();
        if !body.is_empty() {
            let parts: Vec<&str> = body.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(fmt_err(
                    &path.display().to_string(),
                    offset,
                    format!("expected 6 fields, found {}", parts.len()),
                ));
            }
            let mut nums = [0usize; 4];
            for (n, p) in nums.iter_mut().zip(&parts[2..]) {
                *n = p
                    .parse()
                    .map_err(|_| fmt_err(&path.display().to_string(), offset, format!("bad box field {p:?}")))?;
            }
            records.push(DatasetRecord {
                image: PathBuf::from(parts[0]),
                mask: PathBuf::from(parts[1]),
                bbox: BoundingBox::new(nums[0], nums[1], nums[2], nums[3]),
            });
        }
        offset += line.len();
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ellipse_spec() -> PhantomSpec {
        PhantomSpec {
            width: 64,
            height: 64,
            center: (32.0, 32.0),
            shape: NoduleShape::Ellipse {
                rx: 10.0,
                ry: 8.0,
                angle: 0.0,
            },
            mean_fg: 60.0,
            mean_bg: 150.0,
            speckle: 0.8,
            layer_amplitude: 5.0,
            layer_phase: 0.3,
            margin: 4,
            min_contrast: 20.0,
            seed: 7,
        }
    }

    #[test]
    fn ellipse_box_is_tight_box_plus_margin() {
        let p = generate_phantom(&ellipse_spec()).unwrap();
        assert_eq!((p.bbox.w, p.bbox.h), (28, 24));
        assert_eq!(p.bbox.center(), (32, 32));
        assert!(p.mask.within(&p.bbox));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom(&ellipse_spec()).unwrap();
        let b = generate_phantom(&ellipse_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = ellipse_spec();
        other.seed = 8;
        assert_ne!(generate_phantom(&other).unwrap().image, a.image);
    }

    #[test]
    fn normal_tissue_shares_speckle_outside_nodule() {
        let spec = ellipse_spec();
        let p = generate_phantom(&spec).unwrap();
        let t = generate_normal_tissue(&spec).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if !p.mask.get(x, y) {
                    assert_eq!(p.image.get(x, y), t.get(x, y));
                }
            }
        }
    }

    #[test]
    fn oversized_nodule_is_rejected() {
        let mut spec = ellipse_spec();
        spec.shape = NoduleShape::Ellipse {
            rx: 40.0,
            ry: 8.0,
            angle: 0.0,
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::PhantomRejected(_))));
        let mut low = ellipse_spec();
        low.mean_fg = 140.0;
        assert!(matches!(generate_phantom(&low), Err(Error::Param(_))));
    }

    #[test]
    fn shift_box_cases() {
        let b = BoundingBox::new(10, 10, 20, 20);
        assert_eq!(shift_box(b, 0, 0, 64, 64), b);
        assert_eq!(shift_box(b, 5, -3, 64, 64), BoundingBox::new(15, 7, 20, 20));
        assert_eq!(shift_box(b, 1000, 0, 64, 64), BoundingBox::new(44, 10, 20, 20));
        assert_eq!(shift_box(b, -1000, -1000, 64, 64), BoundingBox::new(0, 0, 20, 20));
        assert_eq!(shift_box(BoundingBox::new(0, 0, 80, 10), 3, 0, 64, 64).w, 64);
    }

    #[test]
    fn pgm_header_size() {
        let bytes = encode_pgm(3, 2, &[1, 2, 3, 4, 5, 6]);
        // "P5\n3 2\n255\n" is 11 bytes
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(decode_pgm(&bytes, "mem").unwrap(), (3, 2, vec![1, 2, 3, 4, 5, 6]));
    }

    #[test]
    fn pgm_rejects_bad_input() {
        let wide = b"P5\n2 1\n65535\n\x00\x01\x00\x02";
        match decode_pgm(wide, "x") {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 7);
                assert!(msg.contains("maxval"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n\x00", "x"), Err(Error::Format { offset: 0, .. })));
        match decode_pgm(b"P5\n4 4\n255\n\x00\x00", "x") {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("truncated")),
            other => panic!("{other:?}"),
        }
        let with_comment = b"P5\n# hi\n1 1\n255\n\x07";
        assert_eq!(decode_pgm(with_comment, "x").unwrap().2, vec![7]);
    }

    #[test]
    fn mask_file_values_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        std::fs::write(&p, encode_pgm(2, 1, &[0, 17])).unwrap();
        assert!(matches!(load_mask(&p), Err(Error::Format { offset: 12, .. })));
        let mut m = Mask::empty(3, 2);
        m.set(1, 1, true);
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            DatasetRecord {
                image: "a.pgm".into(),
                mask: "a_mask.pgm".into(),
                bbox: BoundingBox::new(1, 2, 30, 40),
            },
            DatasetRecord {
                image: "b.pgm".into(),
                mask: "b_mask.pgm".into(),
                bbox: BoundingBox::new(5, 6, 17, 18),
            },
        ];
        let p = dir.path().join("train.txt");
        write_manifest(&p, &recs).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), recs);
        std::fs::write(&p, "a.pgm b.pgm 1 2 3\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Format { offset: 0, .. })));
    }
}
