//! Pseudo-background synthesis for the box interior: two flank patches are
//! blended column by column with a linear mixup weight, then the pasted
//! border is smoothed with a 3x3 mean.

use crate::error::{Error, Result};
use crate::imaging::{BoundingBox, GrayImage};

/// Flanks narrower than this cannot supply patches.
pub const MIN_FLANK: usize = 8;
/// Width of the smoothed band straddling the box border.
pub const SEAM_BAND: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flank {
    Left,
    Right,
    Top,
    Bottom,
}

/// Patches oriented so that their columns run along the blend axis; both are
/// as tall as the box (top/bottom flanks are transposed).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub p_f: GrayImage,
    pub p_g: GrayImage,
    pub sources: (Flank, Flank),
}

impl PatchPair {
    pub fn w_f(&self) -> usize {
        self.p_f.width()
    }

    pub fn w_g(&self) -> usize {
        self.p_g.width()
    }
}

fn flank_depth(img: &GrayImage, b: &BoundingBox, flank: Flank) -> usize {
    match flank {
        Flank::Left => b.x0,
        Flank::Right => img.width() - b.x1(),
        Flank::Top => b.y0,
        Flank::Bottom => img.height() - b.y1(),
    }
}

fn transpose(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut out = GrayImage::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, img.get(x, y));
        }
    }
    out
}

fn take_patch(img: &GrayImage, b: &BoundingBox, flank: Flank) -> GrayImage {
    let depth = flank_depth(img, b, flank).min(b.w.div_ceil(2));
    match flank {
        Flank::Left => img.crop(&BoundingBox::new(b.x0 - depth, b.y0, depth, b.h)),
        Flank::Right => img.crop(&BoundingBox::new(b.x1(), b.y0, depth, b.h)),
        Flank::Top => transpose(&img.crop(&BoundingBox::new(b.x0, b.y0 - depth, b.w, depth))),
        Flank::Bottom => transpose(&img.crop(&BoundingBox::new(b.x0, b.y1(), b.w, depth))),
    }
}

/// Picks the nearest usable flanks: left for `p_f` and right for `p_g`,
/// falling back in the order left, right, top, bottom. A single usable
/// flank supplies both patches.
pub fn propose_patches(img: &GrayImage, b: &BoundingBox) -> Result<PatchPair> {
    if !b.fits(img.width(), img.height()) {
        return Err(Error::Input(format!("box {b} outside {}x{} image", img.width(), img.height())));
    }
    let usable: Vec<Flank> = [Flank::Left, Flank::Right, Flank::Top, Flank::Bottom]
        .into_iter()
        .filter(|&f| flank_depth(img, b, f) >= MIN_FLANK)
        .collect();
    let (f, g) = match usable.as_slice() {
        [] => return Err(Error::FillSourceUnavailable),
        [only] => (*only, *only),
        [first, second, ..] => (*first, *second),
    };
    Ok(PatchPair {
        p_f: take_patch(img, b, f),
        p_g: take_patch(img, b, g),
        sources: (f, g),
    })
}

/// Mirror-tiled index into `0..len`.
#[inline]
fn mirror(i: usize, len: usize) -> usize {
    let m = i % (2 * len);
    if m < len {
        m
    } else {
        2 * len - 1 - m
    }
}

/// `out(x, y) = a p_f(x, y) + (1 - a) p_g(x, y)` with
/// `a = clamp(x / ((w_f + w_g) / 2), 0, 1)`; patches are mirror-tiled to
/// cover `width x height`.
pub fn mixup_fill(pair: &PatchPair, width: usize, height: usize) -> GrayImage {
    let (pf, pg) = (&pair.p_f, &pair.p_g);
    let half = (pair.w_f() + pair.w_g()) as f64 / 2.0;
    let mut out = GrayImage::filled(width, height, 0);
    for y in 0..height {
        let (yf, yg) = (mirror(y, pf.height()), mirror(y, pg.height()));
        for x in 0..width {
            let alpha = (x as f64 / half).clamp(0.0, 1.0);
            let f = pf.get(mirror(x, pf.width()), yf) as f64;
            let g = pg.get(mirror(x, pg.width()), yg) as f64;
            let v = alpha * f + (1.0 - alpha) * g;
            out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Source image outside the box, synthesized content inside. Only the seam
/// band (one ring outside the box, two rings inside) differs from a plain
/// paste.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundImage {
    pub image: GrayImage,
    pub bbox: BoundingBox,
}

fn ring_index(b: &BoundingBox, x: usize, y: usize) -> isize {
    // 0 is the outermost ring inside the box, -1 the first ring outside.
    let (x, y) = (x as isize, y as isize);
    let (x0, y0) = (b.x0 as isize, b.y0 as isize);
    let (x1, y1) = (b.x1() as isize - 1, b.y1() as isize - 1);
    let dx = (x - x0).min(x1 - x);
    let dy = (y - y0).min(y1 - y);
    if dx >= 0 && dy >= 0 {
        dx.min(dy)
    } else {
        // Chebyshev distance outside, negated.
        -(((x0 - x).max(x - x1)).max((y0 - y).max(y - y1)))
    }
}

pub fn in_seam_band(b: &BoundingBox, x: usize, y: usize) -> bool {
    (-1..=(SEAM_BAND as isize - 2)).contains(&ring_index(b, x, y))
}

pub fn build_background(img: &GrayImage, b: &BoundingBox) -> Result<BackgroundImage> {
    let pair = propose_patches(img, b)?;
    let patch = mixup_fill(&pair, b.w, b.h);
    let mut pasted = img.clone();
    for y in 0..b.h {
        for x in 0..b.w {
            pasted.set(b.x0 + x, b.y0 + y, patch.get(x, y));
        }
    }
    let mut out = pasted.clone();
    let y_lo = b.y0.saturating_sub(1);
    let y_hi = (b.y1() + 1).min(img.height());
    let x_lo = b.x0.saturating_sub(1);
    let x_hi = (b.x1() + 1).min(img.width());
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if !in_seam_band(b, x, y) {
                continue;
            }
            let mut s = 0u32;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    s += pasted.get_clamped(x as isize + dx, y as isize + dy) as u32;
                }
            }
            out.set(x, y, ((s as f64) / 9.0).round() as u8);
        }
    }
    Ok(BackgroundImage { image: out, bbox: *b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noisy(w: usize, h: usize) -> GrayImage {
        let data = (0..w * h).map(|i| ((i * 7919) % 251) as u8).collect();
        GrayImage::new(w, h, data).unwrap()
    }

    #[test]
    fn centered_box_uses_left_and_right() {
        let img = noisy(96, 96);
        let b = BoundingBox::new(33, 30, 30, 36);
        let pair = propose_patches(&img, &b).unwrap();
        assert_eq!(pair.sources, (Flank::Left, Flank::Right));
        assert_eq!((pair.w_f(), pair.w_g()), (15, 15));
        assert_eq!(pair.p_f.height(), 36);
        assert_eq!(pair.p_f.get(14, 0), img.get(32, 30));
        assert_eq!(pair.p_g.get(0, 0), img.get(63, 30));
    }

    #[test]
    fn flush_left_falls_back_to_right_and_top() {
        let img = noisy(96, 96);
        let b = BoundingBox::new(0, 30, 30, 20);
        let pair = propose_patches(&img, &b).unwrap();
        assert_eq!(pair.sources, (Flank::Right, Flank::Top));
        // Transposed top flank: height is the box width.
        assert_eq!(pair.p_g.height(), 30);
        assert_eq!(pair.p_g.width(), 15);
    }

    #[test]
    fn whole_image_box_has_no_source() {
        let img = noisy(40, 40);
        assert!(matches!(
            propose_patches(&img, &BoundingBox::new(0, 0, 40, 40)),
            Err(Error::FillSourceUnavailable)
        ));
        assert!(matches!(
            build_background(&img, &BoundingBox::new(3, 3, 34, 34)),
            Err(Error::FillSourceUnavailable)
        ));
    }

    fn constant_pair(vf: u8, vg: u8, wf: usize, wg: usize, h: usize) -> PatchPair {
        PatchPair {
            p_f: GrayImage::filled(wf, h, vf),
            p_g: GrayImage::filled(wg, h, vg),
            sources: (Flank::Left, Flank::Right),
        }
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let pair = constant_pair(200, 100, 10, 10, 4);
        let out = mixup_fill(&pair, 20, 4);
        assert_eq!(out.get(0, 0), 100); // alpha 0
        assert_eq!(out.get(5, 2), 150); // alpha 0.5
        assert_eq!(out.get(10, 1), 200); // alpha 1
        assert_eq!(out.get(19, 3), 200); // clamped
    }

    #[test]
    fn mixup_column_zero_is_p_g() {
        let img = noisy(96, 96);
        let pair = propose_patches(&img, &BoundingBox::new(33, 30, 30, 36)).unwrap();
        let out = mixup_fill(&pair, 30, 36);
        for y in 0..36 {
            assert_eq!(out.get(0, y), pair.p_g.get(0, y));
        }
    }

    #[test]
    fn constant_image_is_a_fixpoint() {
        let img = GrayImage::filled(64, 64, 123);
        let bg = build_background(&img, &BoundingBox::new(20, 20, 24, 24)).unwrap();
        assert_eq!(bg.image, img);
    }

    #[test]
    fn exterior_is_preserved() {
        let img = noisy(96, 80);
        let b = BoundingBox::new(30, 20, 28, 30);
        let bg = build_background(&img, &b).unwrap();
        let outer = b.dilate(1, 96, 80);
        for y in 0..80 {
            for x in 0..96 {
                if !outer.contains(x, y) {
                    assert_eq!(bg.image.get(x, y), img.get(x, y));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn blend_is_monotone_for_constant_patches(vg in 0u8..128, extra in 1u8..128, wf in 1usize..20, wg in 1usize..20, w in 1usize..50) {
            let vf = vg + extra;
            let out = mixup_fill(&constant_pair(vf, vg, wf, wg, 3), w, 3);
            for x in 1..w {
                prop_assert!(out.get(x, 1) >= out.get(x - 1, 1));
            }
        }
    }
}
