//! Segmentation metrics: DICE, Jaccard, Conformity (percent) and Hausdorff /
//! average surface distance (pixels).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imaging::Mask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub jac: f64,
    /// `None` when DICE is 0.
    pub con: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub dice: f64,
    pub jac: f64,
    pub con: Option<f64>,
    /// `None` when either mask is empty.
    pub hd: Option<f64>,
    pub asd: Option<f64>,
}

fn check_shape(pred: &Mask, gt: &Mask) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Input(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

pub fn overlap_metrics(pred: &Mask, gt: &Mask) -> Result<Overlap> {
    check_shape(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok(Overlap {
            dice: 100.0,
            jac: 100.0,
            con: Some(100.0),
        });
    }
    let dice = 200.0 * inter as f64 / (p + g) as f64;
    let jac = 100.0 * inter as f64 / (p + g - inter) as f64;
    let con = (dice > 0.0).then(|| 100.0 * (3.0 - 2.0 / (dice / 100.0)));
    Ok(Overlap { dice, jac, con })
}

/// `|P \ G| / |G|`.
pub fn over_segmentation(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shape(pred, gt)?;
    let g = gt.count();
    if g == 0 {
        return Err(Error::UndefinedMetric("over-segmentation needs a non-empty ground truth".into()));
    }
    let extra = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(&a, &b)| a != 0 && b == 0)
        .count();
    Ok(extra as f64 / g as f64)
}

/// Mask pixels with a 4-neighbour outside the mask (image exterior counts as
/// outside), in raster order.
pub fn boundary_pixels(mask: &Mask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            // No finite parabola yet.
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if f[v[0]].is_infinite() {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        d[q] = dq * dq + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
pub(crate) fn squared_distance_map(width: usize, height: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; width * height];
    for &(x, y) in sites {
        grid[y * width + x] = 0.0;
    }
    let n = width.max(height);
    let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        edt_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&d[..width]);
    }
    grid
}

/// Hausdorff distance and average symmetric surface distance between mask
/// boundaries.
pub fn boundary_metrics(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    check_shape(pred, gt)?;
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    if bp.is_empty() || bg.is_empty() {
        return Err(Error::UndefinedMetric("boundary distance of an empty mask".into()));
    }
    let (w, h) = (pred.width(), pred.height());
    let to_gt = squared_distance_map(w, h, &bg);
    let to_pred = squared_distance_map(w, h, &bp);
    let mut hd = 0.0f64;
    let mut total = 0.0;
    for &(x, y) in &bp {
        let d = to_gt[y * w + x].sqrt();
        hd = hd.max(d);
        total += d;
    }
    for &(x, y) in &bg {
        let d = to_pred[y * w + x].sqrt();
        hd = hd.max(d);
        total += d;
    }
    Ok((hd, total / (bp.len() + bg.len()) as f64))
}

pub fn evaluate(pred: &Mask, gt: &Mask) -> Result<MetricReport> {
    let o = overlap_metrics(pred, gt)?;
    let (hd, asd) = match boundary_metrics(pred, gt) {
        Ok((hd, asd)) => (Some(hd), Some(asd)),
        Err(Error::UndefinedMetric(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        dice: o.dice,
        jac: o.jac,
        con: o.con,
        hd,
        asd,
    })
}

/// Mean and sample standard deviation over the defined values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Summary {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub dice: Summary,
    pub jac: Summary,
    pub con: Summary,
    pub hd: Summary,
    pub asd: Summary,
}

pub fn aggregate(reports: &[MetricReport]) -> Aggregate {
    Aggregate {
        dice: Summary::of(reports.iter().map(|r| r.dice)),
        jac: Summary::of(reports.iter().map(|r| r.jac)),
        con: Summary::of(reports.iter().filter_map(|r| r.con)),
        hd: Summary::of(reports.iter().filter_map(|r| r.hd)),
        asd: Summary::of(reports.iter().filter_map(|r| r.asd)),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

/// Per-image CSV; rows must already be in a stable order.
pub fn per_image_csv(rows: &[(String, MetricReport)]) -> String {
    let mut s = String::from("id,dice,jac,con,hd,asd\n");
    for (id, r) in rows {
        let _ = writeln!(s, "{id},{:.6},{:.6},{},{},{}", r.dice, r.jac, opt(r.con), opt(r.hd), opt(r.asd));
    }
    s
}

/// Aggregate rows as CSV: `label,metric,mean,std,n`.
pub fn aggregate_csv(rows: &[(String, Aggregate)]) -> String {
    let mut s = String::from("label,metric,mean,std,n\n");
    for (label, a) in rows {
        for (name, m) in [("dice", a.dice), ("jac", a.jac), ("con", a.con), ("hd", a.hd), ("asd", a.asd)] {
            let _ = writeln!(s, "{label},{name},{:.6},{:.6},{}", m.mean, m.std, m.n);
        }
    }
    s
}

/// Plain-text table with `mean±std` cells.
pub fn pretty_table(rows: &[(String, Aggregate)]) -> String {
    let cell = |m: Summary| format!("{:.2}±{:.2}", m.mean, m.std);
    let label_w = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max(5);
    let mut s = format!(
        "{:<label_w$} | {:>14} | {:>14} | {:>16} | {:>14} | {:>14}\n",
        "", "DICE", "JAC", "CON", "HD", "ASD"
    );
    for (label, a) in rows {
        let _ = writeln!(
            s,
            "{:<label_w$} | {:>14} | {:>14} | {:>16} | {:>14} | {:>14}",
            label,
            cell(a.dice),
            cell(a.jac),
            cell(a.con),
            cell(a.hd),
            cell(a.asd)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(w: usize, h: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::empty(w, h);
        for &(x, y) in on {
            m.set(x, y, true);
        }
        m
    }

    #[test]
    fn identical_masks() {
        let m = mask_from(6, 6, &[(1, 1), (2, 1), (1, 2), (2, 2)]);
        let o = overlap_metrics(&m, &m).unwrap();
        assert_eq!((o.dice, o.jac, o.con), (100.0, 100.0, Some(100.0)));
        assert_eq!(boundary_metrics(&m, &m).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn disjoint_masks() {
        let a = mask_from(6, 6, &[(0, 0)]);
        let b = mask_from(6, 6, &[(5, 5)]);
        let o = overlap_metrics(&a, &b).unwrap();
        assert_eq!((o.dice, o.jac, o.con), (0.0, 0.0, None));
    }

    #[test]
    fn half_overlap_hand_values() {
        let p = mask_from(4, 4, &[(0, 0), (1, 0), (2, 0), (3, 0)]);
        let g = mask_from(4, 4, &[(2, 0), (3, 0), (0, 1), (1, 1)]);
        let o = overlap_metrics(&p, &g).unwrap();
        assert!((o.dice - 50.0).abs() < 1e-12);
        assert!((o.jac - 100.0 / 3.0).abs() < 1e-12);
        assert!((o.con.unwrap() + 100.0).abs() < 1e-12);
    }

    #[test]
    fn both_empty_is_perfect() {
        let e = Mask::empty(3, 3);
        assert_eq!(overlap_metrics(&e, &e).unwrap().dice, 100.0);
        assert!(matches!(boundary_metrics(&e, &e), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn three_four_five() {
        let a = mask_from(8, 8, &[(0, 0)]);
        let b = mask_from(8, 8, &[(3, 4)]);
        assert_eq!(boundary_metrics(&a, &b).unwrap(), (5.0, 5.0));
    }

    #[test]
    fn shape_mismatch() {
        assert!(overlap_metrics(&Mask::empty(2, 2), &Mask::empty(3, 2)).is_err());
    }

    #[test]
    fn over_segmentation_counts_extra_pixels() {
        let g = mask_from(4, 4, &[(0, 0), (1, 0)]);
        let p = mask_from(4, 4, &[(0, 0), (1, 0), (2, 0)]);
        assert_eq!(over_segmentation(&p, &g).unwrap(), 0.5);
    }

    #[test]
    fn table_layout() {
        let r = evaluate(&mask_from(4, 4, &[(1, 1)]), &mask_from(4, 4, &[(1, 1)])).unwrap();
        let t = pretty_table(&[("Ours".into(), aggregate(&[r, r]))]);
        assert!(t.contains("100.00±0.00"));
        assert!(aggregate_csv(&[("x".into(), aggregate(&[r]))]).lines().count() == 6);
    }
}
