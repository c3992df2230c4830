//! Overlap and surface-distance metrics for label maps.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

impl ClassMetrics {
    fn mean(items: &[ClassMetrics]) -> ClassMetrics {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&ClassMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        ClassMetrics {
            dice: sum(|m| m.dice),
            jaccard: sum(|m| m.jaccard),
            hd95: sum(|m| m.hd95),
            asd: sum(|m| m.asd),
        }
    }
}

/// Scores for target classes `1..C`; background is not reported.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// `(class, metrics)` in class order.
    pub per_class: Vec<(usize, ClassMetrics)>,
    pub mean: ClassMetrics,
}

impl MetricReport {
    /// Averages several reports class by class.
    pub fn average(reports: &[MetricReport]) -> MetricReport {
        assert!(!reports.is_empty());
        let per_class: Vec<(usize, ClassMetrics)> = reports[0]
            .per_class
            .iter()
            .enumerate()
            .map(|(i, &(class, _))| {
                let items: Vec<ClassMetrics> = reports.iter().map(|r| r.per_class[i].1).collect();
                (class, ClassMetrics::mean(&items))
            })
            .collect();
        let mean = ClassMetrics::mean(&per_class.iter().map(|p| p.1).collect::<Vec<_>>());
        MetricReport { per_class, mean }
    }

    /// `class,dice,jaccard,hd95,asd` lines and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,dice,jaccard,hd95,asd\n");
        let mut row = |name: &str, m: &ClassMetrics| {
            writeln!(out, "{name},{:.6},{:.6},{:.6},{:.6}", m.dice, m.jaccard, m.hd95, m.asd).unwrap();
        };
        for (class, m) in &self.per_class {
            row(&class.to_string(), m);
        }
        row("mean", &self.mean);
        out
    }
}

/// Region pixels with at least one 4-neighbour outside the region (or outside the image).
pub fn boundary(region: &[bool], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(region.len(), h * w);
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && region[y as usize * w + x as usize]
    };
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            region[p]
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|&(dy, dx)| !inside(y + dy, x + dx))
        })
        .collect()
}

/// Squared distance transform of a 1-D sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        if f[v[k]] == f64::INFINITY {
            v[k] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if k > 0 && s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = if f[p] == f64::INFINITY {
            f64::INFINITY
        } else {
            let d = q as f64 - p as f64;
            d * d + f[p]
        };
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true` pixel.
/// Infinite everywhere when `sites` is empty.
pub fn squared_edt(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(sites.len(), h * w);
    let n = h.max(w);
    let (mut v, mut z) = (vec![0; n], vec![0.0; n + 1]);
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut res = vec![0.0; n];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut res[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = res[y];
        }
    }
    for y in 0..h {
        let row = grid[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, &mut grid[y * w..(y + 1) * w], &mut v, &mut z);
    }
    grid
}

/// Distances from each boundary pixel of `a` to the boundary of `b`, then the reverse.
pub fn symmetric_surface_distances(a: &[bool], b: &[bool], h: usize, w: usize) -> Vec<f64> {
    let (ba, bb) = (boundary(a, h, w), boundary(b, h, w));
    let (da, db) = (squared_edt(&ba, h, w), squared_edt(&bb, h, w));
    let mut out: Vec<f64> = (0..h * w).filter(|&p| ba[p]).map(|p| db[p].sqrt()).collect();
    out.extend((0..h * w).filter(|&p| bb[p]).map(|p| da[p].sqrt()));
    out
}

/// Percentile with linear interpolation between closest ranks; `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Metrics for two binary masks of one class.
pub fn binary_metrics(pred: &[bool], truth: &[bool], h: usize, w: usize) -> ClassMetrics {
    let count = |m: &[bool]| m.iter().filter(|&&x| x).count();
    let (na, nb) = (count(pred), count(truth));
    let inter = pred.iter().zip(truth).filter(|(a, b)| **a && **b).count();
    match (na, nb) {
        (0, 0) => ClassMetrics {
            dice: 1.0,
            jaccard: 1.0,
            hd95: 0.0,
            asd: 0.0,
        },
        (0, _) | (_, 0) => {
            let diag = ((h * h + w * w) as f64).sqrt();
            ClassMetrics {
                dice: 0.0,
                jaccard: 0.0,
                hd95: diag,
                asd: diag,
            }
        }
        _ => {
            // sorted so the sum does not depend on argument order
            let mut d = symmetric_surface_distances(pred, truth, h, w);
            d.sort_by(f64::total_cmp);
            ClassMetrics {
                dice: 2.0 * inter as f64 / (na + nb) as f64,
                jaccard: inter as f64 / (na + nb - inter) as f64,
                hd95: percentile(&d, 0.95),
                asd: d.iter().sum::<f64>() / d.len() as f64,
            }
        }
    }
}

/// Per-class scores for label maps with values in `0..num_classes`.
pub fn evaluate(pred: &[u8], truth: &[u8], h: usize, w: usize, num_classes: usize) -> Result<MetricReport> {
    if pred.len() != truth.len() || pred.len() != h * w {
        return Err(Error::Contract(format!(
            "label maps of {} and {} pixels for a {h}x{w} grid",
            pred.len(),
            truth.len()
        )));
    }
    let per_class: Vec<(usize, ClassMetrics)> = (1..num_classes)
        .map(|c| {
            let a: Vec<bool> = pred.iter().map(|&v| v as usize == c).collect();
            let b: Vec<bool> = truth.iter().map(|&v| v as usize == c).collect();
            (c, binary_metrics(&a, &b, h, w))
        })
        .collect();
    let mean = ClassMetrics::mean(&per_class.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok(MetricReport { per_class, mean })
}
