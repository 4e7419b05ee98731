use std::fmt::Write as _;

use crate::data::face_neighbors;
use crate::error::{dim_err, param_err, Result};

/// Overlap scores of one foreground class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub iou: f64,
}

/// Dice and IoU for classes `1..n_classes`; a class absent from both masks
/// scores 1.
pub fn metric_overlap(pred: &[u8], gt: &[u8], n_classes: usize) -> Result<Vec<Overlap>> {
    if pred.len() != gt.len() {
        return Err(dim_err!("prediction has {} voxels, ground truth {}", pred.len(), gt.len()));
    }
    let k = n_classes;
    let (mut inter, mut np, mut ng) = (vec![0u64; k], vec![0u64; k], vec![0u64; k]);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (usize::from(p), usize::from(g));
        if p >= k || g >= k {
            return Err(param_err!("label out of range for {k} classes"));
        }
        np[p] += 1;
        ng[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    Ok((1..k)
        .map(|c| {
            let (i, s) = (inter[c] as f64, (np[c] + ng[c]) as f64);
            if s == 0.0 {
                Overlap { dice: 1.0, iou: 1.0 }
            } else {
                Overlap { dice: 2.0 * i / s, iou: i / (s - i) }
            }
        })
        .collect())
}

/// Mask voxels with at least one face neighbour outside the mask; voxels on
/// the volume border count as boundary.
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<usize> {
    let [d, h, w] = dims;
    (0..mask.len())
        .filter(|&i| mask[i])
        .filter(|&i| {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
            border || face_neighbors(i, dims).any(|j| !mask[j])
        })
        .collect()
}

/// Lower envelope of parabolas for one line of a squared distance transform
/// with sample spacing `s`; `f` holds `INFINITY` where there is no feature.
fn edt_line(f: &[f64], s: f64, out: &mut [f64]) {
    let pts: Vec<usize> = (0..f.len()).filter(|&q| f[q].is_finite()).collect();
    if pts.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let x = |q: usize| q as f64 * s;
    let cross = |p: usize, q: usize| ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
    let mut v: Vec<usize> = vec![pts[0]];
    let mut z: Vec<f64> = vec![f64::NEG_INFINITY, f64::INFINITY];
    for &q in &pts[1..] {
        let mut b = cross(*v.last().expect("non-empty"), q);
        while b <= z[v.len() - 1] {
            v.pop();
            z.pop();
            if v.is_empty() {
                break;
            }
            b = cross(*v.last().expect("non-empty"), q);
        }
        if v.is_empty() {
            v.push(q);
            z = vec![f64::NEG_INFINITY, f64::INFINITY];
        } else {
            *z.last_mut().expect("non-empty") = b;
            v.push(q);
            z.push(f64::INFINITY);
        }
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < x(q) {
            j += 1;
        }
        let dx = x(q) - x(v[j]);
        *o = dx * dx + f[v[j]];
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the nearest
/// feature voxel, computed one axis at a time.
pub fn squared_edt(features: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let len = dims[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for start in 0..g.len() {
            // Visit each line once, from its first voxel.
            if (start / strides[axis]) % len != 0 {
                continue;
            }
            for (t, l) in line.iter_mut().enumerate() {
                *l = g[start + t * strides[axis]];
            }
            edt_line(&line, spacing[axis], &mut out);
            for (t, &o) in out.iter().enumerate() {
                g[start + t * strides[axis]] = o;
            }
        }
    }
    g
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile_f64(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

fn check_dims(pred: &[u8], gt: &[u8], dims: [usize; 3]) -> Result<()> {
    let n: usize = dims.iter().product();
    if pred.len() != n || gt.len() != n {
        return Err(dim_err!("masks of {} and {} voxels for dims {dims:?}", pred.len(), gt.len()));
    }
    Ok(())
}

/// 95th-percentile symmetric surface distance in mm for one class, or `None`
/// when either mask is empty.
pub fn metric_hd95(pred: &[u8], gt: &[u8], dims: [usize; 3], spacing: [f32; 3], class: u8) -> Result<Option<f64>> {
    check_dims(pred, gt, dims)?;
    let pm: Vec<bool> = pred.iter().map(|&v| v == class).collect();
    let gm: Vec<bool> = gt.iter().map(|&v| v == class).collect();
    let (sp, sg) = (surface(&pm, dims), surface(&gm, dims));
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    let spacing = spacing.map(f64::from);
    let directed = |from: &[usize], to: &[usize]| {
        let mut feat = vec![false; pm.len()];
        to.iter().for_each(|&i| feat[i] = true);
        let dt = squared_edt(&feat, dims, spacing);
        let mut d: Vec<f64> = from.iter().map(|&i| dt[i].sqrt()).collect();
        percentile_f64(&mut d, 95.0)
    };
    Ok(Some(directed(&sp, &sg).max(directed(&sg, &sp))))
}

/// Metrics for one foreground class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub iou: f64,
    /// `None` when the class is empty in either mask.
    pub hd95: Option<f64>,
}

/// Per-class Dice, IoU and HD95, plus their means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn mean_dice(&self) -> f64 {
        self.per_class.iter().map(|c| c.dice).sum::<f64>() / self.per_class.len().max(1) as f64
    }

    pub fn mean_iou(&self) -> f64 {
        self.per_class.iter().map(|c| c.iou).sum::<f64>() / self.per_class.len().max(1) as f64
    }

    /// Mean over the classes where HD95 is defined.
    pub fn mean_hd95(&self) -> Option<f64> {
        let v: Vec<f64> = self.per_class.iter().filter_map(|c| c.hd95).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Class-wise average over several reports (e.g. one per volume). HD95
    /// averages only the defined entries.
    pub fn average(reports: &[MetricReport]) -> Result<MetricReport> {
        let Some(first) = reports.first() else {
            return Err(param_err!("no reports to average"));
        };
        let n = reports.len() as f64;
        let per_class = (0..first.per_class.len())
            .map(|i| {
                let hd: Vec<f64> = reports.iter().filter_map(|r| r.per_class[i].hd95).collect();
                ClassMetrics {
                    class: first.per_class[i].class,
                    dice: reports.iter().map(|r| r.per_class[i].dice).sum::<f64>() / n,
                    iou: reports.iter().map(|r| r.per_class[i].iou).sum::<f64>() / n,
                    hd95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
                }
            })
            .collect();
        Ok(MetricReport { per_class })
    }

    /// CSV with header `class,dice,iou,hd95_mm`, one row per class and a
    /// final `mean` row. Undefined HD95 is written as `nan`.
    pub fn to_csv(&self) -> String {
        let hd = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("class,dice,iou,hd95_mm\n");
        for c in &self.per_class {
            let _ = writeln!(s, "{},{:.6},{:.6},{}", c.class, c.dice, c.iou, hd(c.hd95));
        }
        let _ = writeln!(s, "mean,{:.6},{:.6},{}", self.mean_dice(), self.mean_iou(), hd(self.mean_hd95()));
        s
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.per_class {
            let hd = c.hd95.map_or_else(|| "undefined".into(), |v| format!("{v:.2} mm"));
            writeln!(f, "class {}: dice {:.4}  iou {:.4}  hd95 {hd}", c.class, c.dice, c.iou)?;
        }
        write!(f, "mean dice {:.4}  mean iou {:.4}", self.mean_dice(), self.mean_iou())
    }
}

/// All metrics for one labelled volume.
pub fn evaluate_labels(
    pred: &[u8],
    gt: &[u8],
    dims: [usize; 3],
    spacing: [f32; 3],
    n_classes: usize,
) -> Result<MetricReport> {
    check_dims(pred, gt, dims)?;
    let ov = metric_overlap(pred, gt, n_classes)?;
    let per_class = ov
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let class = i + 1;
            Ok(ClassMetrics {
                class,
                dice: o.dice,
                iou: o.iou,
                hd95: metric_hd95(pred, gt, dims, spacing, class as u8)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport { per_class })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint_masks() {
        let a = [0u8, 1, 1, 2, 2, 3];
        for o in metric_overlap(&a, &a, 4).unwrap() {
            assert_eq!((o.dice, o.iou), (1.0, 1.0));
        }
        let p = [1u8, 1, 0, 0];
        let g = [0u8, 0, 1, 1];
        let o = metric_overlap(&p, &g, 2).unwrap()[0];
        assert_eq!((o.dice, o.iou), (0.0, 0.0));
        assert!(metric_overlap(&p, &g[..3], 2).is_err());
    }

    #[test]
    fn hand_counted_overlap() {
        let p = [1u8, 1, 1, 1, 0, 0, 0, 0];
        let g = [0u8, 0, 1, 1, 1, 1, 0, 0];
        let o = metric_overlap(&p, &g, 2).unwrap()[0];
        assert_eq!(o.dice, 0.5);
        assert!((o.iou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_voxels_one_step_apart() {
        let dims = [1, 1, 4];
        let p = [0u8, 1, 0, 0];
        let g = [0u8, 0, 1, 0];
        assert_eq!(metric_hd95(&p, &g, dims, [1.5; 3], 1).unwrap(), Some(1.5));
        assert_eq!(metric_hd95(&p, &p, dims, [1.5; 3], 1).unwrap(), Some(0.0));
        assert_eq!(metric_hd95(&p, &[0; 4], dims, [1.5; 3], 1).unwrap(), None);
    }

    #[test]
    fn edt_matches_brute_force() {
        let dims = [3, 4, 5];
        let feat: Vec<bool> = (0..60).map(|i| i % 17 == 3 || i == 58).collect();
        let dt = squared_edt(&feat, dims, [2.0, 1.0, 0.5]);
        let coord = |i: usize| [(i / 20) as f64 * 2.0, ((i / 5) % 4) as f64, (i % 5) as f64 * 0.5];
        for i in 0..60 {
            let best = (0..60)
                .filter(|&j| feat[j])
                .map(|j| (0..3).map(|a| (coord(i)[a] - coord(j)[a]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!((dt[i] - best).abs() < 1e-12);
        }
    }

    #[test]
    fn report_csv_layout() {
        let a = [0u8, 1, 2, 3];
        let r = evaluate_labels(&a, &a, [1, 2, 2], [1.0; 3], 4).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("class,dice,iou,hd95_mm\n1,1.000000,1.000000,0.000000\n"));
        assert!(csv.ends_with("mean,1.000000,1.000000,0.000000\n"));
        let empty = evaluate_labels(&[0; 4], &[0; 4], [1, 2, 2], [1.0; 3], 2).unwrap();
        assert!(empty.to_csv().contains("1,1.000000,1.000000,nan"));
    }
}
