//! Segmentation scores from dataset-level integer confusion counts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::ClassSplit;
use crate::error::{Error, Result};

/// Per-class pixel counts accumulated over any number of images.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub gt_count: Vec<u64>,
    pub pred_count: Vec<u64>,
    /// Labeled pixels predicted correctly.
    pub correct: u64,
    pub labeled: u64,
    /// Pixels whose ground truth is the ignore label.
    pub unlabeled: u64,
    pub images: u64,
}

impl ConfusionCounts {
    pub fn new(n_classes: usize) -> Self {
        Self {
            intersection: vec![0; n_classes],
            union: vec![0; n_classes],
            gt_count: vec![0; n_classes],
            pred_count: vec![0; n_classes],
            ..Default::default()
        }
    }

    pub fn n_classes(&self) -> usize {
        self.union.len()
    }

    /// Adds another set of counts over the same classes.
    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            return Err(Error::ClassMismatch(format!(
                "cannot merge counts over {} and {} classes",
                self.n_classes(),
                other.n_classes()
            )));
        }
        for c in 0..self.n_classes() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
            self.gt_count[c] += other.gt_count[c];
            self.pred_count[c] += other.pred_count[c];
        }
        self.correct += other.correct;
        self.labeled += other.labeled;
        self.unlabeled += other.unlabeled;
        self.images += other.images;
        Ok(())
    }
}

/// Counts for one prediction/ground-truth pair. Pixels whose ground truth
/// equals `ignore` are left out of every per-class count.
pub fn confusion_counts(
    pred: &[usize],
    gt: &[usize],
    n_classes: usize,
    ignore: Option<usize>,
) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            op: "confusion_counts",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut k = ConfusionCounts::new(n_classes);
    k.images = 1;
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore {
            k.unlabeled += 1;
            continue;
        }
        for (what, v) in [("predicted class", p), ("ground-truth class", g)] {
            if v >= n_classes {
                return Err(Error::OutOfRange {
                    what,
                    index: v,
                    len: n_classes,
                });
            }
        }
        k.labeled += 1;
        k.gt_count[g] += 1;
        k.pred_count[p] += 1;
        if p == g {
            k.correct += 1;
            k.intersection[g] += 1;
        }
    }
    for c in 0..n_classes {
        k.union[c] = k.gt_count[c] + k.pred_count[c] - k.intersection[c];
    }
    Ok(k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    pub novel: bool,
    /// `None` when the class appears in neither ground truth nor predictions.
    pub iou: Option<f64>,
    pub acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou_novel: Option<f64>,
    pub miou_base: Option<f64>,
    pub miou_all: Option<f64>,
    pub macc: Option<f64>,
    pub pacc: f64,
    pub per_class: Vec<ClassScore>,
    pub split_seed: u64,
    pub images: u64,
    pub include_background: bool,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores aggregated counts. Classes with an empty union are excluded from
/// every mean; `include_background` counts unlabeled pixels as errors in pAcc.
pub fn summarize(
    counts: &ConfusionCounts,
    split: &ClassSplit,
    names: &[String],
    include_background: bool,
) -> Result<MetricsReport> {
    let n = counts.n_classes();
    split.check_partition(n)?;
    if names.len() != n {
        return Err(Error::ClassMismatch(format!(
            "{} names for {n} classes",
            names.len()
        )));
    }
    if counts.labeled == 0 {
        return Err(Error::invalid("empty evaluation set"));
    }
    let per_class: Vec<ClassScore> = (0..n)
        .map(|c| ClassScore {
            name: names[c].clone(),
            novel: split.is_novel(c),
            iou: (counts.union[c] > 0)
                .then(|| counts.intersection[c] as f64 / counts.union[c] as f64),
            acc: (counts.gt_count[c] > 0)
                .then(|| counts.intersection[c] as f64 / counts.gt_count[c] as f64),
        })
        .collect();
    let miou = |novel: Option<bool>| {
        mean(
            per_class
                .iter()
                .filter(|s| novel.is_none_or(|nv| s.novel == nv))
                .filter_map(|s| s.iou),
        )
    };
    let denom = counts.labeled
        + if include_background {
            counts.unlabeled
        } else {
            0
        };
    Ok(MetricsReport {
        miou_novel: miou(Some(true)),
        miou_base: miou(Some(false)),
        miou_all: miou(None),
        macc: mean(per_class.iter().filter_map(|s| s.acc)),
        pacc: counts.correct as f64 / denom as f64,
        per_class,
        split_seed: split.seed,
        images: counts.images,
        include_background,
    })
}

impl MetricsReport {
    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = String::new();
        let width = self
            .per_class
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            s,
            "{:<width$}  {:>5}  {:>6}  {:>6}",
            "class", "split", "IoU", "Acc"
        )
        .unwrap();
        for c in &self.per_class {
            let split = if c.novel { "novel" } else { "base" };
            writeln!(
                s,
                "{:<width$}  {:>5}  {:>6}  {:>6}",
                c.name,
                split,
                f(c.iou),
                f(c.acc)
            )
            .unwrap();
        }
        writeln!(
            s,
            "mIoU novel {}  base {}  all {}  mAcc {}  pAcc {}",
            f(self.miou_novel),
            f(self.miou_base),
            f(self.miou_all),
            f(self.macc),
            f(Some(self.pacc))
        )
        .unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn split(n: usize, novel: &[usize]) -> ClassSplit {
        ClassSplit {
            base: (0..n).filter(|c| !novel.contains(c)).collect(),
            novel: novel.to_vec(),
            seed: 0,
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|c| format!("c{c}")).collect()
    }

    #[test]
    fn two_by_two_hand_case() {
        // gt = [[A,A],[B,B]], pred = [[A,B],[B,B]]
        let k = confusion_counts(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, None).unwrap();
        let r = summarize(&k, &split(2, &[]), &names(2), false).unwrap();
        assert_eq!(r.per_class[0].iou, Some(0.5));
        assert!((r.per_class[1].iou.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.miou_base.unwrap() - 0.5833).abs() < 1e-4);
        assert_eq!(r.miou_novel, None);
        assert_eq!(r.pacc, 0.75);
    }

    #[test]
    fn perfect_and_disjoint() {
        let k = confusion_counts(&[0, 1, 2, 2], &[0, 1, 2, 2], 3, None).unwrap();
        let r = summarize(&k, &split(3, &[1]), &names(3), false).unwrap();
        assert_eq!(
            (r.miou_all, r.miou_novel, r.macc, r.pacc),
            (Some(1.0), Some(1.0), Some(1.0), 1.0)
        );
        let k = confusion_counts(&[1, 1], &[0, 0], 2, None).unwrap();
        let r = summarize(&k, &split(2, &[]), &names(2), false).unwrap();
        assert_eq!(
            (r.per_class[0].iou, r.per_class[1].iou),
            (Some(0.0), Some(0.0))
        );
    }

    #[test]
    fn ignored_pixels_and_errors() {
        let k = confusion_counts(&[0, 1, 1], &[0, 255, 1], 2, Some(255)).unwrap();
        assert_eq!((k.labeled, k.unlabeled, k.pred_count[1]), (2, 1, 1));
        let r = summarize(&k, &split(2, &[]), &names(2), true).unwrap();
        assert!((r.pacc - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            confusion_counts(&[0], &[0, 1], 2, None).unwrap_err().kind(),
            "shape"
        );
        assert_eq!(
            confusion_counts(&[5], &[0], 2, None).unwrap_err().kind(),
            "out_of_range"
        );
        let empty = confusion_counts(&[], &[], 2, None).unwrap();
        assert!(summarize(&empty, &split(2, &[]), &names(2), false).is_err());
    }

    /// Direct per-pixel recount of every score.
    fn brute(
        pred: &[usize],
        gt: &[usize],
        n: usize,
        novel: &[usize],
    ) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>, f64) {
        let mut ious = vec![];
        let mut accs = vec![];
        for c in 0..n {
            let i = pred
                .iter()
                .zip(gt)
                .filter(|(p, g)| **p == c && **g == c)
                .count();
            let u = pred
                .iter()
                .zip(gt)
                .filter(|(p, g)| **p == c || **g == c)
                .count();
            let g = gt.iter().filter(|g| **g == c).count();
            ious.push((u > 0).then(|| i as f64 / u as f64));
            accs.push((g > 0).then(|| i as f64 / g as f64));
        }
        let m =
            |sel: &dyn Fn(usize) -> bool| mean((0..n).filter(|&c| sel(c)).filter_map(|c| ious[c]));
        let pacc = pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64 / gt.len() as f64;
        (
            m(&|c| novel.contains(&c)),
            m(&|c| !novel.contains(&c)),
            m(&|_| true),
            mean(accs.iter().flatten().copied()),
            pacc,
        )
    }

    proptest! {
        #[test]
        fn matches_pixel_recount(
            n in 2usize..6,
            maps in proptest::collection::vec((0usize..6, 0usize..6), 1..40),
            n_novel in 0usize..2,
        ) {
            let pred: Vec<usize> = maps.iter().map(|m| m.0 % n).collect();
            let gt: Vec<usize> = maps.iter().map(|m| m.1 % n).collect();
            let novel: Vec<usize> = (0..n_novel).collect();
            let k = confusion_counts(&pred, &gt, n, None).unwrap();
            let r = summarize(&k, &split(n, &novel), &names(n), false).unwrap();
            let (mn, mb, mo, macc, pacc) = brute(&pred, &gt, n, &novel);
            prop_assert_eq!(r.miou_novel, mn);
            prop_assert_eq!(r.miou_base, mb);
            prop_assert_eq!(r.miou_all, mo);
            prop_assert_eq!(r.macc, macc);
            prop_assert_eq!(r.pacc, pacc);
            if let (Some(a), Some(b), Some(o)) = (mn, mb, mo) {
                prop_assert!(o >= a.min(b) - 1e-12 && o <= a.max(b) + 1e-12);
            }
        }

        #[test]
        fn merge_order_does_not_matter(seqs in proptest::collection::vec(proptest::collection::vec((0usize..3, 0usize..3), 1..10), 1..6)) {
            let parts: Vec<ConfusionCounts> = seqs
                .iter()
                .map(|s| {
                    let p: Vec<usize> = s.iter().map(|x| x.0).collect();
                    let g: Vec<usize> = s.iter().map(|x| x.1).collect();
                    confusion_counts(&p, &g, 3, None).unwrap()
                })
                .collect();
            let mut fwd = ConfusionCounts::new(3);
            parts.iter().for_each(|p| fwd.merge(p).unwrap());
            let mut rev = ConfusionCounts::new(3);
            parts.iter().rev().for_each(|p| rev.merge(p).unwrap());
            prop_assert_eq!(&fwd, &rev);
        }
    }
}
