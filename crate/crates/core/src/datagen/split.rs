use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::BACKGROUND;
use crate::error::{Error, Result};
use crate::numcore::RngState;

/// Disjoint base / novel partition of class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    pub seed: u64,
}

impl ClassSplit {
    pub fn n_classes(&self) -> usize {
        self.base.len() + self.novel.len()
    }

    pub fn is_novel(&self, class: usize) -> bool {
        self.novel.binary_search(&class).is_ok()
    }

    /// Checks that base and novel together cover `0..n_classes` exactly once.
    pub fn check_partition(&self, n_classes: usize) -> Result<()> {
        let mut all: Vec<usize> = self.base.iter().chain(&self.novel).copied().collect();
        all.sort_unstable();
        if all != (0..n_classes).collect::<Vec<_>>() {
            return Err(Error::ClassMismatch(format!(
                "split does not partition 0..{n_classes}"
            )));
        }
        Ok(())
    }

    /// A partition with at least one class on each side.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        self.check_partition(n_classes)?;
        if self.base.is_empty() || self.novel.is_empty() {
            return Err(Error::ClassMismatch(
                "split needs base and novel classes".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded random split with `round(fraction · n)` novel classes (at least one
/// of each kind).
pub fn split_classes(n_classes: usize, fraction_novel: f64, seed: u64) -> Result<ClassSplit> {
    if n_classes < 2 {
        return Err(Error::invalid("a split needs at least 2 classes"));
    }
    if !(fraction_novel > 0.0 && fraction_novel < 1.0) {
        return Err(Error::invalid(format!(
            "novel fraction {fraction_novel} outside (0, 1)"
        )));
    }
    let k = ((n_classes as f64 * fraction_novel).round() as usize).clamp(1, n_classes - 1);
    let mut ids: Vec<usize> = (0..n_classes).collect();
    RngState::new(seed).derive(0x5917, 0).shuffle(&mut ids);
    let mut novel = ids[..k].to_vec();
    let mut base = ids[k..].to_vec();
    novel.sort_unstable();
    base.sort_unstable();
    Ok(ClassSplit { base, novel, seed })
}

/// Like [`split_classes`], but redraws until the novel set differs from
/// `avoid`'s. Gives up after a bounded number of attempts.
pub fn split_classes_distinct(
    n_classes: usize,
    fraction_novel: f64,
    seed: u64,
    avoid: &ClassSplit,
) -> Result<ClassSplit> {
    for attempt in 0..64u64 {
        let s = split_classes(n_classes, fraction_novel, seed.wrapping_add(attempt))?;
        if s.novel != avoid.novel {
            return Ok(ClassSplit { seed, ..s });
        }
    }
    Err(Error::invalid(
        "could not draw a split distinct from the given one",
    ))
}

/// Relabels novel-class pixels as background so training never sees them.
pub fn mask_base_only(mask: &GrayImage, split: &ClassSplit) -> GrayImage {
    let mut out = mask.clone();
    for p in out.pixels_mut() {
        if p[0] != BACKGROUND && split.is_novel(p[0] as usize) {
            p[0] = BACKGROUND;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..60, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let s = split_classes(n, frac, seed).unwrap();
            s.validate(n).unwrap();
            prop_assert_eq!(s.clone(), split_classes(n, frac, seed).unwrap());
        }
    }

    #[test]
    fn twenty_percent_of_twenty_four() {
        let s = split_classes(24, 0.2, 7).unwrap();
        assert_eq!(s.novel.len(), 5);
        assert_eq!(s.base.len(), 19);
    }

    #[test]
    fn distinct_redraw() {
        let a = split_classes(24, 0.2, 7).unwrap();
        let b = split_classes_distinct(24, 0.2, 7, &a).unwrap();
        assert_ne!(a.novel, b.novel);
        b.validate(24).unwrap();
    }

    #[test]
    fn bad_fraction_rejected() {
        assert!(split_classes(10, 0.0, 1).is_err());
        assert!(split_classes(10, 1.0, 1).is_err());
        assert!(split_classes(1, 0.5, 1).is_err());
    }

    #[test]
    fn novel_pixels_become_background() {
        let split = ClassSplit {
            base: vec![0, 2],
            novel: vec![1],
            seed: 0,
        };
        let mask = GrayImage::from_fn(3, 1, |x, _| Luma([x as u8]));
        let out = mask_base_only(&mask, &split);
        assert_eq!(out.into_raw(), vec![0, BACKGROUND, 2]);
    }
}
