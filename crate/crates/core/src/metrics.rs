//! Inference post-processing and the five segmentation scores.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::SegModel;

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Per-image scores: Jaccard, Dice, accuracy, sensitivity, specificity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub ja: f64,
    pub di: f64,
    pub ac: f64,
    pub se: f64,
    pub sp: f64,
}

/// Scores averaged over `n_images` images.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub ja: f64,
    pub di: f64,
    pub ac: f64,
    pub se: f64,
    pub sp: f64,
    pub n_images: usize,
}

impl MetricReport {
    /// Unweighted mean of per-image scores.
    pub fn from_scores(scores: &[Scores]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Parameter("no images to aggregate".into()));
        }
        let n = scores.len() as f64;
        let mean = |f: fn(&Scores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            ja: mean(|s| s.ja),
            di: mean(|s| s.di),
            ac: mean(|s| s.ac),
            se: mean(|s| s.se),
            sp: mean(|s| s.sp),
            n_images: scores.len(),
        })
    }
}

/// Pixel is foreground iff `p >= 0.5`.
pub fn threshold(probs: &Grid<f64>) -> Grid<u8> {
    probs.map(|p| u8::from(p >= THRESHOLD))
}

/// Sets every 4-connected background region that does not touch the border
/// to foreground.
pub fn fill_holes(mask: &Grid<u8>) -> Grid<u8> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = mask.clone();
    for ch in 0..mask.channels() {
        let plane = mask.plane(ch);
        let mut outside = vec![false; h * w];
        let mut queue = VecDeque::new();
        let seed = |idx: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
            if plane[idx] == 0 && !outside[idx] {
                outside[idx] = true;
                queue.push_back(idx);
            }
        };
        for c in 0..w {
            seed(c, &mut outside, &mut queue);
            seed((h - 1) * w + c, &mut outside, &mut queue);
        }
        for r in 0..h {
            seed(r * w, &mut outside, &mut queue);
            seed(r * w + w - 1, &mut outside, &mut queue);
        }
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            if r > 0 {
                seed(idx - w, &mut outside, &mut queue);
            }
            if r + 1 < h {
                seed(idx + w, &mut outside, &mut queue);
            }
            if c > 0 {
                seed(idx - 1, &mut outside, &mut queue);
            }
            if c + 1 < w {
                seed(idx + 1, &mut outside, &mut queue);
            }
        }
        let plane_len = h * w;
        for (i, o) in out.data_mut()[ch * plane_len..(ch + 1) * plane_len]
            .iter_mut()
            .enumerate()
        {
            if !outside[i] {
                *o = 1;
            }
        }
    }
    out
}

/// Deterministic prediction, threshold and hole filling.
pub fn infer(model: &SegModel, image: &Grid<f64>) -> Result<Grid<u8>> {
    Ok(fill_holes(&threshold(&model.predict(image)?)))
}

pub fn confusion(pred: &Grid<u8>, truth: &Grid<u8>) -> Result<ConfusionCounts> {
    if !pred.same_shape(truth) {
        return Err(Error::Shape("prediction and truth differ in shape".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p > 0, t > 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    // 0/0 counts as a perfect score
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> Scores {
    Scores {
        ja: ratio(c.tp, c.tp + c.fp + c.fn_),
        di: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        ac: ratio(c.tp + c.tn, c.total()),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: &[&[u8]]) -> Grid<u8> {
        Grid::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn threshold_boundaries() {
        let p = Grid::from_rows(&[vec![0.49, 0.51, 0.5, 0.0, 1.0]]).unwrap();
        assert_eq!(threshold(&p).data(), &[0, 1, 1, 0, 1]);
        let half = Grid::filled(1, 3, 3, 0.5);
        assert!(threshold(&half).data().iter().all(|&v| v == 1));
        let bin = Grid::from_rows(&[vec![0.0, 1.0, 1.0]]).unwrap();
        let once = threshold(&bin);
        assert_eq!(threshold(&once.map(f64::from)), once);
    }

    #[test]
    fn ring_fills_to_disk() {
        let ring = grid(&[
            &[0, 0, 0, 0, 0, 0],
            &[0, 1, 1, 1, 1, 0],
            &[0, 1, 0, 0, 1, 0],
            &[0, 1, 0, 0, 1, 0],
            &[0, 1, 1, 1, 1, 0],
            &[0, 0, 0, 0, 0, 0],
        ]);
        let disk = grid(&[
            &[0, 0, 0, 0, 0, 0],
            &[0, 1, 1, 1, 1, 0],
            &[0, 1, 1, 1, 1, 0],
            &[0, 1, 1, 1, 1, 0],
            &[0, 1, 1, 1, 1, 0],
            &[0, 0, 0, 0, 0, 0],
        ]);
        assert_eq!(fill_holes(&ring), disk);
        // a gap in the ring lets the background escape
        let mut open = ring.clone();
        open.set(0, 1, 2, 0);
        assert_eq!(fill_holes(&open), open);
        // diagonal leaks do not count under 4-connectivity
        let diag = grid(&[&[0, 1, 0], &[1, 0, 1], &[0, 1, 0]]);
        assert_eq!(fill_holes(&diag), grid(&[&[0, 1, 0], &[1, 1, 1], &[0, 1, 0]]));
    }

    #[test]
    fn fill_holes_on_empty_and_random_masks() {
        let empty = Grid::filled(1, 7, 7, 0u8);
        assert_eq!(fill_holes(&empty), empty);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let data = (0..100).map(|_| u8::from(rng.random_bool(0.5))).collect();
            let m = Grid::new(1, 10, 10, data).unwrap();
            let f = fill_holes(&m);
            assert!(m.data().iter().zip(f.data()).all(|(&a, &b)| b >= a));
            assert_eq!(fill_holes(&f), f);
        }
    }

    #[test]
    fn confusion_examples() {
        let truth = grid(&[&[1, 1, 0, 0], &[1, 1, 0, 0], &[0, 0, 0, 0], &[0, 0, 0, 0]]);
        let c = confusion(&truth, &truth).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 12 });

        let pred = grid(&[&[1, 1, 1, 0], &[0, 0, 0, 0], &[0, 0, 0, 0], &[0, 0, 0, 0]]);
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 1, fn_: 2, tn: 11 });
        assert_eq!(c.total(), 16);
        assert!(confusion(&Grid::filled(1, 2, 2, 0), &truth).is_err());
    }

    #[test]
    fn metric_examples() {
        let s = metrics_from_counts(&ConfusionCounts { tp: 2, fp: 1, fn_: 2, tn: 11 });
        assert!((s.ja - 0.4).abs() < 1e-12);
        // 2*2 / (2*2 + 1 + 2) = 4/7, consistent with di = 2ja / (1 + ja)
        assert!((s.di - 4.0 / 7.0).abs() < 1e-12);
        assert!((s.ac - 0.8125).abs() < 1e-12);
        assert!((s.se - 0.5).abs() < 1e-12);
        assert!((s.sp - 11.0 / 12.0).abs() < 1e-12);

        let perfect = metrics_from_counts(&ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 4 });
        assert_eq!(perfect, Scores { ja: 1.0, di: 1.0, ac: 1.0, se: 1.0, sp: 1.0 });
        let background = metrics_from_counts(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 });
        assert_eq!(background, Scores { ja: 1.0, di: 1.0, ac: 1.0, se: 1.0, sp: 1.0 });
    }

    #[test]
    fn report_is_mean_of_scores() {
        let a = Scores { ja: 0.2, di: 0.4, ac: 0.6, se: 0.8, sp: 1.0 };
        let b = Scores { ja: 0.4, di: 0.6, ac: 0.8, se: 1.0, sp: 0.0 };
        let r = MetricReport::from_scores(&[a, b]).unwrap();
        assert!((r.ja - 0.3).abs() < 1e-15 && (r.sp - 0.5).abs() < 1e-15);
        assert_eq!(r.n_images, 2);
        assert!(MetricReport::from_scores(&[]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dice_jaccard_identity(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
                prop_assume!(tp + fp + fn_ > 0);
                let s = metrics_from_counts(&ConfusionCounts { tp, fp, fn_, tn });
                prop_assert!((s.di - 2.0 * s.ja / (1.0 + s.ja)).abs() <= 1e-12);
                prop_assert!(s.ja <= s.di + 1e-15);
                for v in [s.ja, s.di, s.ac, s.se, s.sp] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}
