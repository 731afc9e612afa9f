//! Peak maps, class confidence and hard spatial masks.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::autodiff::Tensor;

/// Strict local maxima of an `h x w` plane: a location is kept when it
/// exceeds every in-bounds neighbor within Chebyshev radius `r` (the center
/// itself excluded). Plateaus produce no maxima.
pub fn local_maxima_mask(plane: &[f32], h: usize, w: usize, r: usize) -> Vec<bool> {
    debug_assert_eq!(plane.len(), h * w);
    let r = r as isize;
    let mut mask = vec![false; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let v = plane[(i * w as isize + j) as usize];
            let mut is_max = true;
            'scan: for di in -r..=r {
                for dj in -r..=r {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (y, x) = (i + di, j + dj);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    if plane[(y * w as isize + x) as usize] >= v {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            mask[(i * w as isize + j) as usize] = is_max;
        }
    }
    mask
}

/// Local-maxima mask for every trailing `[H, W]` plane of `t`.
pub fn peak_mask(t: &Tensor, r: usize) -> Vec<bool> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    t.data()
        .chunks(h * w)
        .flat_map(|plane| local_maxima_mask(plane, h, w, r))
        .collect()
}

/// Peak map of a single `[H, W]` category map.
pub fn peak_map(map: &Tensor, r: usize) -> Tensor {
    let mask = peak_mask(map, r);
    let data = map
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Tensor::new(map.shape().to_vec(), data).expect("same shape")
}

/// Mean of the nonzero entries of a peak map; 0 when there are none.
pub fn class_confidence(peaks: &Tensor) -> f32 {
    let (sum, n) = peaks
        .data()
        .iter()
        .filter(|&&v| v != 0.0)
        .fold((0.0f64, 0usize), |(s, n), &v| (s + v as f64, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64) as f32
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Key(f32);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// `k`-th largest value (1-based) using a bounded min-heap. When fewer than
/// `k` values exist the smallest one is returned; `None` for no values.
pub fn kth_largest(values: impl IntoIterator<Item = f32>, k: usize) -> Option<f32> {
    let k = k.max(1);
    let mut heap: BinaryHeap<Reverse<Key>> = BinaryHeap::with_capacity(k + 1);
    for v in values {
        if heap.len() < k {
            heap.push(Reverse(Key(v)));
        } else if heap.peek().is_some_and(|Reverse(top)| Key(v) > *top) {
            heap.pop();
            heap.push(Reverse(Key(v)));
        }
    }
    heap.peek().map(|Reverse(Key(v))| *v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMask {
    /// Binary `[H, W]` mask.
    pub mask: Tensor,
    /// The `t_c`-th highest peak, if any peak exists.
    pub threshold: Option<f32>,
}

impl SpatialMask {
    pub fn ones(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Set when the peak map was empty and the mask is all zeros.
    pub fn is_empty(&self) -> bool {
        self.threshold.is_none()
    }
}

/// Pseudo ground-truth mask from the `t_c` highest peaks: ones at nonzero
/// peaks whose value is at least the `t_c`-th highest peak value. Ties at
/// the threshold all pass. With fewer than `t_c` peaks every peak is kept;
/// with none the mask is empty.
pub fn spatial_mask(peaks: &Tensor, t_c: u32) -> SpatialMask {
    let threshold = kth_largest(peaks.data().iter().copied().filter(|&v| v != 0.0), t_c as usize);
    let data = peaks
        .data()
        .iter()
        .map(|&v| match threshold {
            Some(h) if v != 0.0 && v >= h => 1.0,
            _ => 0.0,
        })
        .collect();
    SpatialMask {
        mask: Tensor::new(peaks.shape().to_vec(), data).expect("same shape"),
        threshold,
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn t2(rows: &[&[f32]]) -> Tensor {
        let h = rows.len();
        let w = rows[0].len();
        Tensor::new(vec![h, w], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    /// Exhaustive neighborhood scan written independently of the mask code.
    fn brute_peaks(m: &Tensor, r: isize) -> Vec<f32> {
        let (h, w) = (m.shape()[0] as isize, m.shape()[1] as isize);
        let at = |i: isize, j: isize| m.data()[(i * w + j) as usize];
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let neighbors: Vec<f32> = (-r..=r)
                    .flat_map(|a| (-r..=r).map(move |b| (a, b)))
                    .filter(|&(a, b)| (a, b) != (0, 0))
                    .map(|(a, b)| (i + a, j + b))
                    .filter(|&(y, x)| y >= 0 && x >= 0 && y < h && x < w)
                    .map(|(y, x)| at(y, x))
                    .collect();
                let v = at(i, j);
                out.push(if neighbors.iter().all(|&n| v > n) { v } else { 0.0 });
            }
        }
        out
    }

    #[test]
    fn center_peak() {
        let m = t2(&[&[1.0, 2.0, 1.0], &[2.0, 5.0, 2.0], &[1.0, 2.0, 1.0]]);
        let p = peak_map(&m, 1);
        assert_eq!(p.data(), brute_peaks(&m, 1).as_slice());
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn plateau_has_no_peaks() {
        let m = Tensor::full(&[4, 5], 2.5);
        assert!(peak_map(&m, 1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn isolated_pixel_preserved() {
        let mut m = Tensor::zeros(&[5, 5]);
        m.data_mut()[2 * 5 + 3] = 0.7;
        let p = peak_map(&m, 1);
        assert_eq!(p.data()[2 * 5 + 3], 0.7);
        assert_eq!(p.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn border_compares_existing_neighbors_only() {
        let m = t2(&[&[3.0, 1.0], &[1.0, 0.5]]);
        assert_eq!(peak_map(&m, 1).data(), &[3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn confidence_examples() {
        let p = t2(&[&[5.0, 0.0], &[0.0, 3.0]]);
        assert_eq!(class_confidence(&p), 4.0);
        assert_eq!(class_confidence(&Tensor::zeros(&[3, 3])), 0.0);
        let p = t2(&[&[0.0, -1.5], &[0.0, 0.0]]);
        assert_eq!(class_confidence(&p), -1.5);
    }

    #[test]
    fn mask_examples() {
        let p = t2(&[&[5.0, 0.0, 3.0], &[0.0, 2.0, 0.0]]);
        let m = spatial_mask(&p, 2);
        assert_eq!(m.threshold, Some(3.0));
        assert_eq!(m.mask.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);

        let p = t2(&[&[0.0, 5.0], &[0.0, 0.0]]);
        let m = spatial_mask(&p, 1);
        assert_eq!(m.mask.data(), &[0.0, 1.0, 0.0, 0.0]);

        let p = t2(&[&[4.0, 0.0, 4.0], &[0.0, 1.0, 0.0]]);
        let m = spatial_mask(&p, 2);
        assert_eq!(m.threshold, Some(4.0));
        assert_eq!(m.ones(), 2);
    }

    #[test]
    fn mask_fallbacks() {
        let p = t2(&[&[0.0, 5.0], &[2.0, 0.0]]);
        let m = spatial_mask(&p, 4);
        assert_eq!(m.threshold, Some(2.0));
        assert_eq!(m.ones(), 2);

        let m = spatial_mask(&Tensor::zeros(&[2, 2]), 1);
        assert!(m.is_empty());
        assert_eq!(m.ones(), 0);
    }

    #[test]
    fn negative_peaks_do_not_select_background() {
        let p = t2(&[&[-1.0, 0.0], &[0.0, -3.0]]);
        let m = spatial_mask(&p, 1);
        assert_eq!(m.mask.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn peak_map_matches_brute_force(vals in prop::collection::vec(-3i32..4, 30)) {
            let m = Tensor::new(vec![5, 6], vals.iter().map(|&v| v as f32).collect()).unwrap();
            for r in 1..=2 {
                let got = peak_map(&m, r);
                let want = brute_peaks(&m, r as isize);
                prop_assert_eq!(got.data(), want.as_slice());
            }
        }

        #[test]
        fn mask_monotone_in_count(vals in prop::collection::vec(-5i32..6, 36), t in 1u32..6) {
            let m = Tensor::new(vec![6, 6], vals.iter().map(|&v| v as f32).collect()).unwrap();
            let p = peak_map(&m, 1);
            let a = spatial_mask(&p, t);
            let b = spatial_mask(&p, t + 1);
            for (x, y) in a.mask.data().iter().zip(b.mask.data()) {
                prop_assert!(*x <= *y);
            }
        }

        #[test]
        fn idempotent_on_isolated_peaks(cells in prop::collection::vec((0usize..4, 0usize..4, 1i32..9), 1..6)) {
            // peaks on a lattice of stride 3 are never adjacent
            let mut m = Tensor::zeros(&[12, 12]);
            for (a, b, v) in cells {
                m.data_mut()[(a * 3) * 12 + b * 3] = v as f32;
            }
            let once = peak_map(&m, 1);
            let twice = peak_map(&once, 1);
            let support = |t: &Tensor| t.data().iter().map(|&v| v != 0.0).collect::<Vec<_>>();
            prop_assert_eq!(support(&once), support(&twice));
        }
    }
}
