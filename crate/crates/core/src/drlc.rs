//! Dynamic region-loss correction: fuse two discriminators' region verdicts
//! into a four-case map with loss weights 2 / 1 / 1 / 0.

use image::{Rgb, RgbImage};
use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::region_filter::block_factors;
use crate::scalar::Scalar;

/// How many discriminators a region's prediction fools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionCase {
    Both,
    Only1,
    Only2,
    Neither,
}

impl RegionCase {
    pub fn classify(fools_1: bool, fools_2: bool) -> Self {
        match (fools_1, fools_2) {
            (true, true) => RegionCase::Both,
            (true, false) => RegionCase::Only1,
            (false, true) => RegionCase::Only2,
            (false, false) => RegionCase::Neither,
        }
    }

    pub fn weight(self) -> u8 {
        match self {
            RegionCase::Both => 2,
            RegionCase::Only1 | RegionCase::Only2 => 1,
            RegionCase::Neither => 0,
        }
    }

    /// White / light grey / dark grey / black.
    pub fn color(self) -> Rgb<u8> {
        match self {
            RegionCase::Both => Rgb([255, 255, 255]),
            RegionCase::Only1 => Rgb([192, 192, 192]),
            RegionCase::Only2 => Rgb([96, 96, 96]),
            RegionCase::Neither => Rgb([0, 0, 0]),
        }
    }
}

/// `rc_f` at decision-map resolution, (B, h, w).
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedDecisionMap<T> {
    pub cases: Array3<RegionCase>,
    pub weights: Array3<T>,
}

pub fn combine_decision_maps<T: Scalar>(rc1: &Array4<T>, rc2: &Array4<T>, eps: T) -> Result<CombinedDecisionMap<T>> {
    if rc1.dim() != rc2.dim() {
        return Err(Error::Shape(format!(
            "decision maps differ: {:?} vs {:?}",
            rc1.dim(),
            rc2.dim()
        )));
    }
    let (b, c, h, w) = rc1.dim();
    if c != 1 {
        return Err(Error::Shape(format!("decision maps must have 1 channel, got {c}")));
    }
    let cases = Array3::from_shape_fn((b, h, w), |(n, y, x)| {
        RegionCase::classify(rc1[[n, 0, y, x]] >= eps, rc2[[n, 0, y, x]] >= eps)
    });
    let weights = cases.mapv(|c| T::lit(c.weight() as f64));
    Ok(CombinedDecisionMap { cases, weights })
}

/// Nearest-neighbour replication of the region weights to (B, H, W).
pub fn weight_mask<T: Scalar>(cm: &CombinedDecisionMap<T>, target: (usize, usize)) -> Result<Array3<T>> {
    let (b, h, w) = cm.weights.dim();
    let (fy, fx) = block_factors((h, w), target)?;
    Ok(Array3::from_shape_fn((b, target.0, target.1), |(n, y, x)| {
        cm.weights[[n, y / fy, x / fx]]
    }))
}

/// Renders one batch element of `rc_f`, each region drawn as a `scale`×`scale` block.
pub fn render_cases<T: Scalar>(cm: &CombinedDecisionMap<T>, index: usize, scale: u32) -> RgbImage {
    let (_, h, w) = cm.cases.dim();
    RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        cm.cases[[index, (y / scale) as usize, (x / scale) as usize]].color()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cell(v: f64) -> Array4<f64> {
        Array4::from_elem((1, 1, 1, 1), v)
    }

    #[test]
    fn four_cases() {
        let both = combine_decision_maps(&cell(0.9), &cell(0.7), 0.6).unwrap();
        assert_eq!(both.cases[[0, 0, 0]], RegionCase::Both);
        assert_eq!(both.weights[[0, 0, 0]], 2.0);
        let only1 = combine_decision_maps(&cell(0.9), &cell(0.3), 0.6).unwrap();
        assert_eq!(only1.cases[[0, 0, 0]], RegionCase::Only1);
        assert_eq!(only1.weights[[0, 0, 0]], 1.0);
        let none = combine_decision_maps(&cell(0.1), &cell(0.2), 0.6).unwrap();
        assert_eq!(none.cases[[0, 0, 0]], RegionCase::Neither);
        assert_eq!(none.weights[[0, 0, 0]], 0.0);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = Array4::<f64>::zeros((1, 1, 2, 2));
        let b = Array4::<f64>::zeros((1, 1, 2, 3));
        assert!(combine_decision_maps(&a, &b, 0.5).is_err());
    }

    #[test]
    fn uniform_maps_replicate() {
        let hi = Array4::from_elem((2, 1, 2, 2), 0.9);
        let lo = Array4::from_elem((2, 1, 2, 2), 0.1);
        let both = weight_mask(&combine_decision_maps(&hi, &hi, 0.6).unwrap(), (32, 32)).unwrap();
        assert!(both.iter().all(|&v| v == 2.0));
        let none = weight_mask(&combine_decision_maps(&lo, &lo, 0.6).unwrap(), (32, 32)).unwrap();
        assert!(none.iter().all(|&v| v == 0.0));
        assert!(weight_mask(&combine_decision_maps(&hi, &hi, 0.6).unwrap(), (31, 32)).is_err());
    }

    #[test]
    fn mixed_blocks() {
        let rc1 = Array4::from_shape_vec((1, 1, 2, 2), vec![0.9, 0.9, 0.1, 0.1]).unwrap();
        let rc2 = Array4::from_shape_vec((1, 1, 2, 2), vec![0.9, 0.1, 0.9, 0.1]).unwrap();
        let m = weight_mask(&combine_decision_maps(&rc1, &rc2, 0.6).unwrap(), (4, 4)).unwrap();
        let expect = [[2.0, 1.0], [1.0, 0.0]];
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(m[[0, y, x]], expect[y / 2][x / 2]);
            }
        }
    }

    #[test]
    fn rendering_uses_four_colours() {
        let rc1 = Array4::from_shape_vec((1, 1, 2, 2), vec![0.9, 0.9, 0.1, 0.1]).unwrap();
        let rc2 = Array4::from_shape_vec((1, 1, 2, 2), vec![0.9, 0.1, 0.9, 0.1]).unwrap();
        let img = render_cases(&combine_decision_maps(&rc1, &rc2, 0.5).unwrap(), 0, 3);
        assert_eq!(img.dimensions(), (6, 6));
        assert_eq!(img.get_pixel(0, 0).0, [255; 3]);
        assert_eq!(img.get_pixel(5, 5).0, [0; 3]);
    }

    proptest! {
        #[test]
        fn weights_are_symmetric_in_branches(
            a in proptest::collection::vec(0.0f64..1.0, 9), b in proptest::collection::vec(0.0f64..1.0, 9), eps in 0.01f64..0.99
        ) {
            let rc1 = Array4::from_shape_vec((1, 1, 3, 3), a).unwrap();
            let rc2 = Array4::from_shape_vec((1, 1, 3, 3), b).unwrap();
            let ab = combine_decision_maps(&rc1, &rc2, eps).unwrap();
            let ba = combine_decision_maps(&rc2, &rc1, eps).unwrap();
            prop_assert_eq!(&ab.weights, &ba.weights);
            for (x, y) in ab.cases.iter().zip(ba.cases.iter()) {
                let swapped = match x {
                    RegionCase::Only1 => RegionCase::Only2,
                    RegionCase::Only2 => RegionCase::Only1,
                    other => *other,
                };
                prop_assert_eq!(swapped, *y);
            }
        }

        #[test]
        fn identical_maps_collapse(a in proptest::collection::vec(0.0f64..1.0, 9), eps in 0.01f64..0.99) {
            let rc = Array4::from_shape_vec((1, 1, 3, 3), a).unwrap();
            let cm = combine_decision_maps(&rc, &rc, eps).unwrap();
            for (w, &r) in cm.weights.iter().zip(rc.iter()) {
                prop_assert_eq!(*w, if r >= eps { 2.0 } else { 0.0 });
            }
        }

        #[test]
        fn raising_a_score_never_lowers_weight(
            a in proptest::collection::vec(0.0f64..1.0, 4), b in proptest::collection::vec(0.0f64..1.0, 4),
            idx in 0usize..4, bump in 0.0f64..1.0, which in any::<bool>()
        ) {
            let rc1 = Array4::from_shape_vec((1, 1, 2, 2), a).unwrap();
            let rc2 = Array4::from_shape_vec((1, 1, 2, 2), b).unwrap();
            let before = combine_decision_maps(&rc1, &rc2, 0.6).unwrap();
            let (mut r1, mut r2) = (rc1.clone(), rc2.clone());
            let target = if which { &mut r1 } else { &mut r2 };
            target[[0, 0, idx / 2, idx % 2]] += bump;
            let after = combine_decision_maps(&r1, &r2, 0.6).unwrap();
            prop_assert!(after.weights[[0, idx / 2, idx % 2]] >= before.weights[[0, idx / 2, idx % 2]]);
        }
    }
}
