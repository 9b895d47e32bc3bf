//! Support decomposition: split proposals by their overlap with the support
//! mask and pool the three visual prototypes.

use serde::{Deserialize, Serialize};

use crate::adapters::ProposalSet;
use crate::error::{Error, Result};
use crate::raster::{FeatureMap, Mask};

pub const DEFAULT_TAU_OVERLAP: f64 = 0.5;

/// `|P ∩ M| / |P|`.
pub fn overlap_ratio(proposal: &Mask, support_mask: &Mask) -> Result<f64> {
    if !proposal.same_shape(support_mask) {
        return Err(Error::Input(format!(
            "proposal {}×{} and mask {}×{} differ in shape",
            proposal.height, proposal.width, support_mask.height, support_mask.width
        )));
    }
    let area = proposal.count();
    if area == 0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(proposal.intersection_count(support_mask) as f64 / area as f64)
}

/// Indices of proposals with overlap strictly above `tau`, and the rest.
pub fn partition_proposals(proposals: &[Mask], support_mask: &Mask, tau: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config(format!("overlap threshold {tau} outside (0, 1)")));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        if overlap_ratio(p, support_mask)? > tau {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    Ok((pos, neg))
}

/// Masked average pooling. The mask is area-averaged onto the feature grid
/// and kept where coverage is at least one half.
pub fn pool_prototype(features: &FeatureMap, mask: &Mask) -> Result<Vec<f64>> {
    let cells = mask.downsample(features.height, features.width)?;
    let weights: Vec<f64> = cells.as_f64();
    features.weighted_mean(&weights).ok_or(Error::EmptyRegion)
}

/// Pool with fractional coverage weights instead of the binarised grid.
/// Used only when the binarised mask vanishes at feature resolution.
fn pool_soft(features: &FeatureMap, mask: &Mask) -> Result<Vec<f64>> {
    let frac = mask.area_fractions(features.height, features.width)?;
    features.weighted_mean(&frac).ok_or(Error::EmptyRegion)
}

fn pool_or_soft(features: &FeatureMap, mask: &Mask) -> Result<Vec<f64>> {
    match pool_prototype(features, mask) {
        Err(Error::EmptyRegion) => pool_soft(features, mask),
        r => r,
    }
}

fn union_of(proposals: &[Mask], indices: &[usize], h: usize, w: usize) -> Mask {
    indices
        .iter()
        .fold(Mask::empty(h, w), |acc, &i| acc.union(&proposals[i]))
}

fn global_mean(features: &FeatureMap) -> Vec<f64> {
    features
        .weighted_mean(&vec![1.0; features.cells()])
        .expect("feature map has cells")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualDecomposition {
    pub positive_set: Vec<usize>,
    pub negative_set: Vec<usize>,
    pub f_s: Vec<f64>,
    pub f_pos: Vec<f64>,
    pub f_neg: Vec<f64>,
}

/// Prototypes of one support: the whole mask, the union of positive
/// proposals and the union of negative proposals.
///
/// An empty positive set falls back to `f_s`; an empty negative set to the
/// mean feature outside the mask (or the global mean if the mask covers
/// everything). A mask that vanishes at feature resolution is pooled with
/// fractional coverage weights.
pub fn decompose_visual(
    features: &FeatureMap,
    support_mask: &Mask,
    proposals: &ProposalSet,
    tau: f64,
) -> Result<VisualDecomposition> {
    if support_mask.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let (positive_set, negative_set) = partition_proposals(&proposals.masks, support_mask, tau)?;
    let (h, w) = (support_mask.height, support_mask.width);
    let f_s = pool_or_soft(features, support_mask)?;
    let f_pos = if positive_set.is_empty() {
        f_s.clone()
    } else {
        pool_or_soft(features, &union_of(&proposals.masks, &positive_set, h, w))?
    };
    let f_neg = if negative_set.is_empty() {
        match pool_or_soft(features, &support_mask.complement()) {
            Err(Error::EmptyRegion) => global_mean(features),
            r => r?,
        }
    } else {
        pool_or_soft(features, &union_of(&proposals.masks, &negative_set, h, w))?
    };
    Ok(VisualDecomposition {
        positive_set,
        negative_set,
        f_s,
        f_pos,
        f_neg,
    })
}

/// Element-wise mean of per-support prototypes. The proposal index sets are
/// those of the first support.
pub fn average_decompositions(parts: &[VisualDecomposition]) -> Option<VisualDecomposition> {
    let first = parts.first()?;
    let n = parts.len() as f64;
    let avg = |pick: fn(&VisualDecomposition) -> &Vec<f64>| -> Vec<f64> {
        let mut out = vec![0.0; pick(first).len()];
        for p in parts {
            for (o, v) in out.iter_mut().zip(pick(p)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        out
    };
    Some(VisualDecomposition {
        positive_set: first.positive_set.clone(),
        negative_set: first.negative_set.clone(),
        f_s: avg(|d| &d.f_s),
        f_pos: avg(|d| &d.f_pos),
        f_neg: avg(|d| &d.f_neg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        Mask::from_fn(h, w, |y, x| on.contains(&(y, x)))
    }

    #[test]
    fn overlap_examples() {
        let m = Mask::from_fn(4, 4, |y, _| y < 2);
        let inside = mask_from(4, 4, &[(0, 0), (1, 1)]);
        let outside = mask_from(4, 4, &[(3, 3)]);
        let half = mask_from(4, 4, &[(1, 0), (1, 1), (2, 0), (2, 1)]);
        assert_eq!(overlap_ratio(&inside, &m).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&outside, &m).unwrap(), 0.0);
        assert_eq!(overlap_ratio(&half, &m).unwrap(), 0.5);
        assert!(matches!(overlap_ratio(&Mask::empty(4, 4), &m), Err(Error::UndefinedRatio)));
    }

    #[test]
    fn threshold_is_strict() {
        let m = Mask::from_fn(10, 10, |y, _| y < 5);
        let exactly_half = Mask::from_fn(10, 10, |_, x| x < 2);
        // 50 inside, 48 outside
        let just_over = Mask::from_fn(10, 10, |y, x| !(y == 9 && x >= 8));
        let r = overlap_ratio(&just_over, &m).unwrap();
        assert!(r > 0.5 && r < 0.6, "{r}");
        let (pos, neg) = partition_proposals(&[exactly_half, just_over], &m, 0.5).unwrap();
        assert_eq!((pos, neg), (vec![1], vec![0]));
    }

    #[test]
    fn ratio_of_51_percent_goes_positive() {
        let m = Mask::from_fn(10, 10, |y, x| y * 10 + x < 51);
        let (pos, _) = partition_proposals(&[Mask::full(10, 10)], &m, 0.5).unwrap();
        assert_eq!(pos, vec![0]);
    }

    #[test]
    fn pooling_examples() {
        let f = FeatureMap::new(2, 2, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(pool_prototype(&f, &Mask::from_fn(8, 8, |y, _| y < 3)).unwrap(), vec![1.0, 2.0]);
        let g = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let one_cell = Mask::from_fn(8, 8, |y, x| y >= 4 && x < 4);
        assert_eq!(pool_prototype(&g, &one_cell).unwrap(), vec![3.0]);
        let tiny = mask_from(8, 8, &[(0, 0)]);
        assert!(matches!(pool_prototype(&g, &tiny), Err(Error::EmptyRegion)));
    }

    #[test]
    fn half_mask_on_random_features() {
        let data: Vec<f64> = (0..48).map(|i| ((i * 37 + 11) % 17) as f64 / 7.0 - 1.0).collect();
        let f = FeatureMap::new(4, 4, 3, data.clone());
        let m = Mask::from_fn(4, 4, |_, x| x < 2);
        let got = pool_prototype(&f, &m).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for y in 0..4 {
                for x in 0..2 {
                    s += data[(y * 4 + x) * 3 + c];
                }
            }
            assert!((got[c] - s / 8.0).abs() < 1e-12);
        }
    }

    fn proposal_set(masks: Vec<Mask>, f: &FeatureMap) -> ProposalSet {
        ProposalSet::from_masks(masks, f).unwrap()
    }

    #[test]
    fn mask_as_its_own_proposal() {
        let f = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let m = Mask::from_fn(4, 4, |y, _| y < 2);
        let d = decompose_visual(&f, &m, &proposal_set(vec![m.clone()], &f), 0.5).unwrap();
        assert_eq!(d.positive_set, vec![0]);
        assert_eq!(d.f_pos, d.f_s);
        assert_eq!(d.f_s, vec![1.5]);
        // no negatives: mean outside the mask
        assert_eq!(d.f_neg, vec![3.5]);
    }

    #[test]
    fn empty_positive_set_falls_back() {
        let f = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let m = Mask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let p = Mask::from_fn(4, 4, |y, _| y >= 2);
        let d = decompose_visual(&f, &m, &proposal_set(vec![p], &f), 0.5).unwrap();
        assert!(d.positive_set.is_empty());
        assert_eq!(d.f_pos, d.f_s);
        assert_eq!(d.f_neg, vec![3.5]);
    }

    #[test]
    fn full_mask_without_negatives_uses_global_mean() {
        let f = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let m = Mask::full(4, 4);
        let d = decompose_visual(&f, &m, &proposal_set(vec![m.clone()], &f), 0.5).unwrap();
        assert_eq!(d.f_neg, vec![2.5]);
    }

    #[test]
    fn averaging_supports() {
        let a = VisualDecomposition {
            positive_set: vec![0],
            negative_set: vec![1],
            f_s: vec![1.0, 0.0],
            f_pos: vec![2.0, 2.0],
            f_neg: vec![0.0, 4.0],
        };
        let mut b = a.clone();
        b.f_s = vec![3.0, 2.0];
        let avg = average_decompositions(&[a, b]).unwrap();
        assert_eq!(avg.f_s, vec![2.0, 1.0]);
        assert_eq!(avg.f_pos, vec![2.0, 2.0]);
        assert!(average_decompositions(&[]).is_none());
    }

    fn arb_mask(n: usize) -> impl Strategy<Value = Mask> {
        proptest::collection::vec(any::<bool>(), n * n).prop_map(move |d| Mask::new(n, n, d))
    }

    proptest! {
        #[test]
        fn overlap_is_scale_free(p in arb_mask(6), m in arb_mask(6)) {
            prop_assume!(!p.is_empty());
            let a = overlap_ratio(&p, &m).unwrap();
            let b = overlap_ratio(&p.upsample_nearest(2, 2), &m.upsample_nearest(2, 2)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn overlap_is_monotone_in_the_mask(p in arb_mask(6), m in arb_mask(6), extra in arb_mask(6)) {
            prop_assume!(!p.is_empty());
            let grown = m.union(&extra);
            prop_assert!(overlap_ratio(&p, &grown).unwrap() >= overlap_ratio(&p, &m).unwrap());
        }

        #[test]
        fn partition_is_a_two_colouring(
            props in proptest::collection::vec(arb_mask(8), 1..8),
            m in arb_mask(8),
            tau in 0.05f64..0.95,
        ) {
            let props: Vec<Mask> = props.into_iter().filter(|p| !p.is_empty()).collect();
            prop_assume!(!props.is_empty());
            let (pos, neg) = partition_proposals(&props, &m, tau).unwrap();
            let mut all: Vec<usize> = pos.iter().chain(&neg).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..props.len()).collect::<Vec<_>>());
            for &i in &pos {
                prop_assert!(!neg.contains(&i));
            }
            // exhaustive oracle with integer arithmetic
            for (i, p) in props.iter().enumerate() {
                let mut inside = 0usize;
                let mut area = 0usize;
                for y in 0..8 {
                    for x in 0..8 {
                        if p.get(y, x) {
                            area += 1;
                            inside += m.get(y, x) as usize;
                        }
                    }
                }
                prop_assert_eq!(pos.contains(&i), inside as f64 / area as f64 > tau);
            }
        }

        #[test]
        fn pooling_is_linear_in_features(
            a in proptest::collection::vec(-3.0f64..3.0, 16 * 2),
            b in proptest::collection::vec(-3.0f64..3.0, 16 * 2),
            m in arb_mask(4),
            s in -2.0f64..2.0,
        ) {
            prop_assume!(!m.is_empty());
            let fa = FeatureMap::new(4, 4, 2, a.clone());
            let fb = FeatureMap::new(4, 4, 2, b.clone());
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
            let fm = FeatureMap::new(4, 4, 2, mix);
            let (pa, pb, pm) = (pool_prototype(&fa, &m).unwrap(), pool_prototype(&fb, &m).unwrap(), pool_prototype(&fm, &m).unwrap());
            for c in 0..2 {
                prop_assert!((pm[c] - (pa[c] + s * pb[c])).abs() < 1e-10);
            }
        }

        #[test]
        fn pooling_ignores_order_of_masked_cells(
            a in proptest::collection::vec(-3.0f64..3.0, 16),
            m in arb_mask(4),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            prop_assume!(!m.is_empty());
            let on: Vec<usize> = (0..16).filter(|&i| m.data[i]).collect();
            let mut shuffled = on.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut permuted = a.clone();
            for (&src, &dst) in on.iter().zip(&shuffled) {
                permuted[dst] = a[src];
            }
            let p1 = pool_prototype(&FeatureMap::new(4, 4, 1, a), &m).unwrap();
            let p2 = pool_prototype(&FeatureMap::new(4, 4, 1, permuted), &m).unwrap();
            prop_assert!((p1[0] - p2[0]).abs() < 1e-12);
        }
    }
}
