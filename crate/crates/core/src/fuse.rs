//! Merging per-lesion predictions into one multilabel map.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::patcher::SparseUpdate;
use crate::volgrid::Volume3;

/// One lesion's probabilities in full-volume coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionPrediction {
    pub lesion_id: u16,
    pub update: SparseUpdate,
}

fn check_inputs(preds: &[LesionPrediction], full_shape: [usize; 3], threshold: f32) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let mut seen = BTreeSet::new();
    for p in preds {
        if p.lesion_id == 0 {
            return Err(Error::ReservedLabel);
        }
        if !seen.insert(p.lesion_id) {
            return Err(Error::DuplicateLesion(p.lesion_id));
        }
        if p.update.full_shape != full_shape {
            return Err(Error::ShapeMismatch {
                expected: full_shape,
                actual: p.update.full_shape,
            });
        }
    }
    Ok(())
}

/// Each voxel takes the lesion with the highest probability `>= threshold`;
/// equal probabilities go to the smaller lesion id. The result does not
/// depend on the order of `preds`.
pub fn merge_multilabel(
    preds: &[LesionPrediction],
    full_shape: [usize; 3],
    spacing: [f64; 3],
    threshold: f32,
) -> Result<Volume3<u16>> {
    check_inputs(preds, full_shape, threshold)?;
    let mut labels = Volume3::<u16>::zeros(full_shape, spacing)?;
    let mut best = vec![f32::NEG_INFINITY; labels.len()];
    let out = labels.data_mut();
    for p in preds {
        let id = p.lesion_id;
        for &(o, prob) in &p.update.entries {
            if prob >= threshold
                && (prob > best[o] || (prob == best[o] && (out[o] == 0 || id < out[o])))
            {
                best[o] = prob;
                out[o] = id;
            }
        }
    }
    Ok(labels)
}

/// Thresholds every lesion on its own; overlaps are kept in each mask.
/// Output is ordered by lesion id.
pub fn export_separate(
    preds: &[LesionPrediction],
    full_shape: [usize; 3],
    spacing: [f64; 3],
    threshold: f32,
) -> Result<Vec<(u16, Volume3<u8>)>> {
    check_inputs(preds, full_shape, threshold)?;
    let mut out = preds
        .iter()
        .map(|p| {
            let mut mask = Volume3::<u8>::zeros(full_shape, spacing)?;
            let data = mask.data_mut();
            for &(o, prob) in &p.update.entries {
                if prob >= threshold {
                    data[o] = 1;
                }
            }
            Ok((p.lesion_id, mask))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SHAPE: [usize; 3] = [1, 1, 4];

    fn pred(id: u16, entries: &[(usize, f32)]) -> LesionPrediction {
        LesionPrediction {
            lesion_id: id,
            update: SparseUpdate {
                full_shape: SHAPE,
                entries: entries.to_vec(),
            },
        }
    }

    #[test]
    fn disjoint_lesions_keep_their_labels() {
        let preds = [
            pred(3, &[(0, 0.9), (1, 0.8)]),
            pred(7, &[(3, 0.6), (2, 0.1)]),
        ];
        let m = merge_multilabel(&preds, SHAPE, [1.0; 3], 0.5).unwrap();
        assert_eq!(m.data(), &[3, 3, 0, 7]);
    }

    #[test]
    fn overlap_resolution() {
        let preds = [
            pred(2, &[(0, 0.6), (1, 0.7)]),
            pred(5, &[(0, 0.9)]),
            pred(9, &[(1, 0.7)]),
            pred(4, &[(1, 0.7)]),
        ];
        let m = merge_multilabel(&preds, SHAPE, [1.0; 3], 0.5).unwrap();
        assert_eq!(m.data()[0], 5);
        assert_eq!(m.data()[1], 2);
        let m = merge_multilabel(
            &[pred(9, &[(1, 0.7)]), pred(4, &[(1, 0.7)])],
            SHAPE,
            [1.0; 3],
            0.5,
        )
        .unwrap();
        assert_eq!(m.data()[1], 4);
    }

    #[test]
    fn invalid_inputs() {
        let dup = [pred(1, &[]), pred(1, &[])];
        assert!(matches!(
            merge_multilabel(&dup, SHAPE, [1.0; 3], 0.5),
            Err(Error::DuplicateLesion(1))
        ));
        assert!(matches!(
            export_separate(&[pred(0, &[])], SHAPE, [1.0; 3], 0.5),
            Err(Error::ReservedLabel)
        ));
        assert!(merge_multilabel(&[pred(1, &[])], SHAPE, [1.0; 3], 1.0).is_err());
    }

    #[test]
    fn separate_export_keeps_overlap() {
        let preds = [
            pred(2, &[(0, 0.6), (1, 0.7)]),
            pred(1, &[(1, 0.9)]),
            pred(3, &[]),
        ];
        let out = export_separate(&preds, SHAPE, [1.0; 3], 0.5).unwrap();
        assert_eq!(
            out[0],
            (1, Volume3::new(SHAPE, [1.0; 3], vec![0, 1, 0, 0]).unwrap())
        );
        assert_eq!(out[1].1.data(), &[1, 1, 0, 0]);
        assert_eq!(out[2].1.data(), &[0, 0, 0, 0]);
    }

    fn arb_preds() -> impl Strategy<Value = Vec<LesionPrediction>> {
        proptest::collection::btree_set(1u16..40, 1..6).prop_flat_map(|ids| {
            let n = ids.len();
            (
                Just(ids.into_iter().collect::<Vec<_>>()),
                proptest::collection::vec(
                    proptest::collection::vec(
                        prop_oneof![Just(0.5f32), Just(0.7), 0.0f32..1.0],
                        27,
                    ),
                    n,
                ),
            )
                .prop_map(|(ids, probs)| {
                    ids.into_iter()
                        .zip(probs)
                        .map(|(id, p)| LesionPrediction {
                            lesion_id: id,
                            update: SparseUpdate {
                                full_shape: [3; 3],
                                entries: p.into_iter().enumerate().collect(),
                            },
                        })
                        .collect()
                })
        })
    }

    proptest! {
        #[test]
        fn merge_properties(preds in arb_preds(), shift in 0usize..6) {
            let merged = merge_multilabel(&preds, [3; 3], [1.0; 3], 0.5).unwrap();
            let mut perm = preds.clone();
            perm.rotate_left(shift % preds.len());
            perm.reverse();
            prop_assert_eq!(&merge_multilabel(&perm, [3; 3], [1.0; 3], 0.5).unwrap(), &merged);

            let separate = export_separate(&preds, [3; 3], [1.0; 3], 0.5).unwrap();
            for o in 0..27 {
                let set: Vec<u16> = separate.iter().filter(|(_, m)| m.data()[o] == 1).map(|(id, _)| *id).collect();
                let label = merged.data()[o];
                if label != 0 {
                    prop_assert!(set.contains(&label));
                }
                if set.len() <= 1 {
                    prop_assert_eq!(label, set.first().copied().unwrap_or(0));
                }
            }
        }
    }
}
