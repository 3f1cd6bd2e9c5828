//! Lesion-group evaluation: Dice, false-negative and false-positive volume,
//! patient and dataset aggregation, and hash-based fold assignment.
//!
//! Lesions whose ground-truth masks overlap or touch (26-connectivity) are
//! merged into one group, transitively. Predictions are merged the same way,
//! and metrics are computed per group. A patient's Dice is the mean over its
//! groups; its FN/FP volumes are sums over groups.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::fnv1a64;
use crate::volgrid::{volume_mm3, Volume3, VoxelIndex};

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(len: usize) -> Self {
        Self {
            parent: (0..len).collect(),
            size: vec![1; len],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small] = big;
        self.size[big] += self.size[small];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionGroup {
    pub id: usize,
    /// Sorted member lesion ids.
    pub members: Vec<u16>,
    /// Union of the members' ground-truth masks.
    pub gt: Volume3<u8>,
    /// Union of the members' predicted masks; empty until attached.
    pub pred: Volume3<u8>,
}

/// Per-lesion binary masks from a multilabel map.
pub fn split_labels(labels: &Volume3<u16>, ids: &[u16]) -> Vec<(u16, Volume3<u8>)> {
    ids.iter()
        .map(|&id| (id, labels.map(|l| u8::from(l == id))))
        .collect()
}

/// Partitions lesions into groups connected by overlap or 26-adjacency of
/// their ground-truth masks. Groups are numbered in order of their smallest
/// lesion id.
pub fn group_gt_lesions(gt_masks: &[(u16, Volume3<u8>)]) -> Result<Vec<LesionGroup>> {
    let Some((_, first)) = gt_masks.first() else {
        return Ok(Vec::new());
    };
    let mut ids = BTreeSet::new();
    for (id, m) in gt_masks {
        first.same_shape(m)?;
        if !ids.insert(*id) {
            return Err(Error::DuplicateLesion(*id));
        }
    }

    let mut uf = UnionFind::new(gt_masks.len());
    // owner[o] = 1 + index of the first lesion covering voxel o
    let mut owner = vec![0u32; first.len()];
    for (i, (_, m)) in gt_masks.iter().enumerate() {
        for (o, &v) in m.data().iter().enumerate() {
            if v != 0 {
                match owner[o] {
                    0 => owner[o] = i as u32 + 1,
                    j => uf.union(i, j as usize - 1),
                }
            }
        }
    }

    // half of the 26-neighbourhood suffices since adjacency is symmetric
    let forward: Vec<VoxelIndex> = (-1..=1)
        .flat_map(|z| (-1..=1).flat_map(move |y| (-1..=1).map(move |x| VoxelIndex::new(z, y, x))))
        .filter(|d| (d.z, d.y, d.x) > (0, 0, 0))
        .collect();
    for (o, &a) in owner.iter().enumerate() {
        if a == 0 {
            continue;
        }
        let v = first.index_of(o);
        for &d in &forward {
            if let Some(n) = first.offset(v + d) {
                let b = owner[n];
                if b != 0 && b != a {
                    uf.union(a as usize - 1, b as usize - 1);
                }
            }
        }
    }

    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..gt_masks.len() {
        by_root.entry(uf.find(i)).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_root.into_values().collect();
    for g in &mut groups {
        g.sort_by_key(|&i| gt_masks[i].0);
    }
    groups.sort_by_key(|g| gt_masks[g[0]].0);

    groups
        .into_iter()
        .enumerate()
        .map(|(gid, members)| {
            let mut gt = Volume3::<u8>::zeros(first.shape(), first.spacing())?;
            for &i in &members {
                for (dst, &src) in gt.data_mut().iter_mut().zip(gt_masks[i].1.data()) {
                    *dst |= u8::from(src != 0);
                }
            }
            Ok(LesionGroup {
                id: gid,
                members: members.iter().map(|&i| gt_masks[i].0).collect(),
                pred: Volume3::zeros(first.shape(), first.spacing())?,
                gt,
            })
        })
        .collect()
}

/// Sets each group's prediction to the union of its members' predicted masks.
/// Lesions without a prediction contribute nothing.
pub fn attach_predictions(groups: &mut [LesionGroup], preds: &[(u16, Volume3<u8>)]) -> Result<()> {
    for g in groups.iter_mut() {
        g.pred.data_mut().fill(0);
        for (_, mask) in preds.iter().filter(|(id, _)| g.members.contains(id)) {
            g.gt.same_shape(mask)?;
            for (dst, &src) in g.pred.data_mut().iter_mut().zip(mask.data()) {
                *dst |= u8::from(src != 0);
            }
        }
    }
    Ok(())
}

/// Foreground counts of two masks and of their intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlapCounts {
    pub a: u64,
    pub b: u64,
    pub both: u64,
}

pub fn overlap_counts(a: &Volume3<u8>, b: &Volume3<u8>) -> Result<OverlapCounts> {
    a.same_shape(b)?;
    let mut c = OverlapCounts::default();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0, y != 0);
        c.a += x as u64;
        c.b += y as u64;
        c.both += (x && y) as u64;
    }
    Ok(c)
}

impl OverlapCounts {
    pub fn dice(&self) -> f64 {
        match self.a + self.b {
            0 => 1.0,
            denom => 2.0 * self.both as f64 / denom as f64,
        }
    }
}

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice(a: &Volume3<u8>, b: &Volume3<u8>) -> Result<f64> {
    Ok(overlap_counts(a, b)?.dice())
}

/// Volume of ground truth missed by the prediction, in mm³.
pub fn fnvol(gt: &Volume3<u8>, pred: &Volume3<u8>, spacing: [f64; 3]) -> Result<f64> {
    let c = overlap_counts(gt, pred)?;
    Ok(volume_mm3(c.a - c.both, spacing))
}

/// Volume predicted outside the ground truth, in mm³.
pub fn fpvol(gt: &Volume3<u8>, pred: &Volume3<u8>, spacing: [f64; 3]) -> Result<f64> {
    let c = overlap_counts(gt, pred)?;
    Ok(volume_mm3(c.b - c.both, spacing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub patient_id: String,
    /// Percent, in `[0, 100]`.
    pub dice: f64,
    pub fnvol: f64,
    pub fpvol: f64,
    pub n_groups: usize,
}

pub const MEAN_ROW_ID: &str = "MEAN";

pub fn evaluate_patient(
    patient_id: &str,
    groups: &[LesionGroup],
    spacing: [f64; 3],
) -> Result<MetricsRow> {
    if groups.is_empty() {
        return Err(Error::NoLesions(patient_id.to_owned()));
    }
    let mut dice_sum = 0.0;
    let (mut fn_total, mut fp_total) = (0.0, 0.0);
    for g in groups {
        let c = overlap_counts(&g.gt, &g.pred)?;
        dice_sum += c.dice();
        fn_total += volume_mm3(c.a - c.both, spacing);
        fp_total += volume_mm3(c.b - c.both, spacing);
    }
    Ok(MetricsRow {
        patient_id: patient_id.to_owned(),
        dice: 100.0 * dice_sum / groups.len() as f64,
        fnvol: fn_total,
        fpvol: fp_total,
        n_groups: groups.len(),
    })
}

/// Unweighted mean over patients; `n_groups` of the result is the total.
pub fn evaluate_dataset(rows: &[MetricsRow]) -> Result<MetricsRow> {
    if rows.is_empty() {
        return Err(Error::NoPatients);
    }
    let n = rows.len() as f64;
    // sorted summation keeps the mean independent of row order
    let mean = |f: fn(&MetricsRow) -> f64| {
        let mut v: Vec<f64> = rows.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / n
    };
    Ok(MetricsRow {
        patient_id: MEAN_ROW_ID.to_owned(),
        dice: mean(|r| r.dice),
        fnvol: mean(|r| r.fnvol),
        fpvol: mean(|r| r.fpvol),
        n_groups: rows.iter().map(|r| r.n_groups).sum(),
    })
}

pub const METRICS_HEADER: [&str; 5] = ["patient_id", "dice", "fnvol_mm3", "fpvol_mm3", "n_groups"];

/// Writes per-patient rows followed by the `MEAN` row, two decimals.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow], mean: &MetricsRow) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows.iter().chain(std::iter::once(mean)) {
        w.write_record([
            r.patient_id.clone(),
            format!("{:.2}", r.dice),
            format!("{:.2}", r.fnvol),
            format!("{:.2}", r.fpvol),
            r.n_groups.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(format!("csv: {e}")))
}

/// Assigns each patient to fold `fnv1a64(id) mod k`.
pub fn fold_split(patient_ids: &[String], k: usize) -> Result<BTreeMap<String, usize>> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be >= 2, got {k}")));
    }
    let mut out = BTreeMap::new();
    for id in patient_ids {
        let fold = (fnv1a64(id.as_bytes()) % k as u64) as usize;
        if out.insert(id.clone(), fold).is_some() {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(shape: [usize; 3], on: &[[i64; 3]]) -> Volume3<u8> {
        let mut m = Volume3::zeros(shape, [1.0; 3]).unwrap();
        for &p in on {
            m.set(p.into(), 1);
        }
        m
    }

    fn line(start: usize, len: usize) -> Vec<[i64; 3]> {
        (start..start + len).map(|x| [0, 0, x as i64]).collect()
    }

    #[test]
    fn dice_examples() {
        let s = [1, 1, 12];
        let a = mask(s, &line(0, 6));
        let b = mask(s, &line(3, 4));
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(
            dice(&mask(s, &line(0, 2)), &mask(s, &line(5, 2))).unwrap(),
            0.0
        );
        // |A| = 6, |B| = 4, |A∩B| = 3
        assert!((dice(&a, &b).unwrap() - 0.6).abs() < 1e-12);
        let empty = mask(s, &[]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        let other = Volume3::zeros([1, 2, 12], [1.0; 3]).unwrap();
        assert!(matches!(dice(&a, &other), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn volume_examples() {
        let s = [1, 1, 20];
        let gt = mask(s, &line(0, 10));
        let none = mask(s, &[]);
        assert_eq!(fnvol(&gt, &gt, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(fnvol(&gt, &none, [1.0; 3]).unwrap(), 10.0);
        // |GT| = 10, |GT∩PRED| = 4
        assert_eq!(fnvol(&gt, &mask(s, &line(6, 8)), [1.0; 3]).unwrap(), 6.0);
        assert_eq!(fpvol(&gt, &gt, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(fpvol(&none, &mask(s, &line(0, 7)), [1.0; 3]).unwrap(), 7.0);
        // |PRED| = 9, |GT∩PRED| = 4
        assert_eq!(fpvol(&gt, &mask(s, &line(6, 9)), [1.0; 3]).unwrap(), 5.0);
    }

    #[test]
    fn grouping_examples() {
        let s = [1, 1, 20];
        let groups =
            group_gt_lesions(&[(1, mask(s, &line(0, 3))), (2, mask(s, &line(5, 3)))]).unwrap();
        assert_eq!(groups.len(), 2);

        let chained = group_gt_lesions(&[
            (7, mask(s, &line(0, 4))),
            (3, mask(s, &line(3, 4))),
            (9, mask(s, &line(6, 4))),
        ])
        .unwrap();
        assert_eq!(chained.len(), 1);
        assert_eq!(chained[0].members, vec![3, 7, 9]);
        assert_eq!(chained[0].gt.count_nonzero(), 10);

        let with_empty = group_gt_lesions(&[(1, mask(s, &line(0, 3))), (2, mask(s, &[]))]).unwrap();
        assert_eq!(with_empty.len(), 2);
        assert_eq!(with_empty[1].members, vec![2]);
    }

    #[test]
    fn diagonal_touch_groups() {
        let s = [3, 3, 3];
        let g =
            group_gt_lesions(&[(1, mask(s, &[[0, 0, 0]])), (2, mask(s, &[[1, 1, 1]]))]).unwrap();
        assert_eq!(g.len(), 1);
        let g =
            group_gt_lesions(&[(1, mask(s, &[[0, 0, 0]])), (2, mask(s, &[[2, 1, 1]]))]).unwrap();
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn patient_rows() {
        let s = [1, 1, 20];
        let mut groups =
            group_gt_lesions(&[(1, mask(s, &line(0, 4))), (2, mask(s, &line(10, 4)))]).unwrap();
        let none = evaluate_patient("p", &groups, [1.0; 3]).unwrap();
        assert_eq!((none.dice, none.fnvol, none.fpvol), (0.0, 8.0, 0.0));

        attach_predictions(
            &mut groups,
            &[(1, mask(s, &line(0, 4))), (2, mask(s, &line(12, 4)))],
        )
        .unwrap();
        let row = evaluate_patient("p", &groups, [1.0; 3]).unwrap();
        // group dice 1.0 and 0.5
        assert_eq!(row.dice, 75.0);
        assert_eq!((row.fnvol, row.fpvol, row.n_groups), (2.0, 2.0, 2));
        assert!(matches!(
            evaluate_patient("q", &[], [1.0; 3]),
            Err(Error::NoLesions(_))
        ));
    }

    #[test]
    fn dataset_mean() {
        let row = |id: &str, d| MetricsRow {
            patient_id: id.into(),
            dice: d,
            fnvol: 1.0,
            fpvol: 3.0,
            n_groups: 2,
        };
        let single = evaluate_dataset(&[row("a", 60.0)]).unwrap();
        assert_eq!((single.dice, single.fnvol, single.fpvol), (60.0, 1.0, 3.0));
        assert_eq!(
            evaluate_dataset(&[row("a", 60.0), row("b", 70.0)])
                .unwrap()
                .dice,
            65.0
        );
        assert!(matches!(evaluate_dataset(&[]), Err(Error::NoPatients)));
    }

    #[test]
    fn csv_layout() {
        let rows = vec![MetricsRow {
            patient_id: "abc".into(),
            dice: 100.0,
            fnvol: 0.0,
            fpvol: 1.0 / 3.0,
            n_groups: 1,
        }];
        let mean = evaluate_dataset(&rows).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows, &mean).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "patient_id,dice,fnvol_mm3,fpvol_mm3,n_groups\nabc,100.00,0.00,0.33,1\nMEAN,100.00,0.00,0.33,1\n"
        );
    }

    #[test]
    fn folds() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let f = fold_split(&ids, 5).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f, fold_split(&ids, 5).unwrap());
        assert!(fold_split(&ids, 1).is_err());
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(fold_split(&dup, 5), Err(Error::DuplicateId(_))));
    }

    fn arb_pair() -> impl Strategy<Value = (Volume3<u8>, Volume3<u8>)> {
        [1usize..6, 1usize..6, 1usize..6].prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            (
                proptest::collection::vec(0u8..2, n),
                proptest::collection::vec(0u8..2, n),
            )
                .prop_map(move |(a, b)| {
                    (
                        Volume3::new(shape, [1.0; 3], a).unwrap(),
                        Volume3::new(shape, [1.0; 3], b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn metric_symmetries((a, b) in arb_pair()) {
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            prop_assert_eq!(fnvol(&a, &b, [0.7, 1.1, 2.0]).unwrap(), fpvol(&b, &a, [0.7, 1.1, 2.0]).unwrap());
            if a.count_nonzero() > 0 {
                prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
            }
            let d = dice(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn dataset_mean_order_free(dices in proptest::collection::vec(0.0f64..100.0, 1..12), rot in 0usize..12) {
            let rows: Vec<MetricsRow> = dices.iter().enumerate().map(|(i, &d)| MetricsRow {
                patient_id: i.to_string(), dice: d, fnvol: d * 3.0, fpvol: d / 7.0, n_groups: 1,
            }).collect();
            let mut perm = rows.clone();
            perm.rotate_left(rot % rows.len());
            perm.reverse();
            prop_assert_eq!(evaluate_dataset(&rows).unwrap(), evaluate_dataset(&perm).unwrap());
        }
    }
}
