//! Aggregated Jaccard Index and foreground Dice.
//!
//! AJI matches every ground-truth instance, in increasing id order, to the
//! prediction with the highest Jaccard index (lowest prediction id on ties).
//! A prediction may be the best match of several ground-truth instances.
//! Matched pairs contribute their intersection to the numerator and their
//! union to the denominator. A ground-truth instance that overlaps no
//! prediction adds its area to the denominator, and so does every prediction
//! that was never selected. Conventions: both maps empty gives 1, exactly
//! one empty gives 0.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::dataio::{read_image, read_label_map, DatasetIndex, InstanceLabelMap, Split};
use crate::error::{Error, Result};
use crate::postprocess::PostprocessConfig;
use crate::segmenter::{predict_instances, SegModel, SegParams};

fn check_dims(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<()> {
    if gt.height() != pred.height() || gt.width() != pred.width() {
        return Err(Error::Shape(format!(
            "ground truth is {}x{} but prediction is {}x{}",
            gt.height(),
            gt.width(),
            pred.height(),
            pred.width()
        )));
    }
    Ok(())
}

/// Numerator and denominator of AJI as pixel counts; `None` when both maps are empty.
pub fn aji_counts(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<Option<(u64, u64)>> {
    check_dims(gt, pred)?;
    let mut gt_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut pred_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut inter: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
        }
        if p != 0 {
            *pred_area.entry(p).or_default() += 1;
        }
        if g != 0 && p != 0 {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    if gt_area.is_empty() && pred_area.is_empty() {
        return Ok(None);
    }
    let mut used: BTreeMap<u32, bool> = pred_area.keys().map(|&p| (p, false)).collect();
    let (mut num, mut den) = (0u64, 0u64);
    for (&g, &ga) in &gt_area {
        // (prediction id, intersection, union) of the best candidate so far.
        let mut best: Option<(u32, u64, u64)> = None;
        for (&(_, p), &i) in inter.range((g, 0)..=(g, u32::MAX)) {
            let u = ga + pred_area[&p] - i;
            // i / u > bi / bu, compared exactly; candidates arrive in increasing p.
            if best.is_none_or(|(_, bi, bu)| i as u128 * bu as u128 > bi as u128 * u as u128) {
                best = Some((p, i, u));
            }
        }
        match best {
            Some((p, i, u)) => {
                num += i;
                den += u;
                used.insert(p, true);
            }
            None => den += ga,
        }
    }
    for (p, was_used) in used {
        if !was_used {
            den += pred_area[&p];
        }
    }
    Ok(Some((num, den)))
}

pub fn aji(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<f64> {
    Ok(match aji_counts(gt, pred)? {
        None => 1.0,
        Some((num, den)) => num as f64 / den as f64,
    })
}

/// `2|G ∩ S| / (|G| + |S|)` over nonzero pixels; 1 when both are empty.
pub fn dice(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<f64> {
    check_dims(gt, pred)?;
    let (mut g, mut s, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in gt.labels().iter().zip(pred.labels()) {
        g += (a != 0) as u64;
        s += (b != 0) as u64;
        both += (a != 0 && b != 0) as u64;
    }
    Ok(if g + s == 0 {
        1.0
    } else {
        2.0 * both as f64 / (g + s) as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub image_id: String,
    pub aji: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_aji: f64,
    pub mean_dice: f64,
}

pub const AVERAGE_ROW_ID: &str = "average";

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dataset("evaluation needs at least one image".into()));
        }
        let n = rows.len() as f64;
        let mean_aji = rows.iter().map(|r| r.aji).sum::<f64>() / n;
        let mean_dice = rows.iter().map(|r| r.dice).sum::<f64>() / n;
        Ok(Self {
            rows,
            mean_aji,
            mean_dice,
        })
    }

    /// CSV with columns `image_id,aji,dice` and a final `average` row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::Encode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for r in &self.rows {
            w.serialize(r).map_err(err)?;
        }
        w.serialize(EvalRow {
            image_id: AVERAGE_ROW_ID.into(),
            aji: self.mean_aji,
            dice: self.mean_dice,
        })
        .map_err(err)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scores `(image id, ground truth, prediction)` triples.
pub fn evaluate_pairs<I>(items: I) -> Result<EvalReport>
where
    I: IntoIterator<Item = Result<(String, InstanceLabelMap, InstanceLabelMap)>>,
{
    let rows = items
        .into_iter()
        .map(|item| {
            let (image_id, gt, pred) = item?;
            Ok(EvalRow {
                aji: aji(&gt, &pred)?,
                dice: dice(&gt, &pred)?,
                image_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

/// Predicts, post-processes and scores every labeled image of `split`.
pub fn evaluate_dataset(
    model: &SegModel,
    params: &SegParams,
    dataset: &DatasetIndex,
    split: Split,
    post: &PostprocessConfig,
) -> Result<EvalReport> {
    evaluate_pairs(dataset.split(split).map(|e| {
        let label_path = e
            .label_path
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("image '{}' has no label map", e.stem)))?;
        let gt = read_label_map(label_path)?;
        let pred = predict_instances(model, params, &read_image(&e.image_path)?, post)?;
        Ok((e.stem.clone(), gt, pred))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn map(h: usize, w: usize, v: &[u32]) -> InstanceLabelMap {
        InstanceLabelMap::new(h, w, v.to_vec()).unwrap()
    }

    /// Literal evaluation of the matching definition with pixel sets and
    /// exact rational comparison.
    fn brute_force(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> f64 {
        let sets = |m: &InstanceLabelMap| -> BTreeMap<u32, BTreeSet<usize>> {
            let mut out: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
            for (i, &id) in m.labels().iter().enumerate() {
                if id != 0 {
                    out.entry(id).or_default().insert(i);
                }
            }
            out
        };
        let (g, s) = (sets(gt), sets(pred));
        if g.is_empty() && s.is_empty() {
            return 1.0;
        }
        if g.is_empty() || s.is_empty() {
            return 0.0;
        }
        let (mut num, mut den) = (0usize, 0usize);
        let mut used = BTreeSet::new();
        for gi in g.values() {
            let mut best: Option<(u32, usize, usize)> = None;
            for (&sid, sj) in &s {
                let i = gi.intersection(sj).count();
                let u = gi.union(sj).count();
                let better = match best {
                    None => true,
                    Some((_, bi, bu)) => i * bu > bi * u,
                };
                if better {
                    best = Some((sid, i, u));
                }
            }
            let (sid, i, u) = best.unwrap();
            if i == 0 {
                den += gi.len();
            } else {
                num += i;
                den += u;
                used.insert(sid);
            }
        }
        for (sid, sj) in &s {
            if !used.contains(sid) {
                den += sj.len();
            }
        }
        num as f64 / den as f64
    }

    #[test]
    fn identical_maps_score_one() {
        let m = map(2, 3, &[1, 1, 0, 2, 3, 3]);
        assert_eq!(aji(&m, &m).unwrap(), 1.0);
        assert_eq!(dice(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn half_covered_instance() {
        let gt = map(2, 2, &[1, 1, 1, 1]);
        let pred = map(2, 2, &[1, 1, 0, 0]);
        assert_eq!(aji(&gt, &pred).unwrap(), 0.5);
        assert_eq!(brute_force(&gt, &pred), 0.5);
    }

    #[test]
    fn unused_prediction_is_penalized() {
        let gt = map(2, 4, &[1, 1, 0, 0, 1, 1, 0, 0]);
        let pred = map(2, 4, &[1, 1, 2, 2, 1, 1, 2, 2]);
        assert_eq!(aji(&gt, &pred).unwrap(), 0.5);
    }

    #[test]
    fn disjoint_instances_score_zero() {
        let gt = map(2, 4, &[1, 1, 0, 0, 1, 1, 0, 0]);
        let pred = map(2, 4, &[0, 0, 1, 1, 0, 0, 1, 1]);
        assert_eq!(aji_counts(&gt, &pred).unwrap(), Some((0, 8)));
        assert_eq!(aji(&gt, &pred).unwrap(), 0.0);
    }

    #[test]
    fn empty_conventions() {
        let empty = InstanceLabelMap::background(2, 2);
        let one = map(2, 2, &[1, 0, 0, 0]);
        assert_eq!(aji(&empty, &empty).unwrap(), 1.0);
        assert_eq!(aji(&empty, &one).unwrap(), 0.0);
        assert_eq!(aji(&one, &empty).unwrap(), 0.0);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&one, &empty).unwrap(), 0.0);
    }

    #[test]
    fn ties_go_to_the_lowest_prediction_id() {
        let gt = map(1, 4, &[1, 1, 0, 0]);
        let pred = map(1, 4, &[5, 2, 0, 0]);
        // Jaccard with 2: 1/2, with 5: 1/2 -> pick 2; 5 unused adds 1.
        assert_eq!(aji_counts(&gt, &pred).unwrap(), Some((1, 3)));
    }

    #[test]
    fn prediction_reuse_is_allowed() {
        let gt = map(1, 4, &[1, 1, 2, 2]);
        let pred = map(1, 4, &[7, 7, 7, 7]);
        // Both gt instances pick 7: (2 + 2) / (4 + 4).
        assert_eq!(aji_counts(&gt, &pred).unwrap(), Some((4, 8)));
    }

    #[test]
    fn dice_by_hand() {
        let gt = map(1, 6, &[1, 1, 1, 1, 0, 0]);
        let pred = map(1, 6, &[0, 0, 3, 3, 3, 3]);
        assert_eq!(dice(&gt, &pred).unwrap(), 0.5);
        let a = map(1, 4, &[1, 1, 0, 0]);
        let b = map(1, 4, &[0, 0, 1, 1]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = InstanceLabelMap::background(2, 2);
        let b = InstanceLabelMap::background(2, 3);
        assert!(aji(&a, &b).is_err());
        assert!(dice(&a, &b).is_err());
    }

    #[test]
    fn report_csv_ends_with_averages() {
        let r = EvalReport::from_rows(vec![
            EvalRow {
                image_id: "a".into(),
                aji: 1.0,
                dice: 0.5,
            },
            EvalRow {
                image_id: "b".into(),
                aji: 0.0,
                dice: 0.25,
            },
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        r.write_csv(&path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "image_id,aji,dice\na,1.0,0.5\nb,0.0,0.25\naverage,0.5,0.375\n"
        );
    }

    fn arb_pair() -> impl Strategy<Value = (InstanceLabelMap, InstanceLabelMap)> {
        (1usize..=8, 1usize..=8).prop_flat_map(|(h, w)| {
            let v = || proptest::collection::vec(0u32..=3, h * w);
            (v(), v()).prop_map(move |(a, b)| (map(h, w, &a), map(h, w, &b)))
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((gt, pred) in arb_pair()) {
            prop_assert_eq!(aji(&gt, &pred).unwrap(), brute_force(&gt, &pred));
        }

        #[test]
        fn ranges_and_symmetry((a, b) in arb_pair()) {
            let j = aji(&a, &b).unwrap();
            let d = dice(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&j) && (0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice(&b, &a).unwrap());
            prop_assert_eq!(aji(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn relabeling_without_ties_is_invariant((gt, pred) in arb_pair(), perm in Just([0u32, 3, 1, 2])) {
            let relabeled = map(pred.height(), pred.width(), &pred.labels().iter().map(|&v| perm[v as usize]).collect::<Vec<_>>());
            let has_tie = {
                let ids = pred.instance_ids();
                gt.instance_ids().iter().any(|&g| {
                    let js: Vec<(u64, u64)> = ids.iter().map(|&p| {
                        let (mut i, mut u) = (0u64, 0u64);
                        for (&a, &b) in gt.labels().iter().zip(pred.labels()) {
                            i += (a == g && b == p) as u64;
                            u += (a == g || b == p) as u64;
                        }
                        (i, u)
                    }).filter(|&(i, _)| i > 0).collect();
                    js.iter().enumerate().any(|(k, &(i1, u1))| js[k + 1..].iter().any(|&(i2, u2)| i1 * u2 == i2 * u1))
                })
            };
            if !has_tie {
                prop_assert_eq!(aji(&gt, &pred).unwrap(), aji(&gt, &relabeled).unwrap());
            }
        }
    }
}
