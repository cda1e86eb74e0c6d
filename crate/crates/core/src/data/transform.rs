use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetIndex, Modality};
use crate::error::{Error, Result};

/// Per-class stratified subset of `floor(ratio · count)` samples (at least
/// one per class), chosen by a seeded shuffle and returned in index order.
pub fn subset_by_ratio(index: &DatasetIndex, ratio: f64, seed: u64) -> Result<DatasetIndex> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("ratio {ratio} not in (0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in index.samples().iter().enumerate() {
        by_class.entry(s.class_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(index.len());
    for members in by_class.values_mut() {
        let n = ((ratio * members.len() as f64 + 1e-9).floor() as usize).max(1);
        if n < members.len() {
            members.shuffle(&mut rng);
        }
        keep.extend_from_slice(&members[..n]);
    }
    keep.sort_unstable();
    Ok(index.select(&keep))
}

/// Which samples lost a modality to [`mask_classes`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskAudit {
    pub modality: Modality,
    pub hidden_classes: BTreeSet<usize>,
    pub affected: Vec<String>,
}

/// Removes `modality` from the mask of every sample whose class is hidden.
/// No sample is dropped.
pub fn mask_classes(
    index: &DatasetIndex,
    modality: Modality,
    hidden_classes: &BTreeSet<usize>,
) -> Result<(DatasetIndex, MaskAudit)> {
    if let Some(&bad) = hidden_classes.iter().find(|&&c| c >= index.num_classes()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: index.num_classes(),
        });
    }
    let mut affected = Vec::new();
    let samples = index
        .samples()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if hidden_classes.contains(&s.class_id) {
                s.modality_mask.remove(modality);
                affected.push(s.sample_id.clone());
            }
            s
        })
        .collect();
    Ok((
        index.with_samples(samples),
        MaskAudit {
            modality,
            hidden_classes: hidden_classes.clone(),
            affected,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabeledSample, ModalityMask, Payload, SensorSequence, SplitTag};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn index(per_class: &[usize]) -> DatasetIndex {
        let seq = SensorSequence::unnamed(Array2::zeros((1, 2)), 50.0).unwrap();
        let mut samples = Vec::new();
        for (class_id, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                samples.push(LabeledSample {
                    sample_id: format!("c{class_id}-{i}"),
                    subject_id: 1,
                    class_id,
                    sensor: Some(Payload::loaded(seq.clone())),
                    video: Some(Payload::loaded(
                        crate::data::VideoClip::new(ndarray::Array4::zeros((1, 1, 1, 3)), 15.0).unwrap(),
                    )),
                    modality_mask: ModalityMask::BOTH,
                });
            }
        }
        let names = (0..per_class.len()).map(|c| c.to_string()).collect();
        DatasetIndex::new(samples, names, SplitTag::Train).unwrap()
    }

    #[test]
    fn full_ratio_is_identity() {
        let idx = index(&[5, 3, 7]);
        assert_eq!(subset_by_ratio(&idx, 1.0, 9).unwrap().sample_ids(), idx.sample_ids());
    }

    #[test]
    fn quarter_of_hundred_is_twenty_five() {
        let idx = index(&[100, 4]);
        let sub = subset_by_ratio(&idx, 0.25, 1).unwrap();
        assert_eq!(sub.class_counts()[&0], 25);
        assert_eq!(sub.class_counts()[&1], 1);
    }

    #[test]
    fn ratio_bounds_are_checked() {
        let idx = index(&[2]);
        assert!(subset_by_ratio(&idx, 0.0, 1).is_err());
        assert!(subset_by_ratio(&idx, 1.5, 1).is_err());
    }

    #[test]
    fn empty_mask_is_identity() {
        let idx = index(&[2, 2]);
        let (out, audit) = mask_classes(&idx, Modality::Imu, &BTreeSet::new()).unwrap();
        assert!(audit.affected.is_empty());
        assert!(out.samples().iter().all(|s| s.modality_mask == ModalityMask::BOTH));
    }

    #[test]
    fn masking_one_class_touches_only_that_modality() {
        let idx = index(&[2, 2, 2, 2, 2, 3]);
        let (out, audit) = mask_classes(&idx, Modality::Imu, &BTreeSet::from([5])).unwrap();
        assert_eq!(audit.affected.len(), 3);
        for s in out.samples() {
            assert_eq!(s.modality_mask.imu, s.class_id != 5);
            assert!(s.modality_mask.video);
        }
    }

    #[test]
    fn masking_every_class_leaves_no_imu_eligible() {
        let idx = index(&[2, 2]);
        let (out, _) = mask_classes(&idx, Modality::Imu, &BTreeSet::from([0, 1])).unwrap();
        assert_eq!(out.eligible(Modality::Imu).count(), 0);
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn out_of_range_hidden_class_is_rejected() {
        let idx = index(&[2]);
        assert!(mask_classes(&idx, Modality::Video, &BTreeSet::from([1])).is_err());
    }

    proptest! {
        #[test]
        fn subset_is_deterministic_and_keeps_every_class(
            counts in proptest::collection::vec(1usize..30, 1..6),
            ratio in 0.01f64..=1.0,
            seed in any::<u64>(),
        ) {
            let idx = index(&counts);
            let a = subset_by_ratio(&idx, ratio, seed).unwrap();
            let b = subset_by_ratio(&idx, ratio, seed).unwrap();
            prop_assert_eq!(a.sample_ids(), b.sample_ids());
            let kept = a.class_counts();
            for (c, &n) in counts.iter().enumerate() {
                let expect = ((ratio * n as f64 + 1e-9).floor() as usize).max(1);
                prop_assert_eq!(kept[&c], expect);
            }
        }

        #[test]
        fn masking_preserves_counts_labels_and_other_modality(
            counts in proptest::collection::vec(1usize..6, 1..6),
            hide in proptest::collection::btree_set(0usize..6, 0..4),
            imu in any::<bool>(),
        ) {
            let idx = index(&counts);
            let hide: BTreeSet<usize> = hide.into_iter().filter(|&c| c < counts.len()).collect();
            let m = if imu { Modality::Imu } else { Modality::Video };
            let (out, _) = mask_classes(&idx, m, &hide).unwrap();
            prop_assert_eq!(out.len(), idx.len());
            for (a, b) in idx.samples().iter().zip(out.samples()) {
                prop_assert_eq!(a.class_id, b.class_id);
                let other = if imu { Modality::Video } else { Modality::Imu };
                prop_assert_eq!(a.modality_mask.contains(other), b.modality_mask.contains(other));
                prop_assert_eq!(b.modality_mask.contains(m), !hide.contains(&a.class_id));
            }
        }
    }
}
