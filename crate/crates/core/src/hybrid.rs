//! Hybrid annotations and the per-round training view.

use std::collections::BTreeMap;

use crate::domain::{
    AnnotationSet, AnnotationTag, ClassId, Mask, MaskChannel, ProbGrid, Provenance, Scan,
};
use crate::error::{Error, Result};
use crate::train::{DataStrategy, TrainingView, ViewSample};

/// Expert-revised channels override the AI-predicted ones class by class;
/// every other predicted channel is kept. Channels stay independent, so a
/// revised mask may overlap another class's predicted mask.
pub fn merge_hybrid(predicted: &AnnotationSet, revised: &AnnotationSet) -> Result<AnnotationSet> {
    if let Some(ch) = revised
        .channels()
        .find(|c| c.provenance != Provenance::ExpertRevised)
    {
        return Err(Error::Contract(format!(
            "revised channel for class {} has provenance {}",
            ch.class_id, ch.provenance
        )));
    }
    Ok(predicted.overlay(revised))
}

/// Thresholds probabilities with `p >= threshold` into AI-predicted masks.
pub fn binarize_predictions(
    probs: &BTreeMap<ClassId, ProbGrid>,
    threshold: f64,
) -> Result<AnnotationSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Contract(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    AnnotationSet::from_channels(probs.iter().map(|(&k, p)| MaskChannel {
        class_id: k,
        mask: binarize(p, threshold),
        provenance: Provenance::AiPredicted,
    }))
}

pub fn binarize(p: &ProbGrid, threshold: f64) -> Mask {
    p.map(|&v| u8::from(v >= threshold))
}

fn tagged<'a>(scan: &'a Scan, tag: AnnotationTag) -> Result<&'a AnnotationSet> {
    scan.annotation(tag).ok_or_else(|| {
        Error::Contract(format!(
            "scan {} has no {} annotations",
            scan.scan_id,
            tag.as_str()
        ))
    })
}

/// Assembles training samples for one round.
///
/// * `RevisedOnly`: the revised scans, supervised by their expert channels.
/// * `Hybrid`: the revised scans with their hybrid sets, plus `reuse` scans
///   with the annotations they carried before the round.
/// * `Full`: every scan of `corpus` with its best available annotations.
pub fn build_training_view(
    revised: &[&Scan],
    reuse: &[&Scan],
    corpus: &[Scan],
    strategy: DataStrategy,
) -> Result<TrainingView> {
    let sample = |scan: &Scan, target: AnnotationSet| ViewSample {
        scan_id: scan.scan_id.clone(),
        image: scan.image.clone(),
        target,
    };
    let mut samples = Vec::new();
    match strategy {
        DataStrategy::RevisedOnly => {
            for &scan in revised {
                samples.push(sample(
                    scan,
                    tagged(scan, AnnotationTag::Revised)?.expert_channels(),
                ));
            }
        }
        DataStrategy::Hybrid => {
            for &scan in revised {
                samples.push(sample(scan, tagged(scan, AnnotationTag::Hybrid)?.clone()));
            }
            for &scan in reuse {
                let previous = match scan.annotation(AnnotationTag::Prior) {
                    Some(p) => p.clone(),
                    None => scan.current_best(),
                };
                samples.push(sample(scan, previous));
            }
        }
        DataStrategy::Full => {
            for scan in corpus {
                samples.push(sample(scan, scan.current_best()));
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Contract(format!(
            "{} training view is empty",
            strategy.as_str()
        )));
    }
    Ok(TrainingView { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClassCatalog, Image};
    use crate::phantom::{generate_dataset, oracle_revise, PhantomSpec};
    use std::collections::BTreeSet;

    fn ai(class: u16, fill: u8) -> MaskChannel {
        MaskChannel {
            class_id: ClassId(class),
            mask: Mask::filled(4, 4, fill),
            provenance: Provenance::AiPredicted,
        }
    }

    fn expert(class: u16, fill: u8) -> MaskChannel {
        MaskChannel {
            provenance: Provenance::ExpertRevised,
            ..ai(class, fill)
        }
    }

    #[test]
    fn merge_examples() {
        let predicted = AnnotationSet::from_channels((0..5).map(|c| ai(c, 0))).unwrap();
        let same = merge_hybrid(&predicted, &AnnotationSet::new()).unwrap();
        assert_eq!(same, predicted);
        assert_eq!(same.m(), 0);

        let gall = AnnotationSet::from_channels([expert(8, 1)]).unwrap();
        let out = merge_hybrid(&predicted, &gall).unwrap();
        assert_eq!((out.n(), out.m()), (6, 1));

        let everything = AnnotationSet::from_channels((0..5).map(|c| expert(c, 1))).unwrap();
        assert_eq!(merge_hybrid(&predicted, &everything).unwrap(), everything);

        let bad = AnnotationSet::from_channels([ai(3, 1)]).unwrap();
        assert!(matches!(
            merge_hybrid(&predicted, &bad),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn binarize_ties_go_to_foreground() {
        let probs: BTreeMap<_, _> = [
            (ClassId(0), ProbGrid::filled(3, 3, 0.5)),
            (ClassId(1), ProbGrid::filled(3, 3, 0.49)),
        ]
        .into();
        let out = binarize_predictions(&probs, 0.5).unwrap();
        assert_eq!(out.get(ClassId(0)).unwrap().mask.foreground(), 9);
        assert_eq!(out.get(ClassId(1)).unwrap().mask.foreground(), 0);
        assert!(out
            .channels()
            .all(|c| c.provenance == Provenance::AiPredicted));
        assert!(binarize_predictions(&probs, 1.0).is_err());
    }

    fn prepared_scans(n: usize) -> Vec<Scan> {
        let cat = ClassCatalog::abdominal();
        let data = generate_dataset(1, n, &PhantomSpec::abdominal(64, 64), &cat).unwrap();
        let new: BTreeSet<_> = cat.new_classes().iter().copied().collect();
        data.scans
            .into_iter()
            .map(|mut s| {
                let predicted = AnnotationSet::from_channels(cat.ids().map(|k| MaskChannel {
                    class_id: k,
                    mask: Mask::filled(64, 64, 0),
                    provenance: Provenance::AiPredicted,
                }))
                .unwrap();
                let revised = oracle_revise(&s, &predicted, &new)
                    .unwrap()
                    .expert_channels();
                let hybrid = merge_hybrid(&predicted, &revised).unwrap();
                s.annotations.insert(AnnotationTag::Predicted, predicted);
                s.annotations.insert(AnnotationTag::Revised, revised);
                s.annotations.insert(AnnotationTag::Hybrid, hybrid);
                s
            })
            .collect()
    }

    #[test]
    fn view_sizes_per_strategy() {
        let scans = prepared_scans(14);
        let revised: Vec<&Scan> = scans[..12].iter().collect();
        let only = build_training_view(&revised, &[], &scans, DataStrategy::RevisedOnly).unwrap();
        assert_eq!(only.len(), 12);
        assert!(only
            .samples
            .iter()
            .all(|s| s.target.n() == 4 && s.target.m() == 4));

        let hybrid = build_training_view(&revised, &[], &scans, DataStrategy::Hybrid).unwrap();
        assert_eq!(hybrid.len(), 12);
        assert!(hybrid.samples.iter().all(|s| s.target.n() == 9));
        let with_reuse =
            build_training_view(&revised, &[&scans[13]], &scans, DataStrategy::Hybrid).unwrap();
        assert_eq!(with_reuse.len(), 13);

        let full = build_training_view(&[], &[], &scans, DataStrategy::Full).unwrap();
        assert_eq!(full.len(), 14);
        assert!(build_training_view(&[], &[], &scans, DataStrategy::RevisedOnly).is_err());

        let bare = Scan {
            scan_id: "bare".into(),
            image: Image::filled(4, 4, 0.0),
            ground_truth: AnnotationSet::new(),
            annotations: BTreeMap::new(),
            seed: 0,
        };
        assert!(build_training_view(&[&bare], &[], &[], DataStrategy::Hybrid).is_err());
    }
}
