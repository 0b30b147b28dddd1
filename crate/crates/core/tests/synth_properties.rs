use std::collections::BTreeSet;

use ncd_core::store::{load_bundle, write_bundle};
use ncd_core::synth::{build_split, generate_mixture, MixtureSpec, SplitSpec};
use proptest::prelude::*;

fn spec(seed: u64, classes: usize, per_class: usize) -> MixtureSpec {
    MixtureSpec {
        num_classes: classes,
        d_img: 6,
        d_txt: 6,
        samples_per_class: per_class,
        class_separation: 3.0,
        text_noise: 0.1,
        captions_per_class: 2,
        distractors_per_class: 1,
        distractor_noise: 3.0,
        seed,
    }
}

fn ids(b: &ncd_core::EmbeddingBundle) -> BTreeSet<String> {
    b.records().iter().map(|r| r.id.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_is_a_partition_without_novel_labels(
        seed in any::<u64>(),
        classes in 2usize..8,
        per_class in 2usize..30,
        frac in 0.05f64..=1.0,
    ) {
        let known = 1 + (seed as usize % (classes - 1));
        let m = generate_mixture(&spec(seed, classes, per_class)).unwrap();
        let split = SplitSpec::first_classes(known, frac, seed ^ 1);
        let (dl, du) = build_split(&m.images, &split).unwrap();
        let (l, u) = (ids(&dl), ids(&du));
        prop_assert!(l.is_disjoint(&u));
        prop_assert_eq!(l.len() + u.len(), m.images.count());
        prop_assert_eq!(&l | &u, ids(&m.images));
        for r in dl.records() {
            let truth = r.class_truth.as_deref().unwrap();
            prop_assert!(split.known_classes.contains(truth));
            prop_assert_eq!(r.label.as_deref(), Some(truth));
        }
        prop_assert!(du.records().iter().all(|r| r.label.is_none()));
    }
}

#[test]
fn same_seed_same_split_different_seeds_differ() {
    let m = generate_mixture(&spec(3, 6, 40)).unwrap();
    let split = |s| build_split(&m.images, &SplitSpec::first_classes(3, 0.5, s)).unwrap().0;
    assert_eq!(ids(&split(11)), ids(&split(11)));
    let differing = [(1, 2), (3, 4), (5, 6)].iter().filter(|&&(a, b)| ids(&split(a)) != ids(&split(b))).count();
    assert!(differing >= 1);
}

#[test]
fn generated_bundles_round_trip_byte_identical() {
    let m = generate_mixture(&MixtureSpec {
        samples_per_class: 100,
        ..spec(8, 10, 100)
    })
    .unwrap();
    assert_eq!(m.images.count(), 1000);
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&m.images, dir.path()).unwrap();
    let back = load_bundle(dir.path()).unwrap();
    assert_eq!(back, m.images);
    let bits = |b: &ncd_core::EmbeddingBundle| b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&m.images));
    let second = tempfile::tempdir().unwrap();
    write_bundle(&back, second.path()).unwrap();
    for f in ["manifest.json", "embeddings.bin", "records.jsonl"] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(second.path().join(f)).unwrap());
    }
}

#[test]
fn two_row_bundle_layout() {
    use ncd_core::{EmbeddingBundle, Modality, SampleRecord};
    let recs = vec![SampleRecord::new("a", 0, Modality::Image), SampleRecord::new("b", 1, Modality::Text)];
    let b = EmbeddingBundle::from_rows(3, &[vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]], recs, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&b, dir.path()).unwrap();
    assert_eq!(std::fs::metadata(dir.path().join("embeddings.bin")).unwrap().len(), 2 * 3 * 4);
    let lines = std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 2);
    assert_eq!(manifest["dim"], 3);
    assert_eq!(manifest["dtype"], "f32le");
}
