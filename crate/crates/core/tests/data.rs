use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use svll_reid::data::{
    generate_synthetic, parse_reid_dir, pk_batches, stage1_batches, Dataset, DatasetManifest, ReidSample, Split,
    SyntheticSpec, MANIFEST_FILE,
};
use svll_reid::image::Image;

fn touch_png(path: &Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    Image::filled(16, 8, [0.2, 0.4, 0.6]).save_png(path).unwrap();
}

#[test]
fn market_directory_is_parsed_and_relabeled() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // 12 train files over raw ids 7, 3 and 15.
    for (k, id) in [7, 7, 7, 7, 3, 3, 3, 3, 15, 15, 15, 15].iter().enumerate() {
        touch_png(&root.join(format!("bounding_box_train/{id:04}_c{}s1_{:06}_00.png", 1 + k % 2, k)));
    }
    touch_png(&root.join("query/0003_c1s1_000100_00.png"));
    touch_png(&root.join("query/0042_c2s1_000101_00.png"));
    touch_png(&root.join("bounding_box_test/0003_c2s1_000200_00.png"));
    touch_png(&root.join("bounding_box_test/0042_c1s1_000201_00.png"));
    touch_png(&root.join("bounding_box_test/0000_c1s1_000202_00.png"));
    touch_png(&root.join("bounding_box_test/-1_c1s1_000203_00.png"));
    fs::write(root.join("bounding_box_test/Thumbs.db"), b"").unwrap();

    let report = parse_reid_dir(root).unwrap();
    let m = &report.manifest;
    assert_eq!(m.identities, 3);
    assert_eq!(report.junk, 1);
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(m.count(Split::Train), 12);
    let train_labels: BTreeSet<u32> = m.split(Split::Train).map(|(_, s)| s.id).collect();
    assert_eq!(train_labels, BTreeSet::from([0, 1, 2]));
    let label_of = |file: &str| m.samples.iter().find(|s| s.file.ends_with(file)).unwrap().id;
    assert_eq!(label_of("0003_c1s1_000004_00.png"), 0);
    assert_eq!(label_of("0007_c1s1_000000_00.png"), 1);
    assert_eq!(label_of("0015_c1s1_000008_00.png"), 2);
    // Ids never seen in training get labels past the train range, in raw order.
    assert_eq!(label_of("0000_c1s1_000202_00.png"), 3);
    assert_eq!(label_of("0042_c1s1_000201_00.png"), 4);
    assert_eq!(label_of("query/0003_c1s1_000100_00.png"), 0);

    let data = Dataset::open(root, 16, 8).unwrap();
    assert_eq!(data.images.len(), m.samples.len());
}

#[test]
fn directory_without_train_images_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    touch_png(&dir.path().join("query/0001_c1s1_000001_00.png"));
    assert!(parse_reid_dir(dir.path()).is_err());
}

#[test]
fn export_then_parse_round_trips() {
    let spec = SyntheticSpec { identities: 3, train_per_id: 2, query_per_id: 1, gallery_per_id: 2, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.export(dir.path()).unwrap();

    let via_manifest = Dataset::open(dir.path(), spec.height, spec.width).unwrap();
    assert_eq!(via_manifest.manifest, data.manifest);
    fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
    let parsed = parse_reid_dir(dir.path()).unwrap();
    assert_eq!(parsed.manifest, data.manifest);
    assert!(parsed.skipped.is_empty());

    let reread = Dataset::open(dir.path(), spec.height, spec.width).unwrap();
    for (a, b) in reread.images.iter().zip(&data.images) {
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
    }
}

#[test]
fn manifest_json_round_trip_and_validation() {
    let data = generate_synthetic(&SyntheticSpec { identities: 2, ..SyntheticSpec::default() }).unwrap();
    let text = data.manifest.to_json().unwrap();
    assert_eq!(DatasetManifest::from_json(&text).unwrap(), data.manifest);

    let mut gap = data.manifest.clone();
    gap.samples.retain(|s| !(s.split == Split::Train && s.id == 0));
    assert!(gap.validate().is_err());
    let mut extra = data.manifest.clone();
    extra.samples.push(ReidSample { file: "bounding_box_train/x.png".into(), id: 9, cam: 1, split: Split::Train });
    assert!(extra.validate().is_err());
}

#[test]
fn synthetic_default_counts_and_seed_dependence() {
    let a = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let counts = a.manifest.counts();
    assert_eq!((counts[&Split::Train], counts[&Split::Query], counts[&Split::Gallery]), (160, 80, 160));
    let occluded = a.occluded.iter().filter(|&&o| o).count() as f64 / a.occluded.len() as f64;
    assert!((occluded - 0.4).abs() < 0.1, "occluded fraction {occluded}");
    let b = generate_synthetic(&SyntheticSpec { seed: 1, ..SyntheticSpec::default() }).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_ne!(a.images, b.images);
    let clean = generate_synthetic(&SyntheticSpec::default().noiseless()).unwrap();
    assert!(clean.occluded.iter().all(|&o| !o));
}

fn synthetic_manifest(identities: usize, per_id: usize) -> DatasetManifest {
    generate_synthetic(&SyntheticSpec { identities, train_per_id: per_id, query_per_id: 0, ..SyntheticSpec::default() })
        .unwrap()
        .manifest
}

#[test]
fn stage1_batches_partition_the_train_split() {
    let m = synthetic_manifest(16, 8);
    let batches = stage1_batches(&m, 64, 0, 0).unwrap();
    assert_eq!(batches.len(), 2);
    let all: BTreeSet<usize> = batches.iter().flatten().copied().collect();
    assert_eq!(all, m.indices(Split::Train).into_iter().collect());
    assert_ne!(stage1_batches(&m, 64, 0, 1).unwrap(), batches);
    assert_eq!(stage1_batches(&m, 64, 0, 0).unwrap(), batches);
    assert!(stage1_batches(&m, 0, 0, 0).is_err());
    assert!(stage1_batches(&m, 129, 0, 0).is_err());
}

#[test]
fn stage1_sampling_is_uniform() {
    let m = synthetic_manifest(20, 8);
    let epochs = 10_000;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for e in 0..epochs {
        for i in stage1_batches(&m, 64, 3, e).unwrap().into_iter().flatten() {
            *counts.entry(i).or_default() += 1;
        }
    }
    let expected = epochs as f64 * 128.0 / 160.0;
    assert_eq!(counts.len(), 160);
    for (&i, &c) in &counts {
        let dev = (c as f64 - expected).abs() / expected;
        assert!(dev <= 0.02, "image {i} drawn {c} times, expected {expected}");
    }
}

#[test]
fn pk_batches_hold_p_identities_of_k_images() {
    let m = synthetic_manifest(20, 8);
    let (p, k) = (16, 4);
    let batches = pk_batches(&m, p, k, 5, 2).unwrap();
    assert_eq!(batches.len(), 160 / (p * k));
    for batch in &batches {
        assert_eq!(batch.len(), p * k);
        let groups: Vec<&[usize]> = batch.chunks(k).collect();
        let ids: BTreeSet<u32> = groups.iter().map(|g| m.samples[g[0]].id).collect();
        assert_eq!(ids.len(), p);
        for g in groups {
            assert!(g.iter().all(|&i| m.samples[i].id == m.samples[g[0]].id && m.samples[i].split == Split::Train));
            assert_eq!(g.iter().collect::<BTreeSet<_>>().len(), k);
        }
    }
    // Identities with fewer than K images are sampled with replacement.
    let small = synthetic_manifest(4, 2);
    let batch = &pk_batches(&small, 2, 5, 0, 0).unwrap()[0];
    assert_eq!(batch.len(), 10);
}
