use std::fs;
use std::path::Path;

use intra_core::dataset::{
    generate_toy_dataset, load_gt_mask, load_manifest, make_batches, scan_dataset, AugmentPolicy, Mode, Sampler, Split,
    ToySpec, View,
};
use intra_core::Error;

fn toy(dir: &Path, seed: u64) -> ToySpec {
    let spec = ToySpec::with_counts(3, 2, 4, 32, seed);
    generate_toy_dataset(&spec, dir).unwrap();
    spec
}

fn all_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn toy_generation_is_reproducible() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    toy(a.path(), 9);
    toy(b.path(), 9);
    toy(c.path(), 10);
    let fa = all_files(a.path());
    assert_eq!(fa, all_files(b.path()));
    assert_ne!(fa, all_files(c.path()));
}

#[test]
fn toy_masks_match_manifest_regions() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy(dir.path(), 1);
    let manifest = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.len(), 3 * 2 * (4 + spec.test_count()));
    let index = scan_dataset(dir.path()).unwrap();
    let evals = index.eval_samples();
    assert_eq!(evals.len(), 3 * 2 * spec.test_count());
    for (sample, mask_path) in evals {
        let rel = index.relative(&sample.image_path);
        let entry = manifest.iter().find(|m| m.image == rel).expect("manifest entry");
        let mask = load_gt_mask(mask_path).unwrap();
        let [x0, y0, x1, y1] = entry.region;
        for y in 0..mask.height {
            for x in 0..mask.width {
                let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                assert_eq!(mask.at(x, y) > 0.5, inside, "{rel} at ({x},{y})");
            }
        }
    }
}

#[test]
fn scan_is_sorted_and_labelled() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), 2);
    let index = scan_dataset(dir.path()).unwrap();
    assert_eq!(index.interactions, ["grip", "lift", "tap"]);
    assert_eq!(index.objects, ["cup", "stick"]);
    assert_eq!(index.train_samples().count(), 3 * 2 * 4);
    assert!(index.samples.windows(2).all(|w| w[0] <= w[1]));
    assert!(index
        .samples
        .iter()
        .all(|s| (s.split == Split::Train) == (s.view == View::Exocentric)));
    assert_eq!(index, scan_dataset(dir.path()).unwrap());
}

#[test]
fn zero_images_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec::with_counts(3, 2, 0, 32, 0);
    assert!(generate_toy_dataset(&spec, dir.path()).unwrap_err().is_validation());
}

#[test]
fn scan_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert!(matches!(scan_dataset(&missing), Err(Error::MissingRoot(_))));

    fs::create_dir_all(dir.path().join("train/exocentric/hold/cup")).unwrap();
    assert!(matches!(scan_dataset(dir.path()), Err(Error::EmptyClassDir(_))));
}

#[test]
fn unseen_interaction_in_test_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), 3);
    let src = dir.path().join("test/egocentric/grip");
    let dst = dir.path().join("test/egocentric/wave");
    fs::rename(src, dst).unwrap();
    assert!(scan_dataset(dir.path()).unwrap_err().is_validation());
}

#[test]
fn batches_are_random_access_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), 4);
    let index = scan_dataset(dir.path()).unwrap();
    let aug = AugmentPolicy {
        base_size: 36,
        crop_size: 30,
        hflip: true,
    };
    for sampler in [Sampler::PairUniform, Sampler::Permutation] {
        let stream = make_batches(&index, 4, 2, aug, 77, sampler, Mode::Train).unwrap();
        let seq: Vec<_> = make_batches(&index, 4, 2, aug, 77, sampler, Mode::Train)
            .unwrap()
            .take(5)
            .map(|b| b.unwrap())
            .collect();
        for (k, b) in seq.iter().enumerate() {
            let again = stream.batch(k).unwrap();
            assert_eq!(again.sample_indices, b.sample_indices);
            assert_eq!(again.crops, b.crops);
            assert_eq!(b.len(), 8);
            assert_eq!(b.images[0].width, 30);
            // views of a sample are contiguous
            for s in 0..4 {
                assert_eq!(b.sample_indices[2 * s], b.sample_indices[2 * s + 1]);
            }
            for c in &b.crops {
                assert!(c.x0 + c.size <= 36 && c.y0 + c.size <= 36);
            }
            let distinct: std::collections::BTreeSet<_> = b.interaction_ids.iter().collect();
            assert!(distinct.len() >= 2 || sampler == Sampler::Permutation);
        }
        let other = make_batches(&index, 4, 2, aug, 78, sampler, Mode::Train).unwrap();
        assert_ne!(other.batch(0).unwrap().crops, seq[0].crops);
    }
}

#[test]
fn eval_mode_is_center_crop_single_view_in_order() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), 5);
    let index = scan_dataset(dir.path()).unwrap();
    let aug = AugmentPolicy::toy();
    let batches: Vec<_> = make_batches(&index, 5, 2, aug, 0, Sampler::PairUniform, Mode::Eval)
        .unwrap()
        .map(|b| b.unwrap())
        .collect();
    let seen: Vec<usize> = batches.iter().flat_map(|b| b.sample_indices.clone()).collect();
    assert_eq!(seen, (0..index.samples.len()).collect::<Vec<_>>());
    for b in &batches {
        assert_eq!(b.views, 1);
        assert!(b.crops.iter().all(|c| c.x0 == aug.center_offset() && !c.flipped));
    }
}

#[test]
fn batch_size_limits() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), 6);
    let index = scan_dataset(dir.path()).unwrap();
    let aug = AugmentPolicy::toy();
    assert!(make_batches(&index, 1, 2, aug, 0, Sampler::PairUniform, Mode::Train).is_err());
    assert!(make_batches(&index, 1000, 2, aug, 0, Sampler::PairUniform, Mode::Train).is_err());
    let bad = AugmentPolicy {
        base_size: 10,
        crop_size: 20,
        hflip: false,
    };
    assert!(make_batches(&index, 4, 2, bad, 0, Sampler::PairUniform, Mode::Train).is_err());
}
