use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use limview::io;
use limview::phantom::{generate_dataset, sample_path, Dataset, DatasetManifest, Sampling, Split, SAMPLE_KINDS};
use limview::projector::forward_project;
use limview::sampling::{apply_mask, fbp_acquired};

fn small(sampling: Sampling) -> DatasetManifest {
    DatasetManifest {
        n_train: 8,
        n_val: 2,
        n_test: 2,
        grid_size: 32,
        n_views: 30,
        sampling,
        seed: 11,
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for split in Split::ALL {
        for entry in fs::read_dir(dir.join(split.dir_name())).unwrap() {
            let path = entry.unwrap().path();
            let key = path.strip_prefix(dir).unwrap().display().to_string();
            files.insert(key, fs::read(&path).unwrap());
        }
    }
    files.insert("manifest.txt".into(), fs::read(dir.join("manifest.txt")).unwrap());
    files
}

#[test]
fn layout_counts_and_determinism() {
    let root = tempfile::tempdir().unwrap();
    let m = small(Sampling::SparseView { keep: 5 });
    let a = root.path().join("a");
    let b = root.path().join("b");
    generate_dataset(&m, &a).unwrap();
    generate_dataset(&m, &b).unwrap();
    let files = tree(&a);
    assert_eq!(files.len(), 12 * 4 + 1);
    for split in Split::ALL {
        for i in 0..m.count(split) {
            for kind in SAMPLE_KINDS {
                assert!(sample_path(&a, split, i, kind).exists());
            }
        }
    }
    assert_eq!(files, tree(&b));
    let gt = fs::read(sample_path(&a, Split::Train, 0, "gt")).unwrap();
    assert_eq!(gt.len(), 16 + 32 * 32 * 4);
}

#[test]
fn stored_tuples_satisfy_pipeline_identity() {
    for sampling in [Sampling::SparseView { keep: 5 }, Sampling::LimitedAngle { max_deg: 120.0 }] {
        let root = tempfile::tempdir().unwrap();
        let m = small(sampling);
        generate_dataset(&m, root.path()).unwrap();
        let geometry = m.geometry().unwrap();
        let mask = m.mask().unwrap();
        for split in Split::ALL {
            for i in 0..m.count(split) {
                let load = |kind| sample_path(root.path(), split, i, kind);
                let gt = io::load_image(&load("gt")).unwrap();
                assert!(gt.data.iter().all(|v| (0.0..=1.0).contains(v)));
                let sino = forward_project(&gt, &geometry).unwrap();
                let sinou = apply_mask(&sino, &mask).unwrap();
                let fbpu = fbp_acquired(&sinou, &mask, &gt.grid).unwrap();
                let stored = io::load_image(&load("fbpu")).unwrap();
                let worst = fbpu.data.iter().zip(&stored.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(worst <= 1e-6, "{sampling} {split:?} {i}: {worst:e}");
                let stored_sino = io::load_sinogram_with(&load("sino"), &geometry).unwrap();
                let stored_sinou = io::load_sinogram_with(&load("sinou"), &geometry).unwrap();
                assert_eq!(apply_mask(&stored_sino, &mask).unwrap().data, stored_sinou.data);
            }
        }
    }
}

#[test]
fn loaded_dataset_equals_in_memory_synthesis() {
    let root = tempfile::tempdir().unwrap();
    let m = small(Sampling::SparseView { keep: 10 });
    generate_dataset(&m, root.path()).unwrap();
    let loaded = Dataset::load(root.path()).unwrap();
    let synth = Dataset::synthesize(&m).unwrap();
    assert_eq!(loaded.manifest, m);
    for split in Split::ALL {
        let (a, b) = (loaded.split(split), synth.split(split));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.gt, y.gt);
            assert_eq!(x.sinou, y.sinou);
            assert_eq!(x.fbpu, y.fbpu);
        }
    }
}

#[test]
fn invalid_manifest_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let bad = small(Sampling::SparseView { keep: 7 });
    assert!(generate_dataset(&bad, root.path()).is_err());
    let tiny = DatasetManifest { grid_size: 8, ..small(Sampling::SparseView { keep: 5 }) };
    assert!(generate_dataset(&tiny, root.path()).is_err());
}
