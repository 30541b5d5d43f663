use std::fs;
use std::path::Path;

use jgrp2o::data::*;
use jgrp2o::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synth(count: usize, seed: u64) -> SynthDataset {
    SynthDataset {
        model: HandModel::default(),
        settings: SynthSettings::default(),
        seed,
        stream: 0,
        count,
    }
}

fn sample(seed: u64) -> Sample {
    synth(1, seed).get(0).unwrap()
}

#[test]
fn identity_augmentation_changes_nothing() {
    let s = sample(1);
    assert_eq!(augment_with(&s, &AugmentParams::IDENTITY).unwrap(), s);
    let none = AugmentConfig {
        rotation_deg: 0.0,
        scale_min: 1.0,
        scale_max: 1.0,
        translation_mm: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(&s, &none, &mut rng).unwrap(), s);
}

#[test]
fn half_turn_mirrors_normalized_uv() {
    let s = sample(2);
    let p = AugmentParams {
        rotation_deg: 180.0,
        scale: 1.0,
        translation_mm: [0.0; 3],
    };
    let a = augment_with(&s, &p).unwrap();
    for (j, k) in s.pose.joints.iter().zip(&a.pose.joints) {
        assert!((k[0] - (1.0 - j[0])).abs() < 1e-6);
        assert!((k[1] - (1.0 - j[1])).abs() < 1e-6);
        assert!((k[2] - j[2]).abs() < 1e-12);
    }
}

#[test]
fn augmentation_is_seeded() {
    let s = sample(3);
    let cfg = AugmentConfig::default();
    let run = || augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.frame.pixels, b.frame.pixels);
    assert_ne!(a, s);
}

#[test]
fn quarter_turn_moves_every_pixel_with_its_value() {
    let s = sample(4);
    let p = AugmentParams {
        rotation_deg: 90.0,
        scale: 1.0,
        translation_mm: [0.0; 3],
    };
    let a = augment_with(&s, &p).unwrap();
    let n = s.frame.size;
    let mut checked = 0;
    for row in 0..n {
        for col in 0..n {
            if !s.frame.valid[row * n + col] {
                continue;
            }
            // (du, dv) -> (-dv, du) about the crop center.
            let (oc, or) = (n - 1 - row, col);
            assert!(a.frame.valid[or * n + oc]);
            assert!((a.frame.at(oc, or) - s.frame.at(col, row)).abs() < 1e-3);
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn labels_follow_the_image() {
    let base = sample(5);
    let n = base.frame.size;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        // A 5x5 patch at joint 0 carrying that joint's depth.
        let j = base.pose.joints[0];
        let (jc, jr) = ((j[0] * n as f64) as usize, (j[1] * n as f64) as usize);
        let mut frame = base.frame.clone();
        frame.valid.fill(false);
        frame.pixels.fill(1.0);
        for r in jr.saturating_sub(2)..(jr + 3).min(n) {
            for c in jc.saturating_sub(2)..(jc + 3).min(n) {
                frame.valid[r * n + c] = true;
                frame.pixels[r * n + c] = j[2] as f32;
            }
        }
        let s = Sample { frame, ..base.clone() };
        let p = AugmentParams {
            rotation_deg: rng.random_range(-180.0..180.0),
            scale: rng.random_range(0.9..1.1),
            translation_mm: [0; 3].map(|_| rng.random_range(-10.0..10.0)),
        };
        let a = augment_with(&s, &p).unwrap();
        let k = a.pose.joints[0];
        let (c, r) = ((k[0] * n as f64).floor() as usize, (k[1] * n as f64).floor() as usize);
        assert!(a.frame.valid[r * n + c], "{p:?}");
        assert!((a.frame.at(c, r) as f64 - k[2]).abs() < 1e-3, "{p:?}");
    }
}

#[test]
fn synthetic_samples_are_reproducible() {
    let a = synth(4, 9);
    let b = synth(4, 9);
    for i in 0..4 {
        assert_eq!(a.get(i).unwrap(), b.get(i).unwrap());
    }
    assert_ne!(a.get(0).unwrap().pose, a.get(1).unwrap().pose);
    let serial: Vec<Sample> = (0..4).map(|i| a.get(i).unwrap()).collect();
    assert_eq!(MemoryDataset::materialize(&a).unwrap().samples, serial);
}

fn opts(joints: Option<usize>) -> LoadOptions {
    LoadOptions {
        joints,
        out_size: 32,
        intrinsics: CameraIntrinsics::SYNTHETIC,
        cube: 150.0,
    }
}

#[test]
fn empty_annotations_give_empty_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let native = dir.path().join("native");
    fs::create_dir_all(&native).unwrap();
    let meta = NativeMeta {
        intrinsics: CameraIntrinsics::SYNTHETIC,
        joints: 14,
        cube: 150.0,
        count: 0,
    };
    fs::write(native.join("meta.json"), serde_json::to_string(&meta).unwrap()).unwrap();
    fs::write(native.join("labels.csv"), "").unwrap();
    let d = load_dataset(&native, DatasetFormat::Native, &opts(Some(14))).unwrap();
    assert_eq!(d.len(), 0);
    let icvl = dir.path().join("labels.txt");
    fs::write(&icvl, "").unwrap();
    let d = load_dataset(dir.path(), DatasetFormat::Icvl, &opts(Some(16))).unwrap();
    assert_eq!(d.len(), 0);
}

/// A flat 600 mm wall with a 96x96 frame; three hand-written label rows.
fn write_fixture(dir: &Path, joints: usize) -> Vec<Vec<[f64; 3]>> {
    fs::create_dir_all(dir.join("depth")).unwrap();
    let raw = RawDepth::new(96, 96, vec![600.0; 96 * 96]).unwrap();
    let poses: Vec<Vec<[f64; 3]>> = (0..3)
        .map(|f| {
            (0..joints)
                .map(|j| [-20.0 + 3.0 * j as f64 + f as f64, 10.0 - 2.0 * j as f64, 590.0 + f as f64 * 2.5])
                .collect()
        })
        .collect();
    let mut csv = String::new();
    for (i, p) in poses.iter().enumerate() {
        write_depth_png(&dir.join("depth").join(format!("{i:06}.png")), &raw).unwrap();
        csv.push_str(&i.to_string());
        for v in p.iter().flatten() {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    fs::write(dir.join("labels.csv"), csv).unwrap();
    let meta = NativeMeta {
        intrinsics: CameraIntrinsics::SYNTHETIC,
        joints,
        cube: 150.0,
        count: 3,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta).unwrap()).unwrap();
    poses
}

#[test]
fn three_sample_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let poses = write_fixture(dir.path(), 14);
    let d = load_dataset(dir.path(), DatasetFormat::Native, &opts(Some(14))).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.joints(), 14);
    for (i, p) in poses.iter().enumerate() {
        let s = d.get(i).unwrap();
        assert_eq!(&s.pose_world, p);
        assert_eq!(s.frame.size, 32);
        // The crop inverts back to the labels.
        for (a, b) in s.frame.to_world(&s.pose).unwrap().iter().zip(p) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-3);
            }
        }
    }
}

#[test]
fn joint_count_mismatch_names_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 16);
    let err = match load_dataset(dir.path(), DatasetFormat::Native, &opts(Some(14))) {
        Err(e) => e,
        Ok(_) => panic!("mismatch accepted"),
    };
    assert!(matches!(err, Error::Validation(_)));
    let msg = err.to_string();
    assert!(msg.contains("16") && msg.contains("14"), "{msg}");

    let ann = dir.path().join("labels.txt");
    let coords: Vec<String> = (0..48).map(|i| format!("{}", 10 + i)).collect();
    fs::write(&ann, format!("depth/000000.png {}\n", coords.join(" "))).unwrap();
    let err = match load_dataset(&ann, DatasetFormat::Icvl, &opts(Some(14))) {
        Err(e) => e,
        Ok(_) => panic!("mismatch accepted"),
    };
    let msg = err.to_string();
    assert!(matches!(err, Error::Validation(_)) && msg.contains("16") && msg.contains("14"), "{msg}");
}

#[test]
fn native_round_trip_of_synthetic_frames() {
    let ds = synth(3, 11);
    let records: Vec<_> = (0..3).map(|i| ds.generate_raw(i).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let n = write_native(
        dir.path(),
        &ds.settings.intrinsics,
        ds.settings.cube,
        records.iter().map(|(r, j)| (r, j.as_slice())),
    )
    .unwrap();
    assert_eq!(n, 3);
    let back = NativeDataset::open(dir.path(), None, 96).unwrap();
    assert_eq!(back.meta().joints, SYNTH_JOINTS);
    for (i, (raw, joints)) in records.iter().enumerate() {
        let s = back.get(i).unwrap();
        assert_eq!(&s.pose_world, joints);
        let png = read_depth_png(&back.depth_path(i)).unwrap();
        for (a, b) in png.depth.iter().zip(&raw.depth) {
            assert!((a - b).abs() <= 0.5 || (*b <= 0.0 && *a == 0.0));
        }
    }
}

#[test]
fn joint_subsets_keep_the_listed_order() {
    let ds = synth(2, 12);
    let full = ds.get(1).unwrap();
    let sub = SelectJoints::new(Box::new(synth(2, 12)), vec![13, 10, 9, 8]).unwrap();
    assert_eq!(sub.joints(), 4);
    let s = sub.get(1).unwrap();
    assert_eq!(s.pose_world, vec![full.pose_world[13], full.pose_world[10], full.pose_world[9], full.pose_world[8]]);
    assert_eq!(s.frame, full.frame);
    assert!(SelectJoints::new(Box::new(synth(2, 12)), vec![14]).is_err());
}
