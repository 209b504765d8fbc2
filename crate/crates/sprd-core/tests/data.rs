//! Dataset plumbing: RLE definition cases, PPM round-trips, scene generator
//! determinism and geometry, and on-disk idempotence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprd_core::data::dataset::{read_annotations, write_annotations, ANNOTATIONS_FILE};
use sprd_core::data::ppm::{read_ppm, write_ppm};
use sprd_core::data::rle;
use sprd_core::data::synth::Shape;
use sprd_core::geom::Mask;
use sprd_core::{read_dataset, synth_scene, write_dataset, Image, SceneSpec};
use std::fs;
use std::path::PathBuf;

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sprd-data-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn rle_definition_cases() {
    let empty = Mask::zeros(4, 5);
    assert_eq!(rle::encode(&empty), vec![20]);

    let mut full = Mask::zeros(4, 5);
    full.data.fill(1);
    assert_eq!(rle::encode(&full), vec![0, 20]);

    // Leading ones, trailing zeros, one interior island.
    let mut m = Mask::zeros(1, 10);
    for x in [0usize, 1, 5, 6, 7] {
        m.set(0, x, 1);
    }
    assert_eq!(rle::encode(&m), vec![0, 2, 3, 3, 2]);
    assert_eq!(rle::decode(&[0, 2, 3, 3, 2], 1, 10).unwrap().data, m.data);
}

#[test]
fn rle_round_trips_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let h = rng.random_range(1..20usize);
        let w = rng.random_range(1..20usize);
        let mut m = Mask::zeros(h, w);
        // Mix densities so some masks are near-empty and some near-full.
        let p = rng.random_range(0.05..0.95);
        for v in m.data.iter_mut() {
            *v = rng.random_bool(p) as u8;
        }
        let runs = rle::encode(&m);
        assert!(runs.iter().skip(1).all(|&r| r > 0));
        assert_eq!(runs.iter().map(|&r| r as usize).sum::<usize>(), h * w);
        let back = rle::decode(&runs, h, w).unwrap();
        assert_eq!(back.data, m.data);
    }
}

#[test]
fn rle_decode_rejects_malformed_runs() {
    assert!(rle::decode(&[], 2, 2).is_err());
    assert!(rle::decode(&[1, 0, 3], 2, 2).is_err(), "interior zero run");
    assert!(rle::decode(&[3], 2, 2).is_err(), "wrong total");
    assert!(rle::decode(&[4, 1], 2, 2).is_err(), "overrun");
    assert!(rle::decode(&[0, 4], 2, 2).is_ok());
}

#[test]
fn ppm_round_trip_and_header_parsing() {
    let dir = tmp_dir("ppm");
    let mut img = Image::new(7, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    rng.fill(&mut img.data[..]);
    let path = dir.join("a.ppm");
    write_ppm(&path, &img).unwrap();
    assert_eq!(read_ppm(&path).unwrap(), img);

    // Comments and extra whitespace in the header are legal PPM.
    let mut bytes = b"P6 # comment\n# another\n 3\t2\n255\n".to_vec();
    bytes.extend_from_slice(&[7u8; 18]);
    let commented = dir.join("b.ppm");
    fs::write(&commented, &bytes).unwrap();
    let img2 = read_ppm(&commented).unwrap();
    assert_eq!((img2.w, img2.h), (3, 2));
    assert_eq!(img2.data, vec![7u8; 18]);

    fs::write(dir.join("bad.ppm"), b"P5\n3 2\n255\n").unwrap();
    assert!(read_ppm(&dir.join("bad.ppm")).is_err());
    fs::write(dir.join("short.ppm"), b"P6\n3 2\n255\n\x01\x02").unwrap();
    assert!(read_ppm(&dir.join("short.ppm")).is_err());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn image_to_input_scales_to_unit_range() {
    let mut img = Image::new(2, 1);
    img.set_pixel(0, 0, [0, 127, 255]);
    img.set_pixel(0, 1, [255, 0, 51]);
    let t = img.to_input::<f64>();
    assert_eq!(t.shape(), [1, 3, 1, 2]);
    assert_eq!(t.at(0, 0, 0, 0), -1.0);
    assert_eq!(t.at(0, 2, 0, 0), 1.0);
    assert!((t.at(0, 1, 0, 0) - (127.0 / 127.5 - 1.0)).abs() < 1e-12);
    assert_eq!(t.at(0, 0, 0, 1), 1.0);
}

#[test]
fn scenes_are_deterministic_per_seed_and_index() {
    let spec = SceneSpec::default();
    let a = synth_scene(&spec, 3).unwrap();
    let b = synth_scene(&spec, 3).unwrap();
    assert_eq!(a.image.data, b.image.data);
    assert_eq!(a.instances.len(), b.instances.len());
    for (x, y) in a.instances.iter().zip(&b.instances) {
        assert_eq!(x.mask.data, y.mask.data);
        assert_eq!(x.bbox, y.bbox);
    }
    let c = synth_scene(&spec, 4).unwrap();
    assert_ne!(a.image.data, c.image.data);
    let other = SceneSpec { seed: 8, ..SceneSpec::default() };
    let d = synth_scene(&other, 3).unwrap();
    assert_ne!(a.image.data, d.image.data);
}

#[test]
fn scene_structure_masks_disjoint_boxes_tight() {
    let spec = SceneSpec::default();
    let mut saw_multi = false;
    for index in 0..40u64 {
        let scene = synth_scene(&spec, index).unwrap();
        assert!(!scene.instances.is_empty() && scene.instances.len() <= 3);
        assert!(scene.instances.len() <= scene.planned);
        saw_multi |= scene.instances.len() > 1;

        let size = spec.image_size;
        let mut claimed = vec![false; size * size];
        for inst in &scene.instances {
            assert!(inst.class < 3);
            // Visibility masks never overlap: each pixel has one owner.
            for (i, &v) in inst.mask.data.iter().enumerate() {
                if v != 0 {
                    assert!(!claimed[i], "pixel {i} claimed twice");
                    claimed[i] = true;
                }
            }
            // Box is exactly the tight bound of the mask.
            let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
            for y in 0..size {
                for x in 0..size {
                    if inst.mask.at(y, x) != 0 {
                        x1 = x1.min(x);
                        y1 = y1.min(y);
                        x2 = x2.max(x);
                        y2 = y2.max(y);
                    }
                }
            }
            assert_eq!(inst.bbox.x1, x1 as f64);
            assert_eq!(inst.bbox.y1, y1 as f64);
            assert_eq!(inst.bbox.x2, (x2 + 1) as f64);
            assert_eq!(inst.bbox.y2, (y2 + 1) as f64);
        }
    }
    assert!(saw_multi, "40 scenes should include some multi-instance ones");
}

#[test]
fn unoccluded_disc_area_tracks_pi_r_squared() {
    let spec = SceneSpec { max_instances: 1, ..SceneSpec::default() };
    let mut checked = 0;
    for index in 0..60u64 {
        let scene = synth_scene(&spec, index).unwrap();
        let inst = &scene.instances[0];
        if let Shape::Disc { r, .. } = inst.shape {
            let area = inst.mask.count() as f64;
            let ideal = std::f64::consts::PI * r * r;
            assert!(
                (area - ideal).abs() <= 0.05 * ideal,
                "disc r={r:.2}: rasterized {area} vs ideal {ideal:.1}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 10, "only {checked} discs in 60 single-instance scenes");
}

#[test]
fn dataset_round_trip_is_lossless_and_idempotent() {
    let spec = SceneSpec::default();
    let scenes: Vec<_> = (0..6u64).map(|i| synth_scene(&spec, i).unwrap()).collect();

    let d1 = tmp_dir("ds1");
    let d2 = tmp_dir("ds2");
    write_dataset(&d1, &scenes).unwrap();
    write_dataset(&d2, &scenes).unwrap();
    let ann1 = fs::read(d1.join(ANNOTATIONS_FILE)).unwrap();
    let ann2 = fs::read(d2.join(ANNOTATIONS_FILE)).unwrap();
    assert_eq!(ann1, ann2, "same scenes must serialize byte-identically");
    assert_eq!(
        fs::read(d1.join("img_000000.ppm")).unwrap(),
        fs::read(d2.join("img_000000.ppm")).unwrap()
    );

    // write -> read -> write reproduces the annotation bytes.
    let anns = read_annotations(&d1.join(ANNOTATIONS_FILE)).unwrap();
    write_annotations(&d2.join(ANNOTATIONS_FILE), &anns).unwrap();
    assert_eq!(fs::read(d2.join(ANNOTATIONS_FILE)).unwrap(), ann1);

    let samples = read_dataset(&d1).unwrap();
    assert_eq!(samples.len(), scenes.len());
    for (sample, scene) in samples.iter().zip(&scenes) {
        assert_eq!(sample.image, scene.image);
        assert_eq!(sample.boxes.len(), scene.instances.len());
        for (i, inst) in scene.instances.iter().enumerate() {
            assert_eq!(sample.boxes[i], inst.bbox);
            assert_eq!(sample.classes[i], inst.class);
            assert_eq!(sample.masks[i].data, inst.mask.data);
        }
    }
    fs::remove_dir_all(&d1).unwrap();
    fs::remove_dir_all(&d2).unwrap();
}

#[test]
fn read_dataset_rejects_corrupt_annotations() {
    let spec = SceneSpec::default();
    let scenes: Vec<_> = (0..2u64).map(|i| synth_scene(&spec, i).unwrap()).collect();
    let dir = tmp_dir("corrupt");
    write_dataset(&dir, &scenes).unwrap();

    let path = dir.join(ANNOTATIONS_FILE);
    let mut anns = read_annotations(&path).unwrap();
    anns.instances[0].mask_rle.push(99);
    write_annotations(&path, &anns).unwrap();
    let err = read_dataset(&dir).unwrap_err().to_string();
    assert!(err.contains("instance 0"), "diagnostic should locate the record: {err}");

    fs::write(&path, "{not json").unwrap();
    assert!(read_dataset(&dir).is_err());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn scene_spec_validation() {
    assert!(SceneSpec { image_size: 16, ..SceneSpec::default() }.validate().is_err());
    assert!(SceneSpec { min_instances: 0, ..SceneSpec::default() }.validate().is_err());
    assert!(SceneSpec { size_range: (16.0, 200.0), ..SceneSpec::default() }.validate().is_err());
    assert!(SceneSpec { max_overlap: 1.0, ..SceneSpec::default() }.validate().is_err());
    assert!(SceneSpec::default().validate().is_ok());
}
