use proptest::prelude::*;
use serde_json::json;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use vitbis::data::{
    augment, generate_dataset, generate_image, AugmentConfig, AugmentParams, Dataset, Shape, ShapeKind,
    SyntheticSpec, VtbContainer, VtbData, VtbTensor,
};
use vitbis::metrics::LabelMask;
use vitbis::rng::Rng64;
use vitbis::{Error, Tensor};

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 3,
        intensity: vec![(0.0, 0.1), (0.4, 0.6), (0.8, 1.0)],
        seed,
        ..SyntheticSpec::default()
    }
}

/// Independent point-in-shape test written from the shape definitions.
fn inside(shape: &Shape, y: f64, x: f64) -> bool {
    match &shape.kind {
        ShapeKind::Ellipse { cy, cx, ry, rx, angle } => {
            // Rotate the offset by -angle into the ellipse frame.
            let (dy, dx) = (y - cy, x - cx);
            let u = angle.cos() * dx + angle.sin() * dy;
            let v = angle.cos() * dy - angle.sin() * dx;
            u * u / (rx * rx) + v * v / (ry * ry) <= 1.0 + 1e-12
                && (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
        }
        ShapeKind::Rect { y0, x0, y1, x1 } => *y0 <= y && y < *y1 && *x0 <= x && x < *x1,
    }
}

#[test]
fn generation_is_deterministic_and_order_independent() {
    let a = generate_dataset(&spec(7)).unwrap();
    let b = generate_dataset(&spec(7)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.mask, y.mask);
    }
    let single = generate_image(&spec(7), 5).unwrap();
    assert_eq!(single.image, a[5].image);
    let other = generate_dataset(&spec(8)).unwrap();
    assert_ne!(other[0].image, a[0].image);
}

#[test]
fn noiseless_images_are_piecewise_constant() {
    let mut s = spec(3);
    s.noise_sigma = 0.0;
    s.shapes_per_image = (1, 1);
    let mut saw_ellipse = false;
    for i in 0..s.num_images {
        let img = generate_image(&s, i).unwrap();
        saw_ellipse |= matches!(img.shapes[0].kind, ShapeKind::Ellipse { .. });
        for (v, &l) in img.image.data().iter().zip(&img.mask.labels) {
            assert_eq!(*v, img.class_intensity[l as usize]);
        }
        assert!(img.mask.labels.iter().any(|&l| l != 0));
    }
    assert!(saw_ellipse);
}

#[test]
fn masks_match_rerasterization() {
    for seed in 0..10 {
        let s = spec(seed);
        for img in generate_dataset(&s).unwrap() {
            let n = s.image_size;
            let mut counts = [0usize; 3];
            for r in 0..n {
                for c in 0..n {
                    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                    let class = img
                        .shapes
                        .iter()
                        .rev()
                        .find(|sh| inside(sh, y, x))
                        .map_or(0, |sh| sh.class);
                    counts[class as usize] += 1;
                }
            }
            for (class, &want) in counts.iter().enumerate() {
                assert_eq!(img.mask.count(class as u8), want);
            }
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SyntheticSpec { num_classes: 1, intensity: vec![(0.0, 1.0)], ..SyntheticSpec::default() },
        SyntheticSpec { intensity: vec![(0.0, 1.0)], ..SyntheticSpec::default() },
        SyntheticSpec { shapes_per_image: (3, 1), ..SyntheticSpec::default() },
        SyntheticSpec { noise_sigma: -1.0, ..SyntheticSpec::default() },
    ];
    for s in bad {
        assert!(matches!(generate_dataset(&s), Err(Error::InvalidSpec(_))));
    }
    assert!(matches!(SyntheticSpec::default().validate_for(5), Err(Error::InvalidSpec(_))));
}

fn sample() -> (Tensor, LabelMask) {
    let img = generate_image(&spec(11), 0).unwrap();
    (img.image, img.mask)
}

#[test]
fn double_flip_is_identity() {
    let (image, mask) = sample();
    let cfg = AugmentConfig {
        crop_size: 32,
        flip_prob: 1.0,
        intensity_shift_range: (0.0, 0.0),
        intensity_scale_range: (1.0, 1.0),
        seed: 0,
    };
    let mut rng = Rng64::new(1);
    let (i1, m1) = augment(&image, &mask, &cfg, &mut rng).unwrap();
    assert_ne!(m1, mask);
    let (i2, m2) = augment(&i1, &m1, &cfg, &mut rng).unwrap();
    assert_eq!(i2, image);
    assert_eq!(m2, mask);
}

#[test]
fn pinned_intensity_transform() {
    let image = Tensor::full(vec![1, 4, 4], 0.8).unwrap();
    let mask = LabelMask::new(4, 4, vec![0; 16]).unwrap();
    let cfg = AugmentConfig {
        crop_size: 4,
        intensity_shift_range: (0.05, 0.05),
        intensity_scale_range: (0.5, 0.5),
        ..AugmentConfig::default()
    };
    let (out, _) = augment(&image, &mask, &cfg, &mut Rng64::new(2)).unwrap();
    for v in out.data() {
        assert!((v - 0.45).abs() < 1e-15);
    }
}

#[test]
fn crop_too_large_is_rejected() {
    let (image, mask) = sample();
    let cfg = AugmentConfig {
        crop_size: 40,
        ..AugmentConfig::default()
    };
    assert!(matches!(
        augment(&image, &mask, &cfg, &mut Rng64::new(0)),
        Err(Error::CropTooLarge { crop: 40, height: 32, width: 32 })
    ));
}

#[test]
fn crop_offsets_are_uniform() {
    let cfg = AugmentConfig {
        crop_size: 5,
        ..AugmentConfig::default()
    };
    let mut rng = Rng64::new(99);
    let mut counts = [0usize; 16];
    let draws = 10_000;
    for _ in 0..draws {
        let p = AugmentParams::sample(&cfg, 8, 8, &mut rng).unwrap();
        counts[p.crop_top * 4 + p.crop_left] += 1;
    }
    let expected = draws as f64 / 16.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new(15.0).unwrap().cdf(stat);
    assert!(p_value > 0.001, "chi-square {stat}, p = {p_value}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmentation_preserves_agreement(seed in any::<u64>(), crop in 4usize..=32) {
        let (image, mask) = sample();
        let cfg = AugmentConfig { crop_size: crop, ..AugmentConfig::default() };
        let (i2, m2) = augment(&image, &mask, &cfg, &mut Rng64::new(seed)).unwrap();
        prop_assert_eq!(i2.dims(), &[1, crop, crop]);
        prop_assert_eq!((m2.height, m2.width), (crop, crop));
        let before: std::collections::BTreeSet<u8> = mask.labels.iter().copied().collect();
        prop_assert!(m2.labels.iter().all(|l| before.contains(l)));
    }
}

fn random_container(seed: u64) -> VtbContainer {
    let mut rng = Rng64::new(seed);
    let mut c = VtbContainer::new(json!({ "seed": seed, "note": "round trip" }));
    for rank in 0..=5usize {
        let dims: Vec<usize> = (0..rank).map(|_| 1 + rng.below(3) as usize).collect();
        let n: usize = dims.iter().product();
        c.push(
            format!("f64_r{rank}"),
            VtbTensor::new(dims.clone(), VtbData::F64((0..n).map(|_| rng.normal() * 1e3).collect())).unwrap(),
        );
        c.push(
            format!("f32_r{rank}"),
            VtbTensor::new(dims.clone(), VtbData::F32((0..n).map(|_| rng.normal() as f32).collect())).unwrap(),
        );
        c.push(
            format!("u8_r{rank}"),
            VtbTensor::new(dims, VtbData::U8((0..n).map(|_| rng.below(256) as u8).collect())).unwrap(),
        );
    }
    c.push("special", VtbTensor::new(vec![3], VtbData::F64(vec![f64::NAN, -0.0, f64::INFINITY])).unwrap());
    c
}

fn bits(c: &VtbContainer) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    c.tensors
        .iter()
        .map(|(n, t)| {
            let b = match &t.data {
                VtbData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
                VtbData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
                VtbData::U8(v) => v.iter().map(|&x| x as u64).collect(),
            };
            (n.clone(), t.dims.clone(), b)
        })
        .collect()
}

#[test]
fn container_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let c = random_container(seed);
        let path = dir.path().join(format!("c{seed}.vtb"));
        c.write(&path).unwrap();
        let back = VtbContainer::read(&path).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back.encode().unwrap(), c.encode().unwrap());
    }
}

#[test]
fn corrupt_containers_are_rejected() {
    let bytes = random_container(1).encode().unwrap();
    for cut in [0, 3, 4, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        let r = VtbContainer::decode(&bytes[..cut]);
        assert!(matches!(r, Err(Error::CorruptFile(_))), "cut {cut}: {r:?}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(VtbContainer::decode(&bad), Err(Error::CorruptFile(_))));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(VtbContainer::decode(&bad), Err(Error::VersionMismatch(2))));
    // Length fields: metadata length, tensor count, first name length.
    let meta_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    for pos in [5, 9 + meta_len, 13 + meta_len] {
        let mut bad = bytes.clone();
        bad[pos] = bad[pos].wrapping_add(1);
        assert!(VtbContainer::decode(&bad).is_err(), "mutated byte {pos}");
    }
    let mut bad = bytes.clone();
    let mid = bytes.len() / 2;
    bad[mid] ^= 0x10;
    assert!(matches!(VtbContainer::decode(&bad), Err(Error::CorruptFile(_))));
}

#[test]
fn hand_assembled_file_parses() {
    let mut b: Vec<u8> = Vec::new();
    b.extend_from_slice(b"VTB1");
    b.push(1);
    let meta = br#"{"a":1}"#;
    b.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    b.extend_from_slice(meta);
    b.extend_from_slice(&1u32.to_le_bytes());
    b.push(1);
    b.push(b'w');
    b.push(0);
    b.push(2);
    b.extend_from_slice(&2u32.to_le_bytes());
    b.extend_from_slice(&2u32.to_le_bytes());
    for v in [1.0f64, 2.0, 3.0, 4.5] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc_reference(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    let c = VtbContainer::decode(&b).unwrap();
    assert_eq!(c.meta, json!({ "a": 1 }));
    let t = c.get("w").unwrap().to_tensor().unwrap();
    assert_eq!(t, Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.5]).unwrap());
}

/// Bitwise CRC-32 (IEEE, reflected polynomial 0xEDB88320).
fn crc_reference(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in bytes {
        crc ^= byte as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

#[test]
fn writer_rejects_bad_names() {
    let t = VtbTensor::new(vec![1], VtbData::U8(vec![0])).unwrap();
    let mut c = VtbContainer::new(json!({}));
    c.push("dup", t.clone());
    c.push("dup", t.clone());
    assert!(c.encode().is_err());
    let mut c = VtbContainer::new(json!({}));
    c.push("x".repeat(256), t);
    assert!(c.encode().is_err());
}

#[test]
fn dataset_round_trip() {
    let items = generate_dataset(&spec(4)).unwrap();
    let ds = Dataset::from_synthetic(&items).unwrap();
    assert_eq!(ds.images.dims(), &[8, 1, 32, 32]);
    assert_eq!(ds.image(3), items[3].image);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.vtb");
    ds.save(&path, json!({ "spec": "test" })).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
}
