use std::fs;
use std::path::Path;

use proptest::prelude::*;
use tightbox::formats::{image_to_pgm, pgm_to_image, Pgm};
use tightbox::{Dataset, Error};
use tightbox_core::segmodel::Image;
use tightbox_core::synth::{generate, DatasetSpec};

fn small_dataset() -> Dataset {
    let spec = DatasetSpec { n_train: 2, n_val: 1, height: 24, width: 20, radius: (4.0, 7.0), ..DatasetSpec::default() };
    Dataset::from_samples(Some(spec.clone()), generate(&spec).unwrap()).unwrap()
}

proptest! {
    #[test]
    fn pgm_bytes_roundtrip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let bytes: Vec<u8> = (0..h * w).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
        let pgm = Pgm { width: w, height: h, maxval: 255, bytes };
        let back = Pgm::decode(Path::new("x.pgm"), &pgm.encode()).unwrap();
        prop_assert_eq!(back, pgm);
    }

    #[test]
    fn image_quantization_error_is_half_a_level(v in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
        let img = Image::new(1, v.len(), v.clone()).unwrap();
        let back = pgm_to_image(Path::new("x.pgm"), &image_to_pgm(&img)).unwrap();
        for (a, b) in v.iter().zip(&back.pixels) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn dataset_survives_disk() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(back.samples.len(), 3);
    assert_eq!(back.samples[0].boxes, ds.samples[0].boxes);
    assert_eq!(back.samples[0].masks, ds.samples[0].masks);
}

#[test]
fn truncated_image_names_the_file() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let path = dir.path().join(&ds.samples[1].id).join("image.pgm");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    let msg = Dataset::read(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("truncated") && msg.contains(&ds.samples[1].id), "{msg}");
}

#[test]
fn inverted_box_on_disk_is_rejected() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let path = dir.path().join(&ds.samples[0].id).join("boxes.json");
    fs::write(&path, r#"[{"x0":9,"y0":1,"x1":3,"y1":5,"category":1}]"#).unwrap();
    let err = Dataset::read(dir.path()).unwrap_err();
    assert!(err.to_string().contains("inverted"), "{err}");
}

#[test]
fn malformed_manifest_reports_offset() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    fs::write(dir.path().join("manifest.json"), "{\"format\": \"tightbox-dataset\",, }").unwrap();
    match Dataset::read(dir.path()).unwrap_err() {
        Error::Parse { offset, .. } => assert_eq!(offset, 30),
        e => panic!("unexpected {e}"),
    }
}
