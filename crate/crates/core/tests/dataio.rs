mod common;

use std::fs;
use std::path::Path;

use common::{rand_image, rng};
use dreamif_core::dataio::{
    decode_png, encode_png, load_pair_dataset, load_png, matched_files, random_crop_pair, save_png, synth_pairs,
    synth_toy_dataset, ImagePair,
};
use dreamif_core::imaging::Image;
use dreamif_core::Error;
use proptest::prelude::*;

#[test]
fn png_roundtrip_within_half_step() {
    let img = rand_image(&mut rng(1), 3, 13, 17, 0.0, 1.0);
    let back = decode_png(&encode_png(&img).unwrap()).unwrap();
    assert_eq!(back.dims(), img.dims());
    let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1.0 / 510.0 + 1e-12, "{err}");
    // Decoded values are exact multiples of 1/255 and re-encode identically.
    assert_eq!(encode_png(&back).unwrap(), encode_png(&img).unwrap());
    assert_eq!(decode_png(&encode_png(&back).unwrap()).unwrap(), back);
}

#[test]
fn png_quantization_rounds_to_nearest() {
    let img = Image::new(1, 1, 3, vec![0.5, 0.0, 1.0]).unwrap();
    let back = decode_png(&encode_png(&img).unwrap()).unwrap();
    assert_eq!(back.channels(), 3);
    assert_eq!(back.plane(0), &[128.0 / 255.0, 0.0, 1.0]);
}

fn raw_png(w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w, h);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().unwrap();
    writer.write_image_data(data).unwrap();
    writer.finish().unwrap();
    out
}

#[test]
fn grayscale_sixteen_bit_and_alpha_inputs() {
    let gray = raw_png(2, 1, png::ColorType::Grayscale, png::BitDepth::Eight, &[0, 255]);
    let img = decode_png(&gray).unwrap();
    assert_eq!(img.dims(), (3, 1, 2));
    for c in 0..3 {
        assert_eq!(img.plane(c), &[0.0, 1.0]);
    }

    let deep = raw_png(1, 1, png::ColorType::Grayscale, png::BitDepth::Sixteen, &[0x80, 0x00]);
    assert_eq!(decode_png(&deep).unwrap().get(0, 0, 0), 32768.0 / 65535.0);

    let rgba = raw_png(1, 1, png::ColorType::Rgba, png::BitDepth::Eight, &[255, 0, 51, 7]);
    let img = decode_png(&rgba).unwrap();
    assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
}

#[test]
fn io_and_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    assert!(matches!(load_png(&missing), Err(Error::Io { .. })));
    let junk = dir.path().join("junk.png");
    fs::write(&junk, b"not a png").unwrap();
    match load_png(&junk) {
        Err(Error::Format(m)) => assert!(m.contains("junk.png"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(decode_png(&[]), Err(Error::Format(_))));
}

#[test]
fn save_is_atomic_and_leaves_no_temp_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    let img = rand_image(&mut rng(2), 3, 8, 8, 0.0, 1.0);
    save_png(&img, &path).unwrap();
    save_png(&img, &path).unwrap();
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["a.png"]);
    assert_eq!(fs::read(&path).unwrap(), encode_png(&img).unwrap());
}

fn write_dataset(root: &Path, vis: &[&str], ir: &[&str]) {
    let img = Image::filled(3, 8, 8, 0.25).unwrap();
    for (sub, names) in [("vis", vis), ("ir", ir)] {
        fs::create_dir_all(root.join(sub)).unwrap();
        for n in names {
            save_png(&img, &root.join(sub).join(n)).unwrap();
        }
    }
}

#[test]
fn dataset_matching() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_dataset(root, &["b.png", "a.png", "only_vis.png"], &["a.png", "b.png", "only_ir.png"]);
    fs::write(root.join("vis").join("notes.txt"), "x").unwrap();

    let ds = load_pair_dataset(root, false).unwrap();
    assert_eq!(ds.file_names(), ["a.png", "b.png"]);
    assert_eq!(ds.ids(), ["a", "b"]);
    assert_eq!(ds.len(), 2);
    let pair = ds.load(1).unwrap();
    assert_eq!(pair.id, "b");
    assert_eq!(pair.vis.dims(), (3, 8, 8));
    assert!(matches!(ds.load(2), Err(Error::InvalidArgument(_))));
    assert_eq!(ds.load_all().unwrap().len(), 2);

    match load_pair_dataset(root, true) {
        Err(Error::Format(m)) => assert!(m.contains("only_"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn dataset_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_pair_dataset(dir.path(), false), Err(Error::Format(_))));
    write_dataset(dir.path(), &["x.png"], &["y.png"]);
    assert!(matches!(load_pair_dataset(dir.path(), false), Err(Error::EmptyDataset(_))));
    assert!(matches!(
        matched_files(dir.path(), &["vis", "fused"], false),
        Err(Error::Format(_))
    ));
}

#[test]
fn pairs_must_agree_in_size_and_are_promoted() {
    let a = Image::filled(1, 8, 8, 0.1).unwrap();
    let b = Image::filled(3, 8, 9, 0.1).unwrap();
    assert!(matches!(ImagePair::new(a.clone(), b, "x"), Err(Error::InvalidArgument(_))));
    let p = ImagePair::new(a.clone(), a, "x").unwrap();
    assert_eq!(p.ir.channels(), 3);
}

#[test]
fn random_crop_contract() {
    let pair = synth_pairs(1, 64, 3).unwrap().remove(0).pair;
    assert_eq!(random_crop_pair(&pair, 64, &mut rng(0)).unwrap(), pair);
    let a = random_crop_pair(&pair, 16, &mut rng(5)).unwrap();
    assert_eq!(a, random_crop_pair(&pair, 16, &mut rng(5)).unwrap());
    assert_eq!(a.vis.dims(), (3, 16, 16));
    // Both modalities come from the same window.
    let found = (0..=48).flat_map(|y| (0..=48).map(move |x| (y, x))).find(|&(y, x)| {
        pair.vis.crop(y, x, 16, 16).unwrap() == a.vis && pair.ir.crop(y, x, 16, 16).unwrap() == a.ir
    });
    assert!(found.is_some());
    for bad in [0, 12, 72] {
        assert!(matches!(random_crop_pair(&pair, bad, &mut rng(0)), Err(Error::InvalidArgument(_))));
    }
}

#[test]
fn synthetic_pairs_are_deterministic_and_structured() {
    let a = synth_pairs(3, 64, 11).unwrap();
    assert_eq!(a, synth_pairs(3, 64, 11).unwrap());
    assert_ne!(a[0], synth_pairs(3, 64, 12).unwrap()[0]);
    assert_eq!(a.iter().map(|s| s.pair.id.as_str()).collect::<Vec<_>>(), ["0000", "0001", "0002"]);
    for s in &a {
        let vl = s.pair.vis.luma();
        let il = s.pair.ir.luma();
        let mean = |v: &[f64], inside: bool| {
            let sel: Vec<f64> = v.iter().zip(&s.mask).filter(|(_, &m)| m == inside).map(|(x, _)| *x).collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        };
        // The visible image is dark inside the mask and the infrared image is bright there.
        assert!(mean(&vl, false) - mean(&vl, true) >= 0.2);
        assert!(mean(&il, true) > mean(&il, false));
        assert!(s.pair.ir.plane(0) == s.pair.ir.plane(1));
    }
    assert!(matches!(synth_pairs(0, 64, 0), Err(Error::InvalidArgument(_))));
    assert!(matches!(synth_pairs(1, 60, 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn synthetic_dataset_on_disk_is_byte_identical() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ds = synth_toy_dataset(4, 32, 7, d1.path()).unwrap();
    synth_toy_dataset(4, 32, 7, d2.path()).unwrap();
    assert_eq!(ds.len(), 4);
    for name in ds.file_names() {
        for sub in ["vis", "ir"] {
            let a = fs::read(d1.path().join(sub).join(name)).unwrap();
            let b = fs::read(d2.path().join(sub).join(name)).unwrap();
            assert_eq!(a, b);
        }
    }
    let mem = synth_pairs(4, 32, 7).unwrap();
    let disk = ds.load(0).unwrap();
    let err = mem[0].pair.vis.data().iter().zip(disk.vis.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1.0 / 510.0 + 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn png_roundtrip_any_size(seed in any::<u64>(), h in 1usize..20, w in 1usize..20, gray in any::<bool>()) {
        let c = if gray { 1 } else { 3 };
        let img = rand_image(&mut rng(seed), c, h, w, 0.0, 1.0);
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        let rgb = img.to_rgb();
        let err = rgb.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1.0 / 510.0 + 1e-12);
    }
}
