mod common;

use common::rng;
use dreamif_core::checkpoint::{from_bytes, load, save, to_bytes, MAGIC, VERSION};
use dreamif_core::model::{Model, ModelConfig};
use dreamif_core::Error;
use rand::Rng;

fn small() -> Model {
    let mut cfg = ModelConfig::toy();
    cfg.backbone.base_dim = 8;
    cfg.backbone.fuse_blocks = 1;
    let mut m = Model::new(cfg).unwrap();
    let mut r = rng(3);
    for (_, t) in m.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.5f32..0.5));
    }
    m.step = 17;
    m
}

fn split(bytes: &[u8]) -> (serde_json::Value, usize) {
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    (serde_json::from_slice(&bytes[9..9 + len]).unwrap(), 9 + len)
}

fn rebuild(manifest: &serde_json::Value, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).unwrap();
    let mut out = MAGIC.to_vec();
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

#[test]
fn file_roundtrip_is_bit_exact() {
    let m = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&m, &path).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.step, 17);
    assert_eq!(back.params.len(), m.params.len());
    for ((ka, a), (kb, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(ka, kb);
        assert_eq!(a.dims(), b.dims());
        let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.data()), bits(b.data()), "{ka}");
    }
    assert_eq!(to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["m.ckpt"]);
}

#[test]
fn header_errors() {
    let bytes = to_bytes(&small()).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = VERSION + 1;
    assert!(matches!(
        from_bytes(&bad),
        Err(Error::Version { found, expected }) if found == VERSION + 1 && expected == VERSION
    ));
    for cut in [0, 3, 5, 8, 20, bytes.len() - 1] {
        assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Corruption(_))), "cut {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(from_bytes(&long), Err(Error::Corruption(_))));
}

#[test]
fn manifest_errors() {
    let bytes = to_bytes(&small()).unwrap();
    let (manifest, start) = split(&bytes);
    let payload = &bytes[start..];

    // An unedited manifest reassembles into a loadable file.
    assert_eq!(from_bytes(&rebuild(&manifest, payload)).unwrap().step, 17);

    let mut missing = manifest.clone();
    missing["params"].as_array_mut().unwrap().remove(0);
    match from_bytes(&rebuild(&missing, payload)) {
        Err(Error::Corruption(m)) => assert!(m.contains("missing"), "{m}"),
        other => panic!("{other:?}"),
    }

    let mut extra = manifest.clone();
    extra["params"].as_array_mut().unwrap().push(serde_json::json!({"name": "bogus", "dims": [1]}));
    match from_bytes(&rebuild(&extra, payload)) {
        Err(Error::Corruption(m)) => assert!(m.contains("bogus"), "{m}"),
        other => panic!("{other:?}"),
    }

    let mut shape = manifest.clone();
    let dims = shape["params"][0]["dims"].as_array_mut().unwrap();
    dims.push(serde_json::json!(1));
    let first = dims[0].as_u64().unwrap();
    dims[0] = serde_json::json!(first + 1);
    assert!(matches!(from_bytes(&rebuild(&shape, payload)), Err(Error::Corruption(_))));

    let mut cfg = manifest.clone();
    cfg["config"]["backbone"]["base_dim"] = serde_json::json!(0);
    assert!(matches!(from_bytes(&rebuild(&cfg, payload)), Err(Error::Corruption(_))));

    let garbage = rebuild(&serde_json::json!({"hello": 1}), payload);
    assert!(matches!(from_bytes(&garbage), Err(Error::Corruption(_))));
}

#[test]
fn non_finite_payload_is_rejected() {
    let bytes = to_bytes(&small()).unwrap();
    let (_, start) = split(&bytes);
    let mut bad = bytes.clone();
    bad[start..start + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(from_bytes(&bad), Err(Error::Corruption(_))));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load(&dir.path().join("none.ckpt")), Err(Error::Io { .. })));
}
