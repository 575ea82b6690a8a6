//! End-to-end plumbing with tiny, barely trained networks.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapematch::pipeline::{
    animate, frame_file_name, ramp_schedule, read_manifest, SeedMode, StyleModelBundle, GLYPH_FILE, INDEX_FILE,
};
use shapematch::{mashup, stylize, toy, train_style, Error, RenderRequest, StyleLibrary, StyleRef};

fn train(styles: &Path, name: &str, seed: u64) -> shapematch::pipeline::TrainReport {
    let cfg = toy::smoke_config(styles.join("sketch.smg1"), styles, 2);
    let mut style = toy::circle_style(1.0).unwrap();
    style.name = name.into();
    let data = toy::text_dataset(2, 1).unwrap();
    train_style(&style, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn bundle_round_trip_and_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let first = train(dir.path(), "one", 1);
    assert!(!first.sketch_reused);
    assert_eq!(first.glyph_history.len(), 6);
    assert_eq!(first.texture_history.len(), 2);
    let second = train(dir.path(), "two", 2);
    assert!(second.sketch_reused);

    let manifest = read_manifest(&first.bundle_dir).unwrap();
    for key in ["name", "gly_weight", "K", "glyph_sha256", "texture_sha256", "sketch_sha256", "trained_at"] {
        assert!(manifest.contains_key(key), "{key}");
    }
    assert_eq!(manifest["gly_weight"], "1");

    let loaded = StyleModelBundle::load(&first.bundle_dir).unwrap();
    let text = toy::text_dataset(1, 5).unwrap().get(0).clone();
    let a = stylize(&loaded, &text, 0.3, 9).unwrap();
    assert_eq!(a, stylize(&first.bundle, &text, 0.3, 9).unwrap());
    assert_eq!((a.height(), a.width(), a.channels()), (64, 64, 3));
    assert!(stylize(&loaded, &text, 1.01, 9).is_err());

    let g0 = loaded.glyph.generator().forward_passes();
    let t0 = loaded.texture.generator().forward_passes();
    stylize(&loaded, &text, 0.5, 1).unwrap();
    assert_eq!(loaded.glyph.generator().forward_passes(), g0 + 1);
    assert_eq!(loaded.texture.generator().forward_passes(), t0 + 1);

    let m = mashup(&first.bundle, &second.bundle, &text, 0.5, 3).unwrap();
    let lib = StyleLibrary::new(dir.path());
    let via_lib = lib
        .render(&RenderRequest {
            text: text.clone(),
            l: 0.5,
            seed: 3,
            style: StyleRef::Mashup {
                glyph: "one".into(),
                texture: "two".into(),
            },
        })
        .unwrap();
    assert_eq!(m, via_lib);
    let names: Vec<String> = lib.catalog().unwrap().styles.into_iter().map(|e| e.name).collect();
    assert_eq!(names, ["one", "two"]);
}

#[test]
fn tampered_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let report = train(dir.path(), "t", 4);
    let path = report.bundle_dir.join(GLYPH_FILE);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    assert!(matches!(StyleModelBundle::load(&report.bundle_dir), Err(Error::State(_))));
    let lib = StyleLibrary::new(dir.path());
    assert!(matches!(lib.get("t"), Err(Error::State(_))));
}

#[test]
fn animation_writes_frames_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let report = train(dir.path(), "anim", 5);
    let text = toy::text_dataset(1, 6).unwrap().get(0).clone();
    let schedule = ramp_schedule(0.0, 1.0, 50, 11, SeedMode::Fixed).unwrap();
    let out = dir.path().join("frames");
    let files = animate(report.bundle.composition(), &text, &schedule, &out).unwrap();
    assert_eq!(files.len(), 50);
    assert!(out.join(frame_file_name(49)).exists());
    let index = fs::read_to_string(out.join(INDEX_FILE)).unwrap();
    let rows: Vec<&str> = index.lines().collect();
    assert_eq!(rows[0], "frame,l,seed,file");
    assert_eq!(rows.len(), 51);
    let ls: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(ls.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!((ls[0], ls[49]), (0.0, 1.0));
}

#[test]
fn untrained_sketch_checkpoint_is_a_state_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy::smoke_config(dir.path().join("nope.smg1"), dir.path(), 1);
    fs::write(dir.path().join("nope.smg1"), b"SMG1garbage").unwrap();
    let style = toy::circle_style(0.0).unwrap();
    let data = toy::text_dataset(2, 1).unwrap();
    let Err(err) = train_style(&style, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)) else {
        panic!("training with a garbage sketch checkpoint succeeded");
    };
    assert!(matches!(err.root(), Error::Format { .. } | Error::State(_)), "{err}");
}
