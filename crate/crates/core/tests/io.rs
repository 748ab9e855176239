use muse_core::checkpoint::{load_checkpoint, save_checkpoint};
use muse_core::dataset::{build_dataset_index, Side};
use muse_core::model::{ModelConfig, Muse};
use muse_core::wav::{encode_wav, read_wav, write_wav, WavClip, HEADER_LEN, SAMPLE_RATE};
use muse_core::Error;
use std::path::Path;

fn parse_hex(text: &str) -> Vec<u8> {
    text.split_whitespace().map(|h| u8::from_str_radix(h, 16).unwrap()).collect()
}

fn golden(name: &str) -> Vec<u8> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    parse_hex(&std::fs::read_to_string(path).unwrap())
}

fn clip(samples: Vec<f64>) -> WavClip {
    WavClip {
        samples,
        sample_rate: SAMPLE_RATE,
        source_path: String::new(),
    }
}

#[test]
fn written_file_matches_golden_bytes() {
    let ints = [0i32, 16384, -16384, -32768, 32767, 1, -1, 12345];
    let samples: Vec<f64> = ints.iter().map(|&i| i as f64 / 32768.0).collect();
    assert_eq!(encode_wav(&samples, SAMPLE_RATE).unwrap(), golden("pcm16_mono_16k_8samples.hex"));
}

#[test]
fn segment_sized_header_matches_golden_bytes() {
    let bytes = encode_wav(&vec![0.0; 30700], SAMPLE_RATE).unwrap();
    assert_eq!(&bytes[..HEADER_LEN], golden("header_30700_samples.hex").as_slice());
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ramp.wav");
    let ramp: Vec<f64> = (0..1000).map(|i| (i as f64 / 500.0) - 1.0).collect();
    write_wav(&path, &clip(ramp.clone())).unwrap();
    let back = read_wav(&path).unwrap();
    assert_eq!(back.sample_rate, SAMPLE_RATE);
    assert!(back.source_path.ends_with("ramp.wav"));
    let err = ramp.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1.0 / 32768.0);
}

#[test]
fn dataset_pairs_orphans_and_segments() {
    let root = tempfile::tempdir().unwrap();
    let (clean, noisy) = (root.path().join("clean"), root.path().join("noisy"));
    std::fs::create_dir_all(&clean).unwrap();
    std::fs::create_dir_all(&noisy).unwrap();
    let lens = [("b.wav", 61400), ("a.wav", 40000), ("c.wav", 100)];
    for (name, len) in lens {
        let x: Vec<f64> = (0..len).map(|i| ((i % 100) as f64 - 50.0) / 100.0).collect();
        write_wav(&clean.join(name), &clip(x.clone())).unwrap();
        write_wav(&noisy.join(name), &clip(x)).unwrap();
    }
    write_wav(&clean.join("orphan.wav"), &clip(vec![0.0; 10])).unwrap();
    std::fs::write(noisy.join("notes.txt"), "ignored").unwrap();

    let index = build_dataset_index(&clean, &noisy, 30700).unwrap();
    let names: Vec<String> = index
        .pairs
        .iter()
        .map(|(c, _)| c.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a.wav", "b.wav", "c.wav"]);
    assert_eq!(index.orphans.len(), 1);
    assert_eq!(index.orphans[0].side, Side::Clean);
    assert!(index.orphans[0].path.ends_with("orphan.wav"));

    let segs = index.load_segments().unwrap();
    let summary: Vec<(&str, usize, bool)> = segs.iter().map(|s| (s.name.as_str(), s.span.valid, s.span.padded)).collect();
    assert_eq!(
        summary,
        [
            ("a.wav", 30700, false),
            ("a.wav", 9300, true),
            ("b.wav", 30700, false),
            ("b.wav", 30700, false),
            ("c.wav", 100, true),
        ]
    );
    assert!(segs.iter().all(|s| s.pair.clean.len() == 30700 && s.pair.noisy.len() == 30700));
    assert!(segs[1].pair.clean[9300..].iter().all(|&v| v == 0.0));

    // Same index on a second build.
    assert_eq!(build_dataset_index(&clean, &noisy, 30700).unwrap(), index);
}

#[test]
fn dataset_errors() {
    let root = tempfile::tempdir().unwrap();
    let (clean, noisy) = (root.path().join("clean"), root.path().join("noisy"));
    std::fs::create_dir_all(&clean).unwrap();
    std::fs::create_dir_all(&noisy).unwrap();
    write_wav(&clean.join("x.wav"), &clip(vec![0.0; 10])).unwrap();
    write_wav(&noisy.join("y.wav"), &clip(vec![0.0; 10])).unwrap();
    assert!(matches!(build_dataset_index(&clean, &noisy, 100), Err(Error::Dataset(_))));

    write_wav(&noisy.join("x.wav"), &clip(vec![0.0; 11])).unwrap();
    let index = build_dataset_index(&clean, &noisy, 100).unwrap();
    assert!(matches!(index.load_segments(), Err(Error::Dataset(_))));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let (_, store) = Muse::new(ModelConfig::micro(), 4).unwrap();
    save_checkpoint(&path, &ModelConfig::micro(), &store).unwrap();
    let (model, loaded) = load_checkpoint(&path).unwrap();
    assert_eq!(model.cfg, ModelConfig::micro());
    assert_eq!(loaded.count(), store.count());
}
