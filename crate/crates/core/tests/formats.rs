use std::fs;

use shine_lab::abb::{LayerRanking, LayerSelect};
use shine_lab::io::{read_image, read_latent, read_mask, write_image, write_latent, write_mask};
use shine_lab::pipeline::{save_ranking, synth_inputs, CompositionConfig, PixelGrid};
use shine_lab::{Error, LatentGrid};

#[test]
fn color_and_gray_images_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = synth_inputs(1, 16, 8).unwrap();
    let p = dir.path().join("bg.ppm");
    write_image(&p, &inputs.background).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(bytes.len(), 13 + 16 * 16 * 3);
    assert_eq!(read_image(&p).unwrap(), inputs.background);

    let gray = PixelGrid::from_bytes(1, 2, 3, &[0, 10, 20, 30, 40, 255]).unwrap();
    let g = dir.path().join("g.pgm");
    write_image(&g, &gray).unwrap();
    assert_eq!(fs::read(&g).unwrap(), b"P5\n3 2\n255\n\x00\x0a\x14\x1e\x28\xff");
    assert_eq!(read_image(&g).unwrap(), gray);
}

#[test]
fn masks_roundtrip_as_graymaps() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = synth_inputs(2, 16, 8).unwrap();
    let p = dir.path().join("m.pgm");
    write_mask(&p, &inputs.mask).unwrap();
    assert_eq!(read_mask(&p).unwrap(), inputs.mask);
    let color = dir.path().join("c.ppm");
    write_image(&color, &inputs.subject).unwrap();
    assert!(matches!(read_mask(&color), Err(Error::Format { .. })));
}

#[test]
fn malformed_images_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[u8]); 4] = [
        ("maxval.pgm", b"P5\n1 1\n65535\n\0\0"),
        ("magic.pbm", b"P4\n1 1\n\0"),
        ("short.ppm", b"P6\n2 2\n255\n\0\0\0"),
        ("header.pgm", b"P5\n2"),
    ];
    for (name, bytes) in cases {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        match read_image(&p) {
            Err(Error::Format { path, .. }) => assert_eq!(path, p),
            other => panic!("{name}: {other:?}"),
        }
    }
    match read_image(dir.path().join("absent.ppm")) {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("absent.ppm")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn latent_dump_is_little_endian_f32() {
    let dir = tempfile::tempdir().unwrap();
    let z = LatentGrid::from_vec(2, 1, 3, vec![0.5, -1.0, 2.0, 3.25, 0.0, -0.125]).unwrap();
    let p = dir.path().join("z.lat");
    write_latent(&p, &z).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert!(bytes.starts_with(b"LAT 2 1 3\n"));
    assert_eq!(bytes.len(), 10 + 6 * 4);
    assert_eq!(bytes[10..14], 0.5f32.to_le_bytes());
    // channel 1 starts after the three values of channel 0
    assert_eq!(bytes[22..26], 3.25f32.to_le_bytes());
    assert_eq!(read_latent(&p).unwrap(), z);
}

#[test]
fn config_file_with_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let ranking = LayerRanking::from_scores(vec![0.1, 0.7, 0.3, 0.2]).unwrap();
    save_ranking(&dir.path().join("ranking.json"), &ranking).unwrap();
    let cfg_path = dir.path().join("run.cfg");
    fs::write(&cfg_path, "# chosen by iou\nabb_layer = iou-best\nabb_ranking = ranking.json\nseed = 4\n").unwrap();
    let cfg = CompositionConfig::load(&cfg_path).unwrap();
    assert_eq!(cfg.abb_layer, LayerSelect::IouBest(ranking));
    assert_eq!(cfg.abb_layer.resolve(4).unwrap(), 1);
    assert_eq!(cfg.seed, 4);

    let text = cfg.to_config_string();
    assert_eq!(CompositionConfig::parse(&text, None).unwrap(), cfg);

    fs::write(&cfg_path, "seed = 1\nmystery = 3\n").unwrap();
    assert!(matches!(CompositionConfig::load(&cfg_path), Err(Error::Config { line: 2, .. })));
}
