use std::path::Path;

use super::*;

fn gray(w: usize, h: usize, data: &[u8]) -> ImageBuffer {
    ImageBuffer::new(w, h, 1, data.to_vec()).unwrap()
}

#[test]
fn byte_mapping_end_points_and_round_trip() {
    assert_eq!(dequantize(0), -1.0);
    assert_eq!(dequantize(255), 1.0);
    for b in 0..=255u8 {
        assert_eq!(quantize(dequantize(b)), b);
        assert_eq!(quantize(dequantize(b) as f32 as f64), b);
    }
    assert_eq!(quantize(-3.0), 0);
    assert_eq!(quantize(7.0), 255);
    assert_eq!(quantize(f64::NAN), 0);
    // 0.0 sits at 127.5 and rounds away from zero
    assert_eq!(quantize(0.0), 128);
}

#[test]
fn buffer_validation() {
    assert!(ImageBuffer::new(2, 2, 2, vec![0; 8]).is_err());
    assert!(ImageBuffer::new(2, 2, 3, vec![0; 11]).is_err());
    let img = ImageBuffer::filled(2, 1, &[1, 2, 3]).unwrap();
    assert_eq!(img.data(), &[1, 2, 3, 1, 2, 3]);
}

#[test]
fn tensor_conversion_is_planar_and_reversible() {
    let img = ImageBuffer::new(2, 1, 3, vec![0, 255, 10, 20, 30, 40]).unwrap();
    let t: Tensor<f32> = img.to_tensor();
    assert_eq!(t.shape(), &[1, 3, 1, 2]);
    assert_eq!(t.data()[0], -1.0);
    assert_eq!(t.data()[2], 1.0);
    assert_eq!(ImageBuffer::from_tensor(&t).unwrap(), img);
    let unit: Tensor<f64> = img.to_unit_tensor();
    assert_eq!(unit.data()[2], 1.0);
    assert!(ImageBuffer::from_tensor(&Tensor::<f32>::zeros([2, 3, 4, 4])).is_err());
}

#[test]
fn png_round_trips_every_channel_count() {
    for c in [1, 3, 4] {
        let data: Vec<u8> = (0..5 * 3 * c).map(|i| (i * 37 % 256) as u8).collect();
        let img = ImageBuffer::new(5, 3, c, data).unwrap();
        let bytes = encode(&img, ImageFormat::Png).unwrap();
        assert_eq!(decode(&bytes).unwrap(), img);
    }
}

#[test]
fn pnm_round_trip_and_header_comments() {
    for c in [1, 3] {
        let img = ImageBuffer::new(3, 2, c, (0..6 * c as u8).collect()).unwrap();
        assert_eq!(decode(&encode(&img, ImageFormat::Pnm).unwrap()).unwrap(), img);
    }
    let mut commented = b"P5\n# made by hand\n2 1\n255\n".to_vec();
    commented.extend_from_slice(&[7, 9]);
    assert_eq!(decode(&commented).unwrap(), gray(2, 1, &[7, 9]));
    assert!(encode(&ImageBuffer::filled(1, 1, &[0, 0, 0, 0]).unwrap(), ImageFormat::Pnm).is_err());
}

#[test]
fn truncated_and_unknown_inputs_are_rejected() {
    let img = ImageBuffer::filled(4, 4, &[9, 8, 7]).unwrap();
    let png = encode(&img, ImageFormat::Png).unwrap();
    assert!(decode(&png[..png.len() - 10]).is_err());
    let pnm = encode(&img, ImageFormat::Pnm).unwrap();
    assert!(decode(&pnm[..pnm.len() - 1]).is_err());
    assert!(decode(b"P6\n2 2\n65535\n").is_err());
    assert!(decode(b"GIF89a").is_err());
    assert!(ImageFormat::from_path(Path::new("x.jpg")).is_err());
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageBuffer::new(2, 2, 3, (0..12).map(|i| i * 20).collect()).unwrap();
    for name in ["a.png", "a.ppm"] {
        let p = dir.path().join(name);
        write_image(&img, &p).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
        let t: Tensor<f32> = load_normalized(&p).unwrap();
        let q = dir.path().join(format!("b_{name}"));
        save_image(&t, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }
    assert!(read_image(&dir.path().join("missing.png")).is_err());
}

#[test]
fn flat_image_has_no_lines() {
    let img = ImageBuffer::filled(6, 4, &[90, 140, 200]).unwrap();
    let line = extract_line(&img, 1).unwrap();
    assert_eq!(line.channels(), 1);
    assert_eq!((line.width(), line.height()), (6, 4));
    assert!(line.data().iter().all(|&v| v == 255));
    assert_eq!(extract_line(&line, 1).unwrap(), line);
}

#[test]
fn black_dot_on_white_darkens_only_the_dot() {
    let mut data = [255u8; 25];
    data[12] = 0;
    let line = extract_line(&gray(5, 5, &data), 1).unwrap();
    let mut expected = [255u8; 25];
    expected[12] = 0;
    assert_eq!(line.data(), &expected);
}

#[test]
fn white_dot_on_black_draws_a_ring() {
    let mut data = [0u8; 25];
    data[12] = 255;
    let line = extract_line(&gray(5, 5, &data), 1).unwrap();
    #[rustfmt::skip]
    let expected = [
        255, 255, 255, 255, 255,
        255,   0,   0,   0, 255,
        255,   0, 255,   0, 255,
        255,   0,   0,   0, 255,
        255, 255, 255, 255, 255,
    ];
    assert_eq!(line.data(), &expected);
    let wide = extract_line(&gray(5, 5, &data), 2).unwrap();
    assert_eq!(wide.data().iter().filter(|&&v| v == 0).count(), 24);
}

#[test]
fn luma_weights() {
    assert_eq!(luma(255, 0, 0), 76);
    assert_eq!(luma(0, 255, 0), 150);
    assert_eq!(luma(0, 0, 255), 29);
    assert_eq!(luma(255, 255, 255), 255);
    let rgba = ImageBuffer::new(1, 1, 4, vec![0, 255, 0, 3]).unwrap();
    assert_eq!(to_gray(&rgba).data(), &[150]);
}

#[test]
fn empty_image_is_rejected() {
    let empty = ImageBuffer::new(0, 3, 1, vec![]).unwrap();
    assert!(extract_line(&empty, 1).is_err());
}

#[test]
fn simplify_modes() {
    let line = gray(3, 1, &[127, 128, 255]);
    assert_eq!(simplify_stub(&line, None), line);
    assert_eq!(simplify_stub(&line, Some(128)).data(), &[0, 255, 255]);
    let blank = gray(2, 2, &[255; 4]);
    assert_eq!(simplify_stub(&blank, Some(128)), blank);
}

#[test]
fn resizing() {
    let img = gray(4, 2, &[0, 10, 20, 30, 40, 50, 60, 70]);
    assert_eq!(resize_nearest(&img, 2, 1).unwrap().data(), &[0, 20]);
    assert_eq!(resize_box(&img, 2, 1).unwrap().data(), &[25, 45]);
    assert_eq!(resize_box(&img, 4, 2).unwrap(), img);
    assert_eq!(resize_nearest(&img, 8, 4).unwrap().pixel(7, 3), &[70]);
    assert!(resize_box(&img, 0, 1).is_err());
}

#[test]
fn palettes_share_luma() {
    for (r, b) in RED.shades.iter().zip(BLUE.shades.iter()) {
        assert_eq!(luma(r[0], r[1], r[2]), luma(b[0], b[1], b[2]));
        assert!(r[0] > r[2] && b[2] > b[0]);
    }
}

#[test]
fn synthetic_set_is_deterministic_and_paired() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_synthetic(a.path(), 6, 16, 42, &[RED, BLUE]).unwrap();
    let mb = generate_synthetic(b.path(), 6, 16, 42, &[RED, BLUE]).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.pairs.len(), 6);
    let names = ["manifest.tsv", "color_0000.png", "line_0005.png"];
    for n in names {
        assert_eq!(std::fs::read(a.path().join(n)).unwrap(), std::fs::read(b.path().join(n)).unwrap());
    }
    let loaded = DatasetManifest::load(&a.path().join("manifest.tsv")).unwrap();
    let pairs = load_pairs(&loaded).unwrap();
    assert_eq!(pairs.len(), 6);
    assert_eq!(pairs[0].color.shape(), &[1, 3, 16, 16]);
    assert_eq!(pairs[0].line.shape(), &[1, 1, 16, 16]);
    // images 2k and 2k+1 share a layout in different palettes
    for k in 0..3 {
        assert_eq!(pairs[2 * k].line, pairs[2 * k + 1].line);
        assert_ne!(pairs[2 * k].color, pairs[2 * k + 1].color);
    }
    assert!(pairs[0].line.data().iter().any(|&v| v < 0.0));
    let other = tempfile::tempdir().unwrap();
    generate_synthetic(other.path(), 1, 16, 43, &[RED]).unwrap();
    assert_ne!(std::fs::read(other.path().join("color_0000.png")).unwrap(), std::fs::read(a.path().join("color_0000.png")).unwrap());
}

#[test]
fn synthetic_colours_follow_their_palette() {
    for layout in 0..20 {
        for (palette, red) in [(RED, true), (BLUE, false)] {
            let img = render_figure(32, &palette, 7, layout);
            let coloured: Vec<&[u8]> = img.data().chunks(3).filter(|p| p != &[255, 255, 255]).collect();
            assert!(!coloured.is_empty());
            assert!(coloured.iter().all(|p| if red { p[0] > p[2] } else { p[2] > p[0] }));
        }
    }
}

#[test]
fn synthetic_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_synthetic(dir.path(), 0, 32, 0, &[RED]).is_err());
    assert!(generate_synthetic(dir.path(), 1, 0, 0, &[RED]).is_err());
    assert!(generate_synthetic(dir.path(), 1, 32, 0, &[]).is_err());
    assert!(generate_synthetic(&dir.path().join("missing"), 1, 8, 0, &[RED]).is_err());
}

#[test]
fn manifest_text_format() {
    let m = DatasetManifest {
        resolution: 32,
        split: Split::Val,
        pairs: vec![("c.png".into(), "l.png".into())],
    };
    let text = m.to_string();
    assert_eq!(text, "#gpic-manifest\tresolution=32\tsplit=val\nc.png\tl.png\n");
    assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
    assert!(DatasetManifest::parse("c.png\tl.png\n").is_err());
    assert!(DatasetManifest::parse("#gpic-manifest\tresolution=32\nno-tab\n").is_err());
    assert!(DatasetManifest::parse("#gpic-manifest\tsplit=train\n").is_err());
}

#[test]
fn manifest_with_missing_file_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tsv");
    std::fs::write(&p, "#gpic-manifest\tresolution=8\nc.png\tl.png\n").unwrap();
    assert!(matches!(DatasetManifest::load(&p).unwrap_err(), Error::Io { .. }));
}

#[test]
fn full_size_synthetic_set_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    generate_synthetic(dir.path(), 450, 32, 1, &[RED, BLUE]).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
}
