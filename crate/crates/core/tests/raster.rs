use std::fs;
use std::path::Path;

use agmt::data::load_raster_dir;
use agmt::Error;

fn ppm(w: usize, h: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    out
}

fn pgm(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n# fixture\n{w} {h}\n255\n").into_bytes();
    out.extend(gray);
    out
}

fn write(root: &Path, rel: &str, bytes: &[u8]) {
    let path = root.join(rel);
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, bytes).unwrap();
}

/// Two classes of two images each, deliberately created out of name order.
fn fixture(root: &Path) {
    write(root, "zebra/1.ppm", &ppm(2, 1, &[[255, 0, 0], [0, 255, 0]]));
    write(root, "zebra/2.ppm", &ppm(2, 1, &[[0, 0, 255], [255, 255, 255]]));
    write(root, "ant/1.ppm", &ppm(2, 1, &[[10, 20, 30], [40, 50, 60]]));
    write(root, "ant/2.ppm", &ppm(2, 1, &[[0, 0, 0], [0, 0, 0]]));
}

#[test]
fn two_class_fixture_gets_sorted_ids() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let d = load_raster_dir(dir.path(), 2, 3).unwrap();
    assert_eq!(d.class_names, ["ant", "zebra"]);
    let mut labels = d.labels.clone();
    labels.sort();
    assert_eq!(labels, [0, 0, 1, 1]);
    assert_eq!(d.images.len(), 4);
}

#[test]
fn full_red_scales_to_unit_red() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a/x.ppm", &ppm(1, 1, &[[255, 0, 0]]));
    write(dir.path(), "b/x.ppm", &ppm(1, 1, &[[0, 0, 0]]));
    let d = load_raster_dir(dir.path(), 1, 3).unwrap();
    let red = d.labels.iter().position(|&l| l == 0).unwrap();
    assert_eq!(d.images[red].data(), [1.0, 0.0, 0.0]);
}

#[test]
fn constant_images_stay_constant_when_resized() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a/x.pgm", &pgm(3, 5, &[77; 15]));
    write(dir.path(), "b/x.pgm", &pgm(4, 4, &[200; 16]));
    let d = load_raster_dir(dir.path(), 9, 1).unwrap();
    for (img, want) in d.images.iter().zip([77.0 / 255.0, 200.0 / 255.0]) {
        assert_eq!(img.shape(), [9, 9, 1]);
        assert!(img.data().iter().all(|&v| v == want));
    }
}

#[test]
fn malformed_header_is_a_parse_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    write(dir.path(), "ant/bad.ppm", b"P3\n1 1\n255\n0 0 0\n");
    let err = load_raster_dir(dir.path(), 2, 3).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err:?}");
    assert!(err.to_string().contains("bad.ppm"), "{err}");
}

#[test]
fn empty_class_directory_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    fs::create_dir_all(dir.path().join("empty")).unwrap();
    let err = load_raster_dir(dir.path(), 2, 3).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}
