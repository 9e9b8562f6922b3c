use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use agmt::config::RunConfig;
use agmt::eval::{recall_at_k, EmbeddingSet};
use agmt::pipeline::{load_model, load_split, train_run, Split};
use agmt::trainer::CHECKPOINT_FILE;
use agmt::Tensor;
use agmt_ffi::*;

fn tiny_run(dir: &Path, grouping: &str) -> PathBuf {
    let overrides: Vec<String> = [
        "data.classes=4",
        "data.per_class=4",
        "data.image_size=16",
        "model.widths=4,4",
        "train.epochs=1",
        "train.classes_per_batch=2",
        "train.samples_per_class=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("model.grouping={grouping}")])
    .collect();
    let cfg = RunConfig::parse("", &overrides).unwrap();
    let data = load_split(&cfg, None, Split::Train).unwrap();
    train_run(&cfg, &data, dir, false, |_| {}).unwrap();
    dir.join(CHECKPOINT_FILE)
}

fn load(ckpt: &Path) -> *mut AgmtModel {
    let path = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { agmt_model_load(path.as_ptr(), &mut handle) };
    assert_eq!(status, AgmtStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(agmt_last_error_message()) }.to_str().unwrap().to_string()
}

fn image(size: usize, seed: usize) -> Vec<f64> {
    (0..size * size).map(|i| ((i * 7 + seed * 13) % 11) as f64 / 10.0).collect()
}

#[test]
fn embeddings_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_run(dir.path(), "A");
    let handle = load(&ckpt);

    let mut info = AgmtModelInfo::default();
    assert_eq!(unsafe { agmt_model_info(handle, &mut info) }, AgmtStatus::Ok);
    assert_eq!((info.image_size, info.channels), (16, 1));
    assert!(info.has_attention);

    let images: Vec<f64> = (0..3).flat_map(|s| image(16, s)).collect();
    let per = info.groups * info.group_dim;
    let mut out = vec![0.0; 3 * per];
    let status = unsafe { agmt_model_embed(handle, images.as_ptr(), 3, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, AgmtStatus::Ok, "{}", last_error());

    let (_, model) = load_model(&ckpt).unwrap();
    for n in 0..3 {
        let t = Tensor::new(&[16, 16, 1], image(16, n)).unwrap();
        let got = model.embed_images(&[&t], 1).unwrap();
        assert_eq!(&out[n * per..(n + 1) * per], got[0].0.concatenated());
    }

    let mut maps = vec![0.0; info.groups * 256];
    let status = unsafe { agmt_model_attention(handle, images.as_ptr(), maps.as_mut_ptr(), maps.len()) };
    assert_eq!(status, AgmtStatus::Ok);
    for g in maps.chunks(256) {
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    unsafe { agmt_model_free(handle) };
}

#[test]
fn short_buffers_and_nulls_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let handle = load(&tiny_run(dir.path(), "A"));
    let img = image(16, 0);
    let mut out = vec![0.0; 3];
    let status = unsafe { agmt_model_embed(handle, img.as_ptr(), 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, AgmtStatus::BufferTooSmall);
    assert!(last_error().contains("needed"));

    let status = unsafe { agmt_model_embed(handle, ptr::null(), 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, AgmtStatus::NullArgument);
    let status = unsafe { agmt_model_info(ptr::null(), &mut AgmtModelInfo::default()) };
    assert_eq!(status, AgmtStatus::NullArgument);
    assert_eq!(last_error(), "model is null");

    let mut info = AgmtModelInfo::default();
    assert_eq!(unsafe { agmt_model_info(handle, &mut info) }, AgmtStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe { agmt_model_free(handle) };
    unsafe { agmt_model_free(ptr::null_mut()) };
}

#[test]
fn projection_models_have_no_attention() {
    let dir = tempfile::tempdir().unwrap();
    let handle = load(&tiny_run(dir.path(), "N"));
    let mut info = AgmtModelInfo::default();
    assert_eq!(unsafe { agmt_model_info(handle, &mut info) }, AgmtStatus::Ok);
    assert!(!info.has_attention);
    let img = image(16, 0);
    let mut out = vec![0.0; 256];
    let status = unsafe { agmt_model_attention(handle, img.as_ptr(), out.as_mut_ptr(), out.len()) };
    assert_eq!(status, AgmtStatus::InvalidArgument);
    assert!(last_error().contains("N-grouping"));
    unsafe { agmt_model_free(handle) };
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("none.agmt").to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { agmt_model_load(path.as_ptr(), &mut handle) };
    assert_eq!(status, AgmtStatus::Io);
    assert!(handle.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn metric_helpers_agree_with_the_library() {
    let emb = [0.0, 1.0, 0.1, 1.0, 1.0, 0.0, 1.0, 0.2, 0.5, 0.5];
    let labels = [0u64, 0, 1, 1, 2];
    let mut r = 0.0;
    assert_eq!(
        unsafe { agmt_recall_at_k(emb.as_ptr(), labels.as_ptr(), 5, 2, 1, &mut r) },
        AgmtStatus::Ok
    );
    let set = EmbeddingSet::new(Tensor::new(&[5, 2], emb.to_vec()).unwrap(), vec![0, 0, 1, 1, 2]).unwrap();
    assert_eq!(r, recall_at_k(&set, 1).unwrap());

    let mut nmi = 0.0;
    let a = [5u64, 5, 7, 7, 9];
    assert_eq!(unsafe { agmt_nmi(a.as_ptr(), labels.as_ptr(), 5, &mut nmi) }, AgmtStatus::Ok);
    assert_eq!(nmi, 1.0);

    let mut map = 0.0;
    assert_eq!(
        unsafe { agmt_map_at_r(emb.as_ptr(), labels.as_ptr(), 5, 2, &mut map) },
        AgmtStatus::Ok
    );
    assert!((0.0..=1.0).contains(&map));

    let mut chance = 0.0;
    let l = [0u64, 0, 1, 1];
    assert_eq!(unsafe { agmt_chance_recall_at_1(l.as_ptr(), 4, &mut chance) }, AgmtStatus::Ok);
    assert!((chance - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(agmt_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/agmt.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["agmt_model_load", "agmt_model_embed", "AGMT_STATUS_BUFFER_TOO_SMALL", "typedef struct AgmtModel AgmtModel"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c99"]).arg(&header).output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
