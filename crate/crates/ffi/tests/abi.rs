use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use reid_core::checkpoint::Checkpoint;
use reid_core::config::ModelConfig;
use reid_core::eval::{self, EvalOptions, Tags};
use reid_core::model::Model;
use reid_core::params::Mode;
use reid_core::schema::{AttributeSchema, OrderPolicy};
use reid_core::tensor::Tensor;
use reid_ffi::*;

fn tiny_model() -> Model {
    let mut m = Model::new(ModelConfig::tiny(), AttributeSchema::pedestrian(OrderPolicy::TopDown), 4, 21).unwrap();
    m.set_mode(Mode::Eval);
    m
}

fn save(dir: &Path) -> PathBuf {
    let path = dir.join("m.ckpt");
    Checkpoint::from_model(tiny_model()).save(&path).unwrap();
    path
}

fn images(n: usize) -> Vec<f64> {
    (0..n * 3 * 16 * 12).map(|i| ((i * 37) % 101) as f64 / 101.0).collect()
}

fn last_error() -> String {
    let p = reid_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(path: &Path) -> (ReidStatus, *mut ReidModel) {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    let s = unsafe { reid_model_load(c.as_ptr(), &mut h) };
    (s, h)
}

#[test]
fn extraction_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (s, h) = load(&save(dir.path()));
    assert_eq!(s, ReidStatus::Ok);
    assert!(reid_last_error().is_null());
    let (mut len, mut hh, mut ww, mut na) = (0, 0, 0, 0);
    unsafe {
        assert_eq!(reid_model_descriptor_len(h, &mut len), ReidStatus::Ok);
        assert_eq!(reid_model_image_size(h, &mut hh, &mut ww), ReidStatus::Ok);
        assert_eq!(reid_model_num_attributes(h, &mut na), ReidStatus::Ok);
    }
    let mut reference = tiny_model();
    assert_eq!((len, hh, ww, na), (reference.descriptor_len(), 16, 12, 12));

    let imgs = images(3);
    let mut out = vec![0.0; 3 * len];
    let s = unsafe { reid_model_extract(h, imgs.as_ptr(), imgs.len(), 3, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, ReidStatus::Ok);
    let expect = reference.extract_descriptors(&Tensor::new(&[3, 3, 16, 12], imgs.clone()).unwrap()).unwrap();
    assert_eq!(out, expect.data());

    let mut maps = vec![0.0; 12 * 12];
    let (mut mh, mut mw) = (0, 0);
    let s = unsafe { reid_model_attention(h, imgs.as_ptr(), 3 * 16 * 12, maps.as_mut_ptr(), maps.len(), &mut mh, &mut mw) };
    assert_eq!(s, ReidStatus::Ok);
    assert_eq!((mh, mw), (4, 3));
    for m in maps.chunks(12) {
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    unsafe { reid_model_free(h) };
}

#[test]
fn buffer_and_pointer_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, h) = load(&save(dir.path()));
    let imgs = images(1);
    let mut out = vec![0.0; 5];
    let s = unsafe { reid_model_extract(h, imgs.as_ptr(), imgs.len(), 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, ReidStatus::Dimension);
    assert!(last_error().contains("out"), "{}", last_error());
    let s = unsafe { reid_model_extract(h, imgs.as_ptr(), imgs.len() - 1, 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, ReidStatus::Dimension);
    let s = unsafe { reid_model_extract(h, ptr::null(), 0, 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, ReidStatus::NullArgument);
    let mut len = 0;
    assert_eq!(unsafe { reid_model_descriptor_len(ptr::null_mut(), &mut len) }, ReidStatus::NullArgument);
    unsafe {
        reid_model_free(h);
        reid_model_free(ptr::null_mut());
    }
}

#[test]
fn load_errors_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (s, h) = load(&dir.path().join("absent.ckpt"));
    assert_eq!(s, ReidStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("absent.ckpt"));

    let path = save(dir.path());
    let bytes = std::fs::read(&path).unwrap();
    let corrupt = dir.path().join("corrupt.ckpt");
    let mut b = bytes.clone();
    let mid = b.len() / 2;
    b[mid] ^= 0xff;
    std::fs::write(&corrupt, b).unwrap();
    assert_eq!(load(&corrupt).0, ReidStatus::Integrity);

    let future = dir.path().join("future.ckpt");
    let mut b = bytes;
    b[8] = b[8].wrapping_add(1);
    std::fs::write(&future, b).unwrap();
    assert_eq!(load(&future).0, ReidStatus::Version);

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { reid_model_load(ptr::null(), &mut h) }, ReidStatus::NullArgument);
}

#[test]
fn scoring_and_evaluation_match_the_library() {
    let (a, b) = ([1.0, 2.0, 3.0], [0.5, 2.0, 5.0]);
    let mut d = 0.0;
    assert_eq!(unsafe { reid_matching_score(a.as_ptr(), b.as_ptr(), 3, &mut d) }, ReidStatus::Ok);
    assert_eq!(d, eval::matching_score(&a, &b).unwrap());

    let scores = [0.3, 0.1, 0.7, 0.2, 0.9, 0.4, 0.5, 0.6];
    let (qi, qc, gi, gc) = ([1usize, 2], [0usize, 0], [2usize, 1, 1, 2], [1usize, 0, 1, 0]);
    let ranks = [1usize, 2];
    let (mut cmc, mut map) = ([0.0; 2], 0.0);
    for exclude in [0, 1] {
        let s = unsafe {
            reid_evaluate(
                scores.as_ptr(), 2, 4, qi.as_ptr(), qc.as_ptr(), gi.as_ptr(), gc.as_ptr(), ranks.as_ptr(), 2, exclude,
                cmc.as_mut_ptr(), &mut map,
            )
        };
        assert_eq!(s, ReidStatus::Ok);
        let opts = EvalOptions {
            ranks: ranks.to_vec(),
            exclude_same_camera: exclude == 1,
            normalize: false,
        };
        let r = eval::evaluate_scores(
            &scores,
            Tags { identities: &qi, cameras: &qc },
            Tags { identities: &gi, cameras: &gc },
            &opts,
        )
        .unwrap();
        assert_eq!((cmc.to_vec(), map), (r.cmc, r.map));
    }
    let gi_missing = [2usize, 2, 2, 2];
    let s = unsafe {
        reid_evaluate(
            scores.as_ptr(), 2, 4, qi.as_ptr(), qc.as_ptr(), gi_missing.as_ptr(), gc.as_ptr(), ranks.as_ptr(), 2, 0,
            cmc.as_mut_ptr(), &mut map,
        )
    };
    assert_eq!(s, ReidStatus::Protocol);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(reid_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

/// Builds and runs a C program against the generated header and the
/// static library.
#[test]
fn c_program_links_against_header() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if std::process::Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler ({cc}); skipping");
        return;
    }
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let target = exe.parent().and_then(Path::parent).unwrap();
    let lib = target.join("libreid_ffi.a");
    assert!(lib.exists(), "{}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save(dir.path());
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "reid.h"
int main(int argc, char **argv) {
    ReidModel *m = NULL;
    if (reid_model_load(argv[1], &m) != REID_STATUS_OK) { fprintf(stderr, "%s\n", reid_last_error()); return 1; }
    size_t len = 0, h = 0, w = 0;
    reid_model_descriptor_len(m, &len);
    reid_model_image_size(m, &h, &w);
    double img[3 * 16 * 12];
    for (size_t i = 0; i < sizeof img / sizeof img[0]; i++) img[i] = (double)(i % 7) / 7.0;
    double out[4096];
    ReidStatus s = reid_model_extract(m, img, 3 * h * w, 1, out, len);
    double d = -1.0;
    reid_matching_score(out, out, len, &d);
    printf("%s %zu %zux%zu %d %g\n", reid_version(), len, h, w, (int)s, d);
    reid_model_free(m);
    return reid_model_load("/nonexistent", &m) == REID_STATUS_IO ? 0 : 2;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let out = std::process::Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = std::process::Command::new(&bin).arg(&ckpt).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let line = String::from_utf8(run.stdout).unwrap();
    let len = tiny_model().descriptor_len();
    assert_eq!(line.trim(), format!("{} {len} 16x12 0 0", env!("CARGO_PKG_VERSION")));
}
