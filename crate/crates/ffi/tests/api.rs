//! End-to-end checks of the C ABI against the underlying Rust calls.

use ctxconv::autograd::AdamState;
use ctxconv::network::{self, ModelParams};
use ctxconv::rng::Rng;
use ctxconv::runner;
use ctxconv::tensor::Tensor;
use ctxconv::transform::TransformSet;
use ctxconv_ffi::*;
use std::ffi::{CStr, CString};
use std::path::Path;

const PLANE: usize = 28 * 28;

/// Writes a small trained-state checkpoint and returns its path plus
/// the exact parameters and transformation set stored in it.
fn write_checkpoint(dir: &Path) -> (CString, ModelParams, TransformSet) {
    let mut rng = Rng::seed(21);
    let params = ModelParams::init(3, 24, &mut rng).unwrap();
    let refs: Vec<&Tensor> = params.named_tensors().iter().map(|(_, t)| *t).collect();
    let adam = AdamState::new(1e-3, &refs);
    let phi = TransformSet::rotation_grid(4).unwrap();
    let path = dir.join("model.ck");
    runner::save_training_state(&path, &params, &adam, 5, 99, &phi).unwrap();
    (
        CString::new(path.to_str().unwrap()).unwrap(),
        params,
        phi,
    )
}

fn sample_images(n: usize) -> Vec<f64> {
    let mut rng = Rng::seed(22);
    (0..n * PLANE).map(|_| rng.next_f64()).collect()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ctxc_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(ctxc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn load_predict_logits_and_filters_match_direct_calls() {
    let dir = tempfile::tempdir().unwrap();
    let (cpath, params, phi) = write_checkpoint(dir.path());

    let mut net: *mut CtxcNet = std::ptr::null_mut();
    let status = unsafe { ctxc_net_load(cpath.as_ptr(), &mut net) };
    assert_eq!(status, CtxcStatus::CtxcOk, "{}", last_error());
    assert!(!net.is_null());
    assert_eq!(unsafe { ctxc_net_branches(net) }, 4);

    let n = 3;
    let pixels = sample_images(n);
    let batch = Tensor::from_vec(&[n, 1, 28, 28], pixels.clone()).unwrap();

    let mut labels = vec![u32::MAX; n];
    let status =
        unsafe { ctxc_net_predict(net, pixels.as_ptr(), pixels.len(), labels.as_mut_ptr()) };
    assert_eq!(status, CtxcStatus::CtxcOk, "{}", last_error());
    let direct = network::predict(&batch, &phi, &params).unwrap();
    assert_eq!(
        labels,
        direct.iter().map(|&l| l as u32).collect::<Vec<_>>()
    );

    let mut logits = vec![0.0; n * CTXC_CLASSES];
    let status =
        unsafe { ctxc_net_logits(net, pixels.as_ptr(), pixels.len(), logits.as_mut_ptr()) };
    assert_eq!(status, CtxcStatus::CtxcOk, "{}", last_error());
    let direct_logits = network::predict_logits(&batch, &phi, &params).unwrap();
    assert_eq!(logits, direct_logits.data());

    let mut banks = vec![0.0; n * CTXC_FILTER_VALUES];
    let status =
        unsafe { ctxc_net_filters(net, pixels.as_ptr(), pixels.len(), banks.as_mut_ptr()) };
    assert_eq!(status, CtxcStatus::CtxcOk, "{}", last_error());
    let direct_banks = network::filter_banks(&batch, &params).unwrap();
    assert_eq!(banks, direct_banks.data());

    unsafe { ctxc_net_free(net) };
}

#[test]
fn load_failures_report_status_and_message() {
    let missing = CString::new("/definitely/not/here.ck").unwrap();
    let mut net: *mut CtxcNet = std::ptr::null_mut();
    let status = unsafe { ctxc_net_load(missing.as_ptr(), &mut net) };
    assert_eq!(status, CtxcStatus::CtxcLoadFailed);
    assert!(net.is_null());
    assert!(last_error().contains("not/here.ck"), "{}", last_error());

    // A file that exists but is not a checkpoint.
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ck");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let junk_c = CString::new(junk.to_str().unwrap()).unwrap();
    let status = unsafe { ctxc_net_load(junk_c.as_ptr(), &mut net) };
    assert_eq!(status, CtxcStatus::CtxcLoadFailed);
}

#[test]
fn null_and_malformed_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cpath, _, _) = write_checkpoint(dir.path());
    let mut net: *mut CtxcNet = std::ptr::null_mut();
    assert_eq!(
        unsafe { ctxc_net_load(std::ptr::null(), &mut net) },
        CtxcStatus::CtxcNullPointer
    );
    assert_eq!(
        unsafe { ctxc_net_load(cpath.as_ptr(), std::ptr::null_mut()) },
        CtxcStatus::CtxcNullPointer
    );
    assert_eq!(unsafe { ctxc_net_load(cpath.as_ptr(), &mut net) }, CtxcStatus::CtxcOk);

    let pixels = sample_images(1);
    let mut labels = [0u32; 1];
    assert_eq!(
        unsafe {
            ctxc_net_predict(
                std::ptr::null(),
                pixels.as_ptr(),
                pixels.len(),
                labels.as_mut_ptr(),
            )
        },
        CtxcStatus::CtxcNullPointer
    );
    // A partial image is rejected before any compute.
    assert_eq!(
        unsafe { ctxc_net_predict(net, pixels.as_ptr(), PLANE - 1, labels.as_mut_ptr()) },
        CtxcStatus::CtxcInvalidInput
    );
    assert_eq!(
        unsafe { ctxc_net_predict(net, pixels.as_ptr(), 0, labels.as_mut_ptr()) },
        CtxcStatus::CtxcInvalidInput
    );
    let bad = vec![f64::NAN; PLANE];
    assert_eq!(
        unsafe { ctxc_net_predict(net, bad.as_ptr(), bad.len(), labels.as_mut_ptr()) },
        CtxcStatus::CtxcInvalidInput
    );
    assert!(last_error().contains("finite"));

    assert_eq!(unsafe { ctxc_net_branches(std::ptr::null()) }, 0);
    unsafe { ctxc_net_free(net) };
    unsafe { ctxc_net_free(std::ptr::null_mut()) }; // harmless
}

#[test]
fn generated_header_describes_the_api() {
    let header = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/include/ctxconv.h"
    ))
    .expect("header is generated at build time");
    for needle in [
        "typedef struct CtxcNet CtxcNet;",
        "CTXC_OK",
        "CTXC_LOAD_FAILED",
        "ctxc_net_load",
        "ctxc_net_free",
        "ctxc_net_predict",
        "ctxc_net_logits",
        "ctxc_net_filters",
        "ctxc_last_error",
        "ctxc_version",
    ] {
        assert!(header.contains(needle), "header lacks {needle}");
    }
}
