use std::ffi::{CStr, CString};
use std::ptr;

use eigenclean::matcore::eigenvalues_sym;
use eigenclean::matcore::SymMatrix;
use eigenclean::net::{MlpModel, Variant};
use eigenclean_ffi::*;
use ndarray::Array2;

fn last_error() -> String {
    let p = ec_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(ec_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn corr_with_spectrum_reproduces_spectrum() {
    let spectrum = [0.2, 0.8, 1.0, 2.0];
    let mut m = [0.0; 16];
    let status = unsafe { ec_corr_with_spectrum(spectrum.as_ptr(), 4, 11, m.as_mut_ptr()) };
    assert_eq!(status, EcStatus::Ok);
    assert!(ec_last_error_message().is_null());
    let sym = SymMatrix::new(Array2::from_shape_vec((4, 4), m.to_vec()).unwrap()).unwrap();
    let eig = eigenvalues_sym(&sym).unwrap();
    for (a, b) in eig.iter().zip(spectrum) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn bad_spectrum_is_invalid_argument() {
    let spectrum = [0.2, 0.8, 1.0, 1.0];
    let mut m = [0.0; 16];
    let status = unsafe { ec_corr_with_spectrum(spectrum.as_ptr(), 4, 11, m.as_mut_ptr()) };
    assert_eq!(status, EcStatus::InvalidArgument);
    assert!(last_error().contains("sum"), "{}", last_error());
}

#[test]
fn null_pointers_are_reported() {
    let mut out = [0.0; 3];
    let status = unsafe { ec_rie_clean(ptr::null(), 3, 0.5, true, out.as_mut_ptr()) };
    assert_eq!(status, EcStatus::NullPointer);
    let status = unsafe { ec_model_clean(ptr::null(), out.as_ptr(), 3, 0.5, true, out.as_mut_ptr()) };
    assert_eq!(status, EcStatus::NullPointer);
    unsafe { ec_model_free(ptr::null_mut()) };
}

#[test]
fn random_corr_is_unit_diagonal() {
    let mut m = vec![0.0; 36];
    let mut tag = -1;
    let weights = [0.0, 0.0, 1.0, 0.0];
    let status = unsafe { ec_random_corr(6, weights.as_ptr(), 5, m.as_mut_ptr(), &mut tag) };
    assert_eq!(status, EcStatus::Ok);
    assert_eq!(tag, 2);
    for i in 0..6 {
        assert_eq!(m[i * 6 + i], 1.0);
    }
    let status = unsafe { ec_random_corr(6, ptr::null(), 5, m.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(status, EcStatus::Ok);
}

#[test]
fn sample_and_rie_round_trip() {
    let spectrum = [0.5, 0.5, 1.0, 1.0, 2.0];
    let mut sample = [0.0; 5];
    let mut cleaned = [0.0; 5];
    unsafe {
        assert_eq!(ec_sample_spectrum_direct(spectrum.as_ptr(), 5, 50, 1, sample.as_mut_ptr()), EcStatus::Ok);
        assert_eq!(ec_rie_clean(sample.as_ptr(), 5, 0.1, true, cleaned.as_mut_ptr()), EcStatus::Ok);
    }
    assert!(sample.windows(2).all(|w| w[0] <= w[1]));
    assert!((cleaned.iter().sum::<f64>() - 5.0).abs() < 1e-9);
}

#[test]
fn model_load_clean_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    let model = MlpModel::autoencoder(4, &[8, 6], 0.25, Variant::Adjusted, 3).unwrap();
    model.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { ec_model_load(cpath.as_ptr(), &mut handle) }, EcStatus::Ok);
    let (mut i, mut o) = (0, 0);
    assert_eq!(unsafe { ec_model_dims(handle, &mut i, &mut o) }, EcStatus::Ok);
    assert_eq!((i, o), (5, 4));

    let spectrum = [0.3, 0.7, 1.0, 2.0];
    let mut out = [0.0; 4];
    let status = unsafe { ec_model_clean(handle, spectrum.as_ptr(), 4, 0.5, false, out.as_mut_ptr()) };
    assert_eq!(status, EcStatus::Ok);
    assert_eq!(out.to_vec(), model.clean(&spectrum, 0.5, false).unwrap().values);

    let status = unsafe { ec_model_clean(handle, spectrum.as_ptr(), 3, 0.5, false, out.as_mut_ptr()) };
    assert_eq!(status, EcStatus::DimensionMismatch);
    unsafe { ec_model_free(handle) };

    std::fs::write(&path, "eigenclean-mlp 1\nchecksum sha256 00\n").unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { ec_model_load(cpath.as_ptr(), &mut handle) }, EcStatus::Parse);
    assert!(handle.is_null());
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/eigenclean.h")).unwrap();
    for f in [
        "ec_version",
        "ec_last_error_message",
        "ec_model_load",
        "ec_model_free",
        "ec_model_dims",
        "ec_model_clean",
        "ec_rie_clean",
        "ec_corr_with_spectrum",
        "ec_random_corr",
        "ec_sample_spectrum_direct",
        "typedef struct EcModel EcModel",
        "EC_STATUS_OK = 0",
    ] {
        assert!(header.contains(f), "missing {f}");
    }
}

/// Compiles and runs a C program against the header and static library,
/// when a C compiler and the archive are available.
#[test]
fn c_program_links_and_runs() {
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    let lib = profile_dir.join("libeigenclean_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let out = tempfile::tempdir().unwrap();
    let bin = out.path().join("smoke");
    let compiled = std::process::Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status();
    match compiled {
        Err(e) => eprintln!("skipping: no C compiler ({e})"),
        Ok(s) => {
            assert!(s.success(), "C compilation failed");
            let run = std::process::Command::new(&bin).output().unwrap();
            assert!(run.status.success(), "smoke program exited with {:?}", run.status.code());
            assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
        }
    }
}
