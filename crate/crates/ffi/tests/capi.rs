use std::ffi::{CStr, CString};
use std::ptr;

use stancemoe::synthetic::{synthetic_corpus, SyntheticSpec};
use stancemoe::textpipe::CueLexicon;
use stancemoe::training::{run_kfold, TrainConfig};
use stancemoe::Checkpoint;
use stancemoe_ffi::*;

fn last_error() -> String {
    let p = sm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &std::path::Path) -> (CString, Checkpoint) {
    let (corpus, vocab) = synthetic_corpus(&SyntheticSpec {
        per_class: 6,
        seed: 2,
        ..Default::default()
    });
    let config = TrainConfig {
        dim: 6,
        filters: 2,
        epochs: 2,
        k: 2,
        batch_size: 4,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let ensemble = run_kfold(&config, &corpus, vocab.len(), 1).unwrap();
    let ck = Checkpoint {
        config,
        vocab,
        lexicon: CueLexicon::default(),
        ensemble,
    };
    let path = dir.join("m.smck");
    ck.save(&path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), ck)
}

#[test]
fn load_predict_free() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ck) = saved_model(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { sm_model_load(path.as_ptr(), &mut model) },
        SmStatus::Ok
    );
    assert!(!model.is_null());
    assert_eq!(unsafe { sm_model_num_folds(model) }, 2);
    assert!(sm_last_error_message().is_null());

    let text = "Free Palestine, but according to officials nothing changed";
    let c_text = CString::new(text).unwrap();
    let mut pred = SmPrediction::default();
    assert_eq!(
        unsafe { sm_predict_text(model, c_text.as_ptr(), &mut pred) },
        SmStatus::Ok
    );
    assert_eq!(pred.gate_len, 6);
    assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((pred.gate_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let tokens = stancemoe::textpipe::tokenize(text, ck.ensemble.spec().max_len);
    let ex = stancemoe::textpipe::encode_tokens(
        "",
        &tokens,
        stancemoe::Label::Neutral,
        &ck.vocab,
        &ck.lexicon,
    );
    let want = ck
        .ensemble
        .predict(&stancemoe::ModelInput::from_example(&ex, None))
        .unwrap();
    assert_eq!(pred.probs.as_slice(), want.probs.as_slice());
    assert_eq!(pred.label as usize, want.class.index());
    unsafe { sm_model_free(model) };
    unsafe { sm_model_free(ptr::null_mut()) };
}

#[test]
fn errors_set_status_and_message() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.smck").unwrap();
    assert_eq!(
        unsafe { sm_model_load(missing.as_ptr(), &mut model) },
        SmStatus::Io
    );
    assert!(model.is_null());
    assert!(last_error().contains("/nonexistent/model.smck"));

    assert_eq!(
        unsafe { sm_model_load(ptr::null(), &mut model) },
        SmStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.smck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { sm_model_load(junk.as_ptr(), &mut model) },
        SmStatus::Format
    );

    let mut pred = SmPrediction::default();
    let text = CString::new("x").unwrap();
    assert_eq!(
        unsafe { sm_predict_text(ptr::null(), text.as_ptr(), &mut pred) },
        SmStatus::NullPointer
    );

    let bad_utf8 = [0xffu8, 0xfe, 0];
    let (path, _) = saved_model(dir.path());
    assert_eq!(
        unsafe { sm_model_load(path.as_ptr(), &mut model) },
        SmStatus::Ok
    );
    assert_eq!(
        unsafe { sm_predict_text(model, bad_utf8.as_ptr().cast(), &mut pred) },
        SmStatus::InvalidUtf8
    );
    unsafe { sm_model_free(model) };
}

#[test]
fn metrics_match_hand_case() {
    // confusion [[2,0,0],[0,1,1],[1,0,2]]
    let golds = [0, 0, 1, 1, 2, 2, 2];
    let preds = [0, 0, 1, 2, 0, 2, 2];
    let mut m = SmMetrics::default();
    assert_eq!(
        unsafe { sm_metrics_from_labels(golds.as_ptr(), preds.as_ptr(), 7, &mut m) },
        SmStatus::Ok
    );
    assert!((m.macro_f1 - 32.0 / 45.0).abs() < 1e-15);
    assert_eq!(m.accuracy, 5.0 / 7.0);
    assert!((m.f1[0] - 0.8).abs() < 1e-15);

    let bad = [0, 3];
    assert_eq!(
        unsafe { sm_metrics_from_labels(bad.as_ptr(), bad.as_ptr(), 2, &mut m) },
        SmStatus::InvalidArgument
    );
    assert!(last_error().contains('3'));
    assert_eq!(
        unsafe { sm_metrics_from_labels(ptr::null(), ptr::null(), 0, &mut m) },
        SmStatus::InvalidArgument
    );
}

#[test]
fn static_strings() {
    let v = unsafe { CStr::from_ptr(sm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let names: Vec<&str> = (0..3)
        .map(|i| {
            unsafe { CStr::from_ptr(sm_label_name(i)) }
                .to_str()
                .unwrap()
        })
        .collect();
    assert_eq!(names, ["pro_palestine", "pro_israel", "neutral"]);
    assert!(sm_label_name(3).is_null() && sm_label_name(-1).is_null());
}

#[test]
fn header_declares_api_and_compiles() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/stancemoe.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "sm_model_load",
        "sm_model_free",
        "sm_predict_text",
        "sm_metrics_from_labels",
        "sm_last_error_message",
        "SM_STATUS_OK",
        "#define SM_NUM_CLASSES 3",
        "typedef struct SmModel SmModel",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    match std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c"])
        .arg(&header)
        .status()
    {
        Ok(status) => assert!(status.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler found; skipping syntax check"),
    }
}
