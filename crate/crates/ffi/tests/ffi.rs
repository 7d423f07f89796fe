use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use landmark_core::nn::build_network;
use landmark_core::plan::Plan;
use landmark_core::train::{Checkpoint, CheckpointHeader};
use landmark_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0i8; lmk_last_error_length() + 1];
    let n = unsafe { lmk_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(n, s.len());
    s
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut v = ptr::null_mut();
    let p = CString::new("/definitely/missing.nii.gz").unwrap();
    assert_eq!(unsafe { lmk_volume_read(p.as_ptr(), &mut v) }, LmkStatus::Io);
    assert!(v.is_null());
    assert!(last_error().contains("missing.nii.gz"));
    assert_eq!(unsafe { lmk_volume_read(ptr::null(), &mut v) }, LmkStatus::NullPointer);
    let shape = [31usize, 40, 40];
    let dir = CString::new("/tmp/unused").unwrap();
    assert_eq!(unsafe { lmk_synth_generate(dir.as_ptr(), 1, 0, shape.as_ptr(), 2, 0, 0.0) }, LmkStatus::Generation);
    // Success clears the message.
    assert!(!unsafe { CStr::from_ptr(lmk_version()) }.to_str().unwrap().is_empty());
    unsafe {
        lmk_volume_free(ptr::null_mut());
        lmk_model_free(ptr::null_mut());
        lmk_landmarks_free(ptr::null_mut());
    }
}

#[test]
fn volume_from_data_round_trip() {
    let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
    let shape = [4usize, 3, 2];
    let spacing = [0.5, 1.0, 2.0];
    let origin = [0.0; 3];
    let mut v = ptr::null_mut();
    assert_eq!(
        unsafe { lmk_volume_from_data(data.as_ptr(), shape.as_ptr(), spacing.as_ptr(), origin.as_ptr(), &mut v) },
        LmkStatus::Ok
    );
    let mut s = [0usize; 3];
    let mut sp = [0.0; 3];
    assert_eq!(unsafe { lmk_volume_info(v, s.as_mut_ptr(), sp.as_mut_ptr()) }, LmkStatus::Ok);
    assert_eq!(s, shape);
    assert_eq!(sp, spacing);
    unsafe { lmk_volume_free(v) };
    let bad = [0.0, 1.0, 1.0];
    assert_eq!(
        unsafe { lmk_volume_from_data(data.as_ptr(), shape.as_ptr(), bad.as_ptr(), origin.as_ptr(), &mut v) },
        LmkStatus::Geometry
    );
}

fn write_model(dir: &std::path::Path) -> (PathBuf, PathBuf, Plan) {
    let plan_json = r#"{"dataset_name":"t","classes":["a","b"],"target_spacing":[1.0,1.0,1.0],"normalization":"zscore",
        "median_shape":[16,16,16],"patch_size":[16,16,16],"batch_size":2,"num_pool_per_axis":[1,1,1],"base_channels":4,
        "max_channels":8,"edt_radius_voxels":5,"loss":"bce_topk","topk_percent":20.0,"epochs":1,"iterations_per_epoch":1,
        "learning_rate":{"initial":0.01,"power":0.9,"momentum":0.99,"weight_decay":0.00003,"grad_clip_norm":12.0},
        "oversample_foreground_fraction":0.5,"fold_count":5}"#;
    let plan: Plan = serde_json::from_str(plan_json).unwrap();
    let plan_path = dir.join("plan.json");
    std::fs::write(&plan_path, plan_json).unwrap();
    let (net, params) = build_network(&plan, 2, 0).unwrap();
    let ck = Checkpoint {
        header: CheckpointHeader {
            spec: net.spec.clone(),
            plan_hash: plan.hash(),
            classes: plan.classes.clone(),
            epoch: 0,
            iteration: 0,
            param_count: params.len(),
            has_velocity: false,
        },
        params,
        velocity: None,
    };
    let ck_path = dir.join("checkpoint_final");
    ck.save(&ck_path).unwrap();
    (plan_path, ck_path, plan)
}

#[test]
fn load_predict_and_write() {
    let dir = tempfile::tempdir().unwrap();
    let (plan_path, ck_path, _) = write_model(dir.path());
    let plan_c = CString::new(plan_path.to_str().unwrap()).unwrap();
    let ck_c = CString::new(ck_path.to_str().unwrap()).unwrap();
    let cks = [ck_c.as_ptr(), ck_c.as_ptr()];
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { lmk_model_load(plan_c.as_ptr(), cks.as_ptr(), 2, &mut model) },
        LmkStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(unsafe { lmk_model_class_count(model) }, 2);

    let data: Vec<f32> = (0..20 * 18 * 16).map(|i| ((i * 37) % 101) as f32).collect();
    let shape = [20usize, 18, 16];
    let spacing = [1.0; 3];
    let origin = [-5.0, 2.0, 0.0];
    let mut v = ptr::null_mut();
    assert_eq!(
        unsafe { lmk_volume_from_data(data.as_ptr(), shape.as_ptr(), spacing.as_ptr(), origin.as_ptr(), &mut v) },
        LmkStatus::Ok
    );
    let mut lm = ptr::null_mut();
    let id = CString::new("c1").unwrap();
    assert_eq!(unsafe { lmk_predict(model, v, id.as_ptr(), &mut lm) }, LmkStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { lmk_landmarks_count(lm) }, 2);
    let name = unsafe { CStr::from_ptr(lmk_landmarks_name(lm, 1)) }.to_str().unwrap();
    assert_eq!(name, "b");
    assert!(unsafe { lmk_landmarks_name(lm, 2) }.is_null());
    let mut pos = [0.0; 3];
    let mut conf = -1.0;
    assert_eq!(unsafe { lmk_landmarks_get(lm, 0, pos.as_mut_ptr(), &mut conf) }, LmkStatus::Ok);
    assert!((0.0..=1.0).contains(&conf));
    assert!(pos[0] >= -5.0 && pos[0] <= 14.0);
    assert_eq!(unsafe { lmk_landmarks_get(lm, 5, pos.as_mut_ptr(), ptr::null_mut()) }, LmkStatus::InvalidArgument);

    let out = dir.path().join("pred");
    std::fs::create_dir(&out).unwrap();
    let out_file = CString::new(out.join("c1.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { lmk_landmarks_write_json(lm, out_file.as_ptr()) }, LmkStatus::Ok);

    // Evaluating the prediction against itself gives zero error.
    let d = CString::new(out.to_str().unwrap()).unwrap();
    let t = [2.0, 4.0];
    let (mut mre, mut sd, mut sdr) = (f64::NAN, f64::NAN, [0.0; 2]);
    assert_eq!(
        unsafe { lmk_evaluate_dirs(d.as_ptr(), d.as_ptr(), t.as_ptr(), 2, 0.0, &mut mre, &mut sd, sdr.as_mut_ptr()) },
        LmkStatus::Ok
    );
    assert_eq!((mre, sd, sdr), (0.0, 0.0, [100.0, 100.0]));

    unsafe {
        lmk_landmarks_free(lm);
        lmk_volume_free(v);
        lmk_model_free(model);
    }
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/landmark.h");
    assert!(header.is_file(), "build.rs should have generated the header");
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = [deps.join("liblandmark_ffi.a"), deps.parent().unwrap().join("liblandmark_ffi.a")]
        .into_iter()
        .find(|p| p.is_file())
        .expect("static library built next to the test binary");
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let status = std::process::Command::new("cc")
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = std::process::Command::new(&exe).arg(tmp.path().join("ds")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
