use std::ffi::{CStr, CString};
use std::ptr;

use polyvit::checkpoint::Checkpoint;
use polyvit::config::RunConfig;
use polyvit::model::PolyViT;
use polyvit::tensor::Tensor;
use polyvit_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pv_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn base9_breakdown_through_the_abi() {
    let name = CString::new("base9").unwrap();
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(pv_config_preset(name.as_ptr(), &mut cfg), PvStatus::Ok);
        let mut b = PvParamBreakdown::default();
        assert_eq!(pv_config_params(cfg, &mut b), PvStatus::Ok);
        assert_eq!(b.num_tasks, 9);
        assert!((b.total as f64 / 93e6 - 1.0).abs() < 0.05);
        assert!((7.9..=8.7).contains(&b.fleet_ratio));
        let mut s = ptr::null_mut();
        assert_eq!(pv_config_schedule(cfg, ptr::null(), &mut s), PvStatus::Ok);
        let mut len = 0;
        assert_eq!(pv_schedule_len(s, &mut len), PvStatus::Ok);
        assert_eq!(len, 418_200);
        let mut pets = 0;
        assert_eq!(pv_schedule_count(s, 2, &mut pets), PvStatus::Ok);
        assert_eq!(pets, 500);
        pv_schedule_free(s);
        pv_config_free(cfg);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let bad = CString::new("model.depth = 3\n").unwrap();
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(pv_config_parse(bad.as_ptr(), &mut cfg), PvStatus::Config);
        assert!(cfg.is_null());
        assert!(last_error().contains("model.depth"));
        assert_eq!(pv_config_parse(ptr::null(), &mut cfg), PvStatus::NullPointer);
        let kind = CString::new("sometimes").unwrap();
        let mut s = ptr::null_mut();
        assert_eq!(pv_schedule_build(kind.as_ptr(), [1u64, 2].as_ptr(), 2, 0, &mut s), PvStatus::Schedule);
        let path = CString::new("/nonexistent/dir/x.pvck").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(pv_model_load(path.as_ptr(), &mut m), PvStatus::Io);
        pv_config_free(ptr::null_mut());
        pv_schedule_free(ptr::null_mut());
        pv_model_free(ptr::null_mut());
    }
}

#[test]
fn schedule_steps_match_counts() {
    let kind = CString::new("accumulated").unwrap();
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(pv_schedule_build(kind.as_ptr(), [3u64, 5].as_ptr(), 2, 7, &mut s), PvStatus::Ok);
        let mut len = 0;
        pv_schedule_len(s, &mut len);
        assert_eq!(len, 4);
        let mut task = 0;
        assert_eq!(pv_schedule_step(s, 0, &mut task), PvStatus::Ok);
        assert_eq!(task, -1);
        assert_eq!(pv_schedule_step(s, 4, &mut task), PvStatus::InvalidArgument);
        pv_schedule_free(s);
    }
}

#[test]
fn metrics_through_the_abi() {
    let mut ap = 0.0;
    let mut acc = 0.0;
    let mut map = 0.0;
    unsafe {
        assert_eq!(pv_average_precision([0.9, 0.8, 0.1].as_ptr(), [1u8, 0, 1].as_ptr(), 3, &mut ap), PvStatus::Ok);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let scores = [0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(pv_accuracy(scores.as_ptr(), 3, 2, [1u32, 0, 1].as_ptr(), &mut acc), PvStatus::Ok);
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(pv_accuracy(scores.as_ptr(), 3, 2, [5u32, 0, 1].as_ptr(), &mut acc), PvStatus::Metric);
        assert_eq!(pv_mean_average_precision(scores.as_ptr(), [0u8, 1, 1, 0, 0, 0].as_ptr(), 3, 2, &mut map), PvStatus::Ok);
        assert_eq!(map, 1.0);
    }
}

#[test]
fn loaded_model_matches_the_library() {
    let config = RunConfig::parse(
        "model.width = 4\nmodel.layers = 1\nmodel.precision = f64\n\
         modality.image.input = 4x4x1\nmodality.image.patch = 2x2\n\
         task.a.modality = image\ntask.a.classes = 3\ntask.a.head_init = lecun_normal\n",
    )
    .unwrap();
    let model: PolyViT<f64> = config.build_model().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pvck");
    Checkpoint::from_model(&config, &model, None).unwrap().save(&path).unwrap();

    let inputs: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let xs: Vec<Tensor<f64>> = inputs.chunks(16).map(|c| Tensor::new(vec![4, 4, 1], c.to_vec()).unwrap()).collect();
    let expected = model.logits(0, &xs).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(pv_model_load(cpath.as_ptr(), &mut m), PvStatus::Ok, "{}", last_error());
        let (mut classes, mut len, mut tasks, mut count) = (0, 0, 0, 0);
        assert_eq!(pv_model_num_tasks(m, &mut tasks), PvStatus::Ok);
        assert_eq!(pv_model_task_shape(m, 0, &mut classes, &mut len), PvStatus::Ok);
        assert_eq!((tasks, classes, len), (1, 3, 16));
        assert_eq!(pv_model_param_count(m, &mut count), PvStatus::Ok);
        assert_eq!(count as usize, model.param_count().total);
        let mut out = vec![0.0; 6];
        assert_eq!(
            pv_model_logits(m, 0, inputs.as_ptr(), inputs.len(), 2, out.as_mut_ptr(), out.len()),
            PvStatus::Ok
        );
        assert_eq!(out, expected.data());
        assert_eq!(
            pv_model_logits(m, 0, inputs.as_ptr(), 10, 2, out.as_mut_ptr(), out.len()),
            PvStatus::InvalidArgument
        );
        let copy = dir.path().join("copy.pvck");
        let ccopy = CString::new(copy.to_str().unwrap()).unwrap();
        assert_eq!(pv_model_save(m, ccopy.as_ptr()), PvStatus::Ok);
        assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());
        pv_model_free(m);
    }
}

#[test]
fn header_declares_the_api_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/polyvit.h")).unwrap();
    for f in ["pv_last_error", "pv_config_parse", "pv_schedule_build", "pv_model_load", "pv_model_logits", "pv_accuracy"] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    let src = tempfile::Builder::new().suffix(".c").tempfile().unwrap();
    std::fs::write(src.path(), "#include \"polyvit.h\"\nint main(void) { return pv_version() == 0; }\n").unwrap();
    match std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(dir.join("include"))
        .arg(src.path())
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("no C compiler available, skipped: {e}"),
    }
}
