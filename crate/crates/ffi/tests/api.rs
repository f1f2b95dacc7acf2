use std::ffi::{c_char, CStr, CString};
use std::ptr;

use retinakit::grading::{build_grading_model, save_grading_checkpoint, Backbone, GradeModelConfig};
use retinakit::segnet::{build_segmentation_model, save_checkpoint, SegModelConfig, SegVariant};
use retinakit::transfer::{build_transfer_system, save_transfer_checkpoint, Ablation, LossWeights, TransferConfig};
use retinakit_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; rk_last_error_length() + 1];
    unsafe {
        rk_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn phantom(n: usize, size: usize, seed: u64) -> *mut RkDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { rk_phantom_new(n, size, seed, true, &mut ds) }, RkStatus::Ok);
    assert!(!ds.is_null());
    ds
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(rk_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn phantom_dataset_handle() {
    let ds = phantom(5, 32, 3);
    let mut n = 0;
    unsafe {
        assert_eq!(rk_dataset_len(ds, &mut n), RkStatus::Ok);
        assert_eq!(n, 5);
        let grades: Vec<i32> = (0..5)
            .map(|i| {
                let mut g = -2;
                assert_eq!(rk_dataset_grade(ds, i, &mut g), RkStatus::Ok);
                g
            })
            .collect();
        assert_eq!(grades, vec![0, 1, 2, 3, 4]);
        let mut g = 0;
        assert_eq!(rk_dataset_grade(ds, 5, &mut g), RkStatus::InvalidArgument);
        assert!(last_error().contains("index 5"));
        rk_dataset_free(ds);
    }
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        assert_eq!(rk_dataset_len(ptr::null(), &mut 0), RkStatus::NullPointer);
        assert!(last_error().contains("dataset"));
        assert_eq!(rk_phantom_new(2, 32, 0, false, ptr::null_mut()), RkStatus::NullPointer);
        let mut ds = ptr::null_mut();
        assert_eq!(
            rk_dataset_load(ptr::null(), ptr::null(), &mut ds),
            RkStatus::NullPointer
        );
        rk_dataset_free(ptr::null_mut());
        rk_seg_model_free(ptr::null_mut());
        rk_grade_model_free(ptr::null_mut());
        rk_transfer_free(ptr::null_mut());
    }
}

#[test]
fn bad_inputs_map_to_codes() {
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(rk_phantom_new(0, 32, 0, false, &mut ds), RkStatus::InvalidArgument);
        assert!(ds.is_null());
        let root = CString::new("/nonexistent/retinakit").unwrap();
        let kind = CString::new("grade-set").unwrap();
        assert_eq!(
            rk_dataset_load(root.as_ptr(), kind.as_ptr(), &mut ds),
            RkStatus::DataError
        );
        let kind = CString::new("no-such-kind").unwrap();
        assert_eq!(
            rk_dataset_load(root.as_ptr(), kind.as_ptr(), &mut ds),
            RkStatus::InvalidArgument
        );
        let mut model = ptr::null_mut();
        assert_eq!(rk_seg_model_load(root.as_ptr(), &mut model), RkStatus::DataError);
    }
}

#[test]
fn error_message_truncates() {
    unsafe {
        rk_dataset_len(ptr::null(), &mut 0);
        let full = last_error();
        let mut buf = [0 as c_char; 4];
        assert_eq!(rk_last_error_message(buf.as_mut_ptr(), 4), 3);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), &full[..3]);
        assert_eq!(rk_last_error_message(ptr::null_mut(), 10), 0);
    }
}

#[test]
fn metrics_match_the_library() {
    let pred = [0.9, 0.2, 0.7, 0.1];
    let gt = [1u8, 0, 0, 1];
    let labels = [true, false, false, true];
    let mut v = f64::NAN;
    unsafe {
        assert_eq!(rk_dice(pred.as_ptr(), gt.as_ptr(), 4, 0.5, &mut v), RkStatus::Ok);
        assert_eq!(v, retinakit::metrics::dice(&pred, &labels, 0.5).unwrap());
        assert_eq!(rk_auc_roc(pred.as_ptr(), gt.as_ptr(), 4, &mut v), RkStatus::Ok);
        assert_eq!(v, retinakit::metrics::auc_roc(&pred, &labels).unwrap());

        let a = [0u32, 1, 2, 3, 4, 2];
        let b = [0u32, 2, 2, 3, 3, 1];
        let (au, bu): (Vec<usize>, Vec<usize>) = (
            a.iter().map(|&x| x as usize).collect(),
            b.iter().map(|&x| x as usize).collect(),
        );
        assert_eq!(
            rk_quadratic_weighted_kappa(a.as_ptr(), b.as_ptr(), 6, 5, &mut v),
            RkStatus::Ok
        );
        assert_eq!(v, retinakit::metrics::quadratic_weighted_kappa(&au, &bu, 5).unwrap());
        assert_eq!(rk_cohens_kappa(a.as_ptr(), b.as_ptr(), 6, &mut v), RkStatus::Ok);
        assert_eq!(v, retinakit::metrics::cohens_kappa(&au, &bu).unwrap());

        let same = [1u8, 1];
        assert_eq!(rk_auc_roc(pred.as_ptr(), same.as_ptr(), 2, &mut v), RkStatus::Undefined);
        assert_eq!(rk_dice(ptr::null(), gt.as_ptr(), 4, 0.5, &mut v), RkStatus::NullPointer);
    }
}

#[test]
fn seg_model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.ckpt");
    let model = build_segmentation_model(&SegModelConfig::new(SegVariant::Multiclass, 2, 4, 32), 7).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let ds = phantom(2, 32, 1);
    let p = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(rk_seg_model_load(p.as_ptr(), &mut m), RkStatus::Ok);
        let (mut c, mut s) = (0, 0);
        assert_eq!(rk_seg_model_output_shape(m, &mut c, &mut s), RkStatus::Ok);
        assert_eq!((c, s), (6, 32));
        let mut probs = vec![f32::NAN; c * s * s];
        assert_eq!(
            rk_seg_model_predict(m, ds, 1, probs.as_mut_ptr(), probs.len() - 1),
            RkStatus::BufferTooSmall
        );
        assert_eq!(
            rk_seg_model_predict(m, ds, 1, probs.as_mut_ptr(), probs.len()),
            RkStatus::Ok
        );
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        let mut again = vec![0.0f32; probs.len()];
        rk_seg_model_predict(m, ds, 1, again.as_mut_ptr(), again.len());
        assert_eq!(probs, again);
        rk_seg_model_free(m);
        rk_dataset_free(ds);
    }
}

#[test]
fn grade_model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grade.ckpt");
    let model = build_grading_model(&GradeModelConfig::new(Backbone::SmallCnn, 2, 4, 32), 7, None).unwrap();
    save_grading_checkpoint(&model, &path).unwrap();
    let ds = phantom(3, 32, 2);
    let p = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(rk_grade_model_load(p.as_ptr(), &mut m), RkStatus::Ok);
        let mut grade = 99u8;
        let mut logits = [f64::NAN; 5];
        assert_eq!(
            rk_grade_model_predict(m, ds, 2, &mut grade, logits.as_mut_ptr()),
            RkStatus::Ok
        );
        assert!(grade < 5);
        let best = (0..5).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
        assert_eq!(best, grade as usize);
        assert_eq!(
            rk_grade_model_predict(m, ds, 0, &mut grade, ptr::null_mut()),
            RkStatus::Ok
        );
        rk_grade_model_free(m);
        rk_dataset_free(ds);
    }
}

#[test]
fn transfer_system_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transfer.ckpt");
    let system = build_transfer_system(&TransferConfig::new(2, 4, 32), Ablation::Mtc, 5).unwrap();
    save_transfer_checkpoint(&system, LossWeights::default(), "test", &path).unwrap();
    let mut ds = ptr::null_mut();
    let p = CString::new(path.to_str().unwrap()).unwrap();
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(rk_disease_phantom_new(2, 32, 4, &mut ds), RkStatus::Ok);
        assert_eq!(rk_transfer_load(p.as_ptr(), &mut s), RkStatus::Ok);
        let mut probs = [f64::NAN; 8];
        assert_eq!(rk_transfer_predict(s, ds, 0, probs.as_mut_ptr()), RkStatus::Ok);
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        let mut g = 0;
        assert_eq!(rk_dataset_grade(ds, 0, &mut g), RkStatus::Ok);
        assert_eq!(g, -1);
        rk_transfer_free(s);
        rk_dataset_free(ds);
    }
}
