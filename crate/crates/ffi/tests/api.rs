use std::ffi::{CStr, CString};
use std::ptr;

use photonshrink::nn::{save_model, PrsNet, PrsNetConfig};
use photonshrink::windowing::WindowConfig;
use photonshrink_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ps_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ps_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn cube_counts_round_trip_through_file() {
    let counts: Vec<u32> = (0..4 * 2 * 3).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&dir.path().join("c.spcb"));
    unsafe {
        let mut cube = ptr::null_mut();
        assert_eq!(
            ps_cube_from_counts(4, 2, 3, 80, counts.as_ptr(), counts.len(), &mut cube),
            PsStatus::Ok
        );
        assert_eq!(ps_cube_write(cube, path.as_ptr()), PsStatus::Ok);
        ps_cube_free(cube);

        let mut back = ptr::null_mut();
        assert_eq!(ps_cube_read(path.as_ptr(), &mut back), PsStatus::Ok);
        let (mut t, mut m, mut n, mut ps) = (0, 0, 0, 0);
        assert_eq!(
            ps_cube_dims(back, &mut t, &mut m, &mut n, &mut ps),
            PsStatus::Ok
        );
        assert_eq!((t, m, n, ps), (4, 2, 3, 80));
        let mut out = vec![0u32; counts.len()];
        assert_eq!(
            ps_cube_counts(back, out.as_mut_ptr(), out.len()),
            PsStatus::Ok
        );
        assert_eq!(out, counts);
        assert_eq!(
            ps_cube_counts(back, out.as_mut_ptr(), 3),
            PsStatus::ShapeMismatch
        );
        ps_cube_free(back);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut cube = ptr::null_mut();
        assert_eq!(ps_cube_read(ptr::null(), &mut cube), PsStatus::NullPointer);
        assert!(last_error().contains("null"));
        let missing = CString::new("/nonexistent/dir/x.spcb").unwrap();
        assert_eq!(ps_cube_read(missing.as_ptr(), &mut cube), PsStatus::Io);
        assert!(cube.is_null());
        let counts = [1u32; 5];
        assert_eq!(
            ps_cube_from_counts(2, 2, 2, 80, counts.as_ptr(), 5, &mut cube),
            PsStatus::ShapeMismatch
        );
        assert!(!last_error().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.spcb");
        std::fs::write(&bad, b"NOPE....").unwrap();
        assert_eq!(
            ps_cube_read(cstr(&bad).as_ptr(), &mut cube),
            PsStatus::Format
        );
        ps_cube_free(ptr::null_mut());
        ps_depth_free(ptr::null_mut());
        ps_model_free(ptr::null_mut());
        assert!(!ps_version().is_null());
    }
}

#[test]
fn simulate_reconstruct_evaluate() {
    unsafe {
        let (mut cube, mut gt) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(
            ps_simulate(
                PsScene::Staircase,
                8,
                8,
                50.0,
                0.0,
                64,
                80.0,
                240.0,
                3,
                &mut cube,
                &mut gt
            ),
            PsStatus::Ok,
            "{}",
            last_error()
        );
        assert!(last_error().is_empty());
        for method in [PsMethod::Argmax, PsMethod::LmFilter, PsMethod::Shrinkage] {
            let mut depth = ptr::null_mut();
            assert_eq!(
                ps_reconstruct(cube, method, 240.0, 0.5, ptr::null_mut(), 4, 4, &mut depth),
                PsStatus::Ok
            );
            let mut m = PsMetrics::default();
            assert_eq!(ps_metrics(depth, gt, &mut m), PsStatus::Ok);
            assert!(m.rmse.is_finite() && m.rmse <= 0.012, "{method:?} {m:?}");
            let (mut r, mut c) = (0, 0);
            ps_depth_dims(depth, &mut r, &mut c);
            let mut z = vec![0.0; r * c];
            assert_eq!(
                ps_depth_values(depth, z.as_mut_ptr(), z.len()),
                PsStatus::Ok
            );
            assert!(z.iter().all(|v| *v > 0.0));
            ps_depth_free(depth);
        }
        let mut depth = ptr::null_mut();
        assert_eq!(
            ps_reconstruct(
                cube,
                PsMethod::PrsNet,
                240.0,
                0.5,
                ptr::null_mut(),
                0,
                0,
                &mut depth
            ),
            PsStatus::InvalidArgument
        );
        assert_eq!(
            ps_reconstruct(
                cube,
                PsMethod::Argmax,
                240.0,
                0.5,
                ptr::null_mut(),
                4,
                5,
                &mut depth
            ),
            PsStatus::InvalidArgument
        );
        ps_depth_free(gt);
        ps_cube_free(cube);
    }
}

#[test]
fn model_and_depth_files() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("m.prsm");
    let cfg = PrsNetConfig {
        bins: 64,
        window: WindowConfig::new(3).unwrap(),
        encoder_stages: 2,
        base_channels: 2,
        num_prs_blocks: 1,
    };
    save_model(&model_path, &PrsNet::new(cfg, 1).unwrap()).unwrap();
    let pfm = cstr(&dir.path().join("z.pfm"));
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            ps_model_load(cstr(&model_path).as_ptr(), &mut model),
            PsStatus::Ok
        );
        let mut cube = ptr::null_mut();
        assert_eq!(
            ps_simulate(
                PsScene::Blocks,
                6,
                6,
                2.0,
                50.0,
                64,
                80.0,
                240.0,
                1,
                &mut cube,
                ptr::null_mut()
            ),
            PsStatus::Ok
        );
        let mut depth = ptr::null_mut();
        assert_eq!(
            ps_reconstruct(cube, PsMethod::PrsNet, 240.0, 0.5, model, 0, 0, &mut depth),
            PsStatus::Ok
        );
        assert_eq!(ps_depth_write_pfm(depth, pfm.as_ptr()), PsStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(ps_depth_read_pfm(pfm.as_ptr(), &mut back), PsStatus::Ok);
        let mut m = PsMetrics::default();
        assert_eq!(ps_metrics(back, depth, &mut m), PsStatus::Ok);
        // float32 storage
        assert!(m.rmse < 1e-6, "{m:?}");
        for p in [depth, back] {
            ps_depth_free(p);
        }
        ps_cube_free(cube);
        ps_model_free(model);
    }
}
