use std::ffi::CString;
use std::process::Command;
use std::ptr;

use omgsr::checkpoint::CheckpointBundle;
use omgsr::config::Config;
use omgsr::infer;
use omgsr::models::Models;
use omgsr::tensor::{seeded_rng, Tensor};
use omgsr_ffi::*;

fn tiny_bundle(dir: &std::path::Path) -> CheckpointBundle {
    let mut cfg = Config::default();
    cfg.model.vae.downsample_factor = 2;
    cfg.model.vae.hidden = 8;
    cfg.model.denoiser.hidden = 8;
    cfg.tiling.stage2_scale = 2;
    let models = Models::new(cfg.model.clone(), 5).unwrap();
    let mut bundle = CheckpointBundle::new(cfg, models, "finetune");
    bundle.t_star = Some(195);
    bundle.save(dir).unwrap();
    bundle
}

#[test]
fn restore_through_c_abi_matches_rust() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = tiny_bundle(dir.path());
    let x =
        Tensor::rand_uniform(&[3, 8, 8], -1.0, 1.0, &mut seeded_rng(9)).map(|v| v as f32 as f64);
    let lq: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();

    let mut model = ptr::null_mut();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { omgsr_model_load(path.as_ptr(), &mut model) },
        OmgsrStatus::Ok
    );
    assert_eq!(unsafe { omgsr_model_scale(model) }, 4);

    let mut out = vec![0f32; 3 * 32 * 32];
    let status = unsafe { omgsr_restore(model, lq.as_ptr(), 3, 8, 8, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, OmgsrStatus::Ok);
    let want = infer::restore(&bundle, &x).unwrap();
    for (a, b) in out.iter().zip(want.data()) {
        assert_eq!(*a, *b as f32);
    }

    let mut small = vec![0f32; 10];
    let status =
        unsafe { omgsr_restore(model, lq.as_ptr(), 3, 8, 8, small.as_mut_ptr(), small.len()) };
    assert_eq!(status, OmgsrStatus::Shape);

    let mut tiled = vec![0f32; 3 * 64 * 64];
    let status = unsafe {
        omgsr_tiled_restore(
            model,
            lq.as_ptr(),
            3,
            8,
            8,
            32,
            8,
            tiled.as_mut_ptr(),
            tiled.len(),
        )
    };
    assert_eq!(status, OmgsrStatus::Ok);
    let want = infer::tiled_restore(&bundle, &x, 32, 8).unwrap();
    assert!(tiled.iter().zip(want.data()).all(|(a, b)| *a == *b as f32));

    unsafe { omgsr_model_free(model) };
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/omgsr.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ OmgsrChunkPlan *p = 0; \
             return omgsr_plan_chunks(512, 512, 224, 32, &p) == OMGSR_STATUS_OK ? 0 : 1; }}\n"
        ),
    )
    .unwrap();
    let status = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}
