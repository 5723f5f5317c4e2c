//! Scratch diagnostics for the recovery pipeline (ignored by default).

use flow4d_core::postopt::{optimize, PostOptConfig};
use flow4d_core::synth::make_scene;

#[test]
#[ignore]
fn diag_recovery_params() {
    let scene = make_scene(1, 12, 32, 32).expect("scene");
    let result = optimize(&scene.pointmaps, &PostOptConfig::default()).expect("optimize");
    eprintln!("truth focal: {:?}", &scene.cams.focals[..3]);
    eprintln!("rec   focal: {:?}", &result.cams.focals[..3]);
    for i in [0usize, 3, 6, 11] {
        eprintln!(
            "frame {i}: truth o = {:?} rec o = {:?}",
            scene.cams.centers[i], result.cams.centers[i]
        );
        eprintln!(
            "         truth q = {:?} rec q = {:?}",
            scene.cams.rotations[i], result.cams.rotations[i]
        );
    }
    let td = scene.depths.depth_frame(0);
    let rd = result.depths.depth_frame(0);
    let mut rel: Vec<f64> = td
        .iter()
        .zip(rd.iter())
        .map(|(t, r)| (r - t).abs() / t)
        .collect();
    rel.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eprintln!(
        "frame0 depth rel err: median {:.3e} p90 {:.3e} max {:.3e}",
        rel[rel.len() / 2],
        rel[rel.len() * 9 / 10],
        rel[rel.len() - 1]
    );
    let l = result.trace.len();
    eprintln!(
        "trace: first {:.4} | {:?}",
        result.trace[0],
        [
            result.trace[l / 4],
            result.trace[l / 2],
            result.trace[3 * l / 4],
            result.trace[l - 1]
        ]
    );
}
