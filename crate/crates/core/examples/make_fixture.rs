//! Regenerates `fixtures/`: a real-domain synthetic bundle, AlignNet weights
//! trained coarse-to-fine on it, and the built-in body template.
//!
//! cargo run --release -p hsrecon-core --example make_fixture [out_dir]

use std::path::PathBuf;

use hsrecon::body::{procedural_template, save_template};
use hsrecon::synthetic::{attach_alignment, real_world, world_to_bundle};
use hsrecon::tensor_io::{write_bundle, PoseRecord};
use hsrecon::train::{train_synthetic, Stage, TrainConfig};

const SEED: u64 = 0;

fn main() -> hsrecon::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    let tmpl = procedural_template();
    let cfg = TrainConfig::default();
    let (net, report) = train_synthetic(&tmpl, &cfg, SEED, Stage::Fine, cfg.fine_steps)?;
    println!("scale error {:.4}, translation error {:.4}, recovered {}", report.eval.scale_rel_error, report.eval.mean_translation_error, report.eval.recovered);

    let world = real_world(&tmpl, &cfg.world, SEED)?;
    let mut bundle = world_to_bundle(&world);
    attach_alignment(&mut bundle, &net.forward(&world.tokens)?);
    bundle.camera_poses = Some(
        (0..world.frames.len())
            .map(|i| PoseRecord { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.02 * i as f64, 0.0, 0.0] })
            .collect(),
    );
    write_bundle(&bundle, out.join("bundle"))?;
    net.save(out.join("weights"))?;
    save_template(&tmpl, out.join("template"))?;
    println!("wrote {}", out.display());
    Ok(())
}
