//! Pretraining and both adapter stages on a small model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchanim_core::denoiser::{weights_to_bytes, Attached, DenoiserConfig, DenoiserWeights};
use sketchanim_core::diffusion::{LatentEncoder, NoiseSchedule};
use sketchanim_core::lora::{adapters_to_bytes, is_spatial_key, is_temporal_key};
use sketchanim_core::raster::{render, RasterVideo, SoftnessConfig};
use sketchanim_core::synthetic::{demo_sketch, make_synthetic_video, motion_prompt, GeometryParams, MotionKind};
use sketchanim_core::trainer::{pretrain, pretrain_heldout_loss, pretrain_vocabulary, train_appearance, train_motion, HeldOut, PretrainConfig, StageConfig};

const RES: usize = 32;
const FRAMES: usize = 4;

fn setup() -> (DenoiserWeights, NoiseSchedule, LatentEncoder, PretrainConfig) {
    let vocab = pretrain_vocabulary();
    let names: Vec<&str> = vocab.iter().map(String::as_str).collect();
    let cfg = DenoiserConfig::new(16, 4, RES / 2, RES / 2, FRAMES).unwrap();
    let w = DenoiserWeights::init(cfg, &names, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let pcfg = PretrainConfig {
        steps: 400,
        frames: FRAMES,
        resolution: (RES, RES),
        ..Default::default()
    };
    (w, NoiseSchedule::cosine(1000).unwrap(), LatentEncoder::new(2).unwrap(), pcfg)
}

#[test]
fn pretraining_cuts_heldout_loss_and_is_reproducible() {
    let (mut w, sched, enc, pcfg) = setup();
    let before = pretrain_heldout_loss(&w, &sched, &enc, &pcfg, 64, 99).unwrap();
    let mut twin = w.clone();
    pretrain(&mut w, &sched, &enc, &pcfg).unwrap();
    let after = pretrain_heldout_loss(&w, &sched, &enc, &pcfg, 64, 99).unwrap();
    eprintln!("held-out loss {before:.4} -> {after:.4}");
    assert!(after <= 0.7 * before);
    pretrain(&mut twin, &sched, &enc, &pcfg).unwrap();
    assert_eq!(weights_to_bytes(&twin), weights_to_bytes(&w));
}

#[test]
fn stages_leave_the_base_alone_and_touch_only_their_blocks() {
    let (mut w, sched, enc, pcfg) = setup();
    pretrain(&mut w, &sched, &enc, &PretrainConfig { steps: 100, ..pcfg }).unwrap();
    let frozen = weights_to_bytes(&w);
    let soft = SoftnessConfig::default();
    let cfg = StageConfig { steps: 150, eval_draws: 64, ..Default::default() };

    let app = train_appearance(&w, &sched, &enc, &demo_sketch(), &soft, (RES, RES), "a house", &cfg).unwrap();
    assert!(app.adapters.adapters().iter().all(|a| is_spatial_key(&a.target)));
    let again = train_appearance(&w, &sched, &enc, &demo_sketch(), &soft, (RES, RES), "a house", &cfg).unwrap();
    assert_eq!(adapters_to_bytes(&again.adapters), adapters_to_bytes(&app.adapters));

    // Held-out loss against the same model with no adapters.
    let z = enc.encode(&RasterVideo::new(vec![render(&demo_sketch(), RES, RES, &soft).unwrap()]).unwrap()).unwrap();
    let ho = HeldOut::new(&sched, 1, RES / 2, RES / 2, 64, 3);
    let base = ho.loss(&w, &sched, &z, &app.prompt.1, &[]).unwrap();
    let tuned = ho.loss(&w, &sched, &z, &app.prompt.1, &Attached::all(app.adapters.adapters(), 1.0, false)).unwrap();
    eprintln!("stage 1 held-out {base:.4} -> {tuned:.4}");
    assert!(tuned < base);

    let clip = make_synthetic_video(MotionKind::Translate, FRAMES, RES, RES, &GeometryParams::default()).unwrap();
    let prompt = motion_prompt("a square", MotionKind::Translate);
    let mot = train_motion(&w, &sched, &enc, &clip.video, &prompt, &StageConfig { steps: 40, ..cfg }).unwrap();
    assert!(mot.spatial.adapters().iter().all(|a| is_spatial_key(&a.target)));
    assert!(mot.motion.adapters().iter().all(|a| is_temporal_key(&a.target)));
    assert!(!mot.prompt_learned);
    for row in &mot.trace {
        assert!((row.loss - row.spatial - row.temporal).abs() <= 1e-9);
    }
    assert_eq!(weights_to_bytes(&w), frozen);
}
