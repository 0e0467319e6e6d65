//! Adapter gradients of the denoiser loss against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchanim_core::denoiser::{eval_loss, loss_and_grads, Attached, DenoiserConfig, DenoiserWeights, FrameFilter, Sample, Trainable};
use sketchanim_core::diffusion::{LatentVideo, NoiseSchedule};
use sketchanim_core::lora::{AdapterRole, AdapterSet};

const H: f64 = 1e-4;

struct Fixture {
    weights: DenoiserWeights,
    sched: NoiseSchedule,
    z0: LatentVideo,
    eps: LatentVideo,
    prompt: Vec<f64>,
    sets: Vec<AdapterSet>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DenoiserConfig::new(16, 2, 4, 4, 3).unwrap();
    let mut weights = DenoiserWeights::init(cfg, &["a square"], &mut rng).unwrap();
    // The zero-initialized head would make every upstream gradient vanish.
    let names: Vec<String> = weights.tensors().into_iter().map(|t| t.0).collect();
    for (name, t) in names.iter().zip(weights.tensors_mut()) {
        if name.starts_with("unembed") {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let mut sets = vec![
        AdapterSet::fresh(AdapterRole::Appearance, 16, 3, 1.0, &mut rng).unwrap(),
        AdapterSet::fresh(AdapterRole::Motion, 16, 3, 0.7, &mut rng).unwrap(),
    ];
    for set in &mut sets {
        for ad in set.adapters_mut() {
            ad.b.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    Fixture {
        weights,
        sched: NoiseSchedule::cosine(100).unwrap(),
        z0: LatentVideo::randn(3, 4, 4, &mut rng),
        eps: LatentVideo::randn(3, 4, 4, &mut rng),
        prompt: (0..16).map(|_| rng.random_range(-0.5..0.5)).collect(),
        sets,
    }
}

fn attach<'a>(sets: &'a [AdapterSet], lambdas: [f64; 2]) -> Vec<Attached<'a>> {
    sets.iter()
        .zip(lambdas)
        .flat_map(|(s, l)| Attached::all(s.adapters(), l, true))
        .collect()
}

fn loss(f: &Fixture, sets: &[AdapterSet], lambdas: [f64; 2], t: usize, filter: FrameFilter) -> f64 {
    let s = Sample { z0: &f.z0, eps: &f.eps, t, prompt: &f.prompt };
    eval_loss(&f.weights, &f.sched, &s, &attach(sets, lambdas), filter).unwrap()
}

fn check(seed: u64, t: usize, lambdas: [f64; 2], filter: FrameFilter) {
    let f = fixture(seed);
    let s = Sample { z0: &f.z0, eps: &f.eps, t, prompt: &f.prompt };
    let trainable = Trainable { base: false, prompt: false };
    let (_, g) = loss_and_grads(&f.weights, &f.sched, &s, &attach(&f.sets, lambdas), trainable, filter).unwrap();
    let mut slot = 0;
    let mut worst: f64 = 0.0;
    for si in 0..f.sets.len() {
        for ai in 0..f.sets[si].adapters().len() {
            let (db, da) = g.adapters[slot].as_ref().expect("trainable adapter has gradients");
            slot += 1;
            for (which, analytic) in [("B", db), ("A", da)] {
                for idx in 0..analytic.len() {
                    let perturbed = |delta: f64| {
                        let mut sets = f.sets.clone();
                        let ad = &mut sets[si].adapters_mut()[ai];
                        let m = if which == "B" { &mut ad.b } else { &mut ad.a };
                        m.as_slice_mut().unwrap()[idx] += delta;
                        loss(&f, &sets, lambdas, t, filter)
                    };
                    let fd = (perturbed(H) - perturbed(-H)) / (2.0 * H);
                    let an = analytic.as_slice().unwrap()[idx];
                    let scale = an.abs().max(fd.abs());
                    let rel = if scale < 1e-8 { 0.0 } else { (an - fd).abs() / scale };
                    worst = worst.max(rel);
                    assert!(rel < 1e-2, "{} d{which}[{idx}]: analytic {an:e} vs fd {fd:e}", f.sets[si].adapters()[ai].target);
                }
            }
        }
    }
    eprintln!("seed {seed} t {t} {filter:?}: worst relative error {worst:e}");
}

#[test]
fn adapter_gradients_all_frames() {
    check(1, 40, [1.0, 1.0], FrameFilter::AllFrames);
    check(2, 85, [0.5, 2.0], FrameFilter::AllFrames);
}

#[test]
fn adapter_gradients_single_frame() {
    let f = fixture(3);
    let s = Sample { z0: &f.z0, eps: &f.eps, t: 20, prompt: &f.prompt };
    let att = attach(&f.sets, [1.0, 1.0]);
    let (_, g) = loss_and_grads(&f.weights, &f.sched, &s, &att, Trainable { base: false, prompt: false }, FrameFilter::SingleFrame(1)).unwrap();
    // Temporal adapters sit on a bypassed block.
    for (at, grad) in att.iter().zip(&g.adapters) {
        let (db, da) = grad.as_ref().unwrap();
        if at.adapter.target.starts_with("temporal") {
            assert!(db.iter().chain(da.iter()).all(|&v| v == 0.0));
        }
    }
    check(3, 20, [1.0, 1.0], FrameFilter::SingleFrame(1));
}
