use scaledit_core::checkpoint::Checkpoint;
use scaledit_core::codec::{aggregate, quantize};
use scaledit_core::datagen::Synthesizer;
use scaledit_core::inference::{generate, SamplerConfig};
use scaledit_core::model::Model;
use scaledit_core::img::Rgb8;
use std::collections::BTreeMap;

#[test]
#[ignore]
fn debug_generation() {
    let ck = Checkpoint::load(std::path::Path::new("/tmp/calib/run/ckpt_latest.vare")).unwrap();
    let mut model = Model::init(ck.config.clone()).unwrap();
    model.params = ck.model.clone();
    let ops: BTreeMap<_, _> = [(scaledit_core::datagen::OpKind::Recolor, 1.0)].into_iter().collect();
    let synth = Synthesizer::new(64, 1234, &ops).unwrap();
    let sample = synth.sample(20000);
    println!("instruction: {}", sample.instruction);

    // Codec round trip of the source.
    let feat = ck.codec.encode(&sample.source.to_float()).unwrap();
    let stack = quantize(&feat, &ck.codebook, &ck.config.schedule).unwrap();
    let full = aggregate(&stack, 3, &ck.codebook).unwrap();
    let recon = Rgb8::from_float(&ck.codec.decode(&full).unwrap());
    let mut max_err = 0i32;
    for (a, b) in recon.data.iter().zip(&sample.source.data) {
        max_err = max_err.max((*a as i32 - *b as i32).abs());
    }
    println!("codec roundtrip max per-channel err (u8): {max_err}");

    for (cfg, temp) in [(1.0, 0.0), (4.0, 0.5), (4.0, 0.0)] {
        let sampler = SamplerConfig { cfg, temperature: temp, seed: 7 };
        let gen = generate(&model, &ck.codec, &ck.codebook, &sample.source, &sample.instruction, &sampler).unwrap();
        let scores = scaledit_core::evalkit::synthetic_scores(&sample, &gen.image).unwrap();
        println!("cfg {cfg} temp {temp}: suc {:.2} over {:.2} bal {:.2}", scores.success, scores.overedit, scores.balance);
        // Compare generated stack to the source stack per scale.
        for (k, (g, s)) in gen.stack.maps.iter().zip(&stack.maps).enumerate() {
            let same = g.iter().zip(s.iter()).filter(|(a, b)| a == b).count();
            println!("  scale {}: {}/{} indices match source", k + 1, same, g.len());
        }
        println!("  logit stats: {:?}", gen.trace.scales.iter().map(|s| (s.logit_min, s.logit_max)).collect::<Vec<_>>());
        // Target stack for reference
        let tfeat = ck.codec.encode(&sample.target.to_float()).unwrap();
        let tstack = quantize(&tfeat, &ck.codebook, &ck.config.schedule).unwrap();
        for (k, (g, t)) in gen.stack.maps.iter().zip(&tstack.maps).enumerate() {
            let same = g.iter().zip(t.iter()).filter(|(a, b)| a == b).count();
            println!("  scale {}: {}/{} indices match target", k + 1, same, g.len());
        }
    }
}
