//! Mean pairwise cosine similarity of node embeddings after repeated
//! propagation: rows become more alike with depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lightst::data::{synth_generate, SynthConfig};
use lightst::eval::oversmoothing_score;
use lightst::Tensor;

fn main() -> lightst::Result<()> {
    let (_, g) = synth_generate(&SynthConfig {
        nodes: 32,
        steps: 1,
        ..SynthConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut layers = vec![Tensor::uniform([32, 8], 0.0, 1.0, &mut rng)];
    for _ in 0..8 {
        let next = g.propagate(layers.last().unwrap())?;
        layers.push(next);
    }
    for (l, s) in oversmoothing_score(&layers, 32)?.iter().enumerate() {
        println!("layer {l}: mean pairwise cosine {s:.4}");
    }
    Ok(())
}
