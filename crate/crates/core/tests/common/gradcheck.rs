//! Finite-difference check of the predictor's analytic gradients in f64.

use mdpolicy::diffusion::LossWeighting;
use mdpolicy::predictor::{batch_loss, prepare_batch, HeadKind, Model, PredictorConfig, Sample};
use mdpolicy::rng;
use mdpolicy::vocab::VocabLayout;
use rand::Rng;

const H: f64 = 1e-3;

fn micro(layout: &VocabLayout, head: HeadKind) -> PredictorConfig {
    PredictorConfig {
        embed_dim: 16,
        layers: 1,
        heads: 2,
        mlp_ratio: 4,
        max_seq_len: 11,
        vocab_in: layout.input_vocab(),
        classes_out: head.classes(layout),
        cond_dim: 5,
        obs_tokens: 2,
        prompt_len: 2,
        n_tasks: 3,
        head,
    }
}

fn samples(layout: &VocabLayout, n: usize) -> Vec<Sample> {
    let mut r = rng::from_seed(77);
    (0..n)
        .map(|_| Sample {
            prompt: vec![r.gen_range(0..layout.base_vocab_size), r.gen_range(0..layout.base_vocab_size)],
            obs: (0..5).map(|_| r.gen_range(-1.0..1.0)).collect(),
            task_id: r.gen_range(0..3),
            answer: (0..6).map(|_| layout.special_token_base + r.gen_range(0..layout.action_vocab_size)).collect(),
        })
        .collect()
}

/// Max relative error between analytic and finite-difference gradients,
/// with the maximum taken per named tensor.
pub fn check(head: HeadKind, weighting: LossWeighting) -> Vec<(String, f64)> {
    let layout = VocabLayout::new(8, 4).unwrap();
    let mut model: Model<f64> = Model::init(micro(&layout, head), &mut rng::from_seed(3));
    // Non-trivial norms and biases so their gradients are exercised.
    let mut r = rng::from_seed(8);
    for info in model.layout.tensors.clone() {
        if info.name.ends_with(".b") || info.name.ends_with(".g") {
            for p in &mut model.params[info.range()] {
                *p += r.gen_range(-0.3..0.3);
            }
        }
    }
    let data = samples(&layout, 3);
    let refs: Vec<&Sample> = data.iter().collect();
    let batch = prepare_batch(&refs, &layout, head, 0.3, &mut rng::from_seed(1)).unwrap();
    let (_, grads) = batch_loss(&model, &batch, weighting, true).unwrap();
    let grads = grads.unwrap();

    let mut out = Vec::new();
    for info in model.layout.tensors.clone() {
        let mut worst: f64 = 0.0;
        for i in info.range() {
            let orig = model.params[i];
            let mut at = |x: f64| {
                model.params[i] = x;
                batch_loss(&model, &batch, weighting, false).unwrap().0
            };
            // Five-point stencil, exact to fourth order in H.
            let numeric = (8.0 * (at(orig + H) - at(orig - H)) - (at(orig + 2.0 * H) - at(orig - 2.0 * H))) / (12.0 * H);
            model.params[i] = orig;
            let analytic = grads[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
        out.push((info.name.clone(), worst));
    }
    out
}
