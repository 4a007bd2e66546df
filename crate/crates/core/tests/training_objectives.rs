//! Reductions between the training objectives and linearity of the
//! reweighted gradient.

use gdrt::corpus::{generate_corpus, Corpus, CorpusConfig};
use gdrt::dro::compute_group_weights;
use gdrt::model::{backward, LossGraph, LossTerm, ModelConfig, ModelParams};
use gdrt::relevance::{partition_tokens, token_relevance, GroupingMethod};
use gdrt::trainer::{train, Method, TrainConfig};

fn corpus() -> Corpus {
    generate_corpus(&CorpusConfig {
        num_users: 400,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn init(c: &Corpus, seed: u64) -> ModelParams {
    ModelParams::init(&ModelConfig {
        embed_dim: 16,
        ..ModelConfig::new(c.config.vocab_size, c.max_sequence_len(), seed)
    })
    .unwrap()
}

fn config(method: Method, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr: 1e-3,
        ..TrainConfig::new(method, 11)
    }
}

#[test]
fn one_group_gdrt_is_sft() {
    let c = corpus();
    let p = init(&c, 1);
    let scores = token_relevance(&p, &c.train).unwrap();
    let one = partition_tokens(&scores, 1, GroupingMethod::Kmeans, 0).unwrap();
    // 320 instances in batches of 16: 20 steps per epoch
    let sft = train(&p, &c.train, None, None, &config(Method::Sft, 5)).unwrap();
    let gdrt = train(
        &p,
        &c.train,
        Some(&one),
        None,
        &TrainConfig {
            groups: 1,
            tau: 0.3,
            ..config(Method::Gdrt, 5)
        },
    )
    .unwrap();
    assert_eq!(sft.log.steps.len(), 100);
    for (a, b) in sft.log.steps.iter().zip(&gdrt.log.steps) {
        assert!(
            (a.loss - b.loss).abs() <= 1e-12,
            "step {}: {} vs {}",
            a.step,
            a.loss,
            b.loss
        );
        assert_eq!(b.weights, vec![1.0]);
    }
    assert_eq!(
        sft.checkpoints.last().unwrap().slices,
        gdrt.checkpoints.last().unwrap().slices
    );
}

#[test]
fn huge_temperature_gdrt_approaches_balanced() {
    let c = corpus();
    let p = init(&c, 2);
    let scores = token_relevance(&p, &c.train).unwrap();
    let groups = partition_tokens(&scores, 5, GroupingMethod::Kmeans, 0).unwrap();
    let gdrt = train(
        &p,
        &c.train,
        Some(&groups),
        None,
        &TrainConfig {
            tau: 1e9,
            ..config(Method::Gdrt, 1)
        },
    )
    .unwrap();
    let balanced = train(&p, &c.train, Some(&groups), None, &config(Method::Balanced, 1)).unwrap();
    for (a, b) in gdrt.log.steps.iter().zip(&balanced.log.steps) {
        for q in &a.weights {
            assert!((q - 0.2).abs() < 1e-8);
        }
        assert!((a.loss - b.loss).abs() < 1e-6 * b.loss.abs().max(1.0));
    }
}

#[test]
fn reweighted_gradient_is_weighted_sum_of_group_gradients() {
    let c = corpus();
    let p = init(&c, 3);
    let scores = token_relevance(&p, &c.train).unwrap();
    let g = 3;
    let groups = partition_tokens(&scores, g, GroupingMethod::Quantile, 0).unwrap();
    let batch = &c.train[..12];
    let labels: Vec<&[usize]> = batch.iter().map(|i| groups.groups_for(i).unwrap()).collect();
    let mut count = vec![0usize; g];
    for l in &labels {
        for &x in l.iter() {
            count[x] += 1;
        }
    }
    let q = compute_group_weights(&[2.0, 1.0, 3.5], 0.5).unwrap();
    let graph_for = |weight: &dyn Fn(usize) -> f64| LossGraph {
        terms: batch
            .iter()
            .zip(&labels)
            .map(|(inst, l)| LossTerm {
                tokens: inst.full_sequence(),
                targets: inst
                    .target_predictions()
                    .iter()
                    .zip(l.iter())
                    .map(|(&(pos, tok), &grp)| (pos, tok, weight(grp)))
                    .collect(),
            })
            .collect(),
        constant: 0.0,
    };
    let (total, grad) = backward(&p, &graph_for(&|grp| q[grp] / count[grp] as f64)).unwrap();
    let mut sum_loss = 0.0;
    let mut sum_grad = vec![0.0; p.len()];
    for target in 0..g {
        let (l, gr) = backward(
            &p,
            &graph_for(&|grp| if grp == target { 1.0 / count[grp] as f64 } else { 0.0 }),
        )
        .unwrap();
        sum_loss += q[target] * l;
        for (a, b) in sum_grad.iter_mut().zip(gr) {
            *a += q[target] * b;
        }
    }
    assert!((total - sum_loss).abs() < 1e-12);
    let scale = grad.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for (a, b) in grad.iter().zip(&sum_grad) {
        assert!((a - b).abs() <= 1e-12 * scale.max(1.0));
    }

    // scaling the loss scales the gradient
    let graph = graph_for(&|_| 1.0);
    let (l1, g1) = backward(&p, &graph).unwrap();
    let (l3, g3) = backward(&p, &graph.scaled(-2.5)).unwrap();
    assert!((l3 + 2.5 * l1).abs() < 1e-9);
    for (a, b) in g1.iter().zip(&g3) {
        assert!((b + 2.5 * a).abs() < 1e-10);
    }
}
