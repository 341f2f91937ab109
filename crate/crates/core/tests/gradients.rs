//! Central-difference checks of the analytic backward pass.

use espace::calib::CandidateKind;
use espace::linalg::{random_orthonormal, OrderingMode};
use espace::toymodel::{init_model, synth_task, Input, ShardSizes};
use espace::{LayerId, Model, ModelConfig, Projection};

const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

fn rel(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(FLOOR)
}

fn max_weight_error(model: &Model, tokens: &[usize], targets: &[usize]) -> f64 {
    let trace = model.forward(Input::Tokens(tokens), targets).unwrap();
    let grads = model.backward(&trace).unwrap();
    let mut worst = 0.0f64;
    for (i, layer) in model.layers().iter().enumerate() {
        let w = layer.weight();
        for idx in 0..w.as_slice().len() {
            let loss_at = |d: f64| {
                let mut m = model.clone();
                let mut wp = w.clone();
                wp.as_mut_slice()[idx] += d;
                m.set_weight(LayerId(i), wp).unwrap();
                m.forward(Input::Tokens(tokens), targets).unwrap().loss
            };
            let fd = (loss_at(EPS) - loss_at(-EPS)) / (2.0 * EPS);
            worst = worst.max(rel(grads.dw[i].as_slice()[idx], fd));
        }
    }
    worst
}

fn setup(blocks: usize) -> (Model, Vec<usize>, Vec<usize>) {
    let cfg = ModelConfig {
        hidden: 16,
        blocks,
        vocab: 16,
        seq_len: 6,
    };
    let d = synth_task(
        4,
        16,
        6,
        ShardSizes {
            train: 1,
            calib: 1,
            val: 1,
            test: 1,
        },
    )
    .unwrap();
    let s = d.train[0].clone();
    (init_model(cfg, 40 + blocks as u64).unwrap(), s.tokens, s.targets)
}

#[test]
fn weight_gradients_without_projections() {
    let (model, tokens, targets) = setup(1);
    let worst = max_weight_error(&model, &tokens, &targets);
    assert!(worst <= 1e-4, "max relative error {worst:e}");
}

#[test]
fn weight_gradients_through_attached_projections() {
    let (mut model, tokens, targets) = setup(2);
    for i in [0usize, 3, 5, 8] {
        let k = model.layers()[i].spec().k;
        let p = Projection::new(
            LayerId(i),
            CandidateKind::Go,
            random_orthonormal(k, k / 4, i as u64).unwrap(),
            OrderingMode::Algebraic,
        )
        .unwrap();
        model.attach_projection(LayerId(i), p).unwrap();
    }
    let worst = max_weight_error(&model, &tokens, &targets);
    assert!(worst <= 1e-4, "max relative error {worst:e}");
}
