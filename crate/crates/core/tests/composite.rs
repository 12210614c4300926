//! The joint objectives are plain sums of their components, both in value
//! and in gradient.

use proptest::prelude::*;
use wpnmt::data::{gen_synthetic, Batch, SentencePair, SyntheticTask, NUM_RESERVED};
use wpnmt::model::{Heads, Init, Model, ModelDims, ModelVars};
use wpnmt::numerics::Tape;
use wpnmt::rng::{stream_rng, Stream};
use wpnmt::training::{build_loss, collect_grads, evaluate_loss, LossGraph, Objective};

fn fixture(seed: u64, rows: usize) -> (Model<f64>, Batch) {
    let init = Init { std: 0.4 };
    let mut m = Model::new(ModelDims::new(10, 11, 5, 6), init, &mut stream_rng(seed, Stream::Init));
    m.add_heads(Heads::BOTH, init, &mut stream_rng(seed, Stream::Heads));
    let pairs: Vec<SentencePair> = gen_synthetic(SyntheticTask::DigitShift, rows, 10, 1..=6, seed)
        .unwrap()
        .iter()
        .map(|(x, y)| {
            let ids = |t: &Vec<String>| t.iter().map(|s| NUM_RESERVED + s.parse::<usize>().unwrap()).collect();
            SentencePair::new(ids(x), ids(y))
        })
        .collect();
    (m, Batch::from_pairs(&pairs.iter().collect::<Vec<_>>()).unwrap())
}

fn grads_of(
    model: &Model<f64>,
    batch: &Batch,
    objective: Objective,
    pick: impl Fn(&LossGraph) -> wpnmt::numerics::Var,
) -> Vec<(String, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::trainable(&mut tape, model).unwrap();
    let g = build_loss(&mut tape, &vars, batch, objective, None).unwrap();
    collect_grads(&tape.backward(pick(&g)).unwrap())
}

#[test]
fn composite_gradient_is_sum_of_component_gradients() {
    for seed in 0..4 {
        let (m, b) = fixture(seed, 3);
        let parts = [
            grads_of(&m, &b, Objective::L3, |g| g.l_t),
            grads_of(&m, &b, Objective::L3, |g| g.l_wpe.unwrap()),
            grads_of(&m, &b, Objective::L3, |g| g.l_wpd.unwrap()),
        ];
        for (obj, used) in [
            (Objective::Base, [true, false, false]),
            (Objective::L1, [true, true, false]),
            (Objective::L2, [true, false, true]),
            (Objective::L3, [true, true, true]),
        ] {
            let joint = grads_of(&m, &b, obj, |g| g.composite);
            for (name, g) in &joint {
                for (i, &v) in g.iter().enumerate() {
                    let mut sum = 0.0;
                    for (part, &on) in parts.iter().zip(&used) {
                        if on {
                            if let Some((_, pg)) = part.iter().find(|(n, _)| n == name) {
                                sum += pg[i];
                            }
                        }
                    }
                    assert!((v - sum).abs() < 1e-6, "{obj} {name}[{i}]: {v} vs {sum}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_value_is_sum_of_components(seed in 0u64..1000, rows in 1usize..5) {
        let (m, b) = fixture(seed, rows);
        let m32: Model<f32> = m.cast();
        for obj in [Objective::Base, Objective::L1, Objective::L2, Objective::L3] {
            let v = evaluate_loss(&m32, &b, obj).unwrap();
            let sum = v.l_t + v.l_wpe.unwrap_or(0.0) + v.l_wpd.unwrap_or(0.0);
            prop_assert!((v.composite - sum).abs() < 1e-6 * sum.abs().max(1.0));
            prop_assert_eq!(v.l_wpe.is_some(), obj.heads().wpe);
            prop_assert_eq!(v.l_wpd.is_some(), obj.heads().wpd);
            prop_assert!(v.l_t > 0.0);
        }
    }
}
