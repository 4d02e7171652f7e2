#![allow(dead_code)]

use std::path::{Path, PathBuf};

use elicit_core::config::RunConfig;
use elicit_core::engine::FitRecord;
use elicit_core::Registry;

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn fixture(name: &str) -> RunConfig {
    RunConfig::from_file(&fixture_path(name), &Registry::default()).unwrap()
}

/// A fixture shrunk to a few epochs on a small simulation budget.
pub fn small(name: &str, epochs: usize) -> RunConfig {
    let mut c = fixture(name);
    c.trainer.epochs = epochs;
    c.trainer.batch_size = 4;
    c.trainer.num_samples = 30;
    c.trainer.progress = 0;
    if let Some(init) = c.initializer.as_mut() {
        init.iterations = Some(4);
    }
    if let Some(net) = c.networks.as_mut() {
        net.coupling_settings.dense_args.units = 8;
    }
    c
}

/// A record with wall-clock fields zeroed, for equality checks.
pub fn timeless(mut r: FitRecord) -> FitRecord {
    for e in &mut r.history.epochs {
        e.time = 0.0;
    }
    r
}

pub mod records {
    use std::collections::BTreeMap;

    use elicit_core::engine::{EpochRecord, FitRecord, History, Results, RunFailure};
    use elicit_core::initializer::InitDiagnostics;
    use elicit_core::optim::Variable;
    use elicit_core::Array;
    use proptest::collection::{btree_map, vec};
    use proptest::prelude::*;

    pub fn float() -> impl Strategy<Value = f64> {
        prop_oneof![
            4 => -1e3..1e3f64,
            1 => proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO,
        ]
    }

    fn array() -> impl Strategy<Value = Array> {
        vec(1usize..4, 0..3).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            vec(float(), n).prop_map(move |data| Array::new(shape.clone(), data).unwrap())
        })
    }

    fn arrays() -> impl Strategy<Value = BTreeMap<String, Array>> {
        btree_map("[a-z_]{1,8}", array(), 0..4)
    }

    fn variable() -> impl Strategy<Value = Variable> {
        ("[a-z0-9_/]{1,10}", vec(1usize..4, 0..3)).prop_flat_map(|(name, shape)| {
            let n: usize = shape.iter().product();
            vec(float(), n).prop_map(move |values| Variable { name: name.clone(), shape: shape.clone(), values })
        })
    }

    fn init() -> impl Strategy<Value = Option<InitDiagnostics>> {
        proptest::option::of((1usize..5, 1usize..4).prop_flat_map(|(n, d)| {
            (vec(vec(float(), d), n), vec(proptest::option::of(float()), n), 0..n).prop_map(
                |(init_matrix, init_loss_list, selected_index)| InitDiagnostics {
                    init_matrix,
                    init_loss_list,
                    selected_index,
                },
            )
        }))
    }

    fn history() -> impl Strategy<Value = History> {
        (0usize..4, 0usize..4, 0usize..3, 0usize..6).prop_flat_map(|(c, h, g, e)| {
            let epoch = (float(), vec(float(), c), 0.0..100.0f64, vec(float(), h), vec(float(), g)).prop_map(
                |(loss, loss_component, time, hyperparameter, hyperparameter_gradient)| EpochRecord {
                    loss,
                    loss_component,
                    time,
                    hyperparameter,
                    hyperparameter_gradient,
                },
            );
            (vec("[a-z_0-9]{1,6}", c), vec("[a-z_0-9]{1,6}", h), vec("[a-z_0-9]{1,6}", g), vec(epoch, e)).prop_map(
                |(component_names, hyperparameter_names, gradient_names, epochs)| History {
                    component_names,
                    hyperparameter_names,
                    gradient_names,
                    epochs,
                },
            )
        })
    }

    fn results() -> impl Strategy<Value = Results> {
        (
            vec("[a-z0-9]{1,6}", 1..5),
            array(),
            arrays(),
            arrays(),
            arrays(),
            btree_map("[a-z_]{1,8}", vec(float(), 0..4), 0..4),
            float(),
            btree_map("[a-z_]{1,8}", float(), 0..4),
            btree_map("[a-z0-9]{1,6}", float(), 0..8),
            vec(variable(), 0..4),
            init(),
            any::<u64>(),
        )
            .prop_map(
                |(
                    parameter_names,
                    prior_samples,
                    model_samples,
                    target_quantities,
                    elicited_statistics,
                    expert_elicited_statistics,
                    final_loss,
                    final_loss_component,
                    hyperparameters,
                    variables,
                    init,
                    seed,
                )| Results {
                    parameter_names,
                    prior_samples,
                    model_samples,
                    target_quantities,
                    elicited_statistics,
                    expert_elicited_statistics,
                    final_loss,
                    final_loss_component,
                    hyperparameters,
                    variables,
                    init,
                    seed,
                },
            )
    }

    pub fn fit_record() -> impl Strategy<Value = FitRecord> {
        (0usize..100, any::<u64>(), history(), results()).prop_map(|(run, seed, history, results)| FitRecord {
            run,
            seed,
            history,
            results,
        })
    }

    pub fn failure() -> impl Strategy<Value = RunFailure> {
        (0usize..10, any::<u64>(), "[a-z-]{1,12}", any::<bool>(), ".{0,40}").prop_map(
            |(run, seed, tag, numerical, message)| RunFailure {
                run,
                seed,
                tag,
                numerical,
                message,
            },
        )
    }
}
