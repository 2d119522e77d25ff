mod common;

use common::{gradient_instance, RefObjective};
use pslora::lora::{BaseModel, ContinualModel, DenseModel, HistoryMode};
use pslora::regularizers::RegularizerConfig;
use pslora::trainer::build_objective;
use pslora::{Matrix, Tape};

#[test]
fn tape_gradients_match_finite_differences() {
    for seed in 0..20 {
        let c = gradient_instance(seed);
        assert_eq!(
            c.failures, 0,
            "seed {seed}: {} of {} entries off, worst rel {:.2e}",
            c.failures, c.entries, c.worst_rel
        );
    }
}

#[test]
fn tape_loss_matches_reference_loss() {
    let base = BaseModel::freeze(DenseModel::init_mlp(4, 3, 3, 11));
    let mut model = ContinualModel::new(base, 1.0, HistoryMode::Sum);
    model.begin_task(1, 2, 3).unwrap();
    model
        .set_active_factors(0, Matrix::filled(4, 2, 0.3), Matrix::filled(2, 3, -0.2))
        .unwrap();
    model.freeze_active().unwrap();
    model.begin_task(2, 2, 4).unwrap();
    model
        .set_active_factors(
            1,
            Matrix::filled(3, 2, 0.1),
            Matrix::from_fn(2, 3, |r, c| (r + 2 * c) as f32 * 0.1),
        )
        .unwrap();
    let x = Matrix::from_fn(5, 4, |r, c| ((r * 4 + c) as f32 * 0.9).cos());
    let y = vec![0, 2, 1, 1, 0];
    let reg = RegularizerConfig {
        lambda: 0.7,
        alpha: 2.0,
        ..Default::default()
    };
    let mut tape = Tape::new();
    let obj = build_objective(&mut tape, &model, &x, &y, &reg, 2).unwrap();
    let got = tape.value(obj.total).item().unwrap() as f64;
    let want = RefObjective::from_model(&model, &x, &y, 0.7, 2.0, true).loss(&RefObjective::params(&model));
    assert!((got - want).abs() < 1e-5 * want.abs().max(1.0), "{got} vs {want}");
}

#[test]
fn first_task_objective_has_no_stability_term() {
    let base = BaseModel::freeze(DenseModel::init_mlp(3, 3, 2, 1));
    let mut model = ContinualModel::new(base, 1.0, HistoryMode::Sum);
    model.begin_task(1, 1, 2).unwrap();
    model
        .set_active_factors(0, Matrix::filled(3, 1, 0.5), Matrix::filled(1, 3, 0.5))
        .unwrap();
    let x = Matrix::filled(2, 3, 0.4);
    let mut tape = Tape::new();
    let obj = build_objective(&mut tape, &model, &x, &[0, 1], &RegularizerConfig::default(), 1).unwrap();
    assert!(obj.stability.is_none());
    assert_eq!(tape.value(obj.total), tape.value(obj.fine_tune));
}
