use brhier_core::prob::RngStream;
use brhier_core::supervised::*;
use proptest::prelude::*;

/// Best accuracy of any half-plane classifier, by sweeping directions and
/// every threshold between sorted projections.
fn best_linear_accuracy(data: &LabeledDataset, directions: usize) -> f64 {
    let Targets::Classes(y) = data.targets() else { panic!("classification only") };
    let n = y.len() as f64;
    let mut best: f64 = 0.0;
    for i in 0..directions {
        let th = std::f64::consts::PI * i as f64 / directions as f64;
        let mut proj: Vec<(f64, usize)> = data.inputs().iter().zip(y).map(|(x, c)| (x[0] * th.cos() + x[1] * th.sin(), *c)).collect();
        proj.sort_by(|a, b| a.0.total_cmp(&b.0));
        let ones = y.iter().filter(|c| **c == 1).count() as f64;
        // predict 1 above the threshold; the flipped rule scores 1 - acc
        let (mut zeros_below, mut ones_below) = (0.0, 0.0);
        for k in 0..=proj.len() {
            let acc = (zeros_below + ones - ones_below) / n;
            best = best.max(acc).max(1.0 - acc);
            if k < proj.len() {
                if proj[k].1 == 1 {
                    ones_below += 1.0;
                } else {
                    zeros_below += 1.0;
                }
            }
        }
    }
    best
}

/// Mean squared residual of the least-squares line through 1-D data.
fn ols_mse(data: &LabeledDataset) -> f64 {
    let Targets::Values(y) = data.targets() else { panic!("regression only") };
    let n = y.len() as f64;
    let xs: Vec<f64> = data.inputs().iter().map(|x| x[0]).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(y).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    xs.iter().zip(y).map(|(x, y)| (icpt + slope * x - y).powi(2)).sum::<f64>() / n
}

fn train(data: &LabeledDataset, config: SupervisedConfig) -> (SupervisedModel, SupervisedMetrics) {
    let mut last = None;
    let model = train_supervised(data, config, |m| {
        last = Some(m.clone());
        Ok(())
    })
    .unwrap();
    (model, last.unwrap())
}

#[test]
fn no_line_separates_circles() {
    for seed in 0..3 {
        let data = make_classification(ClassificationTask::ConcentricCircles, 1000, 0.1, seed).unwrap();
        let best = best_linear_accuracy(&data, 360);
        assert!(best <= 0.65, "seed {seed}: {best}");
    }
}

#[test]
fn trained_single_expert_cannot_beat_best_line() {
    for task in [ClassificationTask::XorBlobs, ClassificationTask::ConcentricCircles, ClassificationTask::Moons] {
        let data = make_classification(task, 600, 0.1, 5).unwrap();
        let cfg = SupervisedConfig { n_experts: 1, epochs: 100, ..Default::default() };
        let (_, m) = train(&data, cfg);
        // the sweep discretizes directions, hence the slack
        assert!(m.score <= best_linear_accuracy(&data, 720) + 0.01, "{task:?}: {}", m.score);
    }
}

#[test]
fn separable_blobs_are_learned_by_one_expert() {
    let mut rng = RngStream::new(8, 0);
    let mut inputs = vec![];
    let mut labels = vec![];
    for i in 0..400 {
        let c = i % 2;
        let centre = if c == 0 { -2.0 } else { 2.0 };
        inputs.push(vec![centre + 0.3 * rng.normal(), 0.3 * rng.normal() - 0.5 * centre]);
        labels.push(c);
    }
    let data = LabeledDataset::new(inputs, Targets::Classes(labels), TaskKind::Classification { n_classes: 2 }).unwrap();
    let (_, m) = train(&data, SupervisedConfig { n_experts: 1, epochs: 50, ..Default::default() });
    assert!(m.score >= 0.99, "{}", m.score);
}

#[test]
fn xor_needs_more_than_one_linear_expert() {
    let data = make_classification(ClassificationTask::XorBlobs, 800, 0.2, 1).unwrap();
    let (_, one) = train(&data, SupervisedConfig { n_experts: 1, epochs: 100, ..Default::default() });
    assert!(one.score <= 0.6, "{}", one.score);
    let (_, four) = train(&data, SupervisedConfig { n_experts: 4, ..Default::default() });
    assert!(four.score >= 0.9, "{}", four.score);
    assert!(four.row.mi_sx_bits >= 0.8, "{}", four.row.mi_sx_bits);
}

#[test]
fn single_regression_expert_matches_least_squares() {
    for seed in 0..3 {
        let data = make_regression(1000, REGRESSION_NOISE, seed).unwrap();
        let (_, m) = train(&data, SupervisedConfig { n_experts: 1, seed, ..SupervisedConfig::regression() });
        let oracle = ols_mse(&data);
        assert!((m.score - oracle).abs() <= 0.05 * oracle, "seed {seed}: {} vs {oracle}", m.score);
    }
}

#[test]
fn training_is_deterministic() {
    let data = make_classification(ClassificationTask::Moons, 200, 0.1, 2).unwrap();
    let cfg = SupervisedConfig { n_experts: 3, epochs: 20, seed: 4, ..Default::default() };
    let (a, ma) = train(&data, cfg.clone());
    let (b, mb) = train(&data, cfg);
    assert_eq!(a, b);
    assert_eq!(ma.csv_line(), mb.csv_line());
}

#[test]
fn metrics_csv_has_score_column() {
    let data = make_regression(50, REGRESSION_NOISE, 0).unwrap();
    let (_, m) = train(&data, SupervisedConfig { n_experts: 2, epochs: 2, ..SupervisedConfig::regression() });
    let header = SupervisedMetrics::csv_header(2, TaskKind::Regression);
    assert!(header.ends_with(",mse"), "{header}");
    assert_eq!(header.split(',').count(), m.csv_line().split(',').count());
}

proptest! {
    #[test]
    fn utility_and_loss_cancel(w in prop::collection::vec(0.01f64..1.0, 2..6), pick in 0usize..6, v in -5.0f64..5.0, y in -5.0f64..5.0) {
        let p = Prediction::Classes(brhier_core::prob::Categorical::from_weights(w.clone()).unwrap());
        let c = Label::Class(pick % w.len());
        prop_assert_eq!(utility(&p, c).unwrap() + loss(&p, c).unwrap(), 0.0);
        let r = Prediction::Value(v);
        prop_assert_eq!(utility(&r, Label::Value(y)).unwrap() + loss(&r, Label::Value(y)).unwrap(), 0.0);
    }
}
