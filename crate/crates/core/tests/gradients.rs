use osda::gradcheck::{central_difference, relative_error};
use osda::losses::{evaluate_plan, BatchPlan, ContrastiveKind, LossWeights, PlannedSample, LOG_FLOOR};
use osda::model::{Classifier, FeatureExtractor, Model};
use osda::numerics::{self, Rng};

fn random_model(rng: &mut Rng, input: usize, dim: usize, shared: usize, private: usize) -> Model {
    let hidden = [3 + rng.below(4)];
    let ext = FeatureExtractor::mlp(input, &hidden, dim, rng);
    let cls = Classifier::random(dim, shared, rng).extend(private, rng).unwrap();
    Model::new(ext, cls).unwrap()
}

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    numerics::l2_normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
}

fn random_plan(rng: &mut Rng, model: &Model, kind: ContrastiveKind) -> BatchPlan {
    let input = model.input_dim();
    let dim = model.classifier.dim();
    let classes = model.n_classes();
    let queue_keys: Vec<Vec<f64>> = (0..2 + rng.below(6)).map(|_| unit(rng, dim)).collect();
    let samples = (0..4)
        .map(|i| {
            let negatives: Vec<usize> = (0..queue_keys.len()).filter(|_| rng.bernoulli(0.8)).collect();
            let negative = (negatives.len() >= 2).then(|| rng.below(negatives.len()));
            PlannedSample {
                sample_id: i,
                query_input: (0..input).map(|_| rng.normal()).collect(),
                key: unit(rng, dim),
                y_tilde: rng.bernoulli(0.7).then(|| rng.below(classes)),
                negatives,
                negative,
            }
        })
        .collect();
    BatchPlan {
        samples,
        queue_keys,
        weights: LossWeights {
            cls: rng.uniform_range(0.1, 2.0),
            ctr: rng.uniform_range(0.1, 2.0),
            div: rng.uniform_range(0.1, 2.0),
        },
        contrastive: kind,
        tau: 0.07,
        include_positive: rng.bernoulli(0.5),
        n_excluded_pairs: 0,
    }
}

fn objective(model: &Model, plan: &BatchPlan, params: &[f64]) -> f64 {
    let mut m = model.clone();
    m.set_parameters(params).unwrap();
    evaluate_plan(&m, plan).unwrap().0.total
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let mut rng = Rng::with_stream_id(11, 900);
    let kinds = [
        ContrastiveKind::NlInfonce,
        ContrastiveKind::Infonce,
        ContrastiveKind::Off,
    ];
    let (mut checked, mut attempts) = (0, 0);
    while checked < 120 {
        attempts += 1;
        assert!(attempts < 1000);
        let (shared, private) = (2 + rng.below(3), 1 + rng.below(3));
        let model = random_model(&mut rng, 3, 4, shared, private);
        let plan = random_plan(&mut rng, &model, kinds[checked % 3]);
        let (breakdown, grads) = evaluate_plan(&model, &plan).unwrap();
        // Redraw plans that hit a log floor, where the loss has a kink.
        if breakdown.l_ctr * 4.0 >= -LOG_FLOOR.ln() || breakdown.l_cls * 4.0 >= -LOG_FLOOR.ln() {
            continue;
        }
        let params = model.parameters();
        let fd = central_difference(|p| objective(&model, &plan, p), &params, 1e-5);
        let err = relative_error(&grads.flatten(), &fd);
        assert!(err <= 1e-4, "config {checked}: relative error {err}");
        checked += 1;
    }
}

#[test]
fn total_is_linear_in_the_weights() {
    let mut rng = Rng::with_stream_id(12, 900);
    for _ in 0..50 {
        let model = random_model(&mut rng, 3, 4, 3, 2);
        let mut plan = random_plan(&mut rng, &model, ContrastiveKind::NlInfonce);
        let (b, _) = evaluate_plan(&model, &plan).unwrap();
        let w = plan.weights;
        assert!((b.total - (w.cls * b.l_cls + w.ctr * b.l_ctr + w.div * b.l_div)).abs() < 1e-9);

        plan.weights = LossWeights {
            cls: 1.3,
            ctr: 0.0,
            div: 0.0,
        };
        let (only_cls, _) = evaluate_plan(&model, &plan).unwrap();
        assert_eq!(only_cls.total, 1.3 * only_cls.l_cls);

        plan.weights = LossWeights {
            cls: 0.0,
            ctr: 0.0,
            div: 0.0,
        };
        let (_, g) = evaluate_plan(&model, &plan).unwrap();
        assert!(g.values().all(|&v| v == 0.0));
    }
}
