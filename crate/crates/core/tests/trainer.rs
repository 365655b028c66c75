use splat_inpaint::error::Error;
use splat_inpaint::losses::ViewTargets;
use splat_inpaint::trainer::{evaluate_gradients, grads, params, train, TrainConfig, Trainer, PARAM_GROUPS};
use splat_inpaint::workbench::synth::{synth_scene, SynthPreset};
use splat_inpaint::workbench::SceneDataset;

fn dataset(seed: u64) -> SceneDataset {
    synth_scene(&SynthPreset::Small.config(), seed).dataset
}

fn reference_only(mut data: SceneDataset) -> SceneDataset {
    data.views.retain(|v| v.is_reference);
    data
}

fn quiet(total_steps: usize, seed: u64) -> TrainConfig {
    let mut config = TrainConfig::scaled(total_steps, seed);
    config.deterministic = true;
    config.densify.enabled = false;
    config.regularizer.enabled = false;
    config
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn first_step_matches_sign_adam_oracle() {
    let data = reference_only(dataset(1));
    let config = quiet(100, 4);
    let mut trainer = Trainer::new(&data, config.clone()).unwrap();
    let (scene, attention) = (trainer.scene.clone(), trainer.attention.clone());
    let view = &data.views[0];
    let eval = evaluate_gradients(
        &scene,
        &attention,
        data.camera(view.camera_id).unwrap(),
        &ViewTargets {
            view_id: view.camera_id,
            is_reference: true,
            target: view.target(),
            mono_depth: &view.mono_depth,
            mask: &view.mask,
        },
        &config.loss,
        None,
        None,
        &trainer.render_options(),
    )
    .unwrap();
    trainer.step(&data).unwrap();

    let r = config.rates;
    let rates = [r.position_init, r.feature, r.offset_scale, r.offset];
    let eps = config.adam.eps;
    let before = params(&scene, &attention);
    let after = params(&trainer.scene, &trainer.attention);
    for (i, g) in grads(&eval.scene_grad, &eval.attention_grad).iter().enumerate() {
        let rate = match i {
            0..=3 => rates[i],
            16..=18 => r.attention,
            _ => r.decoder,
        };
        for ((p0, p1), g) in before[i].iter().zip(after[i]).zip(g.iter()) {
            let expected = p0 - rate * g / (g.abs() + eps);
            assert!(
                (p1 - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
                "{}: {p1} vs {expected}",
                PARAM_GROUPS[i]
            );
        }
    }
}

#[test]
fn reference_loss_trends_down() {
    let data = dataset(2);
    let (_, log) = train(&data, TrainConfig { deterministic: true, ..TrainConfig::scaled(600, 3) }, None).unwrap();
    let reference = data.reference_view_id;
    let medians: Vec<f64> = log
        .chunks(200)
        .map(|w| median(w.iter().filter(|e| e.loss.view_id == reference).map(|e| e.loss.total).collect()))
        .collect();
    for pair in medians.windows(2) {
        assert!(pair[1] <= pair[0], "window medians {medians:?}");
    }
}

#[test]
fn color_only_training_logs_only_color_loss() {
    let data = dataset(3);
    let mut config = quiet(40, 5);
    config.loss.lambda_depth = 0.0;
    config.loss.lambda_tv = 0.0;
    let (_, log) = train(&data, config, None).unwrap();
    assert_eq!(log.len(), 40);
    for e in &log {
        assert_eq!(e.loss.total, e.loss.l_color);
        assert!(!e.regularized);
    }
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let data = dataset(4);
    let mut config = quiet(50, 6);
    config.rates.decoder = 1e300;
    config.rates.feature = 1e300;
    match train(&data, config, None) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 2),
        other => panic!("expected divergence, got {:?}", other.map(|(_, log)| log.len())),
    }
}

#[test]
fn zero_steps_are_rejected() {
    let data = dataset(5);
    let config = TrainConfig { total_steps: 0, ..TrainConfig::default() };
    assert!(matches!(Trainer::new(&data, config), Err(Error::InvalidConfig(_))));
}

#[test]
fn densification_keeps_optimizer_state_aligned() {
    let data = dataset(6);
    let mut config = TrainConfig::scaled(60, 7);
    config.deterministic = true;
    config.densify.start_step = 10;
    config.densify.interval = 10;
    config.densify.end_step = 50;
    config.densify.grad_threshold = 1e-9;
    config.densify.opacity_threshold = 0.02;
    let (trainer, log) = train(&data, config, None).unwrap();
    let events: Vec<_> = log.iter().filter_map(|e| e.densify.map(|d| (e.step, d))).collect();
    assert_eq!(events.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![10, 20, 30, 40, 50]);
    let mut anchors = log[8].anchors;
    for (step, d) in &events {
        anchors = anchors + d.added - d.removed;
        assert_eq!(log[step - 1].anchors, anchors);
    }
    for (p, m) in params(&trainer.scene, &trainer.attention).iter().zip(&trainer.optimizer.moments) {
        assert_eq!(p.len(), m.m.len());
        assert_eq!(p.len(), m.v.len());
    }
}
