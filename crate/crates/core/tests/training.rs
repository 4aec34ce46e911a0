use spikecast::config::RunConfig;
use spikecast::data::Part;
use spikecast::graph::Mode;
use spikecast::nets::{BackboneKind, ForecastModel};
use spikecast::pipeline::Pipeline;
use spikecast::train::{evaluate_loss, mse_loss, train_step, AdamState};

const BACKBONES: [&str; 4] = ["tcn", "rnn", "gru", "ispikformer"];

fn batch_loss(model: &ForecastModel, x: &spikecast::autograd::Tensor, y: &spikecast::autograd::Tensor) -> f32 {
    let mut g = model.graph(Mode::Train);
    let p = model.forward(&mut g, x).unwrap();
    let l = mse_loss(&mut g, p, y).unwrap();
    g.value(l).data()[0]
}

#[test]
fn one_step_lowers_the_batch_loss_for_most_seeds() {
    for backbone in BACKBONES {
        let mut decreased = 0;
        for seed in 0..5u64 {
            let cfg = RunConfig::from_toml_with(
                "",
                &[
                    format!("seed={seed}"),
                    "dataset.length=600".into(),
                    format!("model.backbone={backbone:?}"),
                ],
            )
            .unwrap();
            let p = Pipeline::new(&cfg).unwrap();
            let w = p.windows(Part::Train).unwrap();
            let idx: Vec<usize> = (0..cfg.train.batch_size).collect();
            let (x, y) = w.batch(&idx);
            let mut model = p.build_model().unwrap();
            let t = &cfg.train;
            let mut adam = AdamState::new(model.params(), t.adam_beta1, t.adam_beta2, t.adam_eps);
            let before = train_step(&mut model, &mut adam, t, &x, &y).unwrap();
            let after = batch_loss(&model, &x, &y);
            if after < before {
                decreased += 1;
            }
        }
        assert!(decreased >= 4, "{backbone}: loss fell in {decreased} of 5 seeds");
    }
}

#[test]
fn five_epochs_on_the_low_frequency_task_reduce_training_loss() {
    for backbone in BACKBONES {
        let cfg = RunConfig::from_toml_with(
            "",
            &[format!("model.backbone={backbone:?}"), "train.max_epochs=5".into()],
        )
        .unwrap();
        let p = Pipeline::new(&cfg).unwrap();
        let mut model = p.build_model().unwrap();
        let tr = p.windows(Part::Train).unwrap();
        let start = evaluate_loss(&model, &tr, cfg.train.eval_batch).unwrap();
        let history = p.train(&mut model).unwrap();
        let end = evaluate_loss(&model, &tr, cfg.train.eval_batch).unwrap();
        assert!(end < start, "{backbone}: {start} -> {end}");
        assert!(history.records.last().unwrap().train_loss < start, "{backbone}");
        assert_eq!(model.config().backbone, backbone.parse::<BackboneKind>().unwrap());
    }
}
