//! Quick manual smoke run:
//!   cargo run --release -p xtab-core --example smoke -- [kind] [n] [epochs] [hidden]

use xtab_core::datagen::{generate, SyntheticKind, SyntheticSpec};
use xtab_core::pipeline::{evaluate, train_one_run, Noise, PipelineConfig, PipelineModel};
use xtab_core::rng::{derive_rng, tag};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = match args.get(1).map(|s| s.as_str()).unwrap_or("xor") {
        "synrank" => SyntheticKind::SynRank,
        "synrank100" => SyntheticKind::SynRank100,
        "orange" => SyntheticKind::L2xOrange,
        "additive" => SyntheticKind::L2xNonlinearAdditive,
        "switch" => SyntheticKind::L2xSwitch,
        _ => SyntheticKind::L2xXor,
    };
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);
    let hidden: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1024);

    let spec = SyntheticSpec::new(kind, n, n, 57).unwrap();
    let (mut train, mut test) = generate(&spec).unwrap();
    if std::env::var_os("XTAB_SMOKE_BERNOULLI_TRAIN").is_some() {
        println!("training labels re-drawn as Bernoulli");
        let mut bspec = spec;
        bspec.label_rule = xtab_core::datagen::LabelRule::Bernoulli;
        let (btrain, _) = generate(&bspec).unwrap();
        train = btrain;
    }
    if std::env::var_os("XTAB_SMOKE_STD").is_some() {
        println!("standardizing features with train statistics");
        xtab_core::datagen::standardize(&mut train, &mut [&mut test]).unwrap();
    }
    let (train, test) = (train, test);

    let config = PipelineConfig {
        n_subsets: if kind == SyntheticKind::SynRank { 3 } else { 2 },
        overlap_frac: 0.75,
        mask_ratio_p: if kind == SyntheticKind::SynRank { 0.5 } else { 0.2 },
        noise: if std::env::var_os("XTAB_SMOKE_NONOISE").is_some() {
            Noise::None
        } else {
            match kind {
                SyntheticKind::SynRank => Noise::Gaussian { sigma: 0.5 },
                SyntheticKind::SynRank100 => Noise::Swap,
                SyntheticKind::L2xNonlinearAdditive => Noise::Gaussian { sigma: 0.01 },
                SyntheticKind::L2xSwitch => Noise::Gaussian { sigma: 0.05 },
                _ => Noise::Gaussian { sigma: 0.05 },
            }
        },
        batch_size: 1024,
        epochs,
        encoder_hidden: hidden,
        classifier_hidden: hidden,
        weight_decay: std::env::var("XTAB_SMOKE_WD").ok().and_then(|s| s.parse().ok()).unwrap_or(0.01),
        ..Default::default()
    };
    println!("backend: {}", xtab_core::linalg::backend_description());
    let t0 = std::time::Instant::now();
    let run = train_one_run(&train, &config, 57 + 17, None).unwrap();
    println!("train time: {:.1}s", t0.elapsed().as_secs_f64());
    for m in run.metrics.iter().step_by(5.max(epochs / 8)) {
        println!(
            "epoch {:3}  task {:.4}  mask {:.4}  acc {:.4}",
            m.epoch, m.task_loss, m.mask_loss, m.accuracy
        );
    }
    let last = run.metrics.last().unwrap();
    println!("final epoch: task {:.4} mask {:.4} acc {:.4}", last.task_loss, last.mask_loss, last.accuracy);

    let mut rng = derive_rng(57 + 17, tag::RUN);
    let mut model = PipelineModel::init(train.n_features(), &config, &mut rng).unwrap();
    model.mask = run.mask.clone();
    model.encoder = run.encoder.clone();
    model.classifier = run.classifier.clone();
    let (acc, loss) = evaluate(&model, &config, &test, None).unwrap();
    println!("test acc {acc:.4}  loss {loss:?}");

    // Mean mask weights on the test set (the importance signal).
    let (m, _) = xtab_core::nn::forward(
        &run.mask,
        &model.mask_spec,
        test.x.view(),
        xtab_core::nn::Mode::Eval,
        &mut rng,
    )
    .unwrap();
    let d = test.n_features();
    let mut fhat: Vec<(usize, f64)> =
        (0..d).map(|j| (j + 1, m.column(j).sum() / m.nrows() as f64)).collect();
    fhat.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    print!("importance:");
    for (f, w) in fhat.iter().take(10) {
        print!("  f{f}={w:.3}");
    }
    println!();
}
