//! Trains TCPA and dense prompting on the synthetic task for a few epochs
//! and prints their per-layer mean ε-rank side by side.
//!
//! `cargo run --release --example rank_diversity -- [epochs]`

use tcpa::backbone::{BackboneParams, ModelConfig};
use tcpa::data::{gen_synthetic, SyntheticSpec};
use tcpa::diagnostics::{diversity_report, DEFAULT_EPSILON};
use tcpa::model::{Model, Phi, PromptMode};
use tcpa::objective::{evaluate, train_loop, TrainConfig};
use tcpa::tcpa::TcpaConfig;

fn main() -> tcpa::Result<()> {
    let epochs = match std::env::args().nth(1) {
        Some(s) => s
            .parse()
            .map_err(|e| tcpa::Error::Config(format!("epochs: {e}")))?,
        None => 5,
    };
    let config = ModelConfig::default();
    let data = gen_synthetic(&SyntheticSpec::default())?;
    let train = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let mut trained = Vec::new();
    for mode in [PromptMode::Tcpa, PromptMode::Dense] {
        let backbone = BackboneParams::init(&config, 0);
        let model = Model::new(config.clone(), TcpaConfig::default(), mode, backbone)?;
        let phi = Phi::init(&model, data.num_classes, train.seed);
        let phi = train_loop(&model, phi, &data, &train, |_| {})?.state.phi;
        let acc = evaluate(&model, &phi, &data, train.execution)?.accuracy;
        println!(
            "{:<6} train accuracy {:.2}% after {epochs} epochs",
            mode.as_str(),
            100.0 * acc
        );
        trained.push((model, phi));
    }
    let (dm, dp) = trained.pop().expect("dense variant");
    let (tm, tp) = trained.pop().expect("tcpa variant");
    let report = diversity_report(
        ("tcpa", &tm, &tp),
        ("dense", &dm, &dp),
        &data,
        16,
        DEFAULT_EPSILON,
        train.execution,
    )?;
    print!("{report}");
    Ok(())
}
