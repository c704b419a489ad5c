#![allow(dead_code)]

use std::path::Path;

use cvrlab::harness::ExperimentConfig;
use cvrlab::synth::RateTargets;

/// A pipeline small enough to run in a few seconds.
pub fn small_config(output_dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk_s();
    c.output_dir = output_dir.to_path_buf();
    c.seeds = vec![1, 2];
    c.data.preset = "tiny".into();
    c.data.train_impressions = 20_000;
    c.data.test_impressions = 10_000;
    c.generator.n_users = 200;
    c.generator.n_items = 200;
    c.generator.n_categories = 10;
    c.generator.calibration_pairs = 20_000;
    c.generator.targets = RateTargets {
        click: 0.2,
        dmi: 0.4,
        dma: 0.3,
        purchase: 0.2,
    };
    c.model.embedding_dim = 4;
    c.model.hidden_widths = vec![16, 8];
    c.training.batch_size = 256;
    c
}

pub const SMALL_CONFIG_TOML: &str = r#"
seeds = [3]
variants = ["base", "hm3"]

[data]
preset = "tiny"
train_impressions = 5000
test_impressions = 5000

[generator]
n_users = 100
n_items = 100
n_categories = 5
calibration_pairs = 10000

[generator.targets]
click = 0.2
dmi = 0.4
dma = 0.3
purchase = 0.2

[model]
embedding_dim = 4
hidden_widths = [8]

[training]
batch_size = 128
"#;
