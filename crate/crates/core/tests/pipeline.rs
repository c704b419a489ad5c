mod common;

use std::collections::BTreeSet;
use std::fs;

use cvrlab::graph::Variant;
use cvrlab::harness::{
    cmd_eval, cmd_gen, cmd_report, cmd_run, cmd_train, parse_kv, ExperimentConfig, HarnessError,
    Precision, RunRecord, CURVE_FILE, METRICS_FILE, REPORT_KV_FILE, REPORT_TABLE_FILE,
};
use cvrlab::metrics::{eval_protocol, RandomScorer};
use cvrlab::models::{Batch, Model, ModelError, Trainer};
use cvrlab::nn::AdamConfig;
use cvrlab::synth::GenerativeModel;

use common::small_config;

fn read(path: impl AsRef<std::path::Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn full_pipeline_is_deterministic_and_recomputable() {
    let root = tempfile::tempdir().unwrap();
    let a = small_config(&root.path().join("a"));
    let mut b = a.clone();
    b.output_dir = root.path().join("b");

    let record = cmd_run(&a).unwrap();
    cmd_run(&b).unwrap();
    record.verify(&a.output_dir).unwrap();
    assert_eq!(RunRecord::load(&a.output_dir).unwrap(), record);
    assert_eq!(record.config_hash, a.hash());
    assert_eq!(record.runs.len(), 10);

    for f in [REPORT_TABLE_FILE, REPORT_KV_FILE] {
        assert_eq!(read(a.output_dir.join(f)), read(b.output_dir.join(f)), "{f}");
    }
    for v in Variant::ALL {
        let sidecar = |c: &ExperimentConfig| read(c.run_dir(v, 1).join("model.ckpt.tensors"));
        assert_eq!(sidecar(&a), sidecar(&b), "{v} checksums");
    }

    // every reported number comes from the per-run metric files
    let report = parse_kv(&read(a.output_dir.join(REPORT_KV_FILE))).unwrap();
    for v in Variant::ALL {
        for metric in ["cvr_auc", "ctcvr_auc"] {
            let values: Vec<String> = a
                .seeds
                .iter()
                .map(|&s| parse_kv(&read(a.run_dir(v, s).join(METRICS_FILE))).unwrap()[metric].clone())
                .collect();
            assert_eq!(report[&format!("{v}.{metric}.values")], values.join(" "));
            let nums: Vec<f64> = values.iter().map(|x| x.parse().unwrap()).collect();
            let mean = nums.iter().sum::<f64>() / nums.len() as f64;
            assert_eq!(report[&format!("{v}.{metric}.mean")], mean.to_string());
        }
    }
    let table = read(a.output_dir.join(REPORT_TABLE_FILE));
    assert_eq!(table.lines().filter(|l| l.contains(" ± ") && !l.starts_with('(')).count(), 5);
    assert!(table.contains("oracle"));
}

#[test]
fn training_learns_and_records_every_task() {
    let root = tempfile::tempdir().unwrap();
    let config = small_config(root.path());
    let data = cmd_gen(&config, &config.data_dir()).unwrap();
    for v in [Variant::Hm3, Variant::Esmm, Variant::Base] {
        let out = cmd_train(&config, v, 1, &data.paths.dir, &config.run_dir(v, 1)).unwrap();
        assert_eq!(out.steps, 20_000u64.div_ceil(256));
        let curve = read(config.run_dir(v, 1).join(CURVE_FILE));
        let rows: Vec<Vec<&str>> = curve.lines().skip(1).map(|l| l.split('\t').collect()).collect();
        let mean_total = |rs: &[Vec<&str>]| {
            rs.iter().map(|r| r[2].parse::<f64>().unwrap()).sum::<f64>() / rs.len() as f64
        };
        assert!(mean_total(&rows[rows.len() - 5..]) < mean_total(&rows[..5]), "{v}");
        // columns: epoch step total ctr dmi dma ctcvr cvr
        let present: Vec<bool> = (3..8).map(|c| rows[0][c] != "-").collect();
        let expected = match v {
            Variant::Hm3 => [true, true, true, true, false],
            Variant::Esmm => [true, false, false, true, false],
            _ => [true, false, false, false, true],
        };
        assert_eq!(present, expected, "{v}");
    }
}

#[test]
fn reports_share_a_schema_across_variants() {
    let root = tempfile::tempdir().unwrap();
    let mut config = small_config(root.path());
    config.seeds = vec![4];
    config.variants = vec![Variant::Base, Variant::Hm3];
    let data = cmd_gen(&config, &config.data_dir()).unwrap();
    let mut schemas = Vec::new();
    for v in config.variants.clone() {
        let dir = config.run_dir(v, 4);
        let t = cmd_train(&config, v, 4, &data.paths.dir, &dir).unwrap();
        cmd_eval(&t.checkpoint, &data.paths.test, Precision::F32, &dir).unwrap();
        let kv = parse_kv(&read(dir.join(METRICS_FILE))).unwrap();
        assert_eq!(kv["auc_kind"], "global");
        assert_eq!(kv["cvr_auc_population"], "clicked");
        schemas.push(kv.into_keys().collect::<BTreeSet<_>>());
    }
    assert_eq!(schemas[0], schemas[1]);

    // single seed: the deviation column is marked absent rather than zero
    let report = cmd_report(&config).unwrap();
    assert!(report.to_table().contains("± n/a"));
}

#[test]
fn report_names_missing_runs() {
    let root = tempfile::tempdir().unwrap();
    let config = small_config(root.path());
    let err = cmd_report(&config).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("base-seed1") && msg.contains("hm3r-seed2"), "{msg}");
}

#[test]
fn eval_rejects_incompatible_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let config = small_config(root.path());
    let data = cmd_gen(&config, &config.data_dir()).unwrap();
    let mut narrow = config.clone();
    narrow.generator.n_users = 10;
    let spec = narrow.model_spec(Variant::Hm3, 1);
    let ck = root.path().join("narrow.ckpt");
    Model::<f32>::build(spec).unwrap().write_checkpoint(&ck, 0).unwrap();
    let err = cmd_eval(&ck, &data.paths.test, Precision::F32, root.path()).unwrap_err();
    assert!(matches!(err, HarnessError::Validation(_)), "{err}");
    let err = cmd_eval(&root.path().join("none.ckpt"), &data.paths.test, Precision::F32, root.path())
        .unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn gen_is_byte_identical_and_validates_targets() {
    let root = tempfile::tempdir().unwrap();
    let config = small_config(root.path());
    let a = cmd_gen(&config, &root.path().join("a")).unwrap();
    let b = cmd_gen(&config, &root.path().join("b")).unwrap();
    for name in ["train.csv", "train.manifest", "test.csv", "test.manifest", "generator.txt"] {
        assert_eq!(
            fs::read(a.paths.dir.join(name)).unwrap(),
            fs::read(b.paths.dir.join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(a.train.record_count, 20_000);
    assert_eq!(a.test.record_count, 10_000);
    let manifest = read(a.paths.dir.join("test.manifest"));
    assert!(manifest.contains("impression_ids = 20000..30000"));
    assert!(manifest.contains("preset = tiny"));

    let mut bad = config.clone();
    bad.generator.targets.click = 0.0;
    let err = cmd_gen(&bad, &root.path().join("c")).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn ground_truth_and_random_scorers_bracket_models() {
    let config = small_config(std::path::Path::new("unused"));
    let mut gen_config = config.generator.clone();
    gen_config.n_users = 2000;
    gen_config.n_items = 2000;
    let g = GenerativeModel::build(gen_config).unwrap();
    let test = g.generate(0..200_000);

    let oracle = eval_protocol(&g, &test).unwrap();
    let random = eval_protocol(&RandomScorer { seed: 5 }, &test).unwrap();
    let null_sd = |p: usize, n: usize| ((p + n + 1) as f64 / (12.0 * p as f64 * n as f64)).sqrt();

    let clicked_purchases = test.iter().filter(|r| r.purchase).count();
    let sd_cvr = null_sd(clicked_purchases, random.clicks - clicked_purchases);
    let sd_ctcvr = null_sd(random.purchases, random.records - random.purchases);
    assert!((random.cvr_auc.clone().unwrap() - 0.5).abs() < 3.0 * sd_cvr);
    assert!((random.ctcvr_auc.clone().unwrap() - 0.5).abs() < 3.0 * sd_ctcvr);
    assert!(oracle.cvr_auc.unwrap() > 0.6);
    assert!(oracle.ctcvr_auc.unwrap() > 0.6);
}

#[test]
fn divergence_leaves_the_model_untouched() {
    let root = tempfile::tempdir().unwrap();
    let config = small_config(root.path());
    let g = GenerativeModel::build(config.generator.clone()).unwrap();
    let batch = Batch::from_records(&g.generate(0..64));
    let mut model = Model::<f64>::build(config.model_spec(Variant::Hm3, 1)).unwrap();
    model.networks_mut()[0].heads[2].layers[0].bias[0] = f64::NAN;
    let before = model.clone();
    let mut trainer = Trainer::new(model, AdamConfig::default());
    let r = trainer.train_step(&batch);
    assert!(matches!(r, Err(ModelError::Diverged)), "{:?}", r.err());
    assert_eq!(trainer.step_count(), 0);
    let same = |a: &Model<f64>, b: &Model<f64>| {
        a.networks()
            .iter()
            .zip(b.networks())
            .all(|(x, y)| format!("{x:?}") == format!("{y:?}"))
    };
    assert!(same(&trainer.model, &before));
}
