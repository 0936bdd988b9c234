use super::*;
use crate::diagnostics::{epsilon_rank, read_matrix_csv};
use crate::tcpa::verify_mask;

const TINY: &str = "\
# tiny model for fast runs
image_h = 4
image_w = 4
channels = 2
patch_h = 2
patch_w = 2
embed_dim = 8
num_layers = 2
num_heads = 2
ffn_dim = 12
cls_pool_size = 3
img_pool_size = 4   # two selected per token
epochs = 2
batch_size = 5
";

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.tcpd");
        let config = dir.path().join("run.cfg");
        let text = format!(
            "{TINY}dataset = {}\noutput_dir = {}\n",
            data.display(),
            dir.path().join("runs").display()
        );
        fs::write(&config, text).unwrap();
        let gen = GenSynthArgs {
            classes: 3,
            per_class: 4,
            noise: 0.05,
            seed: 1,
            out: data,
            config: self::args(&config, &[]),
        };
        cmd_gen_synth(&gen).unwrap();
        Self { dir, config }
    }

    fn resolve(&self, sets: &[&str]) -> RunConfig {
        args(&self.config, sets).resolve().unwrap()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn args(config: &Path, sets: &[&str]) -> ConfigArgs {
    ConfigArgs {
        config: Some(config.to_path_buf()),
        set: sets.iter().map(|s| s.to_string()).collect(),
    }
}

fn cli(argv: &[&str]) -> i32 {
    run(std::iter::once("tcpa").chain(argv.iter().copied()))
}

#[test]
fn defaults_resolve_without_a_file() {
    let c = RunConfig::resolve(None, &[]).unwrap();
    assert_eq!(c, RunConfig::default());
}

#[test]
fn file_then_overrides() {
    let mut c = RunConfig::default();
    c.apply_text(TINY, "t").unwrap();
    assert_eq!(c.model.embed_dim, 8);
    assert_eq!(c.tcpa.img_pool_size, 4);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.cfg");
    fs::write(&p, TINY).unwrap();
    let c = RunConfig::resolve(Some(&p), &["epochs=7".into(), "optimizer = sgd".into()]).unwrap();
    assert_eq!(c.train.epochs, 7);
    assert_eq!(c.train.optimizer, crate::objective::OptimizerKind::Sgd);
    assert_eq!(c.model.num_layers, 2);
}

#[test]
fn schema_violations_name_the_key() {
    let mut c = RunConfig::default();
    let e = c
        .apply_text("epochs = 3\nwarmup = 5\n", "f.cfg")
        .unwrap_err()
        .to_string();
    assert!(e.contains("f.cfg:2") && e.contains("warmup"), "{e}");
    let e = c
        .apply_text("batch_size = many", "f.cfg")
        .unwrap_err()
        .to_string();
    assert!(e.contains("batch_size"), "{e}");
    let e = c
        .apply_text("seed = 1\nseed = 2", "f.cfg")
        .unwrap_err()
        .to_string();
    assert!(e.contains("duplicate"), "{e}");
    assert!(c.apply_text("just words", "f.cfg").is_err());
    assert!(c.set("schedule", "step").is_err());
    assert!(c.set("schedule", SCHEDULE).is_ok());
    assert!(c.set("mask_mode", "sideways").is_err());
    assert!(RunConfig::resolve(None, &["num_heads=3".into()]).is_err());
    assert!(RunConfig::resolve(None, &["noequals".into()]).is_err());
}

#[test]
fn echo_lists_every_key_and_parses_back() {
    let mut c = RunConfig::default();
    c.apply_text(TINY, "t").unwrap();
    c.set("dataset", "d.tcpd").unwrap();
    c.set("learning_rate", "0.1").unwrap();
    c.set("mask_mode", "pre").unwrap();
    let echo = c.echo();
    assert_eq!(echo.lines().count(), KEYS.len());
    let mut back = RunConfig::default();
    back.apply_text(&echo, "echo").unwrap();
    assert_eq!(back, c);
}

#[test]
fn gen_synth_is_loadable_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tcpd");
    let b = dir.path().join("nested/b.tcpd");
    for p in [&a, &b] {
        assert_eq!(cli(&["gen-synth", "--out", p.to_str().unwrap()]), EXIT_OK);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let data = Dataset::load(&a).unwrap();
    assert_eq!((data.len(), data.num_classes), (256, 4));
    data.check_model(&crate::backbone::ModelConfig::default())
        .unwrap();
}

#[test]
fn negative_noise_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.tcpd");
    assert_eq!(
        cli(&[
            "gen-synth",
            "--noise",
            "-0.5",
            "--out",
            out.to_str().unwrap()
        ]),
        EXIT_USAGE
    );
    assert!(!out.exists());
    assert_eq!(cli(&["gen-synth"]), EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
}

#[test]
fn zero_epochs_writes_artifacts_with_initial_phi() {
    let f = Fixture::new();
    let c = f.resolve(&["epochs=0"]);
    let report = cmd_train(&c, false).unwrap();
    assert_eq!(report.steps, 0);
    for name in [CONFIG_ECHO, BACKBONE_FILE, PHI_FILE, METRICS_FILE] {
        assert!(report.run_dir.join(name).is_file(), "{name}");
    }
    let model = build_model(&c).unwrap();
    let saved = Phi::load(&report.run_dir.join(PHI_FILE), &model).unwrap();
    assert!(saved.bits_eq(&Phi::init(&model, 3, c.train.seed)));
    assert_eq!(
        fs::read_to_string(report.run_dir.join(METRICS_FILE)).unwrap(),
        format!("{METRICS_HEADER}\n")
    );
    let echoed = RunConfig::resolve(Some(&report.run_dir.join(CONFIG_ECHO)), &[]).unwrap();
    assert_eq!(echoed, c);
    let backbone = BackboneParams::load(&report.run_dir.join(BACKBONE_FILE), &c.model).unwrap();
    assert!(backbone.bits_eq(&model.backbone));
}

#[test]
fn repeated_training_is_byte_identical() {
    let f = Fixture::new();
    let c = f.resolve(&[]);
    let a = cmd_train(&c, false).unwrap();
    let b = cmd_train(&c, false).unwrap();
    assert_ne!(a.run_dir, b.run_dir);
    for name in [CONFIG_ECHO, BACKBONE_FILE, PHI_FILE, METRICS_FILE] {
        assert_eq!(
            fs::read(a.run_dir.join(name)).unwrap(),
            fs::read(b.run_dir.join(name)).unwrap(),
            "{name}"
        );
    }
    let rows = fs::read_to_string(a.run_dir.join(METRICS_FILE)).unwrap();
    // 12 samples in batches of 5 → 3 steps per epoch.
    assert_eq!(rows.lines().count(), 1 + 2 * 3);
}

#[test]
fn eval_matches_the_training_report_and_a_recount() {
    let f = Fixture::new();
    let c = f.resolve(&[]);
    let report = cmd_train(&c, false).unwrap();
    let ev = cmd_eval(&c, &report.run_dir.join(PHI_FILE)).unwrap();
    assert_eq!(ev.accuracy.to_bits(), report.evaluation.accuracy.to_bits());
    assert_eq!(
        ev.mean_loss.to_bits(),
        report.evaluation.mean_loss.to_bits()
    );
    let data = Dataset::load(c.dataset_path().unwrap()).unwrap();
    let correct = ev
        .predictions
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    assert_eq!(ev.accuracy, correct as f64 / data.len() as f64);

    let weights = report.run_dir.join(PHI_FILE);
    let code = cli(&[
        "eval",
        "--config",
        f.config.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
}

#[test]
fn mismatched_weights_report_the_shape() {
    let f = Fixture::new();
    let c = f.resolve(&["epochs=0"]);
    let report = cmd_train(&c, false).unwrap();
    let wider = f.resolve(&["img_pool_size=5"]);
    let e = cmd_eval(&wider, &report.run_dir.join(PHI_FILE)).unwrap_err();
    assert_eq!(exit_code(&e), EXIT_IO);
    assert!(e.to_string().contains("pools.1.img.prompts"), "{e}");
    let weights = report.run_dir.join(PHI_FILE);
    let code = cli(&[
        "eval",
        "--config",
        f.config.to_str().unwrap(),
        "--set",
        "img_pool_size=5",
        "--weights",
        weights.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_IO);
}

#[test]
fn missing_inputs_are_io_errors() {
    let f = Fixture::new();
    let c = f.resolve(&["dataset=/nonexistent/data.tcpd"]);
    let e = cmd_train(&c, false).unwrap_err();
    assert_eq!(exit_code(&e), EXIT_IO);
    assert!(e.to_string().contains("/nonexistent/data.tcpd"));
    let missing = f.path("absent.cfg");
    assert_eq!(
        cli(&["train", "--config", missing.to_str().unwrap()]),
        EXIT_IO
    );
    let e = cmd_train(&RunConfig::default(), false).unwrap_err();
    assert_eq!(exit_code(&e), EXIT_USAGE);
}

#[test]
fn diverging_training_exits_with_the_numeric_code() {
    let f = Fixture::new();
    let code = cli(&[
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--set",
        "learning_rate=1e300",
        "--set",
        "optimizer=sgd",
    ]);
    assert_eq!(code, EXIT_NUMERIC);
    assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NUMERIC);
}

#[test]
fn inspect_outputs_agree_with_their_sources() {
    let f = Fixture::new();
    let c = f.resolve(&["mask_mode=post_softmax_multiplicative"]);
    let report = cmd_train(&c, false).unwrap();
    let out = f.path("inspect");
    let r = cmd_inspect(
        &c,
        &report.run_dir.join(PHI_FILE),
        5,
        DEFAULT_EPSILON,
        Some(&out),
    )
    .unwrap();
    assert_eq!(r.masks_verified, 2);
    assert_eq!(r.reports.len(), 4);
    let model = build_model(&c).unwrap();
    let layout = crate::tcpa::SlotLayout {
        prompt_len: 1,
        cls_pool_size: 3,
        img_pool_size: 4,
        num_patches: model.config.num_patches(),
    };
    for layer in 1..=2 {
        let mask = read_matrix_csv(&out.join(format!("mask_l{layer}.csv"))).unwrap();
        verify_mask(&mask, &layout, c.tcpa.cls_top_k, c.tcpa.img_top_k).unwrap();
        for head in 0..2 {
            let map = read_matrix_csv(&out.join(format!("attn_l{layer}_h{head}.csv"))).unwrap();
            for (m, a) in mask.data().iter().zip(map.data()) {
                if *m == 0.0 {
                    assert_eq!(a.to_bits(), 0f64.to_bits());
                }
            }
            let direct = epsilon_rank(layer, head, &map, DEFAULT_EPSILON).unwrap();
            let reported = r
                .reports
                .iter()
                .find(|x| x.layer == layer && x.head == head)
                .unwrap();
            assert_eq!(direct, *reported);
        }
    }
    let ranks = fs::read_to_string(out.join(RANK_FILE)).unwrap();
    assert_eq!(ranks.lines().count(), 5);
    assert_eq!(
        fs::read_to_string(out.join(FEATURE_FILE))
            .unwrap()
            .lines()
            .count(),
        13
    );
    assert!(out.join("layout.csv").is_file());

    let weights = report.run_dir.join(PHI_FILE);
    let code = cli(&[
        "inspect",
        "--config",
        f.config.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--sample",
        "99",
    ]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn run_directories_never_collide() {
    let dir = tempfile::tempdir().unwrap();
    let a = fresh_run_dir(dir.path(), 3).unwrap();
    let b = fresh_run_dir(dir.path(), 3).unwrap();
    assert_ne!(a, b);
    assert!(a.file_name().unwrap().to_str().unwrap().contains("-seed3"));
}
