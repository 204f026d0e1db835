use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "
pretrain_data.num_samples = 8
pretrain_data.image_size = 16
finetune_data.num_samples = 8
finetune_data.val_samples = 4
finetune_data.image_size = 16
model.encoder_widths = 4,8
model.decoder_widths = 8,4
encoder.epochs = 1
encoder.batch_size = 4
encoder.crop_size = 16
denoise.epochs = 1
denoise.batch_size = 4
denoise.crop_size = 16
finetune.epochs = 1
finetune.batch_size = 4
finetune.crop_size = 16
finetune.label_fraction = 0.5
";

fn ddep(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ddep"))
        .current_dir(dir)
        .env_remove("DDEP_OUT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
    dir
}

#[test]
fn stages_chain_through_checkpoints() {
    let dir = setup();
    let d = dir.path();
    let c = ["--config", "tiny.conf"];
    let run = |extra: &[&str]| {
        let o = ddep(d, &[&c[..], extra].concat());
        assert!(o.status.success(), "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["--out", "enc", "pretrain-encoder"]);
    run(&["--out", "den", "pretrain-denoise", "--set", "denoise.init_from=enc/checkpoint.ddep"]);
    let ft = run(&["--out", "ft", "finetune", "--set", "finetune.init_from=den/checkpoint.ddep", "--seed", "4"]);
    assert!(stdout(&ft).contains("best_miou"));
    for f in ["checkpoint.ddep", "train_steps.csv", "train_epochs.csv", "eval.csv", "stage.conf"] {
        assert!(d.join("ft").join(f).exists(), "{f}");
    }
    assert!(std::fs::read_to_string(d.join("ft/stage.conf")).unwrap().contains("finetune.seed = 4"));
    let ev = run(&["--out", "ev", "evaluate", "--checkpoint", "ft/checkpoint.ddep"]);
    assert!(stdout(&ev).starts_with("miou "));
    let steps = std::fs::read_to_string(d.join("ft/train_steps.csv")).unwrap();
    assert!(steps.starts_with("step,lr,loss\n"));
}

#[test]
fn oracle_evaluation_scores_one() {
    let dir = setup();
    let o = ddep(dir.path(), &["--config", "tiny.conf", "--out", "o", "evaluate", "--oracle"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("miou 1\n"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("o/eval.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn gen_data_writes_three_splits() {
    let dir = setup();
    let o = ddep(dir.path(), &["--config", "tiny.conf", "--out", "data", "gen-data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for split in ["pretrain", "finetune", "val"] {
        assert!(stdout(&o).contains(split));
    }
    let manifests: Vec<_> = std::fs::read_dir(dir.path().join("data/val")).unwrap().collect();
    assert!(!manifests.is_empty());
}

#[test]
fn exit_codes_separate_usage_config_and_runtime_errors() {
    let dir = setup();
    let d = dir.path();
    let code = |args: &[&str]| ddep(d, args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["finetune", "--set", "finetune.lrr=1"]), 1);
    assert_eq!(code(&["finetune", "--set", "finetune.lr=fast"]), 1);
    assert_eq!(code(&["--config", "missing.conf", "finetune"]), 1);
    assert_eq!(code(&["--config", "tiny.conf", "evaluate", "--oracle", "--seed", "1"]), 1);

    let o = ddep(d, &["--config", "tiny.conf", "finetune", "--set", "finetune.init_from=nowhere.ddep"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.ddep"));

    std::fs::write(d.join("junk.ddep"), b"not a checkpoint").unwrap();
    let o = ddep(d, &["--config", "tiny.conf", "--out", "ev", "evaluate", "--checkpoint", "junk.ddep"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("junk.ddep"));
}

#[test]
fn sweep_resumes_and_feeds_plot_data() {
    let dir = setup();
    let d = dir.path();
    let mut conf = TINY.to_string();
    conf.push_str("sweep.axis.finetune.init = none | encoder\nsweep.axis.finetune.label_fraction = 0.5\nsweep.seeds = 0,1\n");
    std::fs::write(d.join("sweep.conf"), conf).unwrap();
    let o = ddep(d, &["--config", "sweep.conf", "--out", "s", "sweep"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("s/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let again = ddep(d, &["--config", "sweep.conf", "--out", "s", "sweep"]);
    assert!(again.status.success());
    assert_eq!(std::fs::read_to_string(d.join("s/sweep.csv")).unwrap(), csv);

    let p = ddep(d, &["--out", "s", "plot-data"]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    let series = std::fs::read_to_string(d.join("s/plots/series_encoder.csv")).unwrap();
    assert!(series.starts_with("label_fraction,log10_fraction,mean_miou,std_miou,n\n0.5,"));
    assert!(series.trim_end().ends_with(",2"));
}
