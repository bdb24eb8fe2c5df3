use std::fs;

use super::*;
use crate::model::EncoderMode;

fn run_cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run(std::iter::once("quad").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

const TINY: &[&str] = &[
    "--synthetic",
    "--entities",
    "30",
    "--statements",
    "60",
    "--epochs",
    "2",
    "--dim",
    "8",
    "--hidden",
    "8",
    "--lr",
    "1e-3",
    "--batch",
    "32",
    "--set",
    "heads=2",
    "--set",
    "decoder_layers=1",
    "--set",
    "base_layers=1",
];

fn with_out<'a>(base: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut v = base.to_vec();
    v.extend(["--out", out]);
    v
}

#[test]
fn precedence_is_defaults_then_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "# comment\nalpha = 0.6\nbeta=1\nlr_decay=none\nbatch_size=256\n\nencoder_mode=parallel\n").unwrap();
    let mut c = RunConfig::default();
    c.apply_file(&file).unwrap();
    assert_eq!(c.model.encoder.alpha, 0.6);
    assert_eq!(c.train.beta, 1.0);
    assert_eq!(c.train.lr_decay, None);
    assert_eq!(c.train.batch_size, 256);
    assert_eq!(c.model.encoder.mode, EncoderMode::Parallel);
    // untouched keys keep their defaults
    assert_eq!(c.train.label_smoothing, 0.2);

    let args = RunArgs::try_parse_from_for_test(&["--config", file.to_str().unwrap(), "--synthetic", "--alpha", "0.3"]);
    let c = args.resolve().unwrap();
    assert_eq!(c.model.encoder.alpha, 0.3);
    assert_eq!(c.train.beta, 1.0);
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    let mut c = RunConfig::default();
    assert!(matches!(c.set("alhpa", "0.5"), Err(Error::Config(_))));
    assert!(matches!(c.set("alpha", "abc"), Err(Error::Config(_))));
    assert!(matches!(c.set("encoder_mode", "both"), Err(Error::Config(_))));
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.cfg");
    fs::write(&file, "alpha=0.5\nbogus=1\n").unwrap();
    let err = c.apply_file(&file).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    // every documented key is settable with some value
    for key in KEYS {
        let value = match *key {
            "data" | "out" => "x",
            "synthetic" | "strict_alpha" | "degree_norm" | "eval_train" | "tied_output" => "true",
            "encoder_mode" => "sequential",
            "mix" => "quad-mix",
            "encoder_activation" | "output_activation" | "ffn_activation" => "tanh",
            "positions" => "role",
            "smoothing" => "flip",
            "filter" => "triple",
            "lr_decay" | "clip_norm" => "none",
            "alpha" | "beta" | "qual_frac" | "label_smoothing" | "encoder_dropout" | "parallel_dropout"
            | "decoder_dropout" | "lr" => "0.1",
            _ => "4",
        };
        c.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
    }
}

#[test]
fn exit_codes() {
    assert_eq!(exit_code(&Error::Config("x".into())), 2);
    assert_eq!(exit_code(&Error::Numeric("x".into())), 1);
    let (code, _) = run_cli(&["train", "--synthetic", "--alhpa", "1"]);
    assert_eq!(code, 2);
    let (code, _) = run_cli(&["train", "--synthetic", "--set", "nope=1"]);
    assert_eq!(code, 2);
    let (code, _) = run_cli(&["train"]);
    assert_eq!(code, 2, "no data source");
    let (code, _) = run_cli(&["eval", "--checkpoint", "/nonexistent/checkpoint.json"]);
    assert_eq!(code, 2);
}

#[test]
fn stats_of_empty_file_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("empty.txt");
    fs::write(&file, "").unwrap();
    let (code, out) = run_cli(&["stats", file.to_str().unwrap()]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["statements"], 0);
    assert_eq!(v["entities"], 0);
    assert_eq!(v["relations"], 0);

    fs::write(&file, "a,r,b\na,r\n").unwrap();
    let (code, _) = run_cli(&["stats", file.to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn train_writes_outputs_and_eval_reproduces_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let mut args = vec!["train"];
    args.extend(with_out(TINY, out_s));
    args.extend(["--alpha", "0.6", "--beta", "1"]);
    let (code, printed) = run_cli(&args);
    assert_eq!(code, 0);
    for f in [CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE, EPOCH_LOG_FILE] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest = Manifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.config.model.encoder.alpha, 0.6);
    assert_eq!(manifest.config.train.beta, 1.0);
    assert_eq!(manifest.seed, 0);
    assert_eq!(manifest.data_hash.len(), 64);
    let log = fs::read_to_string(out.join(EPOCH_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);

    let metrics: Vec<crate::evaluator::Metrics> = serde_json::from_str(&printed).unwrap();
    let test: Vec<_> = metrics.iter().filter(|m| m.split == Split::Test).cloned().collect();
    assert!(!test.is_empty());

    let ranks = dir.path().join("ranks.csv");
    let ck = out.join(CHECKPOINT_FILE);
    let (code, evaluated) = run_cli(&["eval", "--checkpoint", ck.to_str().unwrap(), "--ranks", ranks.to_str().unwrap()]);
    assert_eq!(code, 0);
    let again: Vec<crate::evaluator::Metrics> = serde_json::from_str(&evaluated).unwrap();
    assert_eq!(again, test);
    let csv = fs::read_to_string(&ranks).unwrap();
    assert_eq!(csv.lines().next(), Some("query,gold,rank"));
    assert_eq!(csv.lines().count(), 1 + test.iter().map(|m| m.n_queries).sum::<usize>());

    // a second run with the same settings reproduces the metrics exactly
    let out2 = dir.path().join("run2");
    let mut args = vec!["train"];
    args.extend(with_out(TINY, out2.to_str().unwrap()));
    args.extend(["--alpha", "0.6", "--beta", "1"]);
    let (code, printed2) = run_cli(&args);
    assert_eq!(code, 0);
    assert_eq!(printed, printed2);
}

#[test]
fn ablation_has_four_variants_by_three_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    let mut args = vec!["ablate"];
    args.extend(with_out(TINY, out.to_str().unwrap()));
    args.extend(["--set", "epochs=1"]);
    let (code, table) = run_cli(&args);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 12);
    for name in ["full", "w/o qual-mask", "w/o qual-agg", "w/o qual-agg & mask"] {
        assert_eq!(rows.iter().filter(|r| r["variant"] == name).count(), 3);
        assert!(table.contains(name));
    }
    assert_eq!(table.lines().count(), 5);
    assert_eq!(fs::read_to_string(out.join("ablation.txt")).unwrap(), table);
}

#[test]
fn variant_definitions() {
    let base = RunConfig::default();
    let both = Variant::NoBoth.apply(&base);
    assert_eq!(both.train.beta, 0.0);
    assert_eq!(both.model.encoder.mode, EncoderMode::BaseOnly);
    let mask = Variant::NoMask.apply(&base);
    assert_eq!((mask.train.beta, mask.model.encoder.mode), (0.0, base.model.encoder.mode));
    let agg = Variant::NoAgg.apply(&base);
    assert_eq!((agg.train.beta, agg.model.encoder.mode), (base.train.beta, EncoderMode::BaseOnly));
    assert_eq!(Variant::Full.apply(&base), base);
}

#[test]
fn mean_std_examples() {
    assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!(m, 2.0);
    assert!((s - 1.0).abs() < 1e-15);
}

impl RunArgs {
    fn try_parse_from_for_test(args: &[&str]) -> Self {
        #[derive(Parser)]
        struct Wrap {
            #[command(flatten)]
            run: RunArgs,
        }
        Wrap::try_parse_from(std::iter::once("x").chain(args.iter().copied())).unwrap().run
    }
}
