use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rasp-forge"));
    c.env_remove("RASP_FORGE_PRECISION");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Compiles frac_prevs over {a,b,c,x} with 5 positions into a temp dir.
fn frac_prevs_model() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("frac_prevs.json");
    ok(&["compile", "--builtin", "frac_prevs", "--vocab", "a,b,c,x", "--max-seq-len", "5", "-o", p(&model)]);
    (dir, model)
}

#[test]
fn compile_and_run_the_worked_example() {
    let (_dir, model) = frac_prevs_model();
    let out = ok(&["run", p(&model), "--input", "xacx"]);
    assert_eq!(out.trim(), "[1, 0.5, 0.3333, 0.5]");

    let precise = bin()
        .args(["run", p(&model), "--input", "xacx"])
        .env("RASP_FORGE_PRECISION", "8")
        .output()
        .unwrap();
    assert_eq!(stdout(&precise).trim(), "[1, 0.5, 0.33333333, 0.5]");
}

#[test]
fn oracle_check_passes_for_builtins_and_sources() {
    let (dir, model) = frac_prevs_model();
    let o = run(&["run", p(&model), "--input", "xacx", "--check-oracle", "--builtin", "frac_prevs"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("oracle check passed"));

    let src = dir.path().join("count.rasp");
    std::fs::write(&src, "# how many tokens equal mine\nsame = select(tokens, tokens, ==);\nreturn selector_width(same);\n").unwrap();
    let counted = dir.path().join("count.json");
    ok(&["compile", "--source", p(&src), "--vocab", "a,b", "--max-seq-len", "4", "-o", p(&counted)]);
    let o = run(&["run", p(&counted), "--input", "abba", "--check-oracle", "--source", p(&src)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "[2, 2, 2, 2]");
}

#[test]
fn sort_gets_its_context_length_from_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("sort.json");
    ok(&["compile", "--builtin", "sort", "--vocab", "1,2,3,4", "--max-seq-len", "4", "-o", p(&model)]);
    let out = ok(&["run", p(&model), "--input", "3,1,4,2", "--check-oracle", "--builtin", "sort"]);
    assert_eq!(out.trim(), "[1, 2, 3, 4]");
}

#[test]
fn builtin_parameters_are_passed_through() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("dyck.json");
    ok(&[
        "compile", "--builtin", "dyck_n", "--param", "pairs=(),{}", "--vocab", "(,),{,}", "--max-seq-len", "6", "-o",
        p(&model),
    ]);
    let o = run(&["run", p(&model), "--input", "({})", "--check-oracle", "--builtin", "dyck_n", "--param", "pairs=(),{}"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "[true, true, true, true]");
    let negative = ok(&["run", p(&model), "--input", "())("]);
    assert_eq!(negative.trim(), "[false, false, false, false]");

    let bad = run(&["compile", "--builtin", "dyck_n", "--param", "pairs", "--vocab", "(", "--max-seq-len", "2", "-o", "x"]);
    assert_eq!(bad.status.code(), Some(1));
    let both = run(&["compile", "--builtin", "sort", "--source", "a.rasp", "--vocab", "1", "--max-seq-len", "2", "-o", "x"]);
    assert_eq!(both.status.code(), Some(1));
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let (dir, model) = frac_prevs_model();

    let unknown = run(&["run", p(&model), "--input", "xyz"]);
    assert_eq!(unknown.status.code(), Some(3));
    assert!(stderr(&unknown).contains("not in vocabulary"));

    let too_long = run(&["run", p(&model), "--input", "xxxxxx"]);
    assert_eq!(too_long.status.code(), Some(3));

    let missing_model = run(&["run", p(&dir.path().join("nope.json")), "--input", "x"]);
    assert_eq!(missing_model.status.code(), Some(3));

    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["compile", "--builtin", "frac_prevs", "-o", "x.json"]).status.code(), Some(1));
    assert_eq!(
        run(&["compile", "--builtin", "no_such_program", "--vocab", "a", "--max-seq-len", "3", "-o", "x.json"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(&["trace", p(&model), "--input", "x", "--format", "png", "-o", "t"]).status.code(), Some(1));

    let bad = dir.path().join("bad.rasp");
    std::fs::write(&bad, "return aggregate(select(tokens, tokens, ==), ;").unwrap();
    let o = run(&["compile", "--source", p(&bad), "--vocab", "a", "--max-seq-len", "3", "-o", "x.json"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn list_builtins_names_every_program() {
    let out = ok(&["list-builtins"]);
    for name in ["frac_prevs", "sort_unique", "sort", "pair_balance", "dyck_n"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{name}:"))), "{name} missing:\n{out}");
    }
}

#[test]
fn traces_are_written_in_each_format() {
    let (dir, model) = frac_prevs_model();
    for format in ["csv", "svg", "pgm"] {
        let path = dir.path().join(format!("trace.{format}"));
        ok(&["trace", p(&model), "--input", "xacx", "--format", format, "-o", p(&path)]);
        let bytes = std::fs::read(&path).unwrap();
        match format {
            "csv" => {
                let text = String::from_utf8(bytes).unwrap();
                assert!(text.starts_with("# version: 1"));
                assert!(text.contains("tokens:x") && text.contains("frac_prevs"));
            }
            "svg" => assert!(String::from_utf8(bytes).unwrap().contains("<svg")),
            _ => assert!(bytes.starts_with(b"P")),
        }
    }
}

fn final_metrics(dir: &Path) -> Vec<(usize, f64)> {
    let text = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn short_compression_reduces_the_output_loss_and_is_reproducible() {
    let (dir, model) = frac_prevs_model();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let args = |o: &Path| {
        vec![
            "compress".to_string(),
            p(&model).to_string(),
            "--d".into(),
            "6".into(),
            "--steps".into(),
            "300".into(),
            "--batch-size".into(),
            "16".into(),
            "--seed".into(),
            "3".into(),
            "-o".into(),
            p(o).to_string(),
        ]
    };
    let a = bin().args(args(&out_a)).output().unwrap();
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).starts_with("d=6 steps=300 l_out="));
    let b = bin().args(args(&out_b)).output().unwrap();
    assert!(b.status.success());

    let metrics = final_metrics(&out_a);
    let (first, last) = (metrics[0], *metrics.last().unwrap());
    assert_eq!((first.0, last.0), (0, 300));
    assert!(last.1 < first.1, "l_out went from {} to {}", first.1, last.1);

    for file in ["w.json", "metrics.csv", "diagnostics.csv", "round_trip.svg"] {
        let (x, y) = (std::fs::read(out_a.join(file)).unwrap(), std::fs::read(out_b.join(file)).unwrap());
        assert!(x == y, "{file} differs between identical runs");
    }
    assert_eq!(stdout(&a), stdout(&b));

    // the saved W feeds back into diagnose
    let diag = ok(&["diagnose", p(&model), "--w", p(&out_a.join("w.json")), "--eval-size", "32"]);
    assert!(diag.contains("accuracy ") && diag.contains("per-layer cosine ["));
}

#[test]
fn compress_rejects_impossible_widths() {
    let (dir, model) = frac_prevs_model();
    let o = run(&["compress", p(&model), "--d", "99", "--steps", "1", "-o", p(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["compress", p(&model), "--d", "4", "--steps", "1", "--full-schedule", "-o", "c"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diagnose_the_pca_baseline() {
    let (dir, model) = frac_prevs_model();
    let csv = dir.path().join("pca.csv");
    let out = ok(&["diagnose", p(&model), "--pca", "--d", "13", "--eval-size", "64", "-o", p(&csv)]);
    // all components keep everything
    assert!(out.contains("accuracy 1\n"), "{out}");
    assert!(out.contains("per-layer cosine [1, 1, 1, 1]"), "{out}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().nth(1) == Some("kind,row,column,value"));
    assert!(text.contains("\ncosine,attn_1,,"));

    let svg = dir.path().join("pca.svg");
    ok(&["diagnose", p(&model), "--pca", "--d", "3", "--format", "svg", "-o", p(&svg)]);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("round trip"));

    assert_eq!(run(&["diagnose", p(&model), "--pca"]).status.code(), Some(1));
}
