use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use llmood::dump::{EmbeddingDump, EmbeddingRecord};
use llmood::write_dump;

fn llmood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llmood"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Two ID classes around (±3, 0) and an OOD set around (0, 6), with small
/// deterministic jitter so the covariance is not singular.
fn dump(prefix: &str, centers: &[(f32, f32, Option<u32>)], per: usize) -> EmbeddingDump {
    let mut records = Vec::new();
    for (c, &(x, y, label)) in centers.iter().enumerate() {
        for i in 0..per {
            let t = (i as f32 + 1.0) * 0.37 + c as f32;
            records.push(EmbeddingRecord {
                id: format!("{prefix}{c}_{i}"),
                label,
                embedding: vec![x + 0.3 * t.sin(), y + 0.3 * (1.7 * t).cos(), 0.2 * (2.3 * t).sin()],
                class_logits: Some(vec![x, -x]),
            });
        }
    }
    EmbeddingDump {
        dim: 3,
        class_names: vec!["great".into(), "awful".into()],
        records,
    }
}

fn write_fixture(dir: &Path) {
    let id = [(3.0, 0.0, Some(0)), (-3.0, 0.0, Some(1))];
    write_dump(&dump("tr", &id, 12), dir.join("train.edf")).unwrap();
    write_dump(&dump("va", &id, 4), dir.join("val.edf")).unwrap();
    write_dump(&dump("te", &id, 8), dir.join("test.edf")).unwrap();
    write_dump(&dump("oo", &[(0.0, 6.0, None)], 10), dir.join("far.edf")).unwrap();
    fs::write(
        dir.join("manifest.toml"),
        "id_train = \"train.edf\"\nid_val = \"val.edf\"\nid_test = \"test.edf\"\nfit_split = \"train\"\n\n\
         [[ood]]\nname = \"far\"\npath = \"far.edf\"\n",
    )
    .unwrap();
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(llmood(&["--help"]).status.code(), Some(0));
    assert_eq!(llmood(&["--version"]).status.code(), Some(0));
    assert!(stdout(&llmood(&["score", "--help"])).contains("--detector"));
}

#[test]
fn usage_errors_exit_one() {
    let o = llmood(&["inspect", "x.edf", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim().lines().count(), 1, "{}", stderr(&o));
    assert_eq!(
        llmood(&["fit", "--manifest", "m", "--detector", "nope", "--out-dir", "o"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(llmood(&[]).status.code(), Some(1));
}

#[test]
fn inspect_prints_header() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let o = llmood(&["inspect", path_str(&dir.path().join("train.edf"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    for line in ["n = 24", "d = 3", "K = 2", "classes = great, awful"] {
        assert!(out.contains(line), "{out}");
    }
}

#[test]
fn missing_dump_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = llmood(&["inspect", path_str(&dir.path().join("absent.edf"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: "));
}

#[test]
fn metrics_from_plain_score_files() {
    let dir = tempfile::tempdir().unwrap();
    let (id, ood) = (dir.path().join("id.txt"), dir.path().join("ood.txt"));
    fs::write(&id, "0.9\n0.3\n").unwrap();
    fs::write(&ood, "0.5\n0.1\n").unwrap();
    let o = llmood(&["metrics", "--id", path_str(&id), "--ood", path_str(&ood)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("AUROC 0.75"), "{}", stdout(&o));
}

#[test]
fn one_shot_maha_fit_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let m = dir.path().join("manifest.toml");
    let out = dir.path().join("fit");
    let o = llmood(&[
        "fit",
        "--manifest",
        path_str(&m),
        "--detector",
        "maha",
        "--shots",
        "1",
        "--out-dir",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.starts_with("error: ") && err.to_lowercase().contains("degenerate"),
        "{err}"
    );
}

#[test]
fn fit_then_score_matches_direct_score() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let m = dir.path().join("manifest.toml");
    let fit_dir = dir.path().join("fit");
    let o = llmood(&[
        "fit",
        "--manifest",
        path_str(&m),
        "--detector",
        "maha",
        "--out-dir",
        path_str(&fit_dir),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let fitted = fit_dir.join("maha.json");
    let with = llmood(&[
        "score",
        "--manifest",
        path_str(&m),
        "--detector",
        "maha",
        "--fitted",
        path_str(&fitted),
        "--out-dir",
        path_str(&a),
    ]);
    assert_eq!(with.status.code(), Some(0), "{}", stderr(&with));
    let direct = llmood(&[
        "score",
        "--manifest",
        path_str(&m),
        "--detector",
        "maha",
        "--out-dir",
        path_str(&b),
    ]);
    assert_eq!(direct.status.code(), Some(0), "{}", stderr(&direct));
    assert!(stdout(&direct).contains("far: AUROC 1.0000"), "{}", stdout(&direct));

    let ta = fs::read_to_string(a.join("scores_maha.tsv")).unwrap();
    let tb = fs::read_to_string(b.join("scores_maha.tsv")).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(ta.lines().count(), 1 + 16 + 10);

    let m = llmood(&[
        "metrics",
        "--id",
        path_str(&a.join("scores_maha.tsv")),
        "--ood",
        path_str(&a.join("scores_maha.tsv")),
    ]);
    assert_eq!(m.status.code(), Some(0));
}

#[test]
fn full_vocab_msp_needs_log_partition() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let m = dir.path().join("manifest.toml");
    let out = path_str(dir.path()).to_string() + "/s";
    let o = llmood(&[
        "score",
        "--manifest",
        path_str(&m),
        "--detector",
        "msp",
        "--out-dir",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = llmood(&[
        "score",
        "--manifest",
        path_str(&m),
        "--detector",
        "msp",
        "--msp-mode",
        "renormalized",
        "--out-dir",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn anisotropy_and_quantize() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let train = dir.path().join("train.edf");
    let o = llmood(&["anisotropy", path_str(&train)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: f64 = stdout(&o).trim().strip_prefix("anisotropy ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&v));

    let q = dir.path().join("q");
    let o = llmood(&[
        "quantize",
        path_str(&train),
        "--precision",
        "int8_sim",
        "--out-dir",
        path_str(&q),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let written = stdout(&o).trim().to_string();
    let o = llmood(&["inspect", &written]);
    assert!(stdout(&o).contains("n = 24"));
}
