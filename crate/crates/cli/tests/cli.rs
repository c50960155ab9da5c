mod common;

use std::path::Path;

use common::*;
use weightlab_cli::output::{sig6, FileDigest};
use weightlab_core::diagnostics::{KindGroup, NamePatterns, OrthoProjector};
use weightlab_core::merge::{merge, MergeMethod, MergeRecipe};
use weightlab_core::tensor::{encode_archive, read_archive};
use weightlab_core::{Checkpoint, DType};

/// Jaccard and cosine of one weight kind.
type Cell = (Option<f64>, Option<f64>);

struct MergeFixture {
    dir: tempfile::TempDir,
    anchor: Checkpoint,
    models: Vec<Checkpoint>,
}

impl MergeFixture {
    fn new(dtype: DType) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(1);
        let anchor = decoder(1, 8, dtype, &mut r);
        let models: Vec<Checkpoint> = (0..3).map(|_| perturb(&anchor, 0.5, 0.1, &mut r)).collect();
        save(dir.path(), "sft.st", &anchor);
        for (i, m) in models.iter().enumerate() {
            save(dir.path(), &format!("m{}.st", i + 1), m);
        }
        Self { dir, anchor, models }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }

    fn library(&self, recipe: &MergeRecipe) -> Vec<u8> {
        let refs: Vec<&Checkpoint> = self.models.iter().collect();
        let anchor = (recipe.method.needs_anchor() || recipe.dare.is_some()).then_some(&self.anchor);
        encode_archive(&merge(recipe, anchor, &refs).unwrap())
    }
}

fn ids() -> Vec<String> {
    vec!["m1".into(), "m2".into(), "m3".into()]
}

#[test]
fn merge_matches_library_composition() {
    let f = MergeFixture::new(DType::BF16);
    let out = f.path("out.st");
    let (sft, m1, m2, m3) = (f.path("sft.st"), f.path("m1.st"), f.path("m2.st"), f.path("m3.st"));
    let cases: Vec<(Vec<&str>, MergeRecipe)> = vec![
        (
            vec!["--method", "ties", "--density", "0.2", "--lambda", "1.0"],
            MergeRecipe::new(MergeMethod::Ties, "sft", ids()).with_density(0.2),
        ),
        (
            vec!["--method", "ta", "--lambda", "0.7"],
            MergeRecipe::new(MergeMethod::TaskArithmetic, "sft", ids()).with_lambda(0.7),
        ),
        (
            vec!["--method", "sce", "--select-tau", "0.3"],
            MergeRecipe::new(MergeMethod::Sce, "sft", ids()).with_select_tau(0.3),
        ),
        (vec!["--method", "average"], MergeRecipe::new(MergeMethod::Average, "", ids())),
        (
            vec!["--method", "ties", "--dare-p", "0.5", "--seed", "9"],
            MergeRecipe::new(MergeMethod::Ties, "sft", ids()).with_dare(0.5, 9),
        ),
    ];
    for (flags, recipe) in cases {
        let mut args = vec!["merge", "--anchor", &sft, "--models", &m1, &m2, &m3, "-o", &out];
        args.extend(flags.iter().copied());
        let res = weightlab(&args);
        assert!(res.status.success(), "{flags:?}: {}", String::from_utf8_lossy(&res.stderr));
        assert_eq!(std::fs::read(&out).unwrap(), f.library(&recipe), "{flags:?}");

        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(format!("{out}.provenance.json")).unwrap()).unwrap();
        assert_eq!(sidecar["recipe"], serde_json::to_value(&recipe).unwrap());
        assert_eq!(sidecar["output"]["sha256"], FileDigest::of(Path::new(&out)).unwrap().sha256);
        for (i, m) in [&m1, &m2, &m3].iter().enumerate() {
            assert_eq!(sidecar["models"][i]["sha256"], FileDigest::of(Path::new(m)).unwrap().sha256);
            assert_eq!(sidecar["models"][i]["id"], format!("m{}", i + 1));
        }
        if recipe.method == MergeMethod::Average {
            assert!(sidecar["anchor"].is_null());
        } else {
            assert_eq!(sidecar["anchor"]["sha256"], FileDigest::of(Path::new(&sft)).unwrap().sha256);
        }
        assert!(!String::from_utf8_lossy(&std::fs::read(format!("{out}.provenance.json")).unwrap()).contains("time"));
    }
}

#[test]
fn average_of_one_model_is_the_model() {
    let f = MergeFixture::new(DType::BF16);
    let out = f.path("avg.st");
    let res = weightlab(&["merge", "--method", "average", "--models", &f.path("m1.st"), "-o", &out]);
    assert!(res.status.success());
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(f.path("m1.st")).unwrap());
}

#[test]
fn unknown_method_is_a_usage_error() {
    let f = MergeFixture::new(DType::F32);
    let out = f.path("x.st");
    let res = weightlab(&["merge", "--method", "slerp", "--models", &f.path("m1.st"), "-o", &out]);
    assert_eq!(res.status.code(), Some(2));
    let (kind, message) = error_of(&res);
    assert_eq!(kind, "usage");
    assert!(message.contains("slerp"), "{message}");
    assert_eq!(String::from_utf8_lossy(&res.stderr).lines().count(), 1);
    assert!(!Path::new(&out).exists());
}

#[test]
fn failed_merges_leave_no_output() {
    let f = MergeFixture::new(DType::F32);
    let out = f.path("out.st");
    let before: Vec<_> = std::fs::read_dir(f.dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();

    let res = weightlab(&["merge", "--method", "ta", "--anchor", &f.path("sft.st"), "--models", &f.path("nope.st"), "-o", &out]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(error_of(&res).0, "io");

    let mut other = f.models[0].clone();
    other
        .insert("extra.weight", weightlab_core::Tensor::from_f32(DType::F32, vec![2], &[1.0, 2.0]).unwrap())
        .unwrap();
    let odd = save(f.dir.path(), "odd.st", &other);
    let res = weightlab(&["merge", "--method", "ta", "--anchor", &f.path("sft.st"), "--models", &f.path("m1.st"), p(&odd), "-o", &out]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(error_of(&res).0, "name_mismatch");

    let res = weightlab(&["merge", "--method", "ties", "--density", "0", "--anchor", &f.path("sft.st"), "--models", &f.path("m1.st"), "-o", &out]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_of(&res).0, "invalid_parameter");

    let mut after: Vec<_> = std::fs::read_dir(f.dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    after.retain(|n| n != "odd.st");
    assert_eq!(after.len(), before.len(), "{after:?}");
    assert!(!Path::new(&out).exists());
}

#[test]
fn config_file_supplies_the_recipe_and_flags_override_it() {
    let f = MergeFixture::new(DType::F32);
    let cfg = f.dir.path().join("recipe.json");
    let out = f.path("cfg.st");
    let body = serde_json::json!({
        "method": "task_arithmetic",
        "lambda": 0.5,
        "anchor": f.path("sft.st"),
        "models": [f.path("m1.st"), f.path("m2.st"), f.path("m3.st")],
        "output": out,
    });
    std::fs::write(&cfg, body.to_string()).unwrap();

    let res = weightlab(&["merge", "--config", p(&cfg)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let recipe = MergeRecipe::new(MergeMethod::TaskArithmetic, "sft", ids()).with_lambda(0.5);
    assert_eq!(std::fs::read(&out).unwrap(), f.library(&recipe));

    let res = weightlab(&["merge", "--config", p(&cfg), "--lambda", "0.25"]);
    assert!(res.status.success());
    assert_eq!(std::fs::read(&out).unwrap(), f.library(&recipe.with_lambda(0.25)));

    std::fs::write(&cfg, r#"{"method": "ties", "colour": 3}"#).unwrap();
    let res = weightlab(&["merge", "--config", p(&cfg)]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_of(&res).0, "usage");
}

struct ReportFixture {
    dir: tempfile::TempDir,
    sft: Checkpoint,
    models: Vec<Checkpoint>,
}

fn report_fixture() -> ReportFixture {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(7);
    let sft = decoder(1, 8, DType::F32, &mut r);
    let models: Vec<Checkpoint> = (0..3).map(|_| perturb(&sft, 0.4, 0.2, &mut r)).collect();
    save(dir.path(), "sft.st", &sft);
    for (name, m) in ["math", "code", "sci"].iter().zip(&models) {
        save(dir.path(), &format!("{name}.st"), m);
    }
    ReportFixture { dir, sft, models }
}

/// Jaccard and projected cosine of one pair on one tensor, computed directly.
fn brute_pair(sft: &[f32], a: &[f32], b: &[f32], q: &[f64], k: usize) -> (Option<f64>, Option<f64>) {
    let changed = |w: &[f32]| -> Vec<bool> {
        w.iter()
            .zip(sft)
            .map(|(&x, &s)| (x - s).abs() > 1e-3f32 * x.abs().max(s.abs()))
            .collect()
    };
    let (ma, mb) = (changed(a), changed(b));
    let inter = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count();
    let union = ma.iter().zip(&mb).filter(|(x, y)| **x || **y).count();
    let jac = (union > 0).then(|| inter as f64 / union as f64);
    if inter == 0 {
        return (jac, None);
    }
    let project = |w: &[f32]| -> Vec<f64> {
        let mut z = vec![0.0; k];
        for i in 0..sft.len() {
            if ma[i] && mb[i] {
                let d = f64::from(w[i] - sft[i]);
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc += q[i * k + c] * d;
                }
            }
        }
        z
    };
    let (pa, pb) = (project(a), project(b));
    let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
    let na = pa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = pb.iter().map(|x| x * x).sum::<f64>().sqrt();
    (jac, Some(dot / (na * nb)))
}

fn close_sig6(cell: &str, want: Option<f64>) {
    match want {
        None => assert_eq!(cell, "undefined"),
        Some(w) => {
            let got: f64 = cell.parse().unwrap();
            assert!((got - w).abs() <= 5e-6 * w.abs().max(1e-3), "{cell} vs {w}");
        }
    }
}

#[test]
fn weight_report_matches_brute_force() {
    let f = report_fixture();
    let d = f.dir.path();
    let out = d.join("report");
    let res = weightlab(&[
        "weight-report", "--sft", p(&d.join("sft.st")),
        "--models", p(&d.join("math.st")), p(&d.join("code.st")), p(&d.join("sci.st")),
        "--layer", "0", "--target-dim", "16", "--seed", "5", "--out-dir", p(&out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for file in weightlab_cli::commands::weight_report::FILES {
        assert!(out.join(file).exists(), "{file}");
    }

    let patterns = NamePatterns::default();
    let q = OrthoProjector::new(64, 16, 5).unwrap().matrix();
    let labels = ["math", "code", "sci"];
    let rows = read_csv(&out.join("pairs.csv"));
    assert_eq!(rows[0], ["left", "right", "kind", "jaccard", "cosine"]);
    let mut line = 1;
    for i in 0..3 {
        for j in i + 1..3 {
            let mut attn = Vec::new();
            let mut ffn = Vec::new();
            for kind in &patterns.kinds {
                let name = kind.resolve(0);
                let s = f.sft.f32_values(&name).unwrap();
                let (a, b) = (f.models[i].f32_values(&name).unwrap(), f.models[j].f32_values(&name).unwrap());
                let (jac, cos) = brute_pair(&s, &a, &b, &q, 16);
                let row = &rows[line];
                assert_eq!((row[0].as_str(), row[1].as_str(), row[2].as_str()), (labels[i], labels[j], kind.label.as_str()));
                close_sig6(&row[3], jac);
                close_sig6(&row[4], cos);
                match kind.group {
                    KindGroup::Attention => attn.push((jac, cos)),
                    KindGroup::Ffn => ffn.push((jac, cos)),
                }
                line += 1;
            }
            for (label, group) in [("attention", &attn), ("ffn", &ffn)] {
                let mean = |pick: fn(&Cell) -> Option<f64>| {
                    let v: Vec<f64> = group.iter().filter_map(pick).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                };
                assert_eq!(rows[line][2], label);
                close_sig6(&rows[line][3], mean(|c| c.0));
                close_sig6(&rows[line][4], mean(|c| c.1));
                line += 1;
            }
        }
    }
    assert_eq!(line, rows.len());

    let wide = read_csv(&out.join("jaccard.csv"));
    assert_eq!(wide.len(), 1 + 3 + 2);
    assert_eq!(wide[4][0], "random (analytic)");
    assert!(wide[4][1..].iter().all(|c| c == &sig6(0.3 / 1.7)));
    assert_eq!(wide[5][0], "random (empirical)");
    assert!(stdout(&res).contains("random p=0.3  analytic 0.176"), "{}", stdout(&res));
}

#[test]
fn identical_models_have_unit_jaccard() {
    let f = report_fixture();
    let d = f.dir.path();
    let out = d.join("same");
    save(d, "math2.st", &f.models[0]);
    let res = weightlab(&[
        "weight-report", "--sft", p(&d.join("sft.st")), "--models", p(&d.join("math.st")), p(&d.join("math2.st")),
        "--layer", "0", "--target-dim", "8", "--out-dir", p(&out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let wide = read_csv(&out.join("jaccard.csv"));
    assert_eq!(wide[1][0], "math/math2");
    assert!(wide[1][1..].iter().all(|c| c == "1.00000"), "{:?}", wide[1]);
}

#[test]
fn weight_report_reports_missing_layers() {
    let f = report_fixture();
    let d = f.dir.path();
    let res = weightlab(&[
        "weight-report", "--sft", p(&d.join("sft.st")), "--models", p(&d.join("math.st")), p(&d.join("code.st")),
        "--out-dir", p(&d.join("x")),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let (kind, message) = error_of(&res);
    assert_eq!(kind, "unknown_tensor");
    assert!(message.contains("layers.17"), "{message}");
}

fn write_lines(path: &Path, lines: &[String]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn zero_difference_traces_make_everyone_a_neighbor() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t.jsonl");
    let mut lines = Vec::new();
    for e in ["code", "math", "sci"] {
        for dom in ["code", "math", "sci"] {
            lines.push(trace("p0", dom, e, &[-0.2, -1.0], &[-0.2, -1.0]));
            lines.push(trace("p1", dom, e, &[-0.7], &[-0.7]));
        }
    }
    write_lines(&traces, &lines);
    let res = weightlab(&["kl", "--traces", p(&traces), "--out-dir", p(dir.path())]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let cells = read_csv(&dir.path().join("kl_matrix.csv"));
    assert_eq!(cells.len(), 1 + 9 * 2);
    assert!(cells[1..].iter().all(|r| r[3] == "0.00000" && r[4] == "0.00000" && r[5] == "2"));
    let hoods = read_csv(&dir.path().join("neighborhoods.csv"));
    assert_eq!(hoods.len(), 1 + 3 * 2);
    assert_eq!(hoods[1], ["code", "1", "math", "0.00000"]);
    assert_eq!(hoods[2], ["code", "2", "sci", "0.00000"]);
}

#[test]
fn planted_two_by_two_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t.jsonl");
    // Cell (a, a): log-ratios 0.2 (two tokens) and 0.4 (one token).
    // Other cells: a single trajectory with log-ratio 0.5, 1.0 or 2.0.
    let lines = vec![
        trace("p0", "a", "a", &[-0.5, -0.5], &[-0.625, -0.575]),
        trace("p1", "a", "a", &[-0.25], &[-0.65]),
        trace("p0", "b", "a", &[-1.0], &[-1.5]),
        trace("p0", "a", "b", &[-1.0], &[-2.0]),
        trace("p0", "b", "b", &[-1.0], &[-3.0]),
    ];
    write_lines(&traces, &lines);
    let res = weightlab(&["kl", "--traces", p(&traces), "--out-dir", p(dir.path())]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let cells = read_csv(&dir.path().join("kl_matrix.csv"));
    assert_eq!(cells[0], ["expert", "domain", "normalization", "kl", "stderr", "n", "perf_delta"]);
    assert_eq!(cells[1], ["a", "a", "sequence", "0.300000", "0.100000", "2", "undefined"]);
    assert_eq!(cells[2], ["a", "a", "per_token", "0.250000", "0.150000", "2", "undefined"]);
    assert_eq!(cells[3][..5], ["a", "b", "sequence", "0.500000", "0.00000"]);
    assert_eq!(cells[5][..4], ["b", "a", "sequence", "1.00000"]);
    assert_eq!(cells[7][..4], ["b", "b", "sequence", "2.00000"]);
    // Domain a: own KL 0.3, so b (1.0) is outside 1.5 * 0.3. Domain b: own 2.0, a (0.5) is inside.
    let hoods = read_csv(&dir.path().join("neighborhoods.csv"));
    assert_eq!(hoods, vec![vec!["domain", "rank", "expert", "kl"], vec!["b", "1", "a", "0.500000"]]);

    let res = weightlab(&["kl", "--traces", p(&traces), "--domains", "c", "--out-dir", p(dir.path())]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(error_of(&res).0, "missing_cell");

    let res = weightlab(&["kl", "--traces", p(&traces), "--rule", "absolute", "--epsilon", "0.6", "--out-dir", p(dir.path())]);
    assert!(res.status.success());
    let hoods = read_csv(&dir.path().join("neighborhoods.csv"));
    assert_eq!(hoods[1..], [vec!["b", "1", "a", "0.500000"]]);
}

#[test]
fn gain_consistency_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("eval.jsonl");
    let table: [(&str, [f64; 10]); 4] = [
        ("sft", [0.0, 0.25, 0.5, 0.5, 1.0, 0.0, 0.75, 0.25, 0.5, 0.0]),
        ("s1", [0.5, 0.25, 0.75, 0.0, 1.0, 0.0, 1.0, 0.25, 0.5, 0.25]),
        ("s2", [0.25, 0.5, 0.5, 0.5, 1.0, 0.5, 0.75, 0.0, 0.5, 0.0]),
        ("t", [0.5, 0.5, 0.5, 1.0, 1.0, 0.25, 0.5, 0.5, 0.5, 0.0]),
    ];
    let mut lines = Vec::new();
    for (model, acc) in &table {
        for (i, a) in acc.iter().enumerate() {
            lines.push(eval_acc(model, "math", i, *a));
        }
    }
    // The baseline itself as a target has zero gain everywhere: undefined.
    write_lines(&logs, &lines);
    let res = weightlab(&[
        "gain", "--logs", p(&logs), "--baseline", "sft", "--single", "s1", "s2", "--targets", "t", "sft",
        "--out-dir", p(dir.path()),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = read_csv(&dir.path().join("gain.csv"));
    let want = 0.4375 / (0.75f64 * 0.6875).sqrt();
    assert_eq!(rows, vec![vec!["task".to_string(), "t".into(), "sft".into()], vec!["math".into(), sig6(want), "undefined".into()]]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gain.json")).unwrap()).unwrap();
    assert!((json["rows"][0]["consistency"][0].as_f64().unwrap() - want).abs() < 1e-12);

    let res = weightlab(&["gain", "--logs", p(&logs), "--baseline", "sft", "--single", "s9", "--targets", "t", "--out-dir", p(dir.path())]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(error_of(&res).0, "missing_cell");
}

#[test]
fn pearson_and_baseline_print_results() {
    let res = weightlab(&["pearson", "--x", "0,1,2,3", "--y", "1,0,3,2"]);
    assert!(res.status.success());
    assert_eq!(stdout(&res), "0.600000\n");
    let res = weightlab(&["pearson", "--x", "1,1,1", "--y", "1,2,3"]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(error_of(&res).0, "undefined");

    let dir = tempfile::tempdir().unwrap();
    let res = weightlab(&["baseline", "--p", "0.3", "--d", "100000", "--seed", "2", "--out-dir", p(dir.path())]);
    assert!(res.status.success());
    assert!(stdout(&res).contains("analytic 0.176"));
    let rows = read_csv(&dir.path().join("baseline.csv"));
    assert_eq!(rows[1][..4], ["0.300000", "100000", "2", "0.176471"]);
}

#[test]
fn thread_settings_are_validated_and_help_exits_cleanly() {
    let res = std::process::Command::new(env!("CARGO_BIN_EXE_weightlab"))
        .args(["pearson", "--x", "0,1", "--y", "1,0"])
        .env("WEIGHTLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_of(&res).0, "usage");

    let res = weightlab(&["--help"]);
    assert_eq!(res.status.code(), Some(0));
    assert!(stdout(&res).contains("weight-report"));
    let res = weightlab(&["frobnicate"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn merged_archive_reads_back() {
    let f = MergeFixture::new(DType::BF16);
    let out = f.path("rb.st");
    let res = weightlab(&["merge", "--method", "ta", "--out-dtype", "f32", "--anchor", &f.path("sft.st"), "--models", &f.path("m1.st"), "-o", &out]);
    assert!(res.status.success());
    let back = read_archive(&out).unwrap();
    assert!(back.iter().all(|(_, t)| t.dtype() == DType::F32));
    // One model, lambda 1: anchor + (m1 - anchor) = m1 exactly on the grid.
    for (name, t) in f.models[0].iter() {
        assert_eq!(back.f32_values(name).unwrap(), t.to_f32().unwrap());
    }
}
