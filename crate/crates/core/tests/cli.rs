use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use klens::metrics::read_evals_csv;
use klens::model_io::{crc32, load_model, verify_fixture, ModelManifest};

fn klens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klens"))
        .args(args)
        .env("KLENS_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

// Green detector on the color probe, sized like the acceptance run.
const GREEN: [&str; 12] = [
    "--toy", "color", "--images", "probe:64", "--layer", "color", "--kernel", "1", "--beta", "1e-4", "--lr0", "1e5",
];

#[test]
fn interpret_green_detector() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["interpret"];
    args.extend(GREEN);
    args.extend(["--max-iters", "2000", "--out", p(&out)]);
    let o = klens(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    let evals = read_evals_csv(&out.join("evals_interpret.csv")).unwrap();
    assert_eq!(evals.len(), 1);
    assert_eq!(evals[0].method, "ours");
    assert!(evals[0].ssim_selected >= 0.9, "ssim {}", evals[0].ssim_selected);

    let item = out.join("probe64/color_k1/ours");
    for f in ["x_hat.png", "x_hat_stretched.png", "fmap_original.png", "fmap_optimized.png", "fmap_diff.png", "history.csv"] {
        assert!(item.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("probe64/color_k1/original.png").is_file());
    assert!(out.join("run_interpret.json").is_file());
}

#[test]
fn kernel_out_of_range_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = klens(&[
        "interpret", "--toy", "color", "--images", "probe:32", "--layer", "color", "--kernel", "6", "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("0..6") || stderr(&o).contains("0..=5"), "{}", stderr(&o));
}

#[test]
fn unknown_baseline_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = klens(&[
        "baselines", "--toy", "color", "--images", "probe:32", "--layer", "color", "--kernel", "1", "--baselines",
        "gbp,saliency", "--out", p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("saliency"));
}

#[test]
fn baselines_write_one_row_each() {
    let dir = tempfile::tempdir().unwrap();
    let o = klens(&[
        "baselines", "--toy", "color", "--images", "probe:32", "--layer", "color", "--kernel", "1", "--out",
        p(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let evals = read_evals_csv(&dir.path().join("evals_baselines.csv")).unwrap();
    let mut methods: Vec<&str> = evals.iter().map(|e| e.method.as_str()).collect();
    methods.sort_unstable();
    assert_eq!(methods, ["deconv", "gbp", "lrp"]);
    assert!(dir.path().join("probe32/color_k1/lrp/estimate.png").is_file());
}

#[test]
fn eval_table_single_result_and_missing_dir() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["interpret"];
    args.extend(GREEN);
    args.extend(["--max-iters", "50", "--out", p(&run)]);
    assert!(klens(&args).status.success());

    let o = klens(&["eval-table", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(run.join("table.txt").is_file() && run.join("table_joint.csv").is_file());

    let o = klens(&["eval-table", p(&dir.path().join("nope"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablation_has_three_variants_per_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("abl");
    let o = klens(&[
        "interpret", "--toy", "deep", "--input-size", "16", "--images", "noise-probe:16:3:2", "--layer",
        "conv1_2", "--random-kernels", "2", "--seed", "5", "--beta", "1e-3", "--lr0", "1e4", "--max-iters", "20",
        "--ablation", "--out", p(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let evals = read_evals_csv(&run.join("evals_interpret.csv")).unwrap();
    assert_eq!(evals.len(), 2 * 2 * 3);
    for e in &evals {
        let same = evals
            .iter()
            .filter(|f| f.image_id == e.image_id && f.layer == e.layer && f.kernel == e.kernel)
            .count();
        assert_eq!(same, 3);
    }
    let o = klens(&["eval-table", p(&run), "--ablation", "--by-method"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");

    // Plain interpret output lacks the ablation variants.
    let plain = dir.path().join("plain");
    let mut args = vec!["interpret"];
    args.extend(GREEN);
    args.extend(["--max-iters", "10", "--out", p(&plain)]);
    assert!(klens(&args).status.success());
    assert_eq!(klens(&["eval-table", p(&plain), "--ablation"]).status.code(), Some(2));
}

#[test]
fn sweep_beta_names_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let betas = [1e-5, 3e-5, 1e-4];
    let o = klens(&[
        "sweep-beta", "--toy", "color", "--images", "probe:64", "--layer", "color", "--kernel", "1", "--betas",
        "1e-5,3e-5,1e-4", "--lr0", "1e5", "--max-iters", "2000", "--out", p(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let evals = read_evals_csv(&dir.path().join("evals_sweep_beta.csv")).unwrap();
    assert_eq!(evals.len(), betas.len());
    for e in &evals {
        let beta: f64 = e.method.strip_prefix("beta_").unwrap().parse().unwrap();
        assert!(betas.iter().any(|b| (b - beta).abs() <= 1e-12 * b), "{}", e.method);
        assert!(e.ssim_selected >= 0.9, "{} ssim {}", e.method, e.ssim_selected);
        let item = dir.path().join("probe64/color_k1").join(&e.method);
        assert!(item.join("x_hat_stretched.png").is_file() && item.join("fmap_diff.png").is_file());
    }
}

#[test]
fn make_fixtures_is_deterministic_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(klens(&["make-fixtures", "--out", p(&a), "--seed", "4"]).status.success());
    assert!(klens(&["make-fixtures", "--out", p(&b), "--seed", "4"]).status.success());
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 10);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?} differs");
    }

    for stem in ["color_net", "deep_net"] {
        let manifest: ModelManifest =
            serde_json::from_str(&fs::read_to_string(a.join(format!("{stem}.json"))).unwrap()).unwrap();
        let blob = fs::read(a.join(format!("{stem}.bin"))).unwrap();
        assert_eq!(manifest.blob_crc32, crc32(&blob));
        let net = load_model(&a.join(format!("{stem}.json")), &a.join(format!("{stem}.bin"))).unwrap();
        let fixture = a.join(format!("{}_fixture.json", stem.trim_end_matches("_net")));
        assert!(verify_fixture(&net, &fixture).unwrap().passed());
    }
}
