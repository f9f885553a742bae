use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use metaflow::gnn::{init_params, GraphUNet};

const TINY: &str = "
train_shapes = 3
interp_shapes = 1
ood_shapes = 1
cases_train = 4
cases_test = 2
cases_extra = 2
eval_cases_train = 4
eval_cases_test = 2
n_examples = 3
sweep_examples = 1,3
sweep_updates = 10
n_per_side = 16
radial_layers = 8
channels = 4
kernels = 2
seeds = 0
folds = 0
n_folds = 3
epochs = 2
task_batch = 0
";

fn metaflow(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.cfg");
    if !cfg.exists() {
        let text = format!(
            "{TINY}data_dir = {}\nout_dir = {}\n",
            dir.join("data").display(),
            dir.join("runs").display()
        );
        fs::write(&cfg, text).unwrap();
    }
    let mut all = vec!["--config", cfg.to_str().unwrap()];
    all.extend_from_slice(args);
    Command::new(env!("CARGO_BIN_EXE_metaflow"))
        .args(&all)
        .env("METAFLOW_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn hash_line(stdout: &str) -> String {
    stdout.lines().find(|l| l.starts_with("manifest sha256")).unwrap().to_string()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let first = ok(metaflow(d, &["generate"]));
    assert!(first.contains("train: 3 tasks, 24 cases"), "{first}");
    assert!(first.contains("ood: 1 tasks, 6 cases"), "{first}");
    let again = ok(metaflow(d, &["generate"]));
    assert_eq!(hash_line(&first), hash_line(&again));

    let inspect = ok(metaflow(d, &["inspect"]));
    assert!(inspect.contains("shape_interp: 1 tasks, 6 cases"), "{inspect}");
    assert_eq!(hash_line(&inspect), hash_line(&first));

    ok(metaflow(d, &["train", "--method", "maml"]));
    ok(metaflow(d, &["train", "--method", "baseline"]));
    let runs = d.join("runs");
    // 2 epochs × 2 meta-train tasks × (3 inner steps + 1)
    let log = fs::read_to_string(runs.join("maml_s0_f0_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 2 * 4);
    assert!(log.starts_with("epoch,split,task_id,step,loss,rmse,wall_ms"));
    let blog = fs::read_to_string(runs.join("baseline_s0_f0_log.csv")).unwrap();
    assert_eq!(blog.lines().count(), 1 + 2 * 2);

    let ckpt = runs.join("maml_s0_f0.ckpt");
    let before = fs::read(&ckpt).unwrap();
    let report = ok(metaflow(d, &["evaluate", "--write-predictions", "true"]));
    assert!(report.contains("ood"));
    assert_eq!(fs::read(&ckpt).unwrap(), before, "evaluate must not touch checkpoints");

    let csv = fs::read_to_string(runs.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(runs.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 9);

    // per-task RMSE recomputed from per-node predictions
    let preds = fs::read_to_string(runs.join("predictions.csv")).unwrap();
    let header: Vec<&str> = preds.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let evals = fs::read_to_string(runs.join("evals.csv")).unwrap();
    for line in evals.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let key = &f[..5];
        let (mut sum, mut n) = (0.0, 0usize);
        for p in preds.lines().skip(1) {
            let g: Vec<&str> = p.split(',').collect();
            let k = [col("set"), col("method"), col("seed"), col("fold"), col("task_id")];
            if k.iter().zip(key).all(|(&i, v)| g[i] == *v) {
                for c in ["u", "v", "p"] {
                    let pred: f64 = g[col(&format!("pred_{c}"))].parse().unwrap();
                    let truth: f64 = g[col(&format!("true_{c}"))].parse().unwrap();
                    sum += (pred - truth).powi(2);
                    n += 1;
                }
            }
        }
        assert!(n > 0, "{line}");
        let rmse: f64 = f[7].parse().unwrap();
        assert!(((sum / n as f64).sqrt() - rmse).abs() < 1e-9, "{line}");
    }

    ok(metaflow(d, &["sweep", "--axis", "gradient_updates"]));
    let sweep = fs::read_to_string(runs.join("sweep_gradient_updates.csv")).unwrap();
    // 3 sets × 3 methods × 1 fold, updates 0..=10
    assert_eq!(sweep.lines().count(), 1 + 9 * 11);
    ok(metaflow(d, &["sweep", "--axis", "n_examples"]));
    let sweep = fs::read_to_string(runs.join("sweep_n_examples.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 9 * 2);
}

#[test]
fn zero_epochs_save_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(metaflow(d, &["generate"]));
    ok(metaflow(d, &["train", "--method", "maml", "--epochs", "0", "--seeds", "3"]));
    let m = GraphUNet::load(&d.join("runs/maml_s3_f0.ckpt")).unwrap();
    assert_eq!(m, init_params(&m.config, 3).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(metaflow(d, &["generate", "--bogus", "1"]).status.code(), Some(2));
    assert_eq!(metaflow(d, &["generate", "--folds", "7"]).status.code(), Some(2));
    // no dataset yet
    assert_eq!(metaflow(d, &["inspect"]).status.code(), Some(4));
    ok(metaflow(d, &["generate"]));
    // no checkpoints yet
    assert_eq!(metaflow(d, &["evaluate"]).status.code(), Some(4));

    let data = d.join("data");
    let payload = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "bin"))
        .expect("a binary payload");
    let mut bytes = fs::read(&payload).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&payload, bytes).unwrap();
    assert_eq!(metaflow(d, &["train", "--method", "maml"]).status.code(), Some(4));
}
