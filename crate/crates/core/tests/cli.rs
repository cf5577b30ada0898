use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pnn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pnn"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = pnn(out, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn write_raw(path: &Path) {
    let cities = ["London", "Tokyo", "Paris", "Oslo"];
    let mut s = String::from("label,day,city,age\n");
    for i in 0..400 {
        let day = ["Mon", "Tue", "Wed"][i % 3];
        let city = cities[(i / 3) % 4];
        let age = 18 + (i * 7) % 50;
        let label = u8::from((day == "Tue") ^ (city == "Tokyo" || city == "Oslo"));
        s += &format!("{label},{day},{city},{age}\n");
    }
    fs::write(path, s).unwrap();
}

#[test]
fn pipeline_trains_and_evaluates_consistently() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let raw = dir.path().join("raw.csv");
    write_raw(&raw);
    let raw_set = format!("raw_data={}", raw.display());
    let base = [
        "--set",
        &raw_set,
        "--set",
        "schema=day:cat,city:cat,age:num",
    ];

    ok(&out, &[&base[..], &["make-map"]].concat());
    assert!(out.join("featuremap.txt").exists());
    ok(&out, &[&base[..], &["encode"]].concat());
    let encoded = fs::read_to_string(out.join("encoded.txt")).unwrap();
    assert_eq!(encoded.lines().count(), 400);

    let valid = format!("valid_data={}", out.join("encoded.txt").display());
    let model = [
        "--set", "model=fm", "--set", "k=4", "--set", "lr=0.05", "--set", "bs=32",
    ];
    ok(
        &out,
        &[
            &model[..],
            &["--set", "epochs=10", "--set", &valid, "train"],
        ]
        .concat(),
    );
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    let last = log.lines().last().unwrap();
    let logged_auc: f64 = last.split(',').nth(3).unwrap().parse().unwrap();
    assert!(logged_auc > 0.95, "fm fits a pairwise signal: {logged_auc}");

    ok(&out, &[&model[..], &["evaluate"]].concat());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0].parse::<f64>().unwrap(), logged_auc);
    assert_eq!(row[2], "400");

    let config = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.lines().any(|l| l == "seed = 1"));

    ok(
        &out,
        &[&model[..], &["--set", "heatmap_image=T", "heatmap"]].concat(),
    );
    let heat = fs::read_to_string(out.join("heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 4);
    assert!(fs::read(out.join("heatmap.pgm"))
        .unwrap()
        .starts_with(b"P5"));
}

#[test]
fn unknown_key_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = pnn(dir.path(), &["--set", "learning_rate=0.1", "grad-check"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.starts_with("error:") && err.contains("learning_rate"),
        "{err}"
    );
}

#[test]
fn grad_check_passes_with_smooth_activations() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "--set",
            "model=pin",
            "--set",
            "net=[8,1]",
            "--set",
            "activation=tanh",
            "grad-check",
        ],
    );
    assert!(dir.path().join("grad_check.txt").exists());
}
