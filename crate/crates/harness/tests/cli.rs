use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn moue(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moue")).args(args).output().expect("spawn moue")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let out = moue(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const MOE: &str = "topology.num_layers=4\ntopology.group_size=2\ntopology.num_universal=0\n\
topology.window=0\ntopology.stride=0\ntrain.steps=60\n";
const MOUE: &str = "topology.num_layers=4\ntopology.group_size=2\ntopology.num_universal=4\n\
topology.window=2\ntopology.stride=1\ntrain.steps=100\n";

#[test]
fn staggered_connectivity_report() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "topo.conf",
        "topology.num_layers=4\ntopology.group_size=2\ntopology.num_universal=6\ntopology.window=3\n\
         topology.stride=1\ntopology.locals_per_layer=1\n",
    );
    let out = tmp.path().join("out");
    run_ok(&["topo", "--config", s(&cfg), "--out", s(&out)]);
    let rows = read_csv(&out.join("connectivity.csv"));
    assert_eq!(rows[0].join(","), "layer,e0,e1,e2,e3,e4,e5,e6,e7,e8,e9");
    let expect = [
        "0,1,0,0,0,1,1,1,0,0,0",
        "1,0,1,0,0,1,1,1,0,0,0",
        "2,0,0,1,0,0,1,1,1,0,0",
        "3,0,0,0,1,0,1,1,1,0,0",
    ];
    for (row, want) in rows[1..].iter().zip(expect) {
        assert_eq!(row.join(","), want);
    }
    let exposure: Vec<String> = read_csv(&out.join("exposure.csv"))[1..].iter().map(|r| r[2].clone()).collect();
    assert_eq!(exposure, ["2", "4", "4", "2", "0", "0"]);
    assert_eq!(header(&out.join("exposure.csv")), "ring_pos,expert,exposure");
    assert_eq!(header(&out.join("budget.csv")), "metric,value");
    let budget = read_csv(&out.join("budget.csv"));
    let names: Vec<&str> = budget[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["activated", "total_physical", "virtual"]);
}

#[test]
fn all_to_all_path_count() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "topo.conf",
        "topology.variant=all_to_all\ntopology.num_layers=3\ntopology.group_size=1\n\
         topology.num_universal=4\ntopology.window=4\ntopology.locals_per_layer=0\ntopology.top_k=2\n",
    );
    let out = tmp.path().join("out");
    run_ok(&["topo", "--config", s(&cfg), "--out", s(&out)]);
    let text = fs::read_to_string(out.join("pathcount.txt")).unwrap();
    assert!(text.contains("exact=216"), "{text}");
    let ln: f64 = text.lines().next().unwrap().trim_start_matches("ln_paths=").parse().unwrap();
    assert!((ln - 216f64.ln()).abs() < 1e-12);
}

#[test]
fn sandwich_group_masks() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "topo.conf",
        "topology.variant=sandwich\ntopology.num_layers=6\ntopology.group_size=2\n\
         topology.num_universal=6\ntopology.window=3\ntopology.stride=1\ntopology.locals_per_layer=0\n",
    );
    let out = tmp.path().join("out");
    run_ok(&["topo", "--config", s(&cfg), "--out", s(&out)]);
    let rows = read_csv(&out.join("connectivity.csv"));
    let masks: Vec<String> = rows[1..].iter().map(|r| r[1..].join(",")).collect();
    // groups 0 and 2 share one window, group 1 the shifted one
    assert_eq!(masks[0], masks[1]);
    assert_eq!(masks[0], masks[4]);
    assert_eq!(masks[4], masks[5]);
    assert_eq!(masks[2], masks[3]);
    assert_ne!(masks[0], masks[2]);
    let distinct: std::collections::BTreeSet<&String> = masks.iter().collect();
    assert_eq!(distinct.len(), 2);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let bad_key = write_config(tmp.path(), "a.conf", "no.such.key=1\n");
    let out = moue(&["train", "--config", s(&bad_key)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let bad_topo = write_config(tmp.path(), "b.conf", "topology.window=9\ntopology.num_universal=4\n");
    assert_eq!(moue(&["topo", "--config", s(&bad_topo)]).status.code(), Some(1));
    assert_eq!(moue(&[]).status.code(), Some(1));
    assert_eq!(moue(&["frobnicate"]).status.code(), Some(1));

    let missing = tmp.path().join("missing.ckpt");
    let out = moue(&["analyze", "--checkpoint", s(&missing), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    let out = moue(&["convert", "--checkpoint", s(&missing), "--out", s(&tmp.path().join("y"))]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));

    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"NOPE0000").unwrap();
    let out = moue(&["analyze", "--checkpoint", s(&junk), "--out", s(&tmp.path().join("z"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));

    let explode = write_config(tmp.path(), "c.conf", "train.lr=1e200\ntrain.steps=20\n");
    let out = moue(&["train", "--config", s(&explode), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn train_reports_and_objective_switch() {
    let tmp = TempDir::new().unwrap();
    let base = "train.steps=30\ntopology.num_layers=4\ntopology.group_size=2\n";
    let a = write_config(tmp.path(), "a.conf", &format!("{base}balance.objective=uelb\n"));
    let b = write_config(tmp.path(), "b.conf", &format!("{base}balance.objective=standard_lbl\n"));
    let (oa, ob) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["train", "--config", s(&a), "--out", s(&oa)]);
    run_ok(&["train", "--config", s(&b), "--out", s(&ob)]);

    assert_eq!(header(&oa.join("loss_curve.csv")), "step,task_loss,aux_loss");
    assert_eq!(header(&oa.join("skew_trace.csv")), "step,group,max_mean_ratio");
    assert_eq!(header(&oa.join("heatmap.csv")), "layer,expert,universal,reachable,dispatch");
    assert_eq!(header(&oa.join("ue_trace.csv")), "step,ue_selections");
    assert!(oa.join("model.ckpt").exists());
    let la = read_csv(&oa.join("loss_curve.csv"));
    let lb = read_csv(&ob.join("loss_curve.csv"));
    assert_eq!(la.len(), 31);
    // same init and data: the first step differs only in the auxiliary loss
    assert_eq!(la[1][1], lb[1][1]);
    assert_ne!(la[1][2], lb[1][2]);
    // 4 layers x (16 locals + 8 universal) global experts
    assert_eq!(read_csv(&oa.join("heatmap.csv")).len(), 1 + 4 * 24);
    let skew = read_csv(&oa.join("skew_trace.csv"));
    assert!(skew[1..].iter().all(|r| r[2].parse::<f64>().unwrap() >= 1.0));

    let seeded = tmp.path().join("seeded");
    run_ok(&["train", "--config", s(&a), "--seed", "99", "--out", s(&seeded)]);
    assert_ne!(fs::read(oa.join("loss_curve.csv")).unwrap(), fs::read(seeded.join("loss_curve.csv")).unwrap());
}

#[test]
fn convert_train_analyze_pipeline() {
    let tmp = TempDir::new().unwrap();
    let moe_cfg = write_config(tmp.path(), "moe.conf", MOE);
    let moue_cfg = write_config(tmp.path(), "moue.conf", MOUE);
    let moe_dir = tmp.path().join("moe");
    run_ok(&["train", "--config", s(&moe_cfg), "--out", s(&moe_dir)]);
    let moe_ckpt = moe_dir.join("model.ckpt");

    let conv_dir = tmp.path().join("conv");
    let out = run_ok(&["convert", "--config", s(&moue_cfg), "--checkpoint", s(&moe_ckpt), "--out", s(&conv_dir)]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("source_layer"), "{table}");
    let sel = read_csv(&conv_dir.join("selection.csv"));
    assert_eq!(sel[0].join(","), "ring_pos,expert,source_layer,source_expert,rate");
    assert_eq!(sel.len(), 5);
    // default band for 4 layers is layers 1 and 2
    assert!(sel[1..].iter().all(|r| r[2] == "1" || r[2] == "2"));
    let conv_ckpt = conv_dir.join("model.ckpt");

    let fresh = tmp.path().join("fresh");
    run_ok(&["analyze", "--config", s(&moue_cfg), "--checkpoint", s(&conv_ckpt), "--out", s(&fresh)]);
    let ratio = read_csv(&fresh.join("ue_ratio_per_layer.csv"));
    assert_eq!(ratio[0].join(","), "layer,ue_ratio");
    assert!(ratio[1..].iter().all(|r| r[1].parse::<f64>().unwrap() < 1e-6));
    assert_eq!(header(&fresh.join("domain_ue_ratio.csv")), "domain,layer,ue_ratio");

    let trained = tmp.path().join("trained");
    run_ok(&["train", "--config", s(&moue_cfg), "--checkpoint", s(&conv_ckpt), "--out", s(&trained)]);
    let trace = read_csv(&trained.join("ue_trace.csv"));
    let steps = trace.len() - 1;
    for row in &trace[1..] {
        let step: usize = row[0].parse().unwrap();
        let t = step as f64 / steps as f64;
        let beta = 1e4 * (1.0 - t / 0.5).max(0.0);
        if beta >= 1e3 {
            assert_eq!(row[1], "0", "universal expert selected at step {step}");
        }
    }
    let late: usize = trace[1..].iter().map(|r| r[1].parse::<usize>().unwrap()).sum();
    assert!(late > 0, "universal experts never selected after the anneal");

    let analysis = tmp.path().join("analysis");
    run_ok(&["analyze", "--config", s(&moue_cfg), "--checkpoint", s(&trained.join("model.ckpt")), "--out", s(&analysis)]);
    let cka = read_csv(&analysis.join("cka_matrix.csv"));
    assert_eq!(cka[0].len(), 1 + 20);
    for (i, row) in cka[1..].iter().enumerate() {
        let diag: f64 = row[i + 1].parse().unwrap();
        assert!((diag - 1.0).abs() < 1e-12);
    }
}

#[test]
fn no_universal_model_has_zero_share() {
    let tmp = TempDir::new().unwrap();
    let moe_cfg = write_config(tmp.path(), "moe.conf", MOE);
    let moe_dir = tmp.path().join("moe");
    run_ok(&["train", "--config", s(&moe_cfg), "--out", s(&moe_dir)]);
    let out = tmp.path().join("an");
    run_ok(&["analyze", "--config", s(&moe_cfg), "--checkpoint", s(&moe_dir.join("model.ckpt")), "--out", s(&out)]);
    let ratio = read_csv(&out.join("ue_ratio_per_layer.csv"));
    assert!(ratio[1..].iter().all(|r| r[1] == "0"));

    let pass = tmp.path().join("pass");
    let out = run_ok(&["convert", "--config", s(&moe_cfg), "--checkpoint", s(&moe_dir.join("model.ckpt")), "--out", s(&pass)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert_eq!(fs::read(pass.join("model.ckpt")).unwrap(), fs::read(moe_dir.join("model.ckpt")).unwrap());
}
