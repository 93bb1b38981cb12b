use std::path::Path;
use std::process::{Command, Output};

fn bimspu(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bimspu"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_succeeds_and_usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(bimspu(&["--help"], d.path()).status.code(), Some(0));
    let train_help = bimspu(&["train", "--help"], d.path());
    assert_eq!(train_help.status.code(), Some(0));
    assert!(stdout(&train_help).contains("repulsion_h"));
    assert_eq!(bimspu(&[], d.path()).status.code(), Some(1));
    assert_eq!(bimspu(&["upsample", "--bogus"], d.path()).status.code(), Some(1));
}

#[test]
fn missing_required_key_is_named() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.cfg"), "preset = desk\nratio = 4\n").unwrap();
    std::fs::write(d.path().join("x.bpup"), b"").unwrap();
    let o = bimspu(&["train", "--data", "x.bpup", "--config", "c.cfg", "--out", "m.bpuc"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing required key `epochs`"), "{}", stderr(&o));
}

#[test]
fn config_parse_errors_carry_line_numbers() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.cfg"), "preset = desk\n# note\nratio = four\nepochs = 1\n").unwrap();
    std::fs::write(d.path().join("x.bpup"), b"").unwrap();
    let o = bimspu(&["train", "--data", "x.bpup", "--config", "c.cfg", "--out", "m.bpuc"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c.cfg:3:"), "{}", stderr(&o));
}

#[test]
fn malformed_xyz_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("a.xyz"), "0 0 0\n1 2\n").unwrap();
    std::fs::write(d.path().join("b.xyz"), "0 0 0\n").unwrap();
    let o = bimspu(&["evaluate", "--pred", "a.xyz", "--gt", "b.xyz"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("a.xyz:2:"), "{}", stderr(&o));
}

#[test]
fn evaluate_hand_examples() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("o.xyz"), "0 0 0\n").unwrap();
    std::fs::write(d.path().join("p.xyz"), "3 4 0\n").unwrap();
    let o = bimspu(
        &["evaluate", "--pred", "o.xyz", "--gt", "p.xyz", "--pred", "o.xyz", "--gt", "o.xyz", "--out", "t.tsv"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let want = "object\tCD(1e-3)\tHD(1e-3)\no\t50000\t5000\no\t0\t0\nmean\t25000\t2500\n";
    assert_eq!(stdout(&o), want);
    assert_eq!(std::fs::read_to_string(d.path().join("t.tsv")).unwrap(), want);
}

#[test]
fn evaluate_reports_p2f_with_meshes() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("tri.off"), "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
    std::fs::write(d.path().join("p.xyz"), "0.25 0.25 0.002\n").unwrap();
    let o = bimspu(&["evaluate", "--pred", "p.xyz", "--gt", "p.xyz", "--mesh", "tri.off"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "object\tCD(1e-3)\tHD(1e-3)\tP2F(1e-3)\np\t0\t0\t2\nmean\t0\t0\t2\n");
}

#[test]
fn gradcheck_corruption_exits_three() {
    let d = tempfile::tempdir().unwrap();
    let ok = bimspu(&["gradcheck", "--seeds", "1"], d.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let bad = bimspu(&["gradcheck", "--seeds", "1", "--corrupt", "chamfer"], d.path());
    assert_eq!(bad.status.code(), Some(3));
    assert!(stderr(&bad).contains("chamfer"));
}

/// generate-data, a one-epoch train, upsample and evaluate on a tiny mesh;
/// repeated runs produce identical bytes.
#[test]
fn small_pipeline_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::create_dir(p.join("meshes")).unwrap();
    std::fs::copy(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("data/meshes/cube.off"),
        p.join("meshes/cube.off"),
    )
    .unwrap();
    std::fs::write(
        p.join("c.cfg"),
        "preset = desk\nratio = 4\nepochs = 1\npatch_size = 16\nbatch_size = 2\n",
    )
    .unwrap();
    let gen = bimspu(
        &[
            "generate-data", "--meshes", "meshes", "--out", "data", "--config", "c.cfg", "--input-points", "64",
            "--patches-per-mesh", "4",
        ],
        p,
    );
    assert_eq!(gen.status.code(), Some(0), "{}", stderr(&gen));
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let ckpt = format!("{tag}.bpuc");
        let up = format!("{tag}.xyz");
        let t = bimspu(&["train", "--data", "data/train.bpup", "--config", "c.cfg", "--out", &ckpt], p);
        assert_eq!(t.status.code(), Some(0), "{}", stderr(&t));
        let u = bimspu(
            &["upsample", "--checkpoint", &ckpt, "--input", "data/test/cube_input.xyz", "--out", &up],
            p,
        );
        assert_eq!(u.status.code(), Some(0), "{}", stderr(&u));
        let read = |f: String| std::fs::read(p.join(f)).unwrap();
        outputs.push((read(ckpt), read(format!("{tag}.csv")), read(up)));
    }
    assert_eq!(outputs[0], outputs[1]);
    let cloud = String::from_utf8(outputs[0].2.clone()).unwrap();
    assert_eq!(cloud.lines().count(), 256);

    let eval = bimspu(
        &["evaluate", "--pred", "a.xyz", "--gt", "data/test/cube_gt.xyz", "--mesh", "meshes/cube.off"],
        p,
    );
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    assert!(stdout(&eval).starts_with("object\tCD(1e-3)\tHD(1e-3)\tP2F(1e-3)\na\t"));

    let wrong = bimspu(
        &["upsample", "--ratio", "16", "--checkpoint", "a.bpuc", "--input", "data/test/cube_input.xyz", "--out", "w.xyz"],
        p,
    );
    assert_eq!(wrong.status.code(), Some(2));
}
