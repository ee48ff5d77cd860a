use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_contagion"))
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn state_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("f_state_"))
        .collect();
    v.sort();
    v
}

#[test]
fn benchmark_solve_writes_four_states() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--preset", "benchmark_s5", "--ny", "41", "--nt", "40"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        state_files(dir.path()),
        ["f_state_00.csv", "f_state_01.csv", "f_state_10.csv", "f_state_11.csv"]
    );
    for f in ["bounds.csv", "solve_report.csv", "policy_state_11.csv", "model.toml", "grid.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let text = fs::read_to_string(dir.path().join("f_state_00.csv")).unwrap();
    assert!(text.starts_with("t,y,f,g,df_dy\n"));
    assert_eq!(text.lines().count(), 1 + 41 * 41);
}

#[test]
fn three_names_give_eight_states() {
    let dir = tempfile::tempdir().unwrap();
    let file = fixture("three_names.toml");
    let set = format!("model.file={}", file.display());
    let o = run(&["solve", "--set", &set, "--ny", "21", "--nt", "20"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(state_files(dir.path()).len(), 8);
    let header = fs::read_to_string(dir.path().join("policy_state_000.csv")).unwrap();
    assert!(header.starts_with("t,y,hhat_1,hhat_2,hhat_3,ahat_1,ahat_2,ahat_3,pi_1,pi_2,pi_3,c_mult\n"));
}

#[test]
fn negative_intensity_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--set", "model.credit.intensity.00.0.a=-5", "--ny", "21", "--nt", "20"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("A2"));
    assert!(state_files_opt(dir.path()).is_empty());
}

fn state_files_opt(dir: &Path) -> Vec<String> {
    if dir.exists() {
        state_files(dir)
    } else {
        Vec::new()
    }
}

#[test]
fn validate_reports_every_assumption() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["validate", "--preset", "scott_example22"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["A1", "A2_intensity", "A3"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn sweep_needs_the_sweep_command_and_a_non_empty_axis() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["solve", "--sweep", "fig1"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["sweep"], dir.path()).status.code(), Some(2));
    let o = run(&["sweep", "--sweep", "fig2", "--set", "sweep.values=[]"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty axis"));
    assert_eq!(run(&["sweep", "--sweep", "fig9"], dir.path()).status.code(), Some(2));
}

fn read_sweep(path: &Path) -> Vec<(f64, f64, String, usize, f64)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("axis_value,y,state,name,pi_hat"));
    lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (
                c[0].parse().unwrap(),
                c[1].parse().unwrap(),
                c[2].to_string(),
                c[3].parse().unwrap(),
                c[4].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn fig1_fractions_do_not_increase_in_y() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--sweep", "fig1", "--ny", "41", "--nt", "40"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_sweep(&dir.path().join("sweep_fig1.csv"));
    // 3 times x 41 nodes x (2 + 1 + 1) alive names.
    assert_eq!(rows.len(), 3 * 41 * 4);
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.0 == b.0 && a.2 == b.2 && a.3 == b.3 && b.1 > a.1 {
            assert!(b.4 <= a.4 + 1e-12, "{a:?} -> {b:?}");
        }
    }
}

#[test]
fn fig2_fractions_do_not_increase_in_p() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--sweep", "fig2", "--ny", "21", "--nt", "20"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_sweep(&dir.path().join("sweep_fig2.csv"));
    let per_p = rows.len() / 3;
    for k in 0..per_p {
        let (lo, mid, hi) = (&rows[k], &rows[k + per_p], &rows[k + 2 * per_p]);
        assert_eq!((lo.1, &lo.2, lo.3), (hi.1, &hi.2, hi.3));
        assert!(mid.4 <= lo.4 + 1e-12 && hi.4 <= mid.4 + 1e-12);
    }
}

fn simulate_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "simulate",
        "--preset",
        "merton_nodefault",
        "--ny",
        "41",
        "--nt",
        "40",
        "--paths",
        "500",
        "--steps",
        "40",
        "--seed",
        "7",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn repeated_seed_gives_identical_report() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = run(&simulate_args(&[]), a.path());
    let ob = bin()
        .args(simulate_args(&[]))
        .arg("--out")
        .arg(b.path())
        .env("CONTAGION_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(oa.status.code(), ob.status.code());
    let ra = fs::read(a.path().join("mc_report.csv")).unwrap();
    let rb = fs::read(b.path().join("mc_report.csv")).unwrap();
    assert_eq!(ra, rb);
    assert!(String::from_utf8_lossy(&ra).starts_with("test,estimate,target,se,pass\n"));
}

fn duality_row(dir: &Path) -> String {
    fs::read_to_string(dir.join("mc_report.csv"))
        .unwrap()
        .lines()
        .find(|l| l.starts_with("duality gap"))
        .unwrap()
        .to_string()
}

#[test]
fn corrupted_field_fails_the_duality_row() {
    let solved = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--preset", "merton_nodefault", "--ny", "41", "--nt", "40"], solved.path());
    assert!(o.status.success());
    let from = solved.path().to_str().unwrap();
    let clean = tempfile::tempdir().unwrap();
    run(&["simulate", "--from", from, "--paths", "2000", "--steps", "40"], clean.path());
    assert!(duality_row(clean.path()).ends_with(",true"), "{}", duality_row(clean.path()));

    let path = solved.path().join("f_state_00.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            out.push_str(line);
        } else {
            let mut c: Vec<String> = line.split(',').map(str::to_string).collect();
            let f: f64 = c[2].parse().unwrap();
            c[2] = format!("{:.16e}", f * 1.05);
            out.push_str(&c.join(","));
        }
        out.push('\n');
    }
    fs::write(&path, out).unwrap();
    let bad = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--from", from, "--paths", "2000", "--steps", "40"], bad.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(duality_row(bad.path()).ends_with(",false"), "{}", duality_row(bad.path()));
}

#[test]
fn missing_solution_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let o = run(&["simulate", "--from", missing.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_writes_reference_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["oracle"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    let last_defaulted = text
        .lines()
        .filter(|l| l.starts_with("all_defaulted_f,1.0000000000000000e0,0.0"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .next()
        .unwrap();
    assert!((last_defaulted - 1.303104).abs() < 1e-6);
    assert!(text.contains("picard_residual"));
}

#[test]
fn bad_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["validate", "--out"])
        .arg(dir.path())
        .env("CONTAGION_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
