use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn qemb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qemb"))
        .args(args)
        .env_remove("QEMB_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("qemb-cli-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }

    fn path(&self, name: &str) -> String {
        self.0.join(name).to_string_lossy().into_owned()
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

type Csv = (Vec<(String, String)>, Vec<String>, Vec<Vec<String>>);

/// `# key=value` lines, then a header and comma-separated rows.
fn parse_csv(text: &str) -> Csv {
    let mut meta = Vec::new();
    let mut lines = text.lines();
    let header = loop {
        let line = lines.next().expect("csv has a header");
        match line.strip_prefix("# ") {
            Some(c) => {
                if let Some((k, v)) = c.split_once('=') {
                    meta.push((k.to_string(), v.to_string()));
                }
            }
            None => break line.split(',').map(String::from).collect::<Vec<_>>(),
        }
    };
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (meta, header, rows)
}

fn sparse_entropy(s: f64, n: f64, r: f64, eta: f64) -> f64 {
    // s ln(e n / s) ln(1 + 2r/η)
    s * (std::f64::consts::E * n / s).ln() * (1.0 + 2.0 * r / eta).ln()
}

#[test]
fn reqm_matches_recomputed_formula() {
    let o = qemb(&["reqm", "--prop", "p1", "--model", "sparse:4:1024", "--eps", "0.1", "--delta", "1", "--C", "1", "--q", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    // m = ⌈C ε⁻² H(K, δε²)⌉ with η = 0.01
    let expected = (100.0 * sparse_entropy(4.0, 1024.0, 1.0, 0.01)).ceil();
    assert_eq!(stdout(&o).trim(), format!("{expected}"));
    assert_eq!(stdout(&o).trim(), "13885");
}

#[test]
fn entropy_prints_the_sparse_bound() {
    let o = qemb(&["entropy", "--model", "sparse:4:1024", "--eta", "0.01"]);
    assert!(o.status.success());
    let h: f64 = stdout(&o).trim().parse().unwrap();
    assert!((h - sparse_entropy(4.0, 1024.0, 1.0, 0.01)).abs() < 1e-9);
    assert!((h - 138.8).abs() < 0.1);
}

#[test]
fn selftest_is_byte_identical_across_runs() {
    let a = qemb(&["selftest", "--seed", "7"]);
    let b = qemb(&["selftest", "--seed", "7"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(a.stdout, b.stdout);
    let threaded = Command::new(env!("CARGO_BIN_EXE_qemb")).args(["selftest", "--seed", "7"]).env("QEMB_THREADS", "1").output().unwrap();
    assert_eq!(threaded.stdout, a.stdout);
}

#[test]
fn embed_then_distance_on_same_vector_is_zero() {
    let dir = Scratch::new("embed");
    fs::write(dir.path("v.txt"), "0.5 -1 2 0 3.25 1 1 -0.75\n").unwrap();
    for layout in ["single", "bidither"] {
        let (a, b) = (dir.path(&format!("a-{layout}.qemb")), dir.path(&format!("b-{layout}.qemb")));
        for out in [&a, &b] {
            let o = qemb(&["embed", "--input", &dir.path("v.txt"), "--output", out, "--m", "48", "--delta", "0.3", "--seed", "11", "--layout", layout]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let o = qemb(&["distance", &a, &b]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn embed_writes_one_file_per_vector_and_distances_are_symmetric() {
    let dir = Scratch::new("multi");
    fs::write(dir.path("v.txt"), "# two vectors\n1 2 3 4\n\n-1 0 0.5 2\n").unwrap();
    let o = qemb(&["embed", "--input", &dir.path("v.txt"), "--output", &dir.path("c.qemb"), "--m", "16", "--delta", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (c0, c1) = (dir.path("c.0.qemb"), dir.path("c.1.qemb"));
    let ab = qemb(&["distance", &c0, &c1]);
    let ba = qemb(&["distance", &c1, &c0]);
    assert_eq!(ab.stdout, ba.stdout);
    assert!(stdout(&ab).trim().parse::<f64>().unwrap() > 0.0);
}

#[test]
fn distance_refuses_codes_from_different_operators() {
    let dir = Scratch::new("mismatch");
    fs::write(dir.path("v.txt"), "1 2 3 4\n").unwrap();
    for seed in ["1", "2"] {
        let out = dir.path(&format!("c{seed}.qemb"));
        assert!(qemb(&["embed", "--input", &dir.path("v.txt"), "--output", &out, "--m", "8", "--delta", "1", "--seed", seed]).status.success());
    }
    let o = qemb(&["distance", &dir.path("c1.qemb"), &dir.path("c2.qemb")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seeds"), "{}", stderr(&o));
}

#[test]
fn validation_errors_exit_one_and_name_the_key() {
    let o = qemb(&["qrip", "--m", "64", "--model", "sparse:4:256", "--delta", "1", "--bogus", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--bogus"));

    let o = qemb(&["reqm", "--prop", "p1", "--model", "sparse:4:1024", "--eps", "0.1", "--delta", "-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--delta"), "{}", stderr(&o));

    let o = qemb(&["decay", "--m-list", "64,128", "--model", "sparse:2:32", "--delta", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--m-list"));

    let o = qemb(&["embed", "--input", "/nonexistent/v.txt", "--output", "x", "--m", "4", "--delta", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--input"));

    assert_eq!(qemb(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_qemb")).args(["selftest"]).env("QEMB_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("QEMB_THREADS"));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = Scratch::new("config");
    fs::write(dir.path("run.cfg"), "# sweep\nmodel = sparse:2:32\nradius = 5\ndelta = 0.5\nm = 64\npairs = 3\ndithers = 2\ngrid = 0.5,2\n").unwrap();
    let o = qemb(&["qrip", "--config", &dir.path("run.cfg"), "--delta", "0.25"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (meta, _, rows) = parse_csv(&stdout(&o));
    let get = |k: &str| meta.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone()).unwrap();
    assert_eq!(get("delta"), "0.25");
    assert_eq!(get("m"), "64");
    assert_eq!(get("model"), "sparse:2:32");
    assert_eq!(rows.len(), 2);

    fs::write(dir.path("bad.cfg"), "model = sparse:2:32\nwidth = 3\n").unwrap();
    let o = qemb(&["qrip", "--config", &dir.path("bad.cfg")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`width`"), "{}", stderr(&o));
}

#[test]
fn qrip_csv_follows_the_documented_schema() {
    let dir = Scratch::new("qrip");
    let (rec, sum) = (dir.path("rec.csv"), dir.path("sum.csv"));
    let args = ["qrip", "--m", "128", "--model", "sparse:3:64", "--radius", "5", "--delta", "1", "--grid-in-delta", "--pairs", "4", "--dithers", "3", "--seed", "9", "--output", &rec, "--summary", &sum];
    let o = qemb(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&rec).unwrap();
    let (meta, header, rows) = parse_csv(&text);
    assert_eq!(header.join(","), "m,delta,mode,true_dist,est_dist,rel_err,pair_id,trial_id,seed");
    assert!(meta.iter().any(|(k, v)| k == "seed" && v == "9"));
    assert_eq!(rows.len(), 5 * 4 * 3);
    let keys: Vec<(u64, u64)> = rows.iter().map(|r| (r[6].parse().unwrap(), r[7].parse().unwrap())).collect();
    let mut sorted = keys.clone();
    sorted.sort_unstable();
    assert_eq!(keys, sorted);
    for r in &rows {
        let (t, e, rel): (f64, f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap(), r[5].parse().unwrap());
        assert!((rel - (e - t) / t).abs() < 1e-9 * (1.0 + rel.abs()));
    }

    let (_, header, rows) = parse_csv(&fs::read_to_string(&sum).unwrap());
    assert_eq!(header.join(","), "m,mode,eps_L_hat,dist,rho_hat_max,rho_hat_median");
    assert_eq!(rows.len(), 5);

    // re-running reproduces the files exactly
    let rec2 = dir.path("rec2.csv");
    let mut again: Vec<&str> = args.to_vec();
    let at = again.iter().position(|a| *a == rec.as_str()).unwrap();
    again[at] = &rec2;
    assert!(qemb(&again).status.success());
    assert_eq!(fs::read(&rec).unwrap(), fs::read(&rec2).unwrap());
}

#[test]
fn vanishing_delta_reproduces_the_linear_map() {
    let o = qemb(&["qrip", "--m", "256", "--model", "sparse:4:128", "--radius", "5", "--delta", "1e-9", "--grid", "0.05,0.2,1,5,10", "--pairs", "5", "--dithers", "2", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, _, rows) = parse_csv(&stdout(&o));
    for r in rows {
        let (s, rho): (f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap());
        assert!(rho <= 1e-6 * s, "residual {rho} at s={s}");
    }

    let rip = qemb(&["riptest", "--m", "256", "--model", "sparse:4:128", "--p", "1", "--pairs", "50", "--seed", "4"]);
    assert!(rip.status.success(), "{}", stderr(&rip));
    let eps: f64 = stdout(&rip).trim().strip_prefix("eps_hat=").unwrap().parse().unwrap();
    assert!(eps > 0.0 && eps < 0.5, "{eps}");
}

#[test]
fn decay_reports_a_slope_and_per_m_summary() {
    let dir = Scratch::new("decay");
    let sum = dir.path("sum.csv");
    let o = qemb(&["decay", "--m-list", "64,128,256,512", "--model", "sparse:2:32", "--radius", "5", "--delta", "1", "--pairs", "6", "--dithers", "4", "--seed", "2", "--summary", &sum]);
    assert!(o.status.success(), "{}", stderr(&o));
    let slope: f64 = stdout(&o).trim().strip_prefix("decay_slope=").unwrap().parse().unwrap();
    assert!(slope < 0.0, "{slope}");
    let (meta, _, rows) = parse_csv(&fs::read_to_string(&sum).unwrap());
    assert!(meta.iter().any(|(k, _)| k == "decay_slope"));
    let ms: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ms.len(), 4);
}

#[test]
fn meanwidth_of_a_ball_is_near_the_gaussian_norm() {
    let o = qemb(&["meanwidth", "--model", "ball:2", "--trials", "20000", "--seed", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let fields: Vec<f64> = out.split_whitespace().map(|f| f.split_once('=').unwrap().1.parse().unwrap()).collect();
    // E‖g‖₂ for g ~ N(0, I₂) is √(π/2)
    let target = (std::f64::consts::PI / 2.0).sqrt();
    assert!((fields[0] - target).abs() <= 4.0 * fields[1], "{out}");
}
