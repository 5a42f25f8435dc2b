use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use copvi_cli::commands::{fit_corr, FitCorrArgs};
use copvi_cli::FitArtifact;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_copvi"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn copvi")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Gaussian panel with equicorrelation `rho`, written as CSV with a label column.
fn write_panel(dir: &Path, name: &str, n: usize, r: usize, rho: f64, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = DMatrix::from_fn(r, r, |i, j| if i == j { 1.0 } else { rho });
    let l = c.cholesky().unwrap().l();
    let mut out = String::from("date");
    for j in 0..r {
        out.push_str(&format!(",s{j}"));
    }
    out.push('\n');
    for i in 0..n {
        let z = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(rand_distr_normal()));
        let x = &l * z;
        out.push_str(&format!("t{i}"));
        for v in x.iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    let p = dir.join(name);
    fs::write(&p, out).unwrap();
    p
}

// Box-Muller keeps the test free of extra distributions crates.
fn rand_distr_normal() -> impl rand::distr::Distribution<f64> {
    struct N;
    impl rand::distr::Distribution<f64> for N {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }
    N
}

fn fit_args(data: &Path, out: &Path) -> FitCorrArgs {
    FitCorrArgs {
        data: data.to_path_buf(),
        difference: false,
        family: "t".parse().unwrap(),
        transform: "yj".parse().unwrap(),
        factors: 2,
        steps: 500,
        seed: 5,
        init_scale: 0.1,
        adam: None,
        min_obs: 10,
        out: out.to_path_buf(),
        trace: None,
        omit_timing: true,
    }
}

fn read_csv(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(p).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = TempDir::new().unwrap();
    let data = write_panel(dir.path(), "d.csv", 120, 3, 0.4, 1);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = run(&["fit-corr", "--data", path_str(&data), "--steps", "400", "--seed", "9", "--omit-timing", "--out", path_str(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn artifact_round_trip_is_exact() {
    let dir = TempDir::new().unwrap();
    let data = write_panel(dir.path(), "d.csv", 150, 4, 0.3, 2);
    let out = dir.path().join("fit.json");
    let art = fit_corr(&fit_args(&data, &out)).unwrap();
    let loaded = FitArtifact::load(&out).unwrap();
    assert_eq!(art, loaded);

    let before = art.variational_params().unwrap();
    let after = loaded.variational_params().unwrap();
    let (p0, p1) = (before.prepare().unwrap(), after.prepare().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let theta = DVector::from_fn(art.m, |_, _| rng.random_range(-2.0..2.0));
        assert_eq!(p0.log_q(&theta).unwrap().to_bits(), p1.log_q(&theta).unwrap().to_bits());
    }
}

#[test]
fn five_series_smoke_run_reports_lb_bar() {
    let dir = TempDir::new().unwrap();
    let data = write_panel(dir.path(), "d.csv", 250, 5, 0.5, 3);
    let out = dir.path().join("fit.json");
    let trace = dir.path().join("trace.csv");
    let o = run(&[
        "fit-corr", "--data", path_str(&data), "--family", "t", "--transform", "yj", "--factors", "2",
        "--steps", "5000", "--seed", "1", "--out", path_str(&out), "--trace", path_str(&trace),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lb: f64 = stdout.trim().rsplit("lb_bar=").next().unwrap().parse().unwrap();
    assert!(lb.is_finite());

    let art = FitArtifact::load(&out).unwrap();
    assert_eq!(art.steps_completed, 5000);
    assert!(art.wall_clock_seconds.is_some());
    assert!((art.lb_bar.unwrap().value - lb).abs() < 1e-4);

    let (header, rows) = read_csv(&trace);
    assert_eq!(header, ["step", "elbo"]);
    assert_eq!(rows.len(), 5000);
    let elbo: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let med = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        0.5 * (v[249] + v[250])
    };
    assert!(med(&elbo[4500..]) > med(&elbo[..500]));
}

#[test]
fn zero_factors_is_mean_field() {
    let dir = TempDir::new().unwrap();
    let data = write_panel(dir.path(), "d.csv", 80, 3, 0.2, 4);
    let out = dir.path().join("fit.json");
    let mut args = fit_args(&data, &out);
    args.factors = 0;
    args.steps = 200;
    let art = fit_corr(&args).unwrap();
    let va = art.variational_params().unwrap();
    assert_eq!(va.k(), 0);
    assert_eq!(va.scale.dense_sigma(), DMatrix::identity(art.m, art.m));
}

#[test]
fn report_on_uncorrelated_data() {
    let dir = TempDir::new().unwrap();
    let data = write_panel(dir.path(), "d.csv", 1000, 3, 0.0, 5);
    let fit = dir.path().join("fit.json");
    let mut args = fit_args(&data, &fit);
    args.steps = 5000;
    fit_corr(&args).unwrap();

    let report = |draws: &str, seed: &str, tag: &str| {
        let mean = dir.path().join(format!("mean_{tag}.csv"));
        let quant = dir.path().join(format!("quant_{tag}.csv"));
        let o = run(&[
            "report", "--artifact", path_str(&fit), "--draws", draws, "--seed", seed,
            "--mean-out", path_str(&mean), "--quantiles-out", path_str(&quant),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let (header, rows) = read_csv(&mean);
        assert_eq!(header, ["", "s0", "s1", "s2"]);
        let m: Vec<Vec<f64>> = rows.iter().map(|r| r[1..].iter().map(|v| v.parse().unwrap()).collect()).collect();
        (m, read_csv(&quant))
    };

    let (m, (qh, qrows)) = report("10000", "1", "a");
    for i in 0..3 {
        assert_eq!(m[i][i], 1.0);
        for j in 0..3 {
            assert_eq!(m[i][j], m[j][i]);
            if i != j {
                assert!(m[i][j].abs() < 0.1, "off-diagonal {}", m[i][j]);
            }
        }
    }
    assert_eq!(qh, ["row", "col", "mean", "q0.025", "q0.25", "q0.5", "q0.75", "q0.975"]);
    assert_eq!(qrows.len(), 3);
    for row in &qrows {
        let q: Vec<f64> = row[3..].iter().map(|v| v.parse().unwrap()).collect();
        assert!(q.windows(2).all(|w| w[0] <= w[1]));
    }

    // a single draw lands inside the bulk; large draw counts agree with each other
    let (one, _) = report("1", "2", "b");
    let (other, _) = report("10000", "3", "c");
    for (i, j) in [(1, 0), (2, 0), (2, 1)] {
        assert!((one[i][j] - m[i][j]).abs() < 0.2);
        assert!((other[i][j] - m[i][j]).abs() < 0.01);
    }
}

#[test]
fn sample_command() {
    let dir = TempDir::new().unwrap();
    let data = write_panel(dir.path(), "d.csv", 100, 3, 0.3, 6);
    let fit = dir.path().join("fit.json");
    let mut args = fit_args(&data, &fit);
    args.family = "gaussian".parse().unwrap();
    args.transform = "identity".parse().unwrap();
    args.factors = 1;
    let art = fit_corr(&args).unwrap();

    let empty = dir.path().join("empty.csv");
    assert!(run(&["sample", "--artifact", path_str(&fit), "--n", "0", "--out", path_str(&empty)]).status.success());
    let text = fs::read_to_string(&empty).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("theta_1,theta_2,"));

    let draw = |seed: &str, name: &str| {
        let p = dir.path().join(name);
        let o = run(&["sample", "--artifact", path_str(&fit), "--n", "20000", "--seed", seed, "--out", path_str(&p)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        p
    };
    let a = draw("4", "a.csv");
    let b = draw("4", "b.csv");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let (_, rows) = read_csv(&a);
    let n = rows.len() as f64;
    let va = art.variational_params().unwrap();
    for (i, t) in va.transforms.iter().enumerate() {
        let xs: Vec<f64> = rows.iter().map(|r| r[i].parse().unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let s = t.sigma();
        assert!((mean - t.mu).abs() < 4.0 * s / n.sqrt(), "mean {mean} vs {}", t.mu);
        assert!((sd - s).abs() < 4.0 * s / (2.0 * n).sqrt(), "sd {sd} vs {s}");
    }
}

#[test]
fn kl_bench_writes_rows_in_grid_order() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("kl.csv");
    let o = run(&["kl-bench", "--mu-grid", "0,15", "--sigma-grid", "1", "--families", "gaussian,adjusted", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["family", "mu", "sigma", "kl", "converged", "params"]);
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(keys, [("gaussian", "0"), ("gaussian", "15"), ("adjusted", "0"), ("adjusted", "15")]);
    let kl: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!((kl[0] - kl[1]).abs() < 1e-6 && (kl[2] - kl[3]).abs() < 1e-6);
    assert!(kl[2] < kl[0]);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let data = write_panel(dir.path(), "d.csv", 60, 3, 0.2, 7);
    let out = dir.path().join("x.json");
    let code = |args: &[&str]| run(args).status.code().unwrap();

    assert_eq!(code(&["fit-corr", "--data", path_str(&data), "--family", "bogus", "--out", path_str(&out)]), 2);
    assert_eq!(code(&["fit-corr", "--data", path_str(&data), "--family", "exp-power", "--out", path_str(&out)]), 2);
    assert_eq!(code(&["fit-corr", "--data", path_str(&data)]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["--help"]), 0);

    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&["fit-corr", "--data", path_str(&missing), "--out", path_str(&out)]), 3);
    let short = write_panel(dir.path(), "short.csv", 5, 3, 0.2, 8);
    assert_eq!(code(&["fit-corr", "--data", path_str(&short), "--out", path_str(&out)]), 3);

    let o = run(&["fit-corr", "--data", path_str(&data), "--steps", "10", "--init-scale", "1e6", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step 1"));

    let good = dir.path().join("good.json");
    assert_eq!(code(&["fit-corr", "--data", path_str(&data), "--steps", "20", "--out", path_str(&good)]), 0);
    let text = fs::read_to_string(&good).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
    let stale = dir.path().join("stale.json");
    fs::write(&stale, text).unwrap();
    let draws = dir.path().join("s.csv");
    assert_eq!(code(&["sample", "--artifact", path_str(&stale), "--n", "2", "--out", path_str(&draws)]), 3);

    let o = bin()
        .args(["sample", "--artifact", path_str(&good), "--n", "2", "--out", path_str(&draws)])
        .env("COPVI_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
