//! Reference implementations used as oracles by the integration tests.
//! They are written independently of the library code paths.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Compensated (Neumaier) sum.
pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn oracle_mean(xs: &[f64]) -> f64 {
    neumaier_sum(xs.iter().copied()) / xs.len() as f64
}

/// Two-pass sample standard deviation with compensated sums.
pub fn oracle_std(xs: &[f64]) -> f64 {
    let m = oracle_mean(xs);
    let ss = neumaier_sum(xs.iter().map(|x| (x - m) * (x - m)));
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}

/// Sample covariance over the product of sample standard deviations.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (oracle_mean(x), oracle_mean(y));
    let n1 = x.len() as f64 - 1.0;
    let cov = neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my))) / n1;
    cov / (oracle_std(x) * oracle_std(y))
}

/// Piecewise-linear evaluation of `s` at `target` evenly spaced positions
/// over `[0, len - 1]`.
pub fn oracle_interp(s: &[f64], target: usize) -> Vec<f64> {
    let last = (s.len() - 1) as f64;
    (0..target)
        .map(|i| {
            let x = (i as f64 / (target - 1) as f64) * last;
            let j = (x as usize).min(s.len() - 2);
            let t = x - j as f64;
            (1.0 - t) * s[j] + t * s[j + 1]
        })
        .collect()
}

/// Composite Simpson rule with `intervals` (even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let mut acc = f(a) + f(b);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Two-sided p-value of a correlation `r` over `n` samples by numerically
/// integrating the Student t density with `n - 2` degrees of freedom.
///
/// With `t = sqrt(v) tan(theta)` the density is proportional to
/// `cos(theta)^(v - 1)` on `[0, pi/2)`, so the tail mass is a ratio of two
/// smooth integrals.
pub fn oracle_p_value(r: f64, n: usize) -> f64 {
    let v = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r.abs() * (v / (1.0 - r * r)).sqrt();
    let theta = (t / v.sqrt()).atan();
    let g = |th: f64| th.cos().powf(v - 1.0);
    let half_pi = std::f64::consts::FRAC_PI_2;
    simpson(g, theta, half_pi, 4_000) / simpson(g, 0.0, half_pi, 4_000)
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_tpfp"))
}

/// Runs the CLI with `args`, returning its output.
pub fn tpfp(args: &[&str], cwd: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .env_remove("TPFP_LOG")
        .output()
        .expect("spawn tpfp")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Writes a minimal decoder `config.json`.
pub fn write_config(dir: &Path, layers: usize, hidden: usize, heads: usize, kv_heads: usize) {
    let cfg = serde_json::json!({
        "num_hidden_layers": layers,
        "hidden_size": hidden,
        "num_attention_heads": heads,
        "num_key_value_heads": kv_heads,
    });
    std::fs::write(dir.join("config.json"), cfg.to_string()).unwrap();
}
