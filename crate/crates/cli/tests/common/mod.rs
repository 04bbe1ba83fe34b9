//! Synthetic five-study fixture: two trials reported as summaries, three
//! with participant rows. Covariates are sex (men = 1), age, BMI and
//! baseline severity.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use casemix::seed::stream_rng;
use casemix::{AggregatedTrial, IpdTrial};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Shape {
    id: i64,
    n1: usize,
    n0: usize,
    men: f64,
    age: (f64, f64),
    bmi: (f64, f64),
    severity: (f64, f64),
}

const SHAPES: [Shape; 5] = [
    Shape { id: 1, n1: 52, n0: 20, men: 0.80, age: (47.1, 12.3), bmi: (28.0, 5.9), severity: (22.5, 9.1) },
    Shape { id: 2, n1: 91, n0: 25, men: 0.74, age: (46.1, 13.5), bmi: (29.8, 7.0), severity: (18.7, 6.1) },
    Shape { id: 3, n1: 118, n0: 43, men: 0.61, age: (50.1, 13.9), bmi: (31.2, 7.3), severity: (21.1, 7.6) },
    Shape { id: 4, n1: 85, n0: 27, men: 0.68, age: (47.7, 13.9), bmi: (31.7, 7.3), severity: (19.7, 6.8) },
    Shape { id: 5, n1: 133, n0: 42, men: 0.71, age: (48.7, 13.8), bmi: (32.0, 6.8), severity: (19.8, 8.4) },
];

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn trial(s: &Shape, seed: u64) -> IpdTrial {
    let mut rng = stream_rng(seed, s.id as u64);
    let n = s.n1 + s.n0;
    let normal = |(m, sd): (f64, f64)| Normal::new(m, sd).unwrap();
    let mut cov = DMatrix::zeros(n, 4);
    let mut treat = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    for i in 0..n {
        let men = (rng.random::<f64>() < s.men) as u8 as f64;
        let age = normal(s.age).sample(&mut rng).clamp(18.0, 90.0);
        let bmi = normal(s.bmi).sample(&mut rng).clamp(16.0, 60.0);
        let sev = normal(s.severity).sample(&mut rng).clamp(12.0, 60.0);
        let x = i < s.n1;
        let lp = 0.85 + 1.2 * x as u8 as f64 - 0.02 * (age - 48.0) + 0.03 * (sev - 20.0) - 0.2 * men;
        cov.row_mut(i).copy_from_slice(&[men, age, bmi, sev]);
        treat.push(x);
        outcome.push(rng.random::<f64>() < expit(lp));
    }
    IpdTrial::new(s.id, cov, treat, outcome).unwrap()
}

pub const MCMC: &str = "[mcmc]\nchains = 2\nadapt = 300\nsamples = 300\nthin = 1\n";

/// Writes the fixture and a config into `dir`; returns the config path.
pub fn write_fixture(dir: &Path, extra_config: &str) -> PathBuf {
    let mut ipd = Vec::new();
    let mut agg = Vec::new();
    for s in &SHAPES {
        let t = trial(s, 11);
        if s.id <= 2 {
            let name = format!("agg_{}.json", s.id);
            std::fs::write(dir.join(&name), AggregatedTrial::from_ipd(&t).to_json().unwrap()).unwrap();
            agg.push(name);
        } else {
            let name = format!("ipd_{}.csv", s.id);
            t.save_csv(dir.join(&name)).unwrap();
            ipd.push(name);
        }
    }
    let quote = |v: &[String]| v.iter().map(|s| format!("\"{s}\"")).collect::<Vec<_>>().join(", ");
    let cfg = format!(
        "ipd = [{}]\naggregated = [{}]\nseed = 7\n{extra_config}\n{MCMC}",
        quote(&ipd),
        quote(&agg)
    );
    let path = dir.join("analysis.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

pub fn casemix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casemix")).args(args).output().unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
