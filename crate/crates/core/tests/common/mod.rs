#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_collectivity"))
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn trading_dates(n: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2007, 1, 2).unwrap();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        use chrono::Datelike;
        if d.weekday().number_from_monday() <= 5 {
            out.push(d);
        }
        d = d.succ_opt().unwrap();
    }
    out
}

/// Wide price table of `k` stocks driven by one common factor.
pub fn factor_prices_csv(k: usize, n_prices: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prices = vec![100.0f64; k];
    let mut s = String::from("date");
    for i in 0..k {
        write!(s, ",S{i}").unwrap();
    }
    s.push('\n');
    for (t, d) in trading_dates(n_prices).into_iter().enumerate() {
        if t > 0 {
            let f: f64 = StandardNormal.sample(&mut rng);
            for p in prices.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *p *= (0.01 * (0.6 * f + 0.8 * e)).exp();
            }
        }
        write!(s, "{}", d.format("%Y-%m-%d")).unwrap();
        for p in &prices {
            write!(s, ",{p:.6}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}
