//! Reference implementation of the external-model protocol, used by the
//! integration tests and as a template for wiring real simulators.
//!
//! Protocol: write `PDDUQ 1 <N> <M>` on startup, then answer each request
//! line of N space-separated decimals with one line of M decimals.
//!
//! Modes (first argument):
//! - `quadratic N`: scalar output `sum_i (i+1) x_i^2 + prod_i x_i`
//! - `echo N`: returns the first coordinate
//! - `nan N`: always answers `nan` (protocol-violation testing)
//! - `stall N`: never answers (timeout testing)

use std::io::{BufRead, Write};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("quadratic");
    let n: usize = args
        .get(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(2);

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "PDDUQ 1 {n} 1").unwrap();
    out.flush().unwrap();

    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        let x: Vec<f64> = line
            .split_whitespace()
            .filter_map(|t| t.parse().ok())
            .collect();
        if x.len() != n {
            // malformed request: answer nothing and exit nonzero
            std::process::exit(2);
        }
        let y = match mode {
            "echo" => x[0],
            "nan" => f64::NAN,
            "stall" => loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            },
            _ => {
                let mut acc = 0.0;
                let mut prod = 1.0;
                for (i, &xi) in x.iter().enumerate() {
                    acc += (i as f64 + 1.0) * xi * xi;
                    prod *= xi;
                }
                acc + prod
            }
        };
        writeln!(out, "{y:.17e}").unwrap();
        out.flush().unwrap();
    }
}
