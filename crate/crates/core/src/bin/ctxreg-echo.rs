//! Reference external predictor: answers each request with the label of the
//! last context pair (0 for an empty context).
//!
//! Test hooks: `--bad-at N` answers request N (1-based) with a non-numeric
//! prediction, `--fail-at N` exits with status 3 on request N, and
//! `--sleep-ms M` delays every answer.

use std::io::{self, BufRead, Write};
use std::time::Duration;

use ctxreg::predict::PromptRecord;

fn flag(args: &[String], name: &str) -> Option<u64> {
    args.iter()
        .position(|a| a == name)
        .and_then(|i| args.get(i + 1))
        .and_then(|v| v.parse().ok())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let bad_at = flag(&args, "--bad-at");
    let fail_at = flag(&args, "--fail-at");
    let sleep = flag(&args, "--sleep-ms").map(Duration::from_millis);

    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    for (i, line) in stdin.lock().lines().enumerate() {
        let n = i as u64 + 1;
        let line = line.expect("read request");
        if fail_at == Some(n) {
            eprintln!("echo predictor: failing on request {n} as asked");
            std::process::exit(3);
        }
        if let Some(d) = sleep {
            std::thread::sleep(d);
        }
        if bad_at == Some(n) {
            writeln!(stdout, "{{\"prediction\": \"not a number\"}}").unwrap();
        } else {
            let rec: PromptRecord = serde_json::from_str(&line).expect("valid request");
            let y = rec.context.last().map(|(_, y)| *y).unwrap_or(0.0);
            writeln!(stdout, "{}", serde_json::json!({ "prediction": y })).unwrap();
        }
        stdout.flush().unwrap();
    }
}
