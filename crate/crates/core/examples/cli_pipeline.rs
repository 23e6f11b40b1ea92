//! Drives the `dos` command line in-process through a complete run: data,
//! training, SID export, a baseline, evaluation, the probe and the report.
//!
//! ```text
//! cargo run --release --example cli_pipeline -- [output-dir]
//! ```

use std::path::PathBuf;

fn dos(args: &[&str]) {
    println!("$ dos {}", args.join(" "));
    let argv = std::iter::once("dos").chain(args.iter().copied());
    let code = dos_sid::cli::run(argv);
    assert_eq!(code, 0, "command failed");
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dos-cli-pipeline"));
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();

    dos(&["gen-data", "--profile", "tiny", "--seed", "3", "--out", &p("data")]);
    dos(&["train", "--profile", "tiny", "--data", &p("data"), "--seed", "3", "--out", &p("dos")]);
    dos(&["export-sids", "--checkpoint", &p("dos/checkpoint.bin"), "--data", &p("data"), "--out", &p("dos/sids.tsv")]);
    dos(&["baseline", "rq-kmeans", "--data", &p("data"), "--seed", "3", "--out", &p("rqk/sids.tsv")]);
    dos(&["eval", "--checkpoint", &p("dos/checkpoint.bin"), "--data", &p("data"), "--out", &p("dos/metrics.json")]);
    dos(&["eval", "--sids", &p("rqk/sids.tsv"), "--scheme", "rq-kmeans", "--data", &p("data"), "--out", &p("rqk/metrics.json")]);
    let (a, b) = (format!("dos={}", p("dos/sids.tsv")), format!("rq-kmeans={}", p("rqk/sids.tsv")));
    dos(&["probe", "--sids", &a, "--sids", &b, "--data", &p("data"), "--seed", "3", "--out", &p("probe.json")]);
    dos(&["report", &p("dos/metrics.json"), &p("rqk/metrics.json"), &p("probe.json")]);
    println!("outputs in {}", root.display());
}
