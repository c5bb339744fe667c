use std::path::Path;
use std::process::{Command, Output};

use mfghom::cli::{assemble, emit_config, parse_config, parse_table, ConfigError, RunArgs, CACHE_ENV};
use mfghom::cli::Command as Cmd;

const WEIGHTED_LOCAL: &str = r#"
command = "solve-eps"

[hamiltonian]
kind = "weighted-quadratic"
amplitude = 1.0

[coupling]
variant = "local"
law = "linear"
strength = 0.5
amplitude = 1.0

[solve]
eps = 0.25
n_cell = 16
steps = 120
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfghom")).args(args).env_remove(CACHE_ENV).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn invalid_fields(e: ConfigError) -> Vec<(String, String)> {
    match e {
        ConfigError::Invalid(v) => v.into_iter().map(|e| (e.field, e.message)).collect(),
        other => panic!("{other:?}"),
    }
}

fn no_args() -> RunArgs {
    RunArgs { config: None, overrides: vec![], workers: None, cache_dir: None, report: None, csv: None, fields: None }
}

#[test]
fn minimal_config_takes_defaults() {
    let cfg = parse_config("command = \"cell\"\n").unwrap();
    assert_eq!(cfg.command, Cmd::Cell);
    assert_eq!(cfg.cell.n, 64);
    assert_eq!(cfg.cell_problem.p, vec![1.0]);
    assert_eq!(cfg.cell_problem.m, 1.0);
    assert!(cfg.hamiltonian.is_none() && cfg.coupling.is_none());
}

#[test]
fn out_of_range_field_is_named_with_its_range() {
    let f = invalid_fields(parse_config("command = \"cell\"\n[cell]\nn = -4\n").unwrap_err());
    assert_eq!(f.len(), 1);
    assert_eq!(f[0].0, "cell.n");
    assert!(f[0].1.contains("[4, 4096]"), "{}", f[0].1);
}

#[test]
fn all_invalid_fields_are_reported_together() {
    let text = "command = \"cell\"\n[cell]\nn = 2\n[picard]\ntol = -1.0\nmax_iters = 0\n";
    let f = invalid_fields(parse_config(text).unwrap_err());
    let names: Vec<&str> = f.iter().map(|(k, _)| k.as_str()).collect();
    for want in ["cell.n", "picard.tol", "picard.max_iters"] {
        assert!(names.contains(&want), "{names:?}");
    }
}

#[test]
fn parse_error_carries_position() {
    match parse_config("command = \"cell\"\n[cell]\nn = = 3\n") {
        Err(ConfigError::Parse { line, column, .. }) => {
            assert_eq!(line, 3);
            assert!(column >= 1);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let f = invalid_fields(parse_config("command = \"cell\"\n[cell]\nresolution = 8\n").unwrap_err());
    assert!(f.iter().any(|(k, m)| k == "cell.resolution" && m.contains("unknown")), "{f:?}");
    let f = invalid_fields(parse_config("command = \"cell\"\n[bogus]\nx = 1\n").unwrap_err());
    assert!(f.iter().any(|(k, _)| k == "bogus"), "{f:?}");
}

#[test]
fn canonical_form_round_trips() {
    let cfg = parse_config(WEIGHTED_LOCAL).unwrap();
    let text = emit_config(&cfg);
    assert_eq!(parse_config(&text).unwrap(), cfg);
    assert_eq!(emit_config(&parse_config(&text).unwrap()), text);
}

#[test]
fn precedence_of_sources() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "c.toml", "command = \"table\"\n[io]\ncache_dir = \"from-file\"\nworkers = 3\n");
    let mut args = no_args();
    args.config = Some(file.into());
    let cfg = parse_table(assemble(&args, Some(Cmd::Cell), None).unwrap()).unwrap();
    assert_eq!(cfg.command, Cmd::Cell);
    assert_eq!(cfg.io.cache_dir.as_deref(), Some(Path::new("from-file")));
    assert_eq!(cfg.io.workers, Some(3));

    let cfg = parse_table(assemble(&args, None, Some("from-env".into())).unwrap()).unwrap();
    assert_eq!(cfg.io.cache_dir.as_deref(), Some(Path::new("from-env")));

    args.overrides = vec!["io.cache_dir=from-set".into(), "io.workers=2".into()];
    let cfg = parse_table(assemble(&args, None, Some("from-env".into())).unwrap()).unwrap();
    assert_eq!(cfg.io.cache_dir.as_deref(), Some(Path::new("from-set")));
    assert_eq!(cfg.io.workers, Some(2));

    args.cache_dir = Some("from-flag".into());
    args.workers = Some(1);
    let cfg = parse_table(assemble(&args, None, Some("from-env".into())).unwrap()).unwrap();
    assert_eq!(cfg.io.cache_dir.as_deref(), Some(Path::new("from-flag")));
    assert_eq!(cfg.io.workers, Some(1));
}

#[test]
fn cell_command_prints_summary() {
    let out = bin(&["cell"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = String::from_utf8(out.stdout).unwrap();
    assert!(s.starts_with("cell p=[1] m=1 h_bar=0.5 "), "{s}");
}

#[test]
fn stalled_solve_exits_with_two_and_still_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", WEIGHTED_LOCAL);
    let report = dir.path().join("r.json");
    let out = bin(&["solve-eps", &cfg, "--set", "picard.max_iters=1", "--report", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["converged"], serde_json::Value::Bool(false));
    assert_eq!(json["iterations"], 1);
}

#[test]
fn bad_input_exits_with_one() {
    let out = bin(&["cell", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = bin(&["cell", "--set", "cell.n=-4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cell.n"));
    assert_eq!(bin(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_subcommand_prints_canonical_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", WEIGHTED_LOCAL);
    let out = bin(&["config", &cfg, "--set", "cell.n=32"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let back = parse_config(&text).unwrap();
    assert_eq!(back.cell.n, 32);
    assert_eq!(emit_config(&back), text);
}

#[test]
fn reports_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "command = \"table\"\n[hamiltonian]\nkind = \"weighted-quadratic\"\namplitude = 1.0\n[cell]\nn = 32\n[table]\np_min = [0.5]\np_max = [1.5]\np_nodes = 5\nm_nodes = 1\n",
    );
    let mut bytes = vec![];
    for w in ["1", "2"] {
        let r = dir.path().join(format!("r{w}.json"));
        let out = bin(&["table", &cfg, "--workers", w, "--report", r.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        bytes.push(std::fs::read(r).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}
