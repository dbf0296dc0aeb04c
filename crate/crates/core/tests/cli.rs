use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use beastpipe::pipeline::CSV_HEADER;
use beastpipe::wire::EnvClient;

fn beastpipe() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_beastpipe"));
    cmd.env("RUST_LOG", "error").env_remove("BEASTPIPE_LOGDIR");
    cmd
}

fn run(args: &[&str]) -> Output {
    beastpipe().args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Served {
    child: Child,
    addr: String,
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(env: &str) -> Served {
    let mut child = beastpipe()
        .args(["serve-env", "--env", env, "--address", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let prefix = format!("serving {env} on ");
    assert!(line.starts_with(&prefix), "unexpected banner {line:?}");
    Served {
        addr: line[prefix.len()..].trim().to_string(),
        child,
    }
}

#[test]
fn unknown_env_lists_valid_names() {
    for args in [
        &["train-mono", "--env", "pong"][..],
        &["serve-env", "--env", "pong", "--address", "127.0.0.1:0"][..],
    ] {
        let out = run(args);
        assert_eq!(out.status.code(), Some(2));
        let err = stderr(&out);
        assert!(err.contains("grid5") && err.contains("bandit"), "{err}");
    }
}

#[test]
fn port_in_use_is_a_usage_error() {
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = held.local_addr().unwrap().to_string();
    let out = run(&["serve-env", "--env", "bandit", "--address", &addr]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(&addr));
}

#[test]
fn invalid_training_flags() {
    let out = run(&["train-mono", "--num_actors", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("num_actors"));

    let out = run(&["train-mono", "--batch_size", "8", "--num_buffers", "8"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("num_buffers must be ≥ 2·batch_size"));

    let out = run(&["train", "--no_such_flag", "1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["test", "--episodes", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_server_exits_with_connect_code() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let out = run(&["train", "--server_addresses", &addr, "--connect_retries", "1"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains(&addr));
}

#[test]
fn served_env_speaks_the_protocol() {
    let served = serve("bandit");
    let (client, first) = EnvClient::connect(served.addr.as_str(), Duration::from_secs(5)).unwrap();
    assert_eq!(client.spec().num_actions, 2);
    assert!(first.done);
    client.close();
}

#[test]
fn train_against_served_env() {
    let served = serve("bandit");
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--server_addresses",
        &served.addr,
        "--num_actors",
        "2",
        "--batch_size",
        "4",
        "--unroll_length",
        "4",
        "--total_steps",
        "4000",
        "--logdir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("done: steps "));
    assert!(dir.path().join("model.tbst").exists());
}

fn csv_header(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("logs.csv"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn train_mono_then_test_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let logdir = dir.path().to_str().unwrap();
    let out = run(&[
        "train-mono",
        "--env",
        "grid5",
        "--num_actors",
        "2",
        "--batch_size",
        "2",
        "--unroll_length",
        "5",
        "--total_steps",
        "500",
        "--hidden",
        "16",
        "--logdir",
        logdir,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(csv_header(dir.path()), CSV_HEADER);
    assert_eq!(
        CSV_HEADER,
        "step,frames,mean_episode_return,pg_loss,baseline_loss,entropy_loss,total_loss,fps"
    );

    let out = beastpipe()
        .args(["test", "--env", "grid5", "--episodes", "3"])
        .env("BEASTPIPE_LOGDIR", logdir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("episodes 3 mean_return "));

    let out = run(&["test", "--env", "bandit", "--logdir", logdir]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mismatch"));
}
