use std::io::{BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::PathBuf;
use std::process::Command;
use std::thread;

use featurist::runner::{
    read_frame, write_frame, CodeRunner, RunnerClient, RunnerRequest, RunnerResponse, RunnerStatus, SubprocessRunner,
    TextItem, ValueItem,
};

const WORD_COUNT: &str = "def annotate(text):\n    return len(text.split())\n";

fn items(texts: &[&str]) -> Vec<TextItem> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| TextItem {
            id: format!("t{i}"),
            text: t.to_string(),
        })
        .collect()
}

fn fake_runner() -> Option<Vec<String>> {
    let ok = Command::new("python3").arg("--version").output().is_ok_and(|o| o.status.success());
    if !ok {
        eprintln!("python3 not available; skipping subprocess runner test");
        return None;
    }
    let script = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fake_runner.py");
    Some(vec!["python3".into(), script.to_string_lossy().into_owned()])
}

#[test]
fn client_talks_to_in_process_server() {
    let (client_end, server_end) = UnixStream::pair().unwrap();
    let server = thread::spawn(move || {
        let mut writer = server_end.try_clone().unwrap();
        let mut reader = BufReader::new(server_end);
        writer.write_all(b"featurist-runner 1\n").unwrap();
        let mut seen = Vec::new();
        loop {
            let frame = read_frame(&mut reader).unwrap();
            let req: RunnerRequest = serde_json::from_slice(&frame).unwrap();
            let resp = match &req {
                RunnerRequest::Probe { .. } => RunnerResponse {
                    status: RunnerStatus::Ok,
                    values: Vec::new(),
                    message: None,
                    probe_value: Some(3.0),
                },
                RunnerRequest::Annotate { texts, .. } => RunnerResponse {
                    status: RunnerStatus::Ok,
                    values: texts
                        .iter()
                        .rev()
                        .map(|t| ValueItem {
                            id: t.id.clone(),
                            value: Some(t.text.split_whitespace().count() as f64),
                        })
                        .collect(),
                    message: None,
                    probe_value: None,
                },
                RunnerRequest::Shutdown => RunnerResponse {
                    status: RunnerStatus::Ok,
                    values: Vec::new(),
                    message: None,
                    probe_value: None,
                },
            };
            write_frame(&mut writer, &serde_json::to_vec(&resp).unwrap()).unwrap();
            let stop = req == RunnerRequest::Shutdown;
            seen.push(req);
            if stop {
                return seen;
            }
        }
    });

    let mut client = RunnerClient::connect(client_end.try_clone().unwrap(), client_end).unwrap();
    let probe = client
        .call(&RunnerRequest::Probe {
            tool_id: "wc".into(),
            source: WORD_COUNT.into(),
        })
        .unwrap();
    assert_eq!(probe.probe_value, Some(3.0));
    let texts = items(&["a b", "a b c d", "x y z u v w"]);
    let resp = client
        .call(&RunnerRequest::Annotate {
            tool_id: "wc".into(),
            texts: texts.clone(),
        })
        .unwrap();
    // The server answers in reverse order; alignment is by id.
    assert_eq!(featurist::runner::align_values(&texts, resp).unwrap(), vec![Some(2.0), Some(4.0), Some(6.0)]);
    client.call(&RunnerRequest::Shutdown).unwrap();
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 3);
}

#[test]
fn wrong_handshake_is_rejected() {
    let (a, b) = UnixStream::pair().unwrap();
    let mut w = b;
    w.write_all(b"something-else 9\n").unwrap();
    let err = RunnerClient::connect(a.try_clone().unwrap(), a).err().expect("handshake must fail");
    assert!(err.to_string().contains("bad handshake"), "{err}");
}

#[test]
fn subprocess_probe_and_annotate() {
    let Some(cmd) = fake_runner() else { return };
    let runner = SubprocessRunner::new(cmd).unwrap();
    let ok = runner.probe("wc", WORD_COUNT).unwrap();
    assert!(ok.is_ok());
    assert_eq!(ok.probe_value, Some(3.0));
    let values = runner.annotate("wc", &items(&["a b", "a b c d", "a b c d e f"])).unwrap();
    assert_eq!(values, vec![Some(2.0), Some(4.0), Some(6.0)]);

    let bad = runner.probe("broken", "def annotate(text:\n").unwrap();
    assert_eq!(bad.status, RunnerStatus::CompileError);
    assert!(bad.message.is_some());

    let two = runner
        .probe("two", "def annotate(text):\n    return 1\n\ndef other(x):\n    return 2\n")
        .unwrap();
    assert_eq!(two.status, RunnerStatus::CompileError);

    let picky = "def annotate(text):\n    if 'boom' in text:\n        raise ValueError('boom')\n    return len(text)\n";
    assert!(runner.probe("picky", picky).unwrap().is_ok());
    let values = runner.annotate("picky", &items(&["abc", "boom", "abcdef"])).unwrap();
    assert_eq!(values, vec![Some(3.0), None, Some(6.0)]);
}

#[test]
fn annotate_requires_a_successful_probe() {
    let Some(cmd) = fake_runner() else { return };
    let runner = SubprocessRunner::new(cmd).unwrap();
    let err = runner.annotate("never-probed", &items(&["x"])).unwrap_err();
    assert!(err.to_string().contains("has not been probed"), "{err}");
}

#[test]
fn dead_runner_is_restarted_once_and_tool_reprobed() {
    let Some(cmd) = fake_runner() else { return };
    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("crashed");
    let cmd = vec![
        "env".to_string(),
        format!("FAKE_RUNNER_CRASH_MARKER={}", marker.display()),
    ]
    .into_iter()
    .chain(cmd)
    .collect();
    let runner = SubprocessRunner::new(cmd).unwrap();
    assert!(runner.probe("wc", WORD_COUNT).unwrap().is_ok());
    let values = runner.annotate("wc", &items(&["one two", "__crash__"])).unwrap();
    assert!(marker.exists(), "runner should have crashed once");
    assert_eq!(values, vec![Some(2.0), Some(1.0)]);
}
