//! Docker Engine runtime over the unix socket.
//!
//! Talks HTTP/1.1 directly on the socket (one connection per request,
//! `Connection: close`) so no HTTP client dependency is needed. Sessions are
//! `sleep infinity` containers labeled with the run id; commands run through
//! `docker exec` wrapped in coreutils `timeout`, so the base image must
//! provide `timeout` and `bash` (stock Ubuntu does). A command that the
//! wrapper kills reports exit 124, which is mapped to the timeout sentinel;
//! a task command that itself exits 124 is indistinguishable from a timeout.

use super::{
    BuildOutcome, ContainerRuntime, ExecResult, FileToCopy, SandboxError, Session,
    SESSION_CPUS, SESSION_MEMORY_BYTES, STREAM_CAP_BYTES, TIMEOUT_EXIT_CODE,
};
use serde_json::{json, Value};
use std::io::{Read, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

/// Container label that marks sessions as belonging to a run.
const RUN_LABEL_KEY: &str = "shellforge.run";

/// Grace period before `timeout` escalates SIGTERM to SIGKILL.
const KILL_GRACE_SECS: u64 = 5;

#[derive(Debug, Clone)]
pub struct DockerRuntime {
    socket_path: PathBuf,
}

struct HttpResponse {
    status: u16,
    body: Vec<u8>,
}

fn runtime_err(detail: impl Into<String>) -> SandboxError {
    SandboxError::Runtime { runtime: "docker", detail: detail.into() }
}

/// Percent-encodes everything outside the URL-unreserved set.
fn percent_encode(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for byte in raw.bytes() {
        match byte {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => {
                out.push(byte as char)
            }
            other => out.push_str(&format!("%{other:02X}")),
        }
    }
    out
}

/// Wraps a string in single quotes for use inside `bash -c`.
fn sh_quote(raw: &str) -> String {
    format!("'{}'", raw.replace('\'', "'\\''"))
}

fn find_crlf(bytes: &[u8]) -> Option<usize> {
    bytes.windows(2).position(|w| w == b"\r\n")
}

fn decode_chunked(mut body: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    while let Some(pos) = find_crlf(body) {
        let size_text = String::from_utf8_lossy(&body[..pos]);
        let size_text = size_text.split(';').next().unwrap_or("").trim().to_string();
        let Ok(size) = usize::from_str_radix(&size_text, 16) else { break };
        body = &body[pos + 2..];
        if size == 0 {
            break;
        }
        if body.len() < size {
            out.extend_from_slice(body);
            break;
        }
        out.extend_from_slice(&body[..size]);
        body = &body[size..];
        if body.starts_with(b"\r\n") {
            body = &body[2..];
        }
    }
    out
}

impl DockerRuntime {
    pub fn new() -> Self {
        Self::with_socket("/var/run/docker.sock")
    }

    pub fn with_socket(socket_path: impl Into<PathBuf>) -> Self {
        DockerRuntime { socket_path: socket_path.into() }
    }

    fn request(
        &self,
        method: &str,
        path: &str,
        content_type: Option<&str>,
        body: &[u8],
    ) -> Result<HttpResponse, SandboxError> {
        let mut stream = UnixStream::connect(&self.socket_path).map_err(|err| {
            runtime_err(format!(
                "cannot connect to docker socket {}: {err}",
                self.socket_path.display()
            ))
        })?;
        let mut head = format!(
            "{method} {path} HTTP/1.1\r\nHost: docker\r\nConnection: close\r\nContent-Length: {}\r\n",
            body.len()
        );
        if let Some(ct) = content_type {
            head.push_str(&format!("Content-Type: {ct}\r\n"));
        }
        head.push_str("\r\n");
        stream
            .write_all(head.as_bytes())
            .and_then(|()| stream.write_all(body))
            .map_err(|err| runtime_err(format!("socket write failed: {err}")))?;
        let mut raw = Vec::new();
        stream
            .read_to_end(&mut raw)
            .map_err(|err| runtime_err(format!("socket read failed: {err}")))?;
        let header_end = raw
            .windows(4)
            .position(|w| w == b"\r\n\r\n")
            .ok_or_else(|| runtime_err("malformed HTTP response: no header terminator"))?;
        let header_text = String::from_utf8_lossy(&raw[..header_end]).into_owned();
        let mut lines = header_text.lines();
        let status_line = lines.next().unwrap_or("");
        let status: u16 = status_line
            .split_whitespace()
            .nth(1)
            .and_then(|code| code.parse().ok())
            .ok_or_else(|| runtime_err(format!("malformed status line: {status_line}")))?;
        let mut chunked = false;
        let mut content_length: Option<usize> = None;
        for line in lines {
            let Some((name, value)) = line.split_once(':') else { continue };
            let name = name.trim().to_ascii_lowercase();
            let value = value.trim();
            if name == "transfer-encoding" && value.eq_ignore_ascii_case("chunked") {
                chunked = true;
            } else if name == "content-length" {
                content_length = value.parse().ok();
            }
        }
        let payload = &raw[header_end + 4..];
        let body = if chunked {
            decode_chunked(payload)
        } else if let Some(len) = content_length {
            payload[..len.min(payload.len())].to_vec()
        } else {
            payload.to_vec()
        };
        Ok(HttpResponse { status, body })
    }

    fn request_json(
        &self,
        method: &str,
        path: &str,
        body: &Value,
    ) -> Result<HttpResponse, SandboxError> {
        let bytes = serde_json::to_vec(body).expect("request body serializes");
        self.request(method, path, Some("application/json"), &bytes)
    }

    /// Splits a multiplexed attach stream into capped stdout/stderr.
    fn demux(frames: &[u8]) -> (String, String, bool) {
        let mut stdout = Vec::new();
        let mut stderr = Vec::new();
        let mut truncated = false;
        let mut rest = frames;
        while rest.len() >= 8 {
            let kind = rest[0];
            let len = u32::from_be_bytes([rest[4], rest[5], rest[6], rest[7]]) as usize;
            rest = &rest[8..];
            let take = len.min(rest.len());
            let payload = &rest[..take];
            let sink = if kind == 2 { &mut stderr } else { &mut stdout };
            let room = STREAM_CAP_BYTES.saturating_sub(sink.len());
            if room >= payload.len() {
                sink.extend_from_slice(payload);
            } else {
                sink.extend_from_slice(&payload[..room]);
                truncated = true;
            }
            rest = &rest[take..];
        }
        (
            String::from_utf8_lossy(&stdout).into_owned(),
            String::from_utf8_lossy(&stderr).into_owned(),
            truncated,
        )
    }
}

impl Default for DockerRuntime {
    fn default() -> Self {
        Self::new()
    }
}

impl ContainerRuntime for DockerRuntime {
    fn name(&self) -> &'static str {
        "docker"
    }

    fn build(&self, context_dir: &Path, image_tag: &str) -> Result<BuildOutcome, SandboxError> {
        let mut tarball = Vec::new();
        {
            let mut builder = tar::Builder::new(&mut tarball);
            builder
                .append_dir_all(".", context_dir)
                .and_then(|()| builder.finish())
                .map_err(|source| SandboxError::Io { path: context_dir.to_path_buf(), source })?;
        }
        let path = format!("/build?t={}", percent_encode(image_tag));
        let response = self.request("POST", &path, Some("application/x-tar"), &tarball)?;
        if response.status != 200 {
            return Ok(BuildOutcome::Failure {
                stderr: String::from_utf8_lossy(&response.body).into_owned(),
            });
        }
        // The body is a stream of JSON progress objects; an error object
        // anywhere means the build failed even though HTTP said 200.
        let mut log = String::new();
        let stream = serde_json::Deserializer::from_slice(&response.body).into_iter::<Value>();
        for item in stream {
            let Ok(item) = item else { break };
            if let Some(chunk) = item.get("stream").and_then(Value::as_str) {
                log.push_str(chunk);
            }
            let error = item
                .get("errorDetail")
                .and_then(|d| d.get("message"))
                .or_else(|| item.get("error"))
                .and_then(Value::as_str);
            if let Some(message) = error {
                let mut stderr = log;
                if !stderr.is_empty() && !stderr.ends_with('\n') {
                    stderr.push('\n');
                }
                stderr.push_str(message);
                return Ok(BuildOutcome::Failure { stderr });
            }
        }
        Ok(BuildOutcome::Success { image_ref: image_tag.to_string() })
    }

    fn create_session(&self, image_ref: &str, run_label: &str) -> Result<Session, SandboxError> {
        let body = json!({
            "Image": image_ref,
            "Cmd": ["sleep", "infinity"],
            "WorkingDir": "/workspace",
            "Labels": { RUN_LABEL_KEY: run_label },
            "HostConfig": {
                "NanoCpus": u64::from(SESSION_CPUS) * 1_000_000_000,
                "Memory": SESSION_MEMORY_BYTES,
            },
        });
        let response = self.request_json("POST", "/containers/create", &body)?;
        if response.status == 404 {
            return Err(SandboxError::UnknownImage { image_ref: image_ref.to_string() });
        }
        if response.status != 201 {
            return Err(runtime_err(format!(
                "container create failed ({}): {}",
                response.status,
                String::from_utf8_lossy(&response.body)
            )));
        }
        let created: Value = serde_json::from_slice(&response.body)
            .map_err(|err| runtime_err(format!("bad create response: {err}")))?;
        let id = created
            .get("Id")
            .and_then(Value::as_str)
            .ok_or_else(|| runtime_err("create response missing Id"))?
            .to_string();
        let start = self.request_json("POST", &format!("/containers/{id}/start"), &json!({}))?;
        if start.status != 204 && start.status != 304 {
            return Err(runtime_err(format!(
                "container start failed ({}): {}",
                start.status,
                String::from_utf8_lossy(&start.body)
            )));
        }
        Ok(Session {
            session_id: id,
            image_ref: image_ref.to_string(),
            run_label: run_label.to_string(),
            alive: true,
        })
    }

    fn exec(
        &self,
        session: &Session,
        command: &str,
        timeout: Duration,
    ) -> Result<ExecResult, SandboxError> {
        let secs = timeout.as_secs().max(1);
        let wrapped = format!(
            "timeout -k {KILL_GRACE_SECS} {secs}s bash -c {}",
            sh_quote(command)
        );
        let create = self.request_json(
            "POST",
            &format!("/containers/{}/exec", session.session_id),
            &json!({
                "AttachStdout": true,
                "AttachStderr": true,
                "Cmd": ["/bin/bash", "-c", wrapped],
            }),
        )?;
        if create.status == 404 {
            return Err(SandboxError::DeadSession { session_id: session.session_id.clone() });
        }
        if create.status != 201 {
            return Err(runtime_err(format!(
                "exec create failed ({}): {}",
                create.status,
                String::from_utf8_lossy(&create.body)
            )));
        }
        let created: Value = serde_json::from_slice(&create.body)
            .map_err(|err| runtime_err(format!("bad exec create response: {err}")))?;
        let exec_id = created
            .get("Id")
            .and_then(Value::as_str)
            .ok_or_else(|| runtime_err("exec create response missing Id"))?
            .to_string();
        let started = Instant::now();
        let run = self.request_json(
            "POST",
            &format!("/exec/{exec_id}/start"),
            &json!({ "Detach": false, "Tty": false }),
        )?;
        if run.status != 200 {
            return Err(runtime_err(format!(
                "exec start failed ({}): {}",
                run.status,
                String::from_utf8_lossy(&run.body)
            )));
        }
        let duration_secs = started.elapsed().as_secs_f64();
        let (stdout, stderr, capped) = Self::demux(&run.body);
        let inspect = self.request("GET", &format!("/exec/{exec_id}/json"), None, &[])?;
        let info: Value = serde_json::from_slice(&inspect.body)
            .map_err(|err| runtime_err(format!("bad exec inspect response: {err}")))?;
        let raw_exit = info.get("ExitCode").and_then(Value::as_i64).unwrap_or(-1) as i32;
        let timed_out = raw_exit == 124;
        Ok(ExecResult {
            stdout,
            stderr,
            exit_code: if timed_out { TIMEOUT_EXIT_CODE } else { raw_exit },
            duration_secs,
            truncated: capped || timed_out,
        })
    }

    fn copy_in(&self, session: &Session, files: &[FileToCopy]) -> Result<(), SandboxError> {
        let mut tarball = Vec::new();
        {
            let mut builder = tar::Builder::new(&mut tarball);
            for file in files {
                crate::envgen::validate_rel_path(&file.path)
                    .map_err(|detail| SandboxError::Runtime { runtime: "docker", detail })?;
                let mut header = tar::Header::new_gnu();
                header.set_size(file.content.len() as u64);
                header.set_mode(if file.executable { 0o755 } else { 0o644 });
                header.set_cksum();
                builder
                    .append_data(&mut header, &file.path, file.content.as_slice())
                    .map_err(|err| runtime_err(format!("tar append failed: {err}")))?;
            }
            builder.finish().map_err(|err| runtime_err(format!("tar finish failed: {err}")))?;
        }
        let path = format!(
            "/containers/{}/archive?path={}",
            session.session_id,
            percent_encode("/workspace")
        );
        let response = self.request("PUT", &path, Some("application/x-tar"), &tarball)?;
        match response.status {
            200 => Ok(()),
            404 => Err(SandboxError::DeadSession { session_id: session.session_id.clone() }),
            other => Err(runtime_err(format!(
                "archive upload failed ({other}): {}",
                String::from_utf8_lossy(&response.body)
            ))),
        }
    }

    fn remove_session(&self, session: &Session) -> Result<(), SandboxError> {
        let path = format!("/containers/{}?force=true&v=true", session.session_id);
        let response = self.request("DELETE", &path, None, &[])?;
        match response.status {
            204 | 404 => Ok(()),
            other => Err(runtime_err(format!(
                "container remove failed ({other}): {}",
                String::from_utf8_lossy(&response.body)
            ))),
        }
    }

    fn list_sessions(&self, run_label: &str) -> Result<Vec<Session>, SandboxError> {
        let filters = json!({ "label": [format!("{RUN_LABEL_KEY}={run_label}")] }).to_string();
        let path = format!("/containers/json?all=true&filters={}", percent_encode(&filters));
        let response = self.request("GET", &path, None, &[])?;
        if response.status != 200 {
            return Err(runtime_err(format!(
                "container list failed ({}): {}",
                response.status,
                String::from_utf8_lossy(&response.body)
            )));
        }
        let listed: Vec<Value> = serde_json::from_slice(&response.body)
            .map_err(|err| runtime_err(format!("bad list response: {err}")))?;
        let mut sessions = Vec::new();
        for item in listed {
            let Some(id) = item.get("Id").and_then(Value::as_str) else { continue };
            sessions.push(Session {
                session_id: id.to_string(),
                image_ref: item
                    .get("Image")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string(),
                run_label: run_label.to_string(),
                alive: item
                    .get("State")
                    .and_then(Value::as_str)
                    .map(|state| state == "running")
                    .unwrap_or(true),
            });
        }
        Ok(sessions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::unix::net::UnixListener;
    use std::sync::{Arc, Mutex};

    /// One-shot scripted daemon: serves the given responses in order,
    /// one connection each, capturing raw requests.
    struct FakeDaemon {
        socket: PathBuf,
        requests: Arc<Mutex<Vec<Vec<u8>>>>,
        handle: Option<std::thread::JoinHandle<()>>,
        _dir: tempfile::TempDir,
    }

    impl FakeDaemon {
        fn spawn(responses: Vec<Vec<u8>>) -> Self {
            let dir = tempfile::tempdir().unwrap();
            let socket = dir.path().join("docker.sock");
            let listener = UnixListener::bind(&socket).unwrap();
            let requests: Arc<Mutex<Vec<Vec<u8>>>> = Arc::default();
            let captured = requests.clone();
            let handle = std::thread::spawn(move || {
                for response in responses {
                    let Ok((mut stream, _)) = listener.accept() else { return };
                    captured.lock().unwrap().push(read_request(&mut stream));
                    let _ = stream.write_all(&response);
                }
            });
            FakeDaemon { socket, requests, handle: Some(handle), _dir: dir }
        }

        fn runtime(&self) -> DockerRuntime {
            DockerRuntime::with_socket(&self.socket)
        }

        fn finish(mut self) -> Vec<Vec<u8>> {
            self.handle.take().unwrap().join().unwrap();
            Arc::try_unwrap(self.requests).unwrap().into_inner().unwrap()
        }
    }

    fn read_request(stream: &mut UnixStream) -> Vec<u8> {
        let mut buf = Vec::new();
        let mut tmp = [0u8; 4096];
        let header_end = loop {
            if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                break pos;
            }
            let n = stream.read(&mut tmp).unwrap();
            assert!(n > 0, "connection closed before headers finished");
            buf.extend_from_slice(&tmp[..n]);
        };
        let headers = String::from_utf8_lossy(&buf[..header_end]).to_ascii_lowercase();
        let content_length: usize = headers
            .lines()
            .find_map(|line| line.strip_prefix("content-length:"))
            .map(|v| v.trim().parse().unwrap())
            .unwrap_or(0);
        let total = header_end + 4 + content_length;
        while buf.len() < total {
            let n = stream.read(&mut tmp).unwrap();
            assert!(n > 0, "connection closed before body finished");
            buf.extend_from_slice(&tmp[..n]);
        }
        buf
    }

    fn response(status: &str, body: &[u8]) -> Vec<u8> {
        let mut bytes = format!(
            "HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            body.len()
        )
        .into_bytes();
        bytes.extend_from_slice(body);
        bytes
    }

    fn frame(kind: u8, payload: &[u8]) -> Vec<u8> {
        let mut bytes = vec![kind, 0, 0, 0];
        bytes.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        bytes.extend_from_slice(payload);
        bytes
    }

    fn session() -> Session {
        Session {
            session_id: "cid123".into(),
            image_ref: "run/t:latest".into(),
            run_label: "run".into(),
            alive: true,
        }
    }

    #[test]
    fn exec_demuxes_streams_and_wraps_with_timeout() {
        let mut attach = frame(1, b"hello\n");
        attach.extend(frame(2, b"oops\n"));
        attach.extend(frame(1, b"more\n"));
        let daemon = FakeDaemon::spawn(vec![
            response("201 Created", br#"{"Id":"exec1"}"#),
            response("200 OK", &attach),
            response("200 OK", br#"{"ExitCode":3}"#),
        ]);
        let runtime = daemon.runtime();
        let result = runtime
            .exec(&session(), "echo 'hello'", Duration::from_secs(45))
            .unwrap();
        assert_eq!(result.stdout, "hello\nmore\n");
        assert_eq!(result.stderr, "oops\n");
        assert_eq!(result.exit_code, 3);
        assert!(!result.truncated);
        let requests = daemon.finish();
        let create = String::from_utf8_lossy(&requests[0]);
        assert!(create.contains("POST /containers/cid123/exec"));
        let body: serde_json::Value =
            serde_json::from_str(create.split("\r\n\r\n").nth(1).unwrap()).unwrap();
        assert_eq!(
            body["Cmd"][2].as_str().unwrap(),
            "timeout -k 5 45s bash -c 'echo '\\''hello'\\'''"
        );
        assert!(String::from_utf8_lossy(&requests[2]).contains("GET /exec/exec1/json"));
    }

    #[test]
    fn exit_124_maps_to_timeout_sentinel() {
        let daemon = FakeDaemon::spawn(vec![
            response("201 Created", br#"{"Id":"exec1"}"#),
            response("200 OK", &frame(1, b"partial")),
            response("200 OK", br#"{"ExitCode":124}"#),
        ]);
        let result = daemon
            .runtime()
            .exec(&session(), "sleep 999", Duration::from_secs(1))
            .unwrap();
        assert_eq!(result.exit_code, TIMEOUT_EXIT_CODE);
        assert!(result.truncated);
        daemon.finish();
    }

    #[test]
    fn exec_on_missing_container_is_dead_session() {
        let daemon = FakeDaemon::spawn(vec![response("404 Not Found", b"{}")]);
        let err = daemon
            .runtime()
            .exec(&session(), "true", Duration::from_secs(1))
            .unwrap_err();
        assert!(matches!(err, SandboxError::DeadSession { .. }));
        daemon.finish();
    }

    #[test]
    fn build_success_streams_to_image_ref() {
        let body = concat!(
            "{\"stream\":\"Step 1/2 : FROM ubuntu\\n\"}\n",
            "{\"stream\":\"Successfully built abc\\n\"}\n",
        );
        let daemon = FakeDaemon::spawn(vec![response("200 OK", body.as_bytes())]);
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("Dockerfile"), "FROM ubuntu\n").unwrap();
        let outcome = daemon.runtime().build(dir.path(), "run/t:latest").unwrap();
        assert_eq!(outcome, BuildOutcome::Success { image_ref: "run/t:latest".into() });
        let requests = daemon.finish();
        let head = String::from_utf8_lossy(&requests[0]);
        assert!(head.contains("POST /build?t=run%2Ft%3Alatest"), "{head}");
    }

    #[test]
    fn build_error_detail_becomes_failure_stderr() {
        let body = concat!(
            "{\"stream\":\"Step 3/4 : RUN make\\n\"}\n",
            "{\"errorDetail\":{\"message\":\"make: *** no rule\"},\"error\":\"make: *** no rule\"}\n",
        );
        let daemon = FakeDaemon::spawn(vec![response("200 OK", body.as_bytes())]);
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("Dockerfile"), "FROM ubuntu\n").unwrap();
        match daemon.runtime().build(dir.path(), "run/t:latest").unwrap() {
            BuildOutcome::Failure { stderr } => {
                assert!(stderr.contains("Step 3/4"), "{stderr}");
                assert!(stderr.contains("no rule"), "{stderr}");
            }
            other => panic!("expected failure, got {other:?}"),
        }
        daemon.finish();
    }

    #[test]
    fn create_session_sets_labels_and_limits() {
        let daemon = FakeDaemon::spawn(vec![
            response("201 Created", br#"{"Id":"cid9"}"#),
            response("204 No Content", b""),
        ]);
        let created = daemon.runtime().create_session("run/t:latest", "run7").unwrap();
        assert_eq!(created.session_id, "cid9");
        assert!(created.alive);
        let requests = daemon.finish();
        let create = String::from_utf8_lossy(&requests[0]);
        assert!(create.contains(r#""shellforge.run":"run7""#), "{create}");
        assert!(create.contains(r#""NanoCpus":2000000000"#), "{create}");
        assert!(create.contains(r#""Memory":4294967296"#), "{create}");
        assert!(create.contains(r#""sleep","infinity""#), "{create}");
        assert!(String::from_utf8_lossy(&requests[1]).contains("POST /containers/cid9/start"));
    }

    #[test]
    fn missing_image_is_distinguished_on_create() {
        let daemon = FakeDaemon::spawn(vec![response("404 Not Found", b"no such image")]);
        let err = daemon.runtime().create_session("run/t:latest", "run").unwrap_err();
        assert!(matches!(err, SandboxError::UnknownImage { .. }));
        daemon.finish();
    }

    #[test]
    fn list_sessions_filters_by_label() {
        let body = br#"[{"Id":"c1","Image":"run/t:latest","State":"running"},{"Id":"c2","Image":"run/u:latest","State":"exited"}]"#;
        let daemon = FakeDaemon::spawn(vec![response("200 OK", body)]);
        let sessions = daemon.runtime().list_sessions("run7").unwrap();
        assert_eq!(sessions.len(), 2);
        assert_eq!(sessions[0].session_id, "c1");
        assert!(sessions[0].alive);
        assert!(!sessions[1].alive);
        let requests = daemon.finish();
        let head = String::from_utf8_lossy(&requests[0]);
        assert!(head.contains("GET /containers/json?all=true&filters="), "{head}");
        assert!(head.contains(percent_encode(r#"{"label":["shellforge.run=run7"]}"#).as_str()), "{head}");
    }

    #[test]
    fn remove_tolerates_already_gone() {
        let daemon = FakeDaemon::spawn(vec![response("404 Not Found", b"")]);
        daemon.runtime().remove_session(&session()).unwrap();
        let requests = daemon.finish();
        assert!(String::from_utf8_lossy(&requests[0])
            .contains("DELETE /containers/cid123?force=true&v=true"));
    }

    #[test]
    fn copy_in_uploads_a_tarball() {
        let daemon = FakeDaemon::spawn(vec![response("200 OK", b"")]);
        daemon
            .runtime()
            .copy_in(
                &session(),
                &[FileToCopy {
                    path: "tests/test_case.py".into(),
                    content: b"def test_ok():\n    assert True\n".to_vec(),
                    executable: false,
                }],
            )
            .unwrap();
        let requests = daemon.finish();
        let raw = &requests[0];
        let head = String::from_utf8_lossy(raw);
        assert!(head.contains("PUT /containers/cid123/archive?path=%2Fworkspace"), "{head}");
        let body_start = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap() + 4;
        let mut archive = tar::Archive::new(&raw[body_start..]);
        let names: Vec<String> = archive
            .entries()
            .unwrap()
            .map(|e| e.unwrap().path().unwrap().display().to_string())
            .collect();
        assert_eq!(names, vec!["tests/test_case.py"]);
    }

    #[test]
    fn chunked_responses_are_decoded() {
        let body = b"7\r\n[{\"Id\":\r\n6\r\n\"c1\"}]\r\n0\r\n\r\n";
        let mut bytes =
            b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\nConnection: close\r\n\r\n".to_vec();
        bytes.extend_from_slice(body);
        let daemon = FakeDaemon::spawn(vec![bytes]);
        let sessions = daemon.runtime().list_sessions("run").unwrap();
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].session_id, "c1");
        daemon.finish();
    }

    #[test]
    fn quoting_survives_hostile_commands() {
        assert_eq!(sh_quote("plain"), "'plain'");
        assert_eq!(sh_quote("a'b"), "'a'\\''b'");
        assert_eq!(percent_encode("a b/c"), "a%20b%2Fc");
    }
}
