//! Local-process runtime: containers approximated by directories.
//!
//! Build materializes a template directory per image by applying the
//! Dockerfile's COPY instructions (RUN and package installation are not
//! executed; the backend provides files and real command execution, not OS
//! isolation). Each session gets its own copy of the template as its
//! /workspace, commands run under `bash -c` with a cleaned, pinned
//! environment, and timeouts kill the whole process group.
//!
//! Commands run as the current user and can touch absolute paths outside
//! the workspace; use the docker backend where confinement matters.

use super::{
    BuildOutcome, ContainerRuntime, ExecResult, FileToCopy, SandboxError, Session,
    STREAM_CAP_BYTES, TIMEOUT_EXIT_CODE,
};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

/// Fixed PATH for executed commands, mirroring a minimal login shell.
const EXEC_PATH: &str = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";

#[derive(Debug, Serialize, Deserialize)]
struct SessionMeta {
    run_label: String,
    image_ref: String,
}

/// Directory-backed runtime state under one root.
#[derive(Debug, Clone)]
pub struct ProcessRuntime {
    state_root: PathBuf,
}

impl ProcessRuntime {
    /// Creates the runtime, keeping image templates and session
    /// workspaces under `state_root`.
    pub fn new(state_root: impl Into<PathBuf>) -> Self {
        ProcessRuntime { state_root: state_root.into() }
    }

    fn image_dir(&self, image_tag: &str) -> PathBuf {
        let sanitized: String = image_tag
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        self.state_root.join("images").join(sanitized)
    }

    fn sessions_dir(&self) -> PathBuf {
        self.state_root.join("sessions")
    }

    fn session_dir(&self, session_id: &str) -> PathBuf {
        self.sessions_dir().join(session_id)
    }

    fn workspace(&self, session_id: &str) -> PathBuf {
        self.session_dir(session_id).join("workspace")
    }

    fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SandboxError + '_ {
        move |source| SandboxError::Io { path: path.to_path_buf(), source }
    }
}

/// The subset of Dockerfile state the process backend materializes.
struct ParsedDockerfile {
    copies: Vec<(String, String)>,
}

/// Parses FROM/COPY/WORKDIR instructions. Returns a user-facing build
/// error string (the repair loop's input) on anything malformed.
fn parse_dockerfile(text: &str) -> Result<ParsedDockerfile, String> {
    // Join continuation lines first.
    let mut logical: Vec<String> = Vec::new();
    let mut pending = String::new();
    for line in text.lines() {
        let trimmed = line.trim_end();
        if let Some(stripped) = trimmed.strip_suffix('\\') {
            pending.push_str(stripped);
            pending.push(' ');
        } else {
            pending.push_str(trimmed);
            logical.push(std::mem::take(&mut pending));
        }
    }
    if !pending.is_empty() {
        logical.push(pending);
    }
    let mut saw_from = false;
    let mut workdir = "/".to_string();
    let mut copies = Vec::new();
    for line in &logical {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let instruction = parts.next().expect("non-empty line").to_ascii_uppercase();
        let args: Vec<&str> = parts.collect();
        if !saw_from && instruction != "FROM" && instruction != "ARG" {
            return Err(format!(
                "Dockerfile parse error: instruction {instruction} before FROM"
            ));
        }
        match instruction.as_str() {
            "FROM" => {
                if args.is_empty() {
                    return Err("Dockerfile parse error: FROM needs an image".into());
                }
                saw_from = true;
            }
            "WORKDIR" => {
                if let Some(dir) = args.first() {
                    workdir = dir.to_string();
                }
            }
            "COPY" | "ADD" => {
                let args: Vec<&str> = args.into_iter().filter(|a| !a.starts_with("--")).collect();
                if args.len() < 2 {
                    return Err(format!("Dockerfile parse error: {instruction} needs source and destination"));
                }
                if args.iter().any(|a| a.starts_with('[')) {
                    return Err(format!(
                        "Dockerfile parse error: JSON-form {instruction} is not supported by this backend"
                    ));
                }
                let dst = args[args.len() - 1];
                let dst = if dst.starts_with('/') {
                    dst.to_string()
                } else {
                    format!("{}/{}", workdir.trim_end_matches('/'), dst.trim_start_matches("./"))
                };
                for src in &args[..args.len() - 1] {
                    copies.push((src.to_string(), dst.clone()));
                }
            }
            // Image-side effects the process backend cannot reproduce are
            // skipped: the template holds files only.
            "RUN" | "ENV" | "ARG" | "CMD" | "ENTRYPOINT" | "LABEL" | "EXPOSE" | "USER"
            | "VOLUME" | "SHELL" | "HEALTHCHECK" | "STOPSIGNAL" | "ONBUILD" => {}
            other => {
                return Err(format!("Dockerfile parse error: unknown instruction {other}"));
            }
        }
    }
    if !saw_from {
        return Err("Dockerfile parse error: no FROM instruction".into());
    }
    Ok(ParsedDockerfile { copies })
}

/// Maps a container destination path to a path under the template root.
/// Only /workspace (the session working directory) is materializable.
fn template_destination(template: &Path, dst: &str) -> Result<PathBuf, String> {
    let normalized = dst.trim_end_matches('/');
    if normalized == "/workspace" || normalized.is_empty() && dst == "/" {
        return Ok(template.to_path_buf());
    }
    if let Some(rest) = normalized.strip_prefix("/workspace/") {
        return Ok(template.join(rest));
    }
    Err(format!(
        "COPY destination {dst} is outside /workspace, which this backend cannot materialize"
    ))
}

fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    if src.is_dir() {
        fs::create_dir_all(dst)?;
        for entry in fs::read_dir(src)? {
            let entry = entry?;
            copy_tree(&entry.path(), &dst.join(entry.file_name()))?;
        }
        Ok(())
    } else {
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(src, dst).map(|_| ())
    }
}

/// Reads a child stream to EOF, keeping at most the cap and reporting
/// whether anything beyond it was discarded.
fn capped_reader<R: Read + Send + 'static>(
    stream: R,
) -> std::thread::JoinHandle<(Vec<u8>, bool)> {
    std::thread::spawn(move || {
        let mut stream = stream;
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        let mut truncated = false;
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = STREAM_CAP_BYTES.saturating_sub(kept.len());
                    if room >= n {
                        kept.extend_from_slice(&buf[..n]);
                    } else {
                        kept.extend_from_slice(&buf[..room]);
                        truncated = true;
                    }
                }
            }
        }
        (kept, truncated)
    })
}

impl ContainerRuntime for ProcessRuntime {
    fn name(&self) -> &'static str {
        "process"
    }

    fn build(&self, context_dir: &Path, image_tag: &str) -> Result<BuildOutcome, SandboxError> {
        let dockerfile_path = context_dir.join("Dockerfile");
        let text = match fs::read_to_string(&dockerfile_path) {
            Ok(text) => text,
            Err(_) => {
                return Ok(BuildOutcome::Failure {
                    stderr: "failed to read Dockerfile in build context".into(),
                })
            }
        };
        let parsed = match parse_dockerfile(&text) {
            Ok(parsed) => parsed,
            Err(stderr) => return Ok(BuildOutcome::Failure { stderr }),
        };
        let template = self.image_dir(image_tag);
        if template.exists() {
            fs::remove_dir_all(&template).map_err(Self::io_err(&template))?;
        }
        fs::create_dir_all(&template).map_err(Self::io_err(&template))?;
        for (src, dst) in &parsed.copies {
            let dst_path = match template_destination(&template, dst) {
                Ok(path) => path,
                Err(stderr) => return Ok(BuildOutcome::Failure { stderr }),
            };
            let src_path = if src == "." { context_dir.to_path_buf() } else { context_dir.join(src) };
            if !src_path.exists() {
                return Ok(BuildOutcome::Failure {
                    stderr: format!("COPY failed: stat {src}: file does not exist"),
                });
            }
            let target = if src_path.is_file() && (dst.ends_with('/') || dst_path.is_dir()) {
                dst_path.join(src_path.file_name().expect("file has a name"))
            } else {
                dst_path
            };
            copy_tree(&src_path, &target).map_err(Self::io_err(&target))?;
        }
        Ok(BuildOutcome::Success { image_ref: image_tag.to_string() })
    }

    fn create_session(&self, image_ref: &str, run_label: &str) -> Result<Session, SandboxError> {
        let template = self.image_dir(image_ref);
        if !template.is_dir() {
            return Err(SandboxError::UnknownImage { image_ref: image_ref.to_string() });
        }
        let session_id = uuid::Uuid::new_v4().to_string();
        let workspace = self.workspace(&session_id);
        copy_tree(&template, &workspace).map_err(Self::io_err(&workspace))?;
        let meta_path = self.session_dir(&session_id).join("meta.json");
        let meta = SessionMeta { run_label: run_label.to_string(), image_ref: image_ref.to_string() };
        fs::write(&meta_path, serde_json::to_vec(&meta).expect("meta serializes"))
            .map_err(Self::io_err(&meta_path))?;
        Ok(Session {
            session_id,
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
        let workspace = self.workspace(&session.session_id);
        if !workspace.is_dir() {
            return Err(SandboxError::DeadSession { session_id: session.session_id.clone() });
        }
        let mut cmd = Command::new("/bin/bash");
        cmd.arg("-c")
            .arg(command)
            .current_dir(&workspace)
            .env_clear()
            .env("PATH", EXEC_PATH)
            .env("HOME", &workspace)
            .env("LC_ALL", "C")
            .env("LANG", "C")
            .env("TERM", "dumb")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        // Run the command in its own process group so a timeout can kill
        // the whole tree, pipelines and background children included.
        unsafe {
            use std::os::unix::process::CommandExt;
            cmd.pre_exec(|| {
                if libc::setpgid(0, 0) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                Ok(())
            });
        }
        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|source| SandboxError::Io {
            path: workspace.clone(),
            source,
        })?;
        let stdout = capped_reader(child.stdout.take().expect("stdout piped"));
        let stderr = capped_reader(child.stderr.take().expect("stderr piped"));
        let mut timed_out = false;
        let status = loop {
            match child.try_wait().map_err(|source| SandboxError::Io {
                path: workspace.clone(),
                source,
            })? {
                Some(status) => break Some(status),
                None if started.elapsed() >= timeout => {
                    unsafe {
                        libc::kill(-(child.id() as i32), libc::SIGKILL);
                    }
                    let _ = child.wait();
                    timed_out = true;
                    break None;
                }
                None => std::thread::sleep(Duration::from_millis(5)),
            }
        };
        let (out_bytes, out_trunc) = stdout.join().expect("stdout reader");
        let (err_bytes, err_trunc) = stderr.join().expect("stderr reader");
        let exit_code = if timed_out {
            TIMEOUT_EXIT_CODE
        } else {
            let status = status.expect("status present unless timed out");
            status.code().unwrap_or_else(|| {
                use std::os::unix::process::ExitStatusExt;
                128 + status.signal().unwrap_or(0)
            })
        };
        Ok(ExecResult {
            stdout: String::from_utf8_lossy(&out_bytes).into_owned(),
            stderr: String::from_utf8_lossy(&err_bytes).into_owned(),
            exit_code,
            duration_secs: started.elapsed().as_secs_f64(),
            truncated: timed_out || out_trunc || err_trunc,
        })
    }

    fn copy_in(&self, session: &Session, files: &[FileToCopy]) -> Result<(), SandboxError> {
        let workspace = self.workspace(&session.session_id);
        if !workspace.is_dir() {
            return Err(SandboxError::DeadSession { session_id: session.session_id.clone() });
        }
        for file in files {
            crate::envgen::validate_rel_path(&file.path)
                .map_err(|detail| SandboxError::Runtime { runtime: "process", detail })?;
            let path = workspace.join(&file.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(Self::io_err(parent))?;
            }
            fs::write(&path, &file.content).map_err(Self::io_err(&path))?;
            if file.executable {
                use std::os::unix::fs::PermissionsExt;
                fs::set_permissions(&path, fs::Permissions::from_mode(0o755))
                    .map_err(Self::io_err(&path))?;
            }
        }
        Ok(())
    }

    fn remove_session(&self, session: &Session) -> Result<(), SandboxError> {
        let dir = self.session_dir(&session.session_id);
        match fs::remove_dir_all(&dir) {
            Ok(()) => Ok(()),
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(source) => Err(SandboxError::Io { path: dir, source }),
        }
    }

    fn list_sessions(&self, run_label: &str) -> Result<Vec<Session>, SandboxError> {
        let sessions_dir = self.sessions_dir();
        let entries = match fs::read_dir(&sessions_dir) {
            Ok(entries) => entries,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => return Err(SandboxError::Io { path: sessions_dir, source }),
        };
        let mut sessions = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|source| SandboxError::Io {
                path: sessions_dir.clone(),
                source,
            })?;
            let meta_path = entry.path().join("meta.json");
            let Ok(bytes) = fs::read(&meta_path) else { continue };
            let Ok(meta) = serde_json::from_slice::<SessionMeta>(&bytes) else { continue };
            if meta.run_label == run_label {
                sessions.push(Session {
                    session_id: entry.file_name().to_string_lossy().into_owned(),
                    image_ref: meta.image_ref,
                    run_label: meta.run_label,
                    alive: true,
                });
            }
        }
        sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        Ok(sessions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::Sandbox;
    use std::sync::Arc;

    fn runtime() -> (tempfile::TempDir, ProcessRuntime) {
        let dir = tempfile::tempdir().unwrap();
        let runtime = ProcessRuntime::new(dir.path().join("state"));
        (dir, runtime)
    }

    fn write_context(dir: &Path, dockerfile: &str, files: &[(&str, &str)]) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("Dockerfile"), dockerfile).unwrap();
        for (path, content) in files {
            let full = dir.join(path);
            fs::create_dir_all(full.parent().unwrap()).unwrap();
            fs::write(full, content).unwrap();
        }
    }

    fn built_session(runtime: &ProcessRuntime, context: &Path) -> Session {
        let outcome = runtime.build(context, "run/t:latest").unwrap();
        let BuildOutcome::Success { image_ref } = outcome else {
            panic!("build failed: {outcome:?}");
        };
        runtime.create_session(&image_ref, "run").unwrap()
    }

    #[test]
    fn build_materializes_copy_instructions() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(
            &context,
            "FROM ubuntu:24.04\nWORKDIR /workspace\nCOPY data/in.txt /workspace/data/in.txt\nCOPY src /workspace/src\nRUN apt-get install -y gcc\n",
            &[("data/in.txt", "payload"), ("src/main.c", "int main(){}")],
        );
        let session = built_session(&runtime, &context);
        let ws = runtime.workspace(&session.session_id);
        assert_eq!(fs::read_to_string(ws.join("data/in.txt")).unwrap(), "payload");
        assert_eq!(fs::read_to_string(ws.join("src/main.c")).unwrap(), "int main(){}");
    }

    #[test]
    fn copy_dot_takes_whole_context() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(
            &context,
            "FROM ubuntu:24.04\nCOPY . /workspace\n",
            &[("a.txt", "A"), ("nested/b.txt", "B")],
        );
        let session = built_session(&runtime, &context);
        let ws = runtime.workspace(&session.session_id);
        assert_eq!(fs::read_to_string(ws.join("a.txt")).unwrap(), "A");
        assert_eq!(fs::read_to_string(ws.join("nested/b.txt")).unwrap(), "B");
    }

    #[test]
    fn missing_copy_source_fails_the_build_as_data() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(&context, "FROM ubuntu:24.04\nCOPY missing.txt /workspace/\n", &[]);
        match runtime.build(&context, "run/t:latest").unwrap() {
            BuildOutcome::Failure { stderr } => {
                assert!(stderr.contains("missing.txt"), "{stderr}");
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn dockerfile_without_from_fails() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(&context, "RUN echo hi\n", &[]);
        match runtime.build(&context, "run/t:latest").unwrap() {
            BuildOutcome::Failure { stderr } => assert!(stderr.contains("FROM"), "{stderr}"),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn sessions_are_isolated_copies() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(&context, "FROM ubuntu:24.04\nCOPY . /workspace\n", &[("seed.txt", "s")]);
        let outcome = runtime.build(&context, "run/t:latest").unwrap();
        let BuildOutcome::Success { image_ref } = outcome else { panic!() };
        let a = runtime.create_session(&image_ref, "run").unwrap();
        let b = runtime.create_session(&image_ref, "run").unwrap();
        runtime.exec(&a, "echo touched > marker.txt", Duration::from_secs(5)).unwrap();
        let saw_a = runtime.exec(&a, "cat marker.txt", Duration::from_secs(5)).unwrap();
        assert_eq!(saw_a.exit_code, 0);
        let saw_b = runtime.exec(&b, "cat marker.txt", Duration::from_secs(5)).unwrap();
        assert_ne!(saw_b.exit_code, 0, "sessions must not share writes");
    }

    #[test]
    fn exec_reports_streams_and_exit_codes() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(&context, "FROM ubuntu:24.04\nCOPY . /workspace\n", &[]);
        let session = built_session(&runtime, &context);
        let r = runtime
            .exec(&session, "echo out && echo err 1>&2 && exit 3", Duration::from_secs(5))
            .unwrap();
        assert_eq!(r.stdout, "out\n");
        assert_eq!(r.stderr, "err\n");
        assert_eq!(r.exit_code, 3);
        assert!(!r.truncated);
        assert!(r.duration_secs >= 0.0);
    }

    #[test]
    fn exec_env_is_pinned() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(&context, "FROM ubuntu:24.04\nCOPY . /workspace\n", &[]);
        let session = built_session(&runtime, &context);
        let r = runtime.exec(&session, "echo $LC_ALL:$TERM", Duration::from_secs(5)).unwrap();
        assert_eq!(r.stdout, "C:dumb\n");
        let pwd = runtime.exec(&session, "pwd", Duration::from_secs(5)).unwrap();
        assert!(pwd.stdout.trim().ends_with("workspace"));
    }

    #[test]
    fn timeout_kills_the_process_group() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(&context, "FROM ubuntu:24.04\nCOPY . /workspace\n", &[]);
        let session = built_session(&runtime, &context);
        let started = Instant::now();
        let r = runtime
            .exec(&session, "sleep 30; echo done", Duration::from_millis(200))
            .unwrap();
        assert_eq!(r.exit_code, TIMEOUT_EXIT_CODE);
        assert!(r.truncated);
        assert!(started.elapsed() < Duration::from_secs(5), "timeout must not wait for sleep");
        assert!(!r.stdout.contains("done"));
    }

    #[test]
    fn streams_are_capped_at_64kib() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(&context, "FROM ubuntu:24.04\nCOPY . /workspace\n", &[]);
        let session = built_session(&runtime, &context);
        let r = runtime
            .exec(
                &session,
                "head -c 200000 /dev/zero | tr '\\0' 'a'",
                Duration::from_secs(10),
            )
            .unwrap();
        assert_eq!(r.stdout.len(), STREAM_CAP_BYTES);
        assert!(r.truncated);
        assert_eq!(r.exit_code, 0);
    }

    #[test]
    fn copy_in_places_files_with_exec_bits() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(&context, "FROM ubuntu:24.04\nCOPY . /workspace\n", &[]);
        let session = built_session(&runtime, &context);
        runtime
            .copy_in(
                &session,
                &[
                    FileToCopy {
                        path: "tests/check.sh".into(),
                        content: b"#!/bin/sh\necho from-script\n".to_vec(),
                        executable: true,
                    },
                    FileToCopy { path: "tests/data.txt".into(), content: b"d".to_vec(), executable: false },
                ],
            )
            .unwrap();
        let r = runtime.exec(&session, "./tests/check.sh", Duration::from_secs(5)).unwrap();
        assert_eq!(r.stdout, "from-script\n");
        let bad = runtime.copy_in(
            &session,
            &[FileToCopy { path: "../escape".into(), content: vec![], executable: false }],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn sessions_list_by_label_and_sweep() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(&context, "FROM ubuntu:24.04\nCOPY . /workspace\n", &[]);
        let outcome = runtime.build(&context, "runa/t:latest").unwrap();
        let BuildOutcome::Success { image_ref } = outcome else { panic!() };
        runtime.create_session(&image_ref, "runa").unwrap();
        runtime.create_session(&image_ref, "runa").unwrap();
        runtime.create_session(&image_ref, "runb").unwrap();
        assert_eq!(runtime.list_sessions("runa").unwrap().len(), 2);
        assert_eq!(runtime.list_sessions("runb").unwrap().len(), 1);
        let sandbox = Sandbox::new(Arc::new(runtime.clone()), "runa", Duration::from_secs(5));
        assert_eq!(sandbox.sweep().unwrap(), 2);
        assert_eq!(runtime.list_sessions("runa").unwrap().len(), 0);
        assert_eq!(runtime.list_sessions("runb").unwrap().len(), 1);
    }

    #[test]
    fn remove_session_is_idempotent() {
        let (dir, runtime) = runtime();
        let context = dir.path().join("ctx");
        write_context(&context, "FROM ubuntu:24.04\nCOPY . /workspace\n", &[]);
        let session = built_session(&runtime, &context);
        runtime.remove_session(&session).unwrap();
        runtime.remove_session(&session).unwrap();
        let err = runtime.exec(&session, "true", Duration::from_secs(5)).unwrap_err();
        assert!(matches!(err, SandboxError::DeadSession { .. }));
    }

    #[test]
    fn unknown_image_is_rejected() {
        let (_dir, runtime) = runtime();
        let err = runtime.create_session("never/built:latest", "run").unwrap_err();
        assert!(matches!(err, SandboxError::UnknownImage { .. }));
    }
}
