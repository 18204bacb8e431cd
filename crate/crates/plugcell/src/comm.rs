//! The rootfs-file communication channel between the host core and the
//! in-sandbox runner.
//!
//! Layout under the comm directory (`/comm` from inside the sandbox):
//!
//! * `plugins-to-run` — manifest, written by the host.
//! * `control`        — one-line commands (`run-once`, `stop`), host-written.
//! * `output.ndjson`  — collection records, runner-written.
//! * `status.ndjson`  — runner lifecycle events (fetch completion, cycle
//!                      counts), runner-written.
//! * `runner.log`     — runner stdout/stderr.
//!
//! The host is the only writer of control files; the sandbox side is the
//! only writer of output files. Both ends append whole lines with
//! `O_APPEND`, so readers never observe torn records.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "plugins-to-run";
pub const CONTROL_FILE: &str = "control";
pub const OUTPUT_FILE: &str = "output.ndjson";
pub const STATUS_FILE: &str = "status.ndjson";
pub const LOG_FILE: &str = "runner.log";

/// Mount point of the comm directory inside the sandbox.
pub const COMM_MOUNT: &str = "/comm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlVerb {
    RunOnce,
    Stop,
}

impl ControlVerb {
    pub fn as_line(self) -> &'static str {
        match self {
            ControlVerb::RunOnce => "run-once",
            ControlVerb::Stop => "stop",
        }
    }

    pub fn parse(line: &str) -> Option<Self> {
        match line.trim() {
            "run-once" => Some(ControlVerb::RunOnce),
            "stop" => Some(ControlVerb::Stop),
            _ => None,
        }
    }
}

/// Runner → host lifecycle events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum StatusEvent {
    Started { pid: i32, proxy_tid: Option<i32> },
    FetchComplete { staged: Vec<StagedDigest> },
    FetchFailed { plugin: String, cause: String },
    CycleComplete { cycle: u64, records: u64 },
    Stopped { cycles: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedDigest {
    pub name: String,
    pub sha256: String,
}

fn append_line(path: &Path, line: &str) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Host-side view of one sandbox's comm directory.
#[derive(Debug, Clone)]
pub struct CommChannel {
    dir: PathBuf,
}

impl CommChannel {
    /// Create the directory tree and empty channel files. `sandbox_uid`
    /// gets ownership so the de-privileged runner can append output.
    pub fn create(dir: &Path, sandbox_uid: u32) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        for name in [OUTPUT_FILE, STATUS_FILE, LOG_FILE] {
            let path = dir.join(name);
            File::create(&path)?;
            chown(&path, sandbox_uid)?;
        }
        for name in [MANIFEST_FILE, CONTROL_FILE] {
            File::create(dir.join(name))?;
        }
        chown(dir, sandbox_uid)?;
        Ok(CommChannel { dir: dir.to_path_buf() })
    }

    pub fn open(dir: &Path) -> Self {
        CommChannel { dir: dir.to_path_buf() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_manifest(&self, manifest_ndjson: &str) -> io::Result<()> {
        fs::write(self.dir.join(MANIFEST_FILE), manifest_ndjson)
    }

    pub fn send_control(&self, verb: ControlVerb) -> io::Result<()> {
        append_line(&self.dir.join(CONTROL_FILE), verb.as_line())
    }

    pub fn output_path(&self) -> PathBuf {
        self.dir.join(OUTPUT_FILE)
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    /// Read output lines appended since `offset`, returning the new offset.
    pub fn read_output_since(&self, offset: u64) -> io::Result<(Vec<Vec<u8>>, u64)> {
        read_lines_since(&self.dir.join(OUTPUT_FILE), offset)
    }

    /// Status events appended since `offset`.
    pub fn read_status_since(&self, offset: u64) -> io::Result<(Vec<StatusEvent>, u64)> {
        let (lines, next) = read_lines_since(&self.dir.join(STATUS_FILE), offset)?;
        let events = lines
            .iter()
            .filter_map(|l| serde_json::from_slice(l).ok())
            .collect();
        Ok((events, next))
    }
}

/// Sandbox-side view, rooted at the in-sandbox mount point.
#[derive(Debug)]
pub struct RunnerComm {
    dir: PathBuf,
    control_offset: u64,
}

impl RunnerComm {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        RunnerComm {
            dir: dir.into(),
            control_offset: 0,
        }
    }

    pub fn read_manifest(&self) -> io::Result<Vec<u8>> {
        fs::read(self.dir.join(MANIFEST_FILE))
    }

    /// Control verbs issued since the last poll.
    pub fn poll_control(&mut self) -> io::Result<Vec<ControlVerb>> {
        let (lines, next) = read_lines_since(&self.dir.join(CONTROL_FILE), self.control_offset)?;
        self.control_offset = next;
        Ok(lines
            .iter()
            .filter_map(|l| ControlVerb::parse(&String::from_utf8_lossy(l)))
            .collect())
    }

    pub fn append_output(&self, line: &str) -> io::Result<()> {
        append_line(&self.dir.join(OUTPUT_FILE), line)
    }

    pub fn post_status(&self, event: &StatusEvent) -> io::Result<()> {
        let line = serde_json::to_string(event).map_err(io::Error::other)?;
        append_line(&self.dir.join(STATUS_FILE), &line)
    }
}

fn read_lines_since(path: &Path, offset: u64) -> io::Result<(Vec<Vec<u8>>, u64)> {
    let mut f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), offset)),
        Err(e) => return Err(e),
    };
    let len = f.metadata()?.len();
    if len <= offset {
        return Ok((Vec::new(), offset));
    }
    f.seek(SeekFrom::Start(offset))?;
    let mut buf = Vec::with_capacity((len - offset) as usize);
    f.read_to_end(&mut buf)?;
    let mut lines = Vec::new();
    let mut consumed = 0usize;
    let mut start = 0usize;
    for (i, b) in buf.iter().enumerate() {
        if *b == b'\n' {
            lines.push(buf[start..i].to_vec());
            start = i + 1;
            consumed = start;
        }
    }
    // A trailing partial line stays unread until its newline arrives.
    Ok((lines, offset + consumed as u64))
}

fn chown(path: &Path, uid: u32) -> io::Result<()> {
    use std::os::unix::ffi::OsStrExt;
    let c = std::ffi::CString::new(path.as_os_str().as_bytes())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "path contains NUL"))?;
    let rc = unsafe { libc::chown(c.as_ptr(), uid, uid) };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_and_output_flow_between_both_ends() {
        let tmp = tempfile::tempdir().unwrap();
        let host = CommChannel::create(tmp.path(), unsafe { libc::getuid() }).unwrap();
        let mut runner = RunnerComm::open(tmp.path());

        host.write_manifest("{\"name\":\"a\",\"source\":\"store:a\",\"freq_s\":1}\n").unwrap();
        assert!(!runner.read_manifest().unwrap().is_empty());

        host.send_control(ControlVerb::RunOnce).unwrap();
        host.send_control(ControlVerb::Stop).unwrap();
        assert_eq!(
            runner.poll_control().unwrap(),
            vec![ControlVerb::RunOnce, ControlVerb::Stop]
        );
        assert!(runner.poll_control().unwrap().is_empty());

        runner.append_output("line-1").unwrap();
        runner.append_output("line-2").unwrap();
        let (lines, next) = host.read_output_since(0).unwrap();
        assert_eq!(lines, vec![b"line-1".to_vec(), b"line-2".to_vec()]);
        let (rest, _) = host.read_output_since(next).unwrap();
        assert!(rest.is_empty());
    }

    #[test]
    fn status_events_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let host = CommChannel::create(tmp.path(), unsafe { libc::getuid() }).unwrap();
        let runner = RunnerComm::open(tmp.path());
        runner
            .post_status(&StatusEvent::FetchComplete {
                staged: vec![StagedDigest {
                    name: "a".into(),
                    sha256: "00".into(),
                }],
            })
            .unwrap();
        let (events, _) = host.read_status_since(0).unwrap();
        assert_eq!(events.len(), 1);
        assert!(matches!(events[0], StatusEvent::FetchComplete { .. }));
    }

    #[test]
    fn partial_lines_are_not_surfaced() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join(OUTPUT_FILE);
        fs::write(&path, b"complete\npart").unwrap();
        let host = CommChannel::open(tmp.path());
        let (lines, next) = host.read_output_since(0).unwrap();
        assert_eq!(lines, vec![b"complete".to_vec()]);
        assert_eq!(next, 9);
    }
}
