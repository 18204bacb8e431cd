//! Delivery of validated records to a monitoring backend, with host-side
//! rate throttling and a bounded retry queue.

use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::policy::Endpoint;
use crate::record::CollectionRecord;

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("backend endpoint {got} does not match the policy exception {expected}")]
    EndpointMismatch { got: Endpoint, expected: Endpoint },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Where records go.
pub enum Backend {
    /// NDJSON file per session under a directory.
    File { path: PathBuf },
    /// HTTP POST of NDJSON lines to `endpoint`; must equal the policy's
    /// firewall exception.
    Http { endpoint: Endpoint },
}

impl Backend {
    pub fn file(dir: &std::path::Path, session_id: &str) -> io::Result<Backend> {
        std::fs::create_dir_all(dir)?;
        Ok(Backend::File {
            path: dir.join(format!("{session_id}.ndjson")),
        })
    }

    /// Parse `file:<dir>` / `http:<host:port>` CLI syntax.
    pub fn parse(spec: &str, session_id: &str) -> Result<Backend, String> {
        if let Some(dir) = spec.strip_prefix("file:") {
            return Backend::file(std::path::Path::new(dir), session_id).map_err(|e| e.to_string());
        }
        if let Some(ep) = spec.strip_prefix("http:") {
            return Ok(Backend::Http {
                endpoint: ep.parse()?,
            });
        }
        Err(format!("unsupported backend `{spec}` (expected file:<dir> or http:<host:port>)"))
    }

    fn deliver(&self, lines: &[String]) -> Result<(), EmitError> {
        match self {
            Backend::File { path } => {
                let mut f = OpenOptions::new().create(true).append(true).open(path)?;
                for line in lines {
                    f.write_all(line.as_bytes())?;
                    f.write_all(b"\n")?;
                }
                Ok(())
            }
            Backend::Http { endpoint } => {
                let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
                let addr = std::net::SocketAddr::from((endpoint.ip, endpoint.port));
                let mut stream = TcpStream::connect_timeout(&addr, Duration::from_secs(3))
                    .map_err(|e| EmitError::BackendUnreachable(e.to_string()))?;
                stream.set_write_timeout(Some(Duration::from_secs(5)))?;
                stream.set_read_timeout(Some(Duration::from_secs(5)))?;
                let request = format!(
                    "POST /records HTTP/1.1\r\nHost: {endpoint}\r\nContent-Type: application/x-ndjson\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                stream
                    .write_all(request.as_bytes())
                    .and_then(|_| stream.write_all(body.as_bytes()))
                    .map_err(|e| EmitError::BackendUnreachable(e.to_string()))?;
                let mut response = [0u8; 64];
                let n = stream.read(&mut response).unwrap_or(0);
                let head = String::from_utf8_lossy(&response[..n]);
                if n == 0 || head.split_whitespace().nth(1).map(|s| s.starts_with('2')) != Some(true) {
                    return Err(EmitError::BackendUnreachable(format!(
                        "bad backend response: {}",
                        head.lines().next().unwrap_or("<empty>")
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Fixed-window rate limiter: at most `limit_per_s` records per wall-clock
/// second; the rest are dropped and counted. Deterministic under a fake
/// clock.
pub struct RateLimiter {
    limit_per_s: u64,
    window_start_ms: u64,
    used: u64,
}

impl RateLimiter {
    pub fn new(limit_per_s: u64) -> Self {
        RateLimiter {
            limit_per_s: limit_per_s.max(1),
            window_start_ms: 0,
            used: 0,
        }
    }

    pub fn admit(&mut self, now_ms: u64) -> bool {
        if now_ms.saturating_sub(self.window_start_ms) >= 1000 {
            self.window_start_ms = now_ms - (now_ms % 1000);
            self.used = 0;
        }
        if self.used < self.limit_per_s {
            self.used += 1;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Default, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct EmitStats {
    pub delivered: u64,
    pub throttle_drops: u64,
    pub queue_drops: u64,
    pub delivery_failures: u64,
}

/// Ordered, throttled, bounded-queue emitter for one session.
pub struct Emitter {
    backend: Backend,
    limiter: RateLimiter,
    clock: Arc<dyn Clock>,
    queue: VecDeque<String>,
    queue_cap: usize,
    backoff_until_ms: u64,
    backoff_ms: u64,
    pub stats: EmitStats,
}

impl Emitter {
    pub fn new(backend: Backend, limit_per_s: u64, clock: Arc<dyn Clock>) -> Emitter {
        Emitter {
            backend,
            limiter: RateLimiter::new(limit_per_s),
            clock,
            queue: VecDeque::new(),
            queue_cap: 10_000,
            backoff_until_ms: 0,
            backoff_ms: 200,
            stats: EmitStats::default(),
        }
    }

    /// Throttle, enqueue, and attempt delivery. Order per session is
    /// preserved; when the backend is down the bounded queue keeps the
    /// newest records (oldest dropped, counted).
    pub fn emit(&mut self, records: &[CollectionRecord]) -> EmitStats {
        let now = self.clock.now_ms();
        for rec in records {
            if !self.limiter.admit(now) {
                self.stats.throttle_drops += 1;
                continue;
            }
            if self.queue.len() >= self.queue_cap {
                self.queue.pop_front();
                self.stats.queue_drops += 1;
            }
            self.queue.push_back(rec.to_line());
        }
        self.flush();
        self.stats
    }

    pub fn flush(&mut self) {
        let now = self.clock.now_ms();
        if self.queue.is_empty() || now < self.backoff_until_ms {
            return;
        }
        let lines: Vec<String> = self.queue.iter().cloned().collect();
        match self.backend.deliver(&lines) {
            Ok(()) => {
                self.stats.delivered += lines.len() as u64;
                self.queue.clear();
                self.backoff_ms = 200;
            }
            Err(_) => {
                self.stats.delivery_failures += 1;
                self.backoff_until_ms = now + self.backoff_ms;
                self.backoff_ms = (self.backoff_ms * 2).min(5_000);
            }
        }
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

/// Guard an HTTP backend against diverging from the policy's firewall
/// exception.
pub fn check_backend_against_policy(
    backend: &Backend,
    policy_endpoint: Option<Endpoint>,
) -> Result<(), EmitError> {
    if let Backend::Http { endpoint } = backend {
        match policy_endpoint {
            Some(expected) if expected == *endpoint => Ok(()),
            Some(expected) => Err(EmitError::EndpointMismatch {
                got: *endpoint,
                expected,
            }),
            None => Err(EmitError::BackendUnreachable(
                "policy has no backend exception; http backend would be firewalled".into(),
            )),
        }
    } else {
        Ok(())
    }
}
