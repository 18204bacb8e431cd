//! The GET-only loopback forward proxy.
//!
//! Runs as a runner thread on a listener socket that was bound before the
//! privilege drop (the seccomp bind denial does not apply to an inherited
//! socket). The firewall permits sandbox traffic to the proxy port only;
//! the proxy's own onward connections come from a thread the builder moved
//! into a classid-exempt net_cls child group, so they pass the firewall
//! while remaining confined by everything else.
//!
//! Only `GET` with an absolute `http://` URI targeting a loopback address
//! is forwarded; everything else is rejected. This is the whole point:
//! plugins may read local service status pages, nothing more.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Ipv4Addr, TcpListener, TcpStream};
use std::os::fd::{FromRawFd, RawFd};
use std::time::Duration;

/// Wait (bounded) until the builder has moved this thread into the
/// classid-exempt cgroup, observable in our own task's net_cls path.
fn wait_for_exemption(timeout: Duration) -> bool {
    let tid = unsafe { libc::syscall(libc::SYS_gettid) } as i32;
    let path = format!("/proc/self/task/{tid}/cgroup");
    let deadline = std::time::Instant::now() + timeout;
    while std::time::Instant::now() < deadline {
        if let Ok(content) = std::fs::read_to_string(&path) {
            for line in content.lines() {
                if line.contains("net_cls") && line.trim_end().ends_with("/proxy") {
                    return true;
                }
            }
        }
        std::thread::sleep(Duration::from_millis(25));
    }
    false
}

fn reject(stream: &mut TcpStream, status: &str) {
    let _ = stream.write_all(format!("HTTP/1.1 {status}\r\nConnection: close\r\n\r\n").as_bytes());
}

fn is_loopback_target(host: &str) -> bool {
    let ip = host.rsplit_once(':').map(|(h, _)| h).unwrap_or(host);
    ip.parse::<Ipv4Addr>().map(|i| i.is_loopback()).unwrap_or(ip == "localhost")
}

fn handle(mut client: TcpStream) {
    client.set_read_timeout(Some(Duration::from_secs(5))).ok();
    let mut reader = BufReader::new(match client.try_clone() {
        Ok(c) => c,
        Err(_) => return,
    });
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).is_err() {
        return;
    }
    let mut parts = request_line.split_whitespace();
    let (method, uri) = match (parts.next(), parts.next()) {
        (Some(m), Some(u)) => (m, u),
        _ => return reject(&mut client, "400 Bad Request"),
    };
    if method != "GET" {
        return reject(&mut client, "405 Method Not Allowed");
    }
    let Some(rest) = uri.strip_prefix("http://") else {
        return reject(&mut client, "400 Bad Request");
    };
    let (host, path) = match rest.split_once('/') {
        Some((h, p)) => (h.to_string(), format!("/{p}")),
        None => (rest.to_string(), "/".to_string()),
    };
    if !is_loopback_target(&host) {
        return reject(&mut client, "403 Forbidden");
    }
    let host_port = if host.contains(':') { host.clone() } else { format!("{host}:80") };

    // Drain request headers; bodies are not forwarded for GET.
    let mut line = String::new();
    while reader.read_line(&mut line).is_ok() {
        if line == "\r\n" || line == "\n" || line.is_empty() {
            break;
        }
        line.clear();
    }

    let addr = match host_port.parse() {
        Ok(a) => a,
        Err(_) => return reject(&mut client, "400 Bad Request"),
    };
    let mut upstream = match TcpStream::connect_timeout(&addr, Duration::from_secs(3)) {
        Ok(s) => s,
        Err(_) => return reject(&mut client, "502 Bad Gateway"),
    };
    upstream.set_read_timeout(Some(Duration::from_secs(5))).ok();
    let request = format!("GET {path} HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\n\r\n");
    if upstream.write_all(request.as_bytes()).is_err() {
        return reject(&mut client, "502 Bad Gateway");
    }
    let mut buf = [0u8; 8192];
    loop {
        match upstream.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if client.write_all(&buf[..n]).is_err() {
                    break;
                }
            }
        }
    }
}

/// Serve the proxy on an inherited listener fd. Never returns under normal
/// operation; the runner puts it on a dedicated thread.
pub fn serve_from_fd(fd: RawFd) {
    wait_for_exemption(Duration::from_secs(10));
    let listener = unsafe { TcpListener::from_raw_fd(fd) };
    for conn in listener.incoming() {
        match conn {
            Ok(client) => {
                std::thread::spawn(move || handle(client));
            }
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proxy_forwards_get_and_rejects_post() {
        // Upstream "service": one static response.
        let upstream = TcpListener::bind("127.0.0.1:0").unwrap();
        let upstream_port = upstream.local_addr().unwrap().port();
        std::thread::spawn(move || {
            for conn in upstream.incoming().flatten() {
                let mut c = conn;
                let mut buf = [0u8; 1024];
                let _ = c.read(&mut buf);
                let _ = c.write_all(b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok");
            }
        });

        let proxy_listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let proxy_port = proxy_listener.local_addr().unwrap().port();
        std::thread::spawn(move || {
            // Outside a sandbox there is no exemption to wait for; serve
            // directly to keep the unit test fast.
            for conn in proxy_listener.incoming().flatten() {
                handle(conn);
            }
        });

        let get = |req: String| -> String {
            let mut s = TcpStream::connect(("127.0.0.1", proxy_port)).unwrap();
            s.write_all(req.as_bytes()).unwrap();
            let mut out = String::new();
            s.read_to_string(&mut out).unwrap();
            out
        };

        let ok = get(format!(
            "GET http://127.0.0.1:{upstream_port}/status HTTP/1.1\r\nHost: x\r\n\r\n"
        ));
        assert!(ok.contains("200 OK"), "{ok}");
        assert!(ok.ends_with("ok"), "{ok}");

        let denied = get(format!(
            "POST http://127.0.0.1:{upstream_port}/status HTTP/1.1\r\nHost: x\r\n\r\n"
        ));
        assert!(denied.contains("405"), "{denied}");

        let outside = get("GET http://10.9.9.9:80/ HTTP/1.1\r\nHost: x\r\n\r\n".to_string());
        assert!(outside.contains("403"), "{outside}");
    }
}
