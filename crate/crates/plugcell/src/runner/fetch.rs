//! Tiny HTTP/1.1 GET client for the plugin fetch window. Plugin stores in
//! this runtime speak plain HTTP on a host:port the fetch-window firewall
//! exception covers; anything fancier belongs outside the sandbox.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

/// `http://host:port/path` → (host:port, /path)
fn split_url(url: &str) -> io::Result<(String, String)> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("unsupported url {url}")))?;
    let (host, path) = match rest.split_once('/') {
        Some((h, p)) => (h.to_string(), format!("/{p}")),
        None => (rest.to_string(), "/".to_string()),
    };
    let host = if host.contains(':') { host } else { format!("{host}:80") };
    Ok((host, path))
}

pub fn http_get(url: &str, timeout: Duration) -> io::Result<Vec<u8>> {
    let (host, path) = split_url(url)?;
    let addr = host
        .parse()
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("bad address {host}")))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let request = format!("GET {path} HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\n\r\n");
    stream.write_all(request.as_bytes())?;
    let mut response = Vec::new();
    stream.read_to_end(&mut response)?;
    parse_response(&response)
}

pub fn parse_response(response: &[u8]) -> io::Result<Vec<u8>> {
    let sep = response
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "malformed http response"))?;
    let head = String::from_utf8_lossy(&response[..sep]);
    let status = head
        .split_whitespace()
        .nth(1)
        .unwrap_or("")
        .parse::<u16>()
        .unwrap_or(0);
    if status != 200 {
        return Err(io::Error::other(format!("http status {status}")));
    }
    let body = &response[sep + 4..];
    if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        return Ok(dechunk(body));
    }
    Ok(body.to_vec())
}

fn dechunk(mut body: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let Some(eol) = body.windows(2).position(|w| w == b"\r\n") else { break };
        let size = usize::from_str_radix(String::from_utf8_lossy(&body[..eol]).trim(), 16).unwrap_or(0);
        if size == 0 {
            break;
        }
        let start = eol + 2;
        if start + size > body.len() {
            break;
        }
        out.extend_from_slice(&body[start..start + size]);
        body = &body[start + size..];
        if body.starts_with(b"\r\n") {
            body = &body[2..];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn urls_split_with_default_port() {
        assert_eq!(
            split_url("http://127.0.0.1:8099/plugins/a").unwrap(),
            ("127.0.0.1:8099".into(), "/plugins/a".into())
        );
        assert_eq!(split_url("http://10.0.0.1").unwrap(), ("10.0.0.1:80".into(), "/".into()));
        assert!(split_url("ftp://x").is_err());
    }

    #[test]
    fn responses_parse_status_and_body() {
        let ok = b"HTTP/1.1 200 OK\r\nContent-Length: 5\r\n\r\nhello";
        assert_eq!(parse_response(ok).unwrap(), b"hello");
        let nf = b"HTTP/1.1 404 Not Found\r\n\r\n";
        assert!(parse_response(nf).is_err());
        let chunked = b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n3\r\nabc\r\n2\r\nde\r\n0\r\n\r\n";
        assert_eq!(parse_response(chunked).unwrap(), b"abcde");
    }
}
