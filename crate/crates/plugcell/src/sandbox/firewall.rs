//! Translate policy firewall rules into an nftables table keyed on the
//! sandbox's net_cls classid, installed inside the (shared) network
//! namespace.
//!
//! Each sandbox owns one table named after its id, so teardown is a single
//! table delete and leak checks are a name-prefix scan. Base chains hook
//! input/output with policy accept: traffic that does not carry the sandbox
//! classid — i.e. all guest traffic — is never touched.

use std::io;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use crate::policy::{Destination, Direction, FirewallRule, FirewallVerdict, RuleMatch};

use super::nft::{
    self, expr_cmp_eq, expr_meta, expr_payload, expr_verdict, NftSocket, NFT_META_CGROUP,
    NFT_META_IIFNAME, NFT_META_L4PROTO, NFT_META_NFPROTO, NFT_META_OIFNAME,
    NFT_PAYLOAD_NETWORK_HEADER, NFT_PAYLOAD_TRANSPORT_HEADER, NF_ACCEPT, NF_DROP,
};

pub const TABLE_PREFIX: &str = "plugcell-";

pub fn table_name(sandbox_id: &str) -> String {
    format!("{TABLE_PREFIX}{sandbox_id}")
}

const NFPROTO_IPV4: u8 = 2;
const IPPROTO_TCP: u8 = 6;

fn ifname16(name: &str) -> Vec<u8> {
    let mut buf = vec![0u8; 16];
    let bytes = name.as_bytes();
    buf[..bytes.len().min(15)].copy_from_slice(&bytes[..bytes.len().min(15)]);
    buf
}

/// Expressions for one policy rule. Every rule begins with the classid
/// guard; nothing in the table can match untagged traffic.
fn rule_exprs(rule: &FirewallRule, classid: u32) -> Vec<Vec<u8>> {
    let mut exprs = Vec::new();
    exprs.push(expr_meta(NFT_META_CGROUP));
    exprs.push(expr_cmp_eq(&classid.to_ne_bytes()));

    if rule.matcher == RuleMatch::Loopback {
        let key = match rule.direction {
            Direction::Out => NFT_META_OIFNAME,
            Direction::In => NFT_META_IIFNAME,
        };
        exprs.push(expr_meta(key));
        exprs.push(expr_cmp_eq(&ifname16("lo")));
    }

    if let Destination::Tcp { ip, port } = rule.destination {
        exprs.push(expr_meta(NFT_META_NFPROTO));
        exprs.push(expr_cmp_eq(&[NFPROTO_IPV4]));
        exprs.push(expr_payload(NFT_PAYLOAD_NETWORK_HEADER, 16, 4));
        exprs.push(expr_cmp_eq(&ip.octets()));
        exprs.push(expr_meta(NFT_META_L4PROTO));
        exprs.push(expr_cmp_eq(&[IPPROTO_TCP]));
        exprs.push(expr_payload(NFT_PAYLOAD_TRANSPORT_HEADER, 2, 2));
        exprs.push(expr_cmp_eq(&port.to_be_bytes()));
    }
    if let Some(sport) = rule.source_tcp_port {
        exprs.push(expr_meta(NFT_META_L4PROTO));
        exprs.push(expr_cmp_eq(&[IPPROTO_TCP]));
        exprs.push(expr_payload(NFT_PAYLOAD_TRANSPORT_HEADER, 0, 2));
        exprs.push(expr_cmp_eq(&sport.to_be_bytes()));
    }

    exprs.push(expr_verdict(match rule.verdict {
        FirewallVerdict::Accept => NF_ACCEPT,
        FirewallVerdict::Drop => NF_DROP,
    }));
    exprs
}

/// The rule list actually installed: while the fetch window is open, an
/// accept-anything exception for the sandbox classid precedes the policy
/// rules so plugin sources stay reachable.
pub fn effective_rules(policy_rules: &[FirewallRule], fetch_window_open: bool) -> Vec<FirewallRule> {
    let mut rules = Vec::new();
    if fetch_window_open {
        for direction in [Direction::Out, Direction::In] {
            rules.push(FirewallRule {
                matcher: RuleMatch::SandboxClassid,
                direction,
                destination: Destination::Any,
                source_tcp_port: None,
                verdict: FirewallVerdict::Accept,
            });
        }
    }
    rules.extend_from_slice(policy_rules);
    rules
}

/// Atomically (re)install the sandbox's table in the target netns to match
/// `rules`.
pub fn sync(netns: &Path, sandbox_id: &str, classid: u32, rules: &[FirewallRule]) -> io::Result<()> {
    let name = table_name(sandbox_id);
    let rules = rules.to_vec();
    nft::with_netns(netns, move || {
        let sock = NftSocket::open()?;
        sock.delete_table(&name)?;
        let chain_rules: Vec<(&'static str, Vec<Vec<u8>>)> = rules
            .iter()
            .map(|r| {
                let chain = match r.direction {
                    Direction::In => "in",
                    Direction::Out => "out",
                };
                (chain, rule_exprs(r, classid))
            })
            .collect();
        sock.create_table(&name, &chain_rules)
    })
}

/// Remove the sandbox's table. Idempotent; reports whether anything was
/// there to remove.
pub fn remove(netns: &Path, sandbox_id: &str) -> io::Result<bool> {
    let name = table_name(sandbox_id);
    nft::with_netns(netns, move || {
        let sock = NftSocket::open()?;
        sock.delete_table(&name)
    })
}

/// All nf_tables tables in the netns (snapshots, leak checks).
pub fn list_tables(netns: &Path) -> io::Result<Vec<String>> {
    nft::with_netns(netns, move || {
        let sock = NftSocket::open()?;
        let mut tables = sock.list_tables()?;
        tables.sort();
        Ok(tables)
    })
}

/// Loopback address used by convention for "backend reachable" checks in
/// tests and the perf harness; real deployments point at a routable IP.
pub fn loopback_endpoint(port: u16) -> (Ipv4Addr, u16) {
    (Ipv4Addr::new(127, 99, 0, 1), port)
}

/// Bind the GET-only proxy listener and any allowlist ports inside the
/// target netns, returning raw fds (proxy first). Bound by the host-side
/// builder, so the sockets carry classid 0.
pub fn bind_broker_sockets(
    netns: &Path,
    proxy_port: Option<u16>,
    ports: &[u16],
) -> io::Result<Vec<std::os::fd::RawFd>> {
    let ports = ports.to_vec();
    super::nft::with_netns(netns, move || {
        use std::os::fd::IntoRawFd;
        let mut fds = Vec::new();
        if let Some(p) = proxy_port {
            fds.push(std::net::TcpListener::bind(("127.0.0.1", p))?.into_raw_fd());
        }
        for p in &ports {
            fds.push(std::net::TcpListener::bind(("0.0.0.0", *p))?.into_raw_fd());
        }
        Ok(fds)
    })
}

/// Current netns reference of a live process.
pub fn proc_netns(pid: i32) -> PathBuf {
    PathBuf::from(format!("/proc/{pid}/ns/net"))
}

/// Bring the loopback interface of the calling thread's netns up. Fresh
/// network namespaces start with lo down.
pub fn bring_loopback_up() -> io::Result<()> {
    const SIOCGIFFLAGS: libc::c_ulong = 0x8913;
    const SIOCSIFFLAGS: libc::c_ulong = 0x8914;
    let fd = unsafe { libc::socket(libc::AF_INET, libc::SOCK_DGRAM | libc::SOCK_CLOEXEC, 0) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    let mut req: libc::ifreq = unsafe { std::mem::zeroed() };
    for (i, b) in b"lo\0".iter().enumerate() {
        req.ifr_name[i] = *b as libc::c_char;
    }
    let rc = unsafe { libc::ioctl(fd, SIOCGIFFLAGS, &mut req) };
    if rc < 0 {
        let e = io::Error::last_os_error();
        unsafe { libc::close(fd) };
        return Err(e);
    }
    unsafe {
        req.ifr_ifru.ifru_flags |= (libc::IFF_UP | libc::IFF_RUNNING) as libc::c_short;
    }
    let rc = unsafe { libc::ioctl(fd, SIOCSIFFLAGS, &req) };
    unsafe { libc::close(fd) };
    if rc < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fetch_window_prepends_classid_accepts() {
        let policy_rules = vec![FirewallRule {
            matcher: RuleMatch::SandboxClassid,
            direction: Direction::Out,
            destination: Destination::Any,
            source_tcp_port: None,
            verdict: FirewallVerdict::Drop,
        }];
        let open = effective_rules(&policy_rules, true);
        assert_eq!(open.len(), 3);
        assert_eq!(open[0].verdict, FirewallVerdict::Accept);
        assert_eq!(open[2].verdict, FirewallVerdict::Drop);
        let closed = effective_rules(&policy_rules, false);
        assert_eq!(closed, policy_rules);
    }

    #[test]
    fn tcp_destination_rules_carry_protocol_guards() {
        let rule = FirewallRule {
            matcher: RuleMatch::SandboxClassid,
            direction: Direction::Out,
            destination: Destination::Tcp {
                ip: Ipv4Addr::new(10, 0, 0, 5),
                port: 4433,
            },
            source_tcp_port: None,
            verdict: FirewallVerdict::Accept,
        };
        // classid guard (2) + nfproto (2) + daddr (2) + l4proto (2) + dport (2) + verdict
        assert_eq!(rule_exprs(&rule, 0x0010_0001).len(), 11);
    }
}
