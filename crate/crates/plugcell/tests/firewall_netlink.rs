//! Functional checks of the netlink firewall backend inside a throwaway
//! network namespace: rule installation, classid-keyed drops, exception
//! ordering, and leak-free removal. Requires root.

use std::io;
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::time::Duration;

use plugcell::policy::{Destination, Direction, FirewallRule, FirewallVerdict, RuleMatch};
use plugcell::sandbox::cgroup::{ensure_host_ready, CgroupSet};
use plugcell::sandbox::firewall;

fn root() -> bool {
    unsafe { libc::geteuid() == 0 }
}

/// Park a thread in a fresh netns (lo up) and hand back its ns path plus a
/// guard keeping the ns alive.
struct NetnsGuard {
    path: PathBuf,
    stop: std::sync::mpsc::Sender<()>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl NetnsGuard {
    fn new() -> NetnsGuard {
        let (tx_ready, rx_ready) = std::sync::mpsc::channel();
        let (tx_stop, rx_stop) = std::sync::mpsc::channel::<()>();
        let thread = std::thread::spawn(move || {
            unsafe {
                assert_eq!(libc::unshare(libc::CLONE_NEWNET), 0, "unshare newnet");
            }
            firewall::bring_loopback_up().expect("lo up");
            let tid = unsafe { libc::syscall(libc::SYS_gettid) } as i32;
            tx_ready.send(tid).unwrap();
            let _ = rx_stop.recv_timeout(Duration::from_secs(300));
        });
        let tid = rx_ready.recv().unwrap();
        NetnsGuard {
            path: PathBuf::from(format!("/proc/{}/task/{tid}/ns/net", std::process::id())),
            stop: tx_stop,
            thread: Some(thread),
        }
    }
}

impl Drop for NetnsGuard {
    fn drop(&mut self) {
        let _ = self.stop.send(());
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[test]
fn classid_keyed_drop_with_exception_ordering() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    ensure_host_ready().unwrap();
    let ns = NetnsGuard::new();
    let classid: u32 = 0x0010_0042;
    let cg = CgroupSet::create("itest-fw", None, classid).unwrap();

    // Backend listener inside the netns on a dedicated loopback address.
    let backend: SocketAddr = "127.99.0.1:4433".parse().unwrap();
    let ns_path = ns.path.clone();
    plugcell::sandbox::nft::with_netns(&ns_path, move || {
        let l = TcpListener::bind(backend)?;
        std::mem::forget(l); // lives as long as the netns
        Ok(())
    })
    .unwrap();

    let rules = vec![
        FirewallRule {
            matcher: RuleMatch::SandboxClassid,
            direction: Direction::Out,
            destination: Destination::Tcp {
                ip: Ipv4Addr::new(127, 99, 0, 1),
                port: 4433,
            },
            source_tcp_port: None,
            verdict: FirewallVerdict::Accept,
        },
        FirewallRule {
            matcher: RuleMatch::SandboxClassid,
            direction: Direction::Out,
            destination: Destination::Any,
            source_tcp_port: None,
            verdict: FirewallVerdict::Drop,
        },
        FirewallRule {
            matcher: RuleMatch::SandboxClassid,
            direction: Direction::In,
            destination: Destination::Any,
            source_tcp_port: None,
            verdict: FirewallVerdict::Drop,
        },
    ];
    firewall::sync(&ns.path, "itest", classid, &rules).unwrap();

    let tables = firewall::list_tables(&ns.path).unwrap();
    assert!(tables.contains(&"plugcell-itest".to_string()), "{tables:?}");

    // Tagged traffic: backend reachable, everything else silently dropped
    // (connect times out instead of being refused).
    let tagged_backend = connect_in_cgroup(&cg, &ns.path, backend);
    assert_eq!(tagged_backend, ConnectOutcome::Connected, "backend exception must pass");
    let tagged_other = connect_in_cgroup(&cg, &ns.path, "127.0.0.1:7".parse().unwrap());
    assert_eq!(tagged_other, ConnectOutcome::TimedOut, "tagged traffic must be dropped");

    // Untagged traffic in the same netns is untouched: refused immediately.
    let untagged = connect_plain(&ns.path, "127.0.0.1:7".parse().unwrap());
    assert_eq!(untagged, ConnectOutcome::Refused, "guest traffic must be untouched");

    assert!(firewall::remove(&ns.path, "itest").unwrap());
    assert!(!firewall::remove(&ns.path, "itest").unwrap()); // idempotent
    assert!(firewall::list_tables(&ns.path).unwrap().is_empty());

    cg.remove().unwrap();
}

#[derive(Debug, PartialEq)]
enum ConnectOutcome {
    Connected,
    Refused,
    TimedOut,
    Other(io::ErrorKind),
}

fn classify(r: io::Result<TcpStream>) -> ConnectOutcome {
    match r {
        Ok(_) => ConnectOutcome::Connected,
        Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => ConnectOutcome::Refused,
        Err(e) if e.kind() == io::ErrorKind::TimedOut => ConnectOutcome::TimedOut,
        Err(e) => ConnectOutcome::Other(e.kind()),
    }
}

fn connect_in_cgroup(cg: &CgroupSet, netns: &PathBuf, addr: SocketAddr) -> ConnectOutcome {
    let name = cg.name.clone();
    let out = plugcell::sandbox::nft::with_netns(netns, move || {
        let set = CgroupSet::open_existing(&name).expect("cgroup exists");
        let tid = unsafe { libc::syscall(libc::SYS_gettid) } as i32;
        set.tag_net_cls_tid(tid)?;
        Ok(match classify(TcpStream::connect_timeout(&addr, Duration::from_millis(400))) {
            ConnectOutcome::Connected => 0u8,
            ConnectOutcome::Refused => 1,
            ConnectOutcome::TimedOut => 2,
            ConnectOutcome::Other(_) => 3,
        })
    })
    .unwrap();
    match out {
        0 => ConnectOutcome::Connected,
        1 => ConnectOutcome::Refused,
        2 => ConnectOutcome::TimedOut,
        _ => ConnectOutcome::Other(io::ErrorKind::Other),
    }
}

fn connect_plain(netns: &PathBuf, addr: SocketAddr) -> ConnectOutcome {
    let out = plugcell::sandbox::nft::with_netns(netns, move || {
        Ok(match classify(TcpStream::connect_timeout(&addr, Duration::from_millis(400))) {
            ConnectOutcome::Connected => 0u8,
            ConnectOutcome::Refused => 1,
            ConnectOutcome::TimedOut => 2,
            ConnectOutcome::Other(_) => 3,
        })
    })
    .unwrap();
    match out {
        0 => ConnectOutcome::Connected,
        1 => ConnectOutcome::Refused,
        2 => ConnectOutcome::TimedOut,
        _ => ConnectOutcome::Other(io::ErrorKind::Other),
    }
}
