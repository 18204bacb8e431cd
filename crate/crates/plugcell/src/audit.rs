//! Syscall-trace audits for test batteries: run a command under ptrace and
//! report every filesystem-mutating or signal-sending syscall it (and its
//! children) attempted, with resolved path arguments where applicable.
//!
//! Collectors and guest resolution are contractually read-only; asserting
//! that from the outside is worth more than trusting the code.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io;
use std::path::PathBuf;
use std::process::Command;

/// One observed syscall entry.
#[derive(Debug, Clone)]
pub struct SyscallEvent {
    pub pid: i32,
    pub nr: u64,
    pub args: [u64; 6],
    /// Path argument for path-taking syscalls, read from tracee memory.
    pub path: Option<PathBuf>,
}

/// Classified mutation attempt.
#[derive(Debug, Clone)]
pub struct Mutation {
    pub pid: i32,
    pub what: String,
    pub path: Option<PathBuf>,
}

// x86-64 numbers for the calls we classify.
const SYS_OPEN: u64 = 2;
const SYS_KILL: u64 = 62;
const SYS_TRUNCATE: u64 = 76;
const SYS_RENAME: u64 = 82;
const SYS_MKDIR: u64 = 83;
const SYS_RMDIR: u64 = 84;
const SYS_CREAT: u64 = 85;
const SYS_LINK: u64 = 86;
const SYS_UNLINK: u64 = 87;
const SYS_SYMLINK: u64 = 88;
const SYS_CHMOD: u64 = 90;
const SYS_CHOWN: u64 = 92;
const SYS_LCHOWN: u64 = 94;
const SYS_MKNOD: u64 = 133;
const SYS_TKILL: u64 = 200;
const SYS_TGKILL: u64 = 234;
const SYS_OPENAT: u64 = 257;
const SYS_MKDIRAT: u64 = 258;
const SYS_MKNODAT: u64 = 259;
const SYS_FCHOWNAT: u64 = 260;
const SYS_UNLINKAT: u64 = 263;
const SYS_RENAMEAT: u64 = 264;
const SYS_LINKAT: u64 = 265;
const SYS_SYMLINKAT: u64 = 266;
const SYS_FCHMODAT: u64 = 268;
const SYS_RENAMEAT2: u64 = 316;
const SYS_OPENAT2: u64 = 437;

const WRITE_FLAGS: u64 =
    (libc::O_WRONLY | libc::O_RDWR | libc::O_CREAT | libc::O_TRUNC | libc::O_APPEND) as u64;

fn path_arg_index(nr: u64) -> Option<usize> {
    match nr {
        SYS_OPEN | SYS_CREAT | SYS_RENAME | SYS_MKDIR | SYS_RMDIR | SYS_LINK | SYS_UNLINK
        | SYS_SYMLINK | SYS_CHMOD | SYS_CHOWN | SYS_LCHOWN | SYS_TRUNCATE | SYS_MKNOD => Some(0),
        SYS_OPENAT | SYS_OPENAT2 | SYS_MKDIRAT | SYS_MKNODAT | SYS_FCHOWNAT | SYS_UNLINKAT
        | SYS_RENAMEAT | SYS_LINKAT | SYS_SYMLINKAT | SYS_FCHMODAT | SYS_RENAMEAT2 => Some(1),
        _ => None,
    }
}

/// Does this entry mutate filesystem state or signal another process?
pub fn classify_mutation(ev: &SyscallEvent) -> Option<Mutation> {
    let name = match ev.nr {
        SYS_OPEN if ev.args[1] & WRITE_FLAGS != 0 => "open(write)",
        SYS_OPENAT if ev.args[2] & WRITE_FLAGS != 0 => "openat(write)",
        SYS_OPENAT2 => "openat2",
        SYS_CREAT => "creat",
        SYS_RENAME | SYS_RENAMEAT | SYS_RENAMEAT2 => "rename",
        SYS_MKDIR | SYS_MKDIRAT => "mkdir",
        SYS_RMDIR => "rmdir",
        SYS_LINK | SYS_LINKAT => "link",
        SYS_UNLINK | SYS_UNLINKAT => "unlink",
        SYS_SYMLINK | SYS_SYMLINKAT => "symlink",
        SYS_CHMOD | SYS_FCHMODAT => "chmod",
        SYS_CHOWN | SYS_LCHOWN | SYS_FCHOWNAT => "chown",
        SYS_TRUNCATE => "truncate",
        SYS_MKNOD | SYS_MKNODAT => "mknod",
        SYS_KILL | SYS_TKILL | SYS_TGKILL if ev.args[1] != 0 => "kill",
        _ => return None,
    };
    Some(Mutation {
        pid: ev.pid,
        what: name.to_string(),
        path: ev.path.clone(),
    })
}

fn read_tracee_string(pid: i32, addr: u64) -> Option<PathBuf> {
    if addr == 0 {
        return None;
    }
    let mut buf = vec![0u8; 4096];
    let local = libc::iovec {
        iov_base: buf.as_mut_ptr() as *mut libc::c_void,
        iov_len: buf.len(),
    };
    let remote = libc::iovec {
        iov_base: addr as *mut libc::c_void,
        iov_len: buf.len(),
    };
    let n = unsafe { libc::process_vm_readv(pid, &local, 1, &remote, 1, 0) };
    if n <= 0 {
        return None;
    }
    let slice = &buf[..n as usize];
    let end = slice.iter().position(|b| *b == 0)?;
    use std::os::unix::ffi::OsStringExt;
    Some(PathBuf::from(OsString::from_vec(slice[..end].to_vec())))
}

/// Run `cmd` under syscall tracing (children followed) and collect every
/// syscall entry. Returns the exit code and the event list.
pub fn trace_command(mut cmd: Command) -> io::Result<(i32, Vec<SyscallEvent>)> {
    use std::os::unix::process::CommandExt;
    unsafe {
        cmd.pre_exec(|| {
            if libc::ptrace(libc::PTRACE_TRACEME, 0, 0, 0) != 0 {
                return Err(io::Error::last_os_error());
            }
            // The traced execve delivers the initial stop; stopping any
            // earlier would deadlock spawn()'s exec handshake.
            Ok(())
        });
    }
    let child = cmd.spawn()?;
    let root_pid = child.id() as i32;

    let mut status = 0;
    unsafe { libc::waitpid(root_pid, &mut status, 0) };
    let opts = libc::PTRACE_O_TRACESYSGOOD
        | libc::PTRACE_O_TRACEFORK
        | libc::PTRACE_O_TRACEVFORK
        | libc::PTRACE_O_TRACECLONE
        | libc::PTRACE_O_EXITKILL;
    unsafe {
        if libc::ptrace(libc::PTRACE_SETOPTIONS, root_pid, 0, opts) != 0 {
            return Err(io::Error::last_os_error());
        }
        libc::ptrace(libc::PTRACE_SYSCALL, root_pid, 0, 0);
    }

    let mut events = Vec::new();
    let mut in_syscall: HashMap<i32, bool> = HashMap::new();
    let mut exit_code = 0;
    let mut live = 1usize;

    while live > 0 {
        let mut status = 0;
        let pid = unsafe { libc::waitpid(-1, &mut status, libc::__WALL) };
        if pid < 0 {
            break;
        }
        if libc::WIFEXITED(status) || libc::WIFSIGNALED(status) {
            if pid == root_pid {
                exit_code = if libc::WIFEXITED(status) {
                    libc::WEXITSTATUS(status)
                } else {
                    128 + libc::WTERMSIG(status)
                };
            }
            in_syscall.remove(&pid);
            live = live.saturating_sub(1);
            continue;
        }
        if !libc::WIFSTOPPED(status) {
            continue;
        }
        let sig = libc::WSTOPSIG(status);
        let event = (status >> 16) & 0xFF;
        if event == libc::PTRACE_EVENT_FORK
            || event == libc::PTRACE_EVENT_VFORK
            || event == libc::PTRACE_EVENT_CLONE
        {
            live += 1; // the new tracee delivers its own initial stop
            unsafe { libc::ptrace(libc::PTRACE_SYSCALL, pid, 0, 0) };
            continue;
        }
        if sig == libc::SIGTRAP | 0x80 {
            let entering = !in_syscall.get(&pid).copied().unwrap_or(false);
            in_syscall.insert(pid, entering);
            if entering {
                let mut regs: libc::user_regs_struct = unsafe { std::mem::zeroed() };
                let ok = unsafe { libc::ptrace(libc::PTRACE_GETREGS, pid, 0, &mut regs) } == 0;
                if ok {
                    let args = [regs.rdi, regs.rsi, regs.rdx, regs.r10, regs.r8, regs.r9];
                    let nr = regs.orig_rax;
                    let path = path_arg_index(nr).and_then(|i| read_tracee_string(pid, args[i]));
                    events.push(SyscallEvent { pid, nr, args, path });
                }
            }
            unsafe { libc::ptrace(libc::PTRACE_SYSCALL, pid, 0, 0) };
            continue;
        }
        // New child's first stop, or a plain signal: resume, forwarding
        // genuine signals.
        let forward = if sig == libc::SIGSTOP || sig == libc::SIGTRAP { 0 } else { sig };
        unsafe { libc::ptrace(libc::PTRACE_SYSCALL, pid, 0, forward as u64) };
    }
    Ok((exit_code, events))
}

/// Trace and return all mutations whose path falls outside
/// `allowed_prefixes`. Path-less mutations (fd-based truncates, signals)
/// always count.
pub fn mutations_outside(cmd: Command, allowed_prefixes: &[PathBuf]) -> io::Result<(i32, Vec<Mutation>)> {
    let (code, events) = trace_command(cmd)?;
    let violations = events
        .iter()
        .filter_map(classify_mutation)
        .filter(|m| {
            m.path
                .as_ref()
                .map(|p| !allowed_prefixes.iter().any(|a| p.starts_with(a)))
                .unwrap_or(true)
        })
        .collect();
    Ok((code, violations))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn root() -> bool {
        unsafe { libc::geteuid() == 0 }
    }

    #[test]
    fn read_only_command_has_no_mutations() {
        if !root() {
            eprintln!("skipping: requires root");
            return;
        }
        let mut cmd = Command::new("cat");
        cmd.arg("/proc/self/status").stdout(std::process::Stdio::null());
        let (code, muts) = mutations_outside(cmd, &[]).unwrap();
        assert_eq!(code, 0);
        assert!(muts.is_empty(), "{muts:?}");
    }

    #[test]
    fn writes_are_caught_with_paths() {
        if !root() {
            eprintln!("skipping: requires root");
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("scratch");
        let mut cmd = Command::new("touch");
        cmd.arg(&target);
        let (code, muts) = mutations_outside(cmd, &[]).unwrap();
        assert_eq!(code, 0);
        assert!(
            muts.iter().any(|m| m.path.as_deref() == Some(target.as_path())),
            "{muts:?}"
        );
        let mut cmd = Command::new("touch");
        cmd.arg(&target);
        let (_, muts) = mutations_outside(cmd, &[dir.path().to_path_buf()]).unwrap();
        assert!(muts.is_empty(), "{muts:?}");
    }
}
