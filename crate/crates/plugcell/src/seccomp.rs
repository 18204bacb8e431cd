//! Seccomp filter rendering and installation.
//!
//! The filter is a default-allow denylist: listed syscalls fail with the
//! configured errno instead of killing the process. Foreign-architecture and
//! x32 calls are killed outright, otherwise a denied syscall number could be
//! re-entered through the alternate table.

use crate::policy::{PolicyError, SandboxPolicy, SeccompAction};

const AUDIT_ARCH_X86_64: u32 = 0xC000_003E;
const X32_SYSCALL_BIT: u32 = 0x4000_0000;

const SECCOMP_RET_ALLOW: u32 = 0x7FFF_0000;
const SECCOMP_RET_ERRNO: u32 = 0x0005_0000;
const SECCOMP_RET_KILL_PROCESS: u32 = 0x8000_0000;

// BPF opcode constants (classic BPF as used by seccomp).
const BPF_LD_W_ABS: u16 = 0x20;
const BPF_JMP_JEQ_K: u16 = 0x15;
const BPF_JMP_JGE_K: u16 = 0x35;
const BPF_RET_K: u16 = 0x06;

/// x86-64 syscall numbers for every syscall a policy may reference.
///
/// Deliberately a static table: renders must not depend on the build host's
/// headers, and naming a syscall outside the table is a policy error.
pub const SYSCALL_TABLE: &[(&str, u32)] = &[
    ("read", 0),
    ("write", 1),
    ("open", 2),
    ("close", 3),
    ("stat", 4),
    ("fstat", 5),
    ("lstat", 6),
    ("poll", 7),
    ("lseek", 8),
    ("mmap", 9),
    ("mprotect", 10),
    ("munmap", 11),
    ("brk", 12),
    ("ioctl", 16),
    ("pread64", 17),
    ("pwrite64", 18),
    ("readv", 19),
    ("writev", 20),
    ("access", 21),
    ("pipe", 22),
    ("select", 23),
    ("madvise", 28),
    ("shmget", 29),
    ("shmat", 30),
    ("dup", 32),
    ("dup2", 33),
    ("nanosleep", 35),
    ("getpid", 39),
    ("socket", 41),
    ("connect", 42),
    ("accept", 43),
    ("sendto", 44),
    ("recvfrom", 45),
    ("sendmsg", 46),
    ("recvmsg", 47),
    ("shutdown", 48),
    ("bind", 49),
    ("listen", 50),
    ("getsockname", 51),
    ("getpeername", 52),
    ("socketpair", 53),
    ("setsockopt", 54),
    ("getsockopt", 55),
    ("clone", 56),
    ("fork", 57),
    ("vfork", 58),
    ("execve", 59),
    ("exit", 60),
    ("wait4", 61),
    ("kill", 62),
    ("uname", 63),
    ("fcntl", 72),
    ("ftruncate", 77),
    ("getdents", 78),
    ("getcwd", 79),
    ("chdir", 80),
    ("rename", 82),
    ("mkdir", 83),
    ("rmdir", 84),
    ("creat", 85),
    ("link", 86),
    ("unlink", 87),
    ("symlink", 88),
    ("readlink", 89),
    ("chmod", 90),
    ("chown", 92),
    ("umask", 95),
    ("gettimeofday", 96),
    ("getrlimit", 97),
    ("ptrace", 101),
    ("getuid", 102),
    ("syslog", 103),
    ("getgid", 104),
    ("setuid", 105),
    ("setgid", 106),
    ("geteuid", 107),
    ("getegid", 108),
    ("setpgid", 109),
    ("getppid", 110),
    ("setsid", 112),
    ("setreuid", 113),
    ("setregid", 114),
    ("setgroups", 116),
    ("setresuid", 117),
    ("setresgid", 119),
    ("capget", 125),
    ("capset", 126),
    ("sigaltstack", 131),
    ("mknod", 133),
    ("personality", 135),
    ("statfs", 137),
    ("getpriority", 140),
    ("setpriority", 141),
    ("sched_setaffinity", 203),
    ("sched_getaffinity", 204),
    ("prctl", 157),
    ("arch_prctl", 158),
    ("chroot", 161),
    ("sync", 162),
    ("mount", 165),
    ("umount2", 166),
    ("swapon", 167),
    ("swapoff", 168),
    ("reboot", 169),
    ("sethostname", 170),
    ("setdomainname", 171),
    ("init_module", 175),
    ("delete_module", 176),
    ("gettid", 186),
    ("readahead", 187),
    ("setxattr", 188),
    ("getxattr", 191),
    ("time", 201),
    ("futex", 202),
    ("epoll_create", 213),
    ("getdents64", 217),
    ("set_tid_address", 218),
    ("clock_gettime", 228),
    ("clock_nanosleep", 230),
    ("exit_group", 231),
    ("epoll_wait", 232),
    ("epoll_ctl", 233),
    ("tgkill", 234),
    ("openat", 257),
    ("mkdirat", 258),
    ("mknodat", 259),
    ("fchownat", 260),
    ("newfstatat", 262),
    ("unlinkat", 263),
    ("renameat", 264),
    ("linkat", 265),
    ("symlinkat", 266),
    ("readlinkat", 267),
    ("fchmodat", 268),
    ("faccessat", 269),
    ("ppoll", 271),
    ("unshare", 272),
    ("splice", 275),
    ("utimensat", 280),
    ("epoll_pwait", 281),
    ("timerfd_create", 283),
    ("accept4", 288),
    ("eventfd2", 290),
    ("epoll_create1", 291),
    ("dup3", 292),
    ("pipe2", 293),
    ("perf_event_open", 298),
    ("recvmmsg", 299),
    ("prlimit64", 302),
    ("sendmmsg", 307),
    ("setns", 308),
    ("getcpu", 309),
    ("process_vm_readv", 310),
    ("process_vm_writev", 311),
    ("kcmp", 312),
    ("finit_module", 313),
    ("seccomp", 317),
    ("getrandom", 318),
    ("memfd_create", 319),
    ("bpf", 321),
    ("execveat", 322),
    ("userfaultfd", 323),
    ("statx", 332),
    ("rseq", 334),
    ("pidfd_send_signal", 424),
    ("pidfd_open", 434),
    ("clone3", 435),
    ("close_range", 436),
    ("openat2", 437),
    ("pidfd_getfd", 438),
    ("faccessat2", 439),
    ("process_madvise", 440),
    ("mount_setattr", 442),
    ("landlock_create_ruleset", 444),
    ("landlock_add_rule", 445),
    ("landlock_restrict_self", 446),
    ("memfd_secret", 447),
    ("process_mrelease", 448),
];

pub fn syscall_number(name: &str) -> Option<u32> {
    SYSCALL_TABLE.iter().find(|(n, _)| *n == name).map(|(_, nr)| *nr)
}

/// One classic-BPF instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BpfInsn {
    pub code: u16,
    pub jt: u8,
    pub jf: u8,
    pub k: u32,
}

/// A rendered, installable filter program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeccompProgram {
    insns: Vec<BpfInsn>,
}

impl SeccompProgram {
    pub fn instructions(&self) -> &[BpfInsn] {
        &self.insns
    }

    /// Little-endian wire encoding; byte-identical for identical policies.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.insns.len() * 8);
        for i in &self.insns {
            out.extend_from_slice(&i.code.to_le_bytes());
            out.push(i.jt);
            out.push(i.jf);
            out.extend_from_slice(&i.k.to_le_bytes());
        }
        out
    }

    /// Syscall numbers this program refuses, with their errnos.
    pub fn denied_syscalls(&self) -> Vec<(u32, i32)> {
        let mut out = Vec::new();
        for w in self.insns.windows(2) {
            if w[0].code == BPF_JMP_JEQ_K
                && w[1].code == BPF_RET_K
                && w[1].k & 0xFFFF_0000 == SECCOMP_RET_ERRNO
            {
                out.push((w[0].k, (w[1].k & 0xFFFF) as i32));
            }
        }
        out
    }

    /// Install via `seccomp(2)`. Requires `no_new_privs` to already be set
    /// when the caller lacks CAP_SYS_ADMIN.
    pub fn install(&self) -> std::io::Result<()> {
        #[repr(C)]
        struct SockFilter {
            code: u16,
            jt: u8,
            jf: u8,
            k: u32,
        }
        #[repr(C)]
        struct SockFprog {
            len: libc::c_ushort,
            filter: *const SockFilter,
        }
        let filter: Vec<SockFilter> = self
            .insns
            .iter()
            .map(|i| SockFilter {
                code: i.code,
                jt: i.jt,
                jf: i.jf,
                k: i.k,
            })
            .collect();
        let prog = SockFprog {
            len: filter.len() as libc::c_ushort,
            filter: filter.as_ptr(),
        };
        // SECCOMP_SET_MODE_FILTER = 1, flags = 0.
        let rc = unsafe { libc::syscall(libc::SYS_seccomp, 1u64, 0u64, &prog as *const _) };
        if rc != 0 {
            return Err(std::io::Error::last_os_error());
        }
        Ok(())
    }
}

/// Render the policy's denylist into a BPF program.
///
/// Layout: architecture pin, x32 kill, then one (jeq, ret errno) pair per
/// denied syscall sorted by number, then allow. Sorting canonicalizes the
/// program so equal policies render byte-identically.
pub fn render_seccomp(p: &SandboxPolicy) -> Result<SeccompProgram, PolicyError> {
    let mut denials: Vec<(u32, i32)> = Vec::new();
    for rule in &p.seccomp {
        let nr = syscall_number(&rule.syscall_name)
            .ok_or_else(|| PolicyError::UnknownSyscall(rule.syscall_name.clone()))?;
        match rule.action {
            SeccompAction::Allow => {}
            SeccompAction::DenyErrno(errno) => denials.push((nr, errno)),
        }
    }
    denials.sort_unstable();
    denials.dedup();

    let mut insns = vec![
        // load seccomp_data.arch
        BpfInsn { code: BPF_LD_W_ABS, jt: 0, jf: 0, k: 4 },
        BpfInsn { code: BPF_JMP_JEQ_K, jt: 1, jf: 0, k: AUDIT_ARCH_X86_64 },
        BpfInsn { code: BPF_RET_K, jt: 0, jf: 0, k: SECCOMP_RET_KILL_PROCESS },
        // load seccomp_data.nr
        BpfInsn { code: BPF_LD_W_ABS, jt: 0, jf: 0, k: 0 },
        BpfInsn { code: BPF_JMP_JGE_K, jt: 0, jf: 1, k: X32_SYSCALL_BIT },
        BpfInsn { code: BPF_RET_K, jt: 0, jf: 0, k: SECCOMP_RET_KILL_PROCESS },
    ];
    for (nr, errno) in denials {
        insns.push(BpfInsn { code: BPF_JMP_JEQ_K, jt: 0, jf: 1, k: nr });
        insns.push(BpfInsn {
            code: BPF_RET_K,
            jt: 0,
            jf: 0,
            k: SECCOMP_RET_ERRNO | (errno as u32 & 0xFFFF),
        });
    }
    insns.push(BpfInsn { code: BPF_RET_K, jt: 0, jf: 0, k: SECCOMP_RET_ALLOW });
    Ok(SeccompProgram { insns })
}
