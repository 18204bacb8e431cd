//! Packet-oriented control channel between the builder and the sandbox
//! child, carried over a `SOCK_SEQPACKET` socketpair so JSON message
//! boundaries survive.

use std::io;
use std::os::fd::RawFd;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug)]
pub struct FdChannel {
    fd: RawFd,
}

impl FdChannel {
    /// Adopt an inherited descriptor (e.g. passed to a child via fork/exec).
    ///
    /// # Safety
    /// `fd` must be an open seqpacket socket owned by the caller.
    pub unsafe fn from_raw(fd: RawFd) -> FdChannel {
        FdChannel { fd }
    }

    pub fn pair() -> io::Result<(FdChannel, FdChannel)> {
        let mut fds = [0 as RawFd; 2];
        let rc = unsafe {
            libc::socketpair(
                libc::AF_UNIX,
                libc::SOCK_SEQPACKET | libc::SOCK_CLOEXEC,
                0,
                fds.as_mut_ptr(),
            )
        };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok((FdChannel { fd: fds[0] }, FdChannel { fd: fds[1] }))
    }

    pub fn send<T: Serialize>(&self, msg: &T) -> io::Result<()> {
        let bytes = serde_json::to_vec(msg).map_err(io::Error::other)?;
        let rc = unsafe { libc::send(self.fd, bytes.as_ptr() as *const libc::c_void, bytes.len(), 0) };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }

    /// Receive one message, waiting at most `timeout`. EOF (peer gone) maps
    /// to `UnexpectedEof`.
    pub fn recv<T: DeserializeOwned>(&self, timeout: Duration) -> io::Result<T> {
        let mut pfd = libc::pollfd {
            fd: self.fd,
            events: libc::POLLIN,
            revents: 0,
        };
        let rc = unsafe { libc::poll(&mut pfd, 1, timeout.as_millis() as libc::c_int) };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        if rc == 0 {
            return Err(io::Error::new(io::ErrorKind::TimedOut, "control channel timeout"));
        }
        let mut buf = vec![0u8; 64 * 1024];
        let n = unsafe { libc::recv(self.fd, buf.as_mut_ptr() as *mut libc::c_void, buf.len(), 0) };
        if n < 0 {
            return Err(io::Error::last_os_error());
        }
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "control channel closed"));
        }
        serde_json::from_slice(&buf[..n as usize]).map_err(|e| {
            io::Error::other(format!(
                "parse `{}`: {e}",
                String::from_utf8_lossy(&buf[..(n as usize).min(200)])
            ))
        })
    }

    /// Send a message with file descriptors attached (SCM_RIGHTS).
    pub fn send_with_fds<T: Serialize>(&self, msg: &T, fds: &[RawFd]) -> io::Result<()> {
        let bytes = serde_json::to_vec(msg).map_err(io::Error::other)?;
        let mut iov = libc::iovec {
            iov_base: bytes.as_ptr() as *mut libc::c_void,
            iov_len: bytes.len(),
        };
        let space = unsafe { libc::CMSG_SPACE((fds.len() * 4) as u32) } as usize;
        let mut cmsg_buf = vec![0u8; space];
        let mut hdr: libc::msghdr = unsafe { std::mem::zeroed() };
        hdr.msg_iov = &mut iov;
        hdr.msg_iovlen = 1;
        hdr.msg_control = cmsg_buf.as_mut_ptr() as *mut libc::c_void;
        hdr.msg_controllen = space;
        unsafe {
            let cmsg = libc::CMSG_FIRSTHDR(&hdr);
            (*cmsg).cmsg_level = libc::SOL_SOCKET;
            (*cmsg).cmsg_type = libc::SCM_RIGHTS;
            (*cmsg).cmsg_len = libc::CMSG_LEN((fds.len() * 4) as u32) as usize;
            std::ptr::copy_nonoverlapping(
                fds.as_ptr() as *const u8,
                libc::CMSG_DATA(cmsg),
                fds.len() * 4,
            );
            if libc::sendmsg(self.fd, &hdr, 0) < 0 {
                return Err(io::Error::last_os_error());
            }
        }
        Ok(())
    }

    /// Receive one message plus any attached descriptors.
    pub fn recv_with_fds<T: DeserializeOwned>(&self, timeout: Duration) -> io::Result<(T, Vec<RawFd>)> {
        let mut pfd = libc::pollfd {
            fd: self.fd,
            events: libc::POLLIN,
            revents: 0,
        };
        let rc = unsafe { libc::poll(&mut pfd, 1, timeout.as_millis() as libc::c_int) };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        if rc == 0 {
            return Err(io::Error::new(io::ErrorKind::TimedOut, "control channel timeout"));
        }
        let mut buf = vec![0u8; 64 * 1024];
        let mut iov = libc::iovec {
            iov_base: buf.as_mut_ptr() as *mut libc::c_void,
            iov_len: buf.len(),
        };
        let space = unsafe { libc::CMSG_SPACE(64 * 4) } as usize;
        let mut cmsg_buf = vec![0u8; space];
        let mut hdr: libc::msghdr = unsafe { std::mem::zeroed() };
        hdr.msg_iov = &mut iov;
        hdr.msg_iovlen = 1;
        hdr.msg_control = cmsg_buf.as_mut_ptr() as *mut libc::c_void;
        hdr.msg_controllen = space;
        let n = unsafe { libc::recvmsg(self.fd, &mut hdr, 0) };
        if n < 0 {
            return Err(io::Error::last_os_error());
        }
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "control channel closed"));
        }
        let mut fds = Vec::new();
        unsafe {
            let mut cmsg = libc::CMSG_FIRSTHDR(&hdr);
            while !cmsg.is_null() {
                if (*cmsg).cmsg_level == libc::SOL_SOCKET && (*cmsg).cmsg_type == libc::SCM_RIGHTS {
                    let payload = (*cmsg).cmsg_len - libc::CMSG_LEN(0) as usize;
                    let count = payload / 4;
                    for i in 0..count {
                        let mut fd: RawFd = 0;
                        std::ptr::copy_nonoverlapping(
                            libc::CMSG_DATA(cmsg).add(i * 4),
                            &mut fd as *mut RawFd as *mut u8,
                            4,
                        );
                        fds.push(fd);
                    }
                }
                cmsg = libc::CMSG_NXTHDR(&hdr, cmsg);
            }
        }
        let msg = serde_json::from_slice(&buf[..n as usize]).map_err(io::Error::other)?;
        Ok((msg, fds))
    }

    /// Block (bounded) until the peer closes the channel, e.g. across exec.
    pub fn wait_for_close(&self, timeout: Duration) -> io::Result<()> {
        let mut pfd = libc::pollfd {
            fd: self.fd,
            events: libc::POLLIN,
            revents: 0,
        };
        let rc = unsafe { libc::poll(&mut pfd, 1, timeout.as_millis() as libc::c_int) };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        if rc == 0 {
            return Err(io::Error::new(io::ErrorKind::TimedOut, "peer did not close"));
        }
        Ok(())
    }

    pub fn raw_fd(&self) -> RawFd {
        self.fd
    }
}

impl Drop for FdChannel {
    fn drop(&mut self) {
        unsafe { libc::close(self.fd) };
    }
}
