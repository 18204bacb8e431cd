//! Minimal nftables netlink client.
//!
//! Talks `NETLINK_NETFILTER` directly so the runtime has no dependency on
//! nft userspace. Only what the firewall layer needs is implemented: batch
//! create/delete of one table with two base chains, rule append with
//! meta/cmp/payload/immediate expressions, and a table dump for snapshots.
//!
//! All multi-byte netlink attribute values below follow the kernel's
//! expectations: header fields little-endian (host order here), `be32`
//! attributes big-endian, register comparison data in the byte order the
//! matching expression stores (native for cgroup classids, network order
//! for addresses and ports, single bytes for protocol numbers).

use std::io;
use std::os::fd::RawFd;

// netlink / nfnetlink framing
const NETLINK_NETFILTER: i32 = 12;
const NLMSG_ERROR: u16 = 2;
const NLMSG_DONE: u16 = 3;

const NLM_F_REQUEST: u16 = 0x01;
const NLM_F_MULTI: u16 = 0x02;
const NLM_F_ACK: u16 = 0x04;
const NLM_F_DUMP: u16 = 0x300;
const NLM_F_CREATE: u16 = 0x400;
const NLM_F_APPEND: u16 = 0x800;

const NFNL_SUBSYS_NFTABLES: u16 = 10;
const NFNL_MSG_BATCH_BEGIN: u16 = 0x10;
const NFNL_MSG_BATCH_END: u16 = 0x11;
const NFNETLINK_V0: u8 = 0;

const NLA_F_NESTED: u16 = 0x8000;

// nf_tables message types
const NFT_MSG_NEWTABLE: u16 = 0;
const NFT_MSG_GETTABLE: u16 = 1;
const NFT_MSG_DELTABLE: u16 = 2;
const NFT_MSG_NEWCHAIN: u16 = 3;
const NFT_MSG_NEWRULE: u16 = 6;

// attribute ids
const NFTA_TABLE_NAME: u16 = 1;
const NFTA_CHAIN_TABLE: u16 = 1;
const NFTA_CHAIN_NAME: u16 = 3;
const NFTA_CHAIN_HOOK: u16 = 4;
const NFTA_CHAIN_POLICY: u16 = 5;
const NFTA_CHAIN_TYPE: u16 = 7;
const NFTA_HOOK_HOOKNUM: u16 = 1;
const NFTA_HOOK_PRIORITY: u16 = 2;
const NFTA_RULE_TABLE: u16 = 1;
const NFTA_RULE_CHAIN: u16 = 2;
const NFTA_RULE_EXPRESSIONS: u16 = 4;
const NFTA_LIST_ELEM: u16 = 1;
const NFTA_EXPR_NAME: u16 = 1;
const NFTA_EXPR_DATA: u16 = 2;
const NFTA_META_DREG: u16 = 1;
const NFTA_META_KEY: u16 = 2;
const NFTA_CMP_SREG: u16 = 1;
const NFTA_CMP_OP: u16 = 2;
const NFTA_CMP_DATA: u16 = 3;
const NFTA_DATA_VALUE: u16 = 1;
const NFTA_DATA_VERDICT: u16 = 2;
const NFTA_VERDICT_CODE: u16 = 1;
const NFTA_IMMEDIATE_DREG: u16 = 1;
const NFTA_IMMEDIATE_DATA: u16 = 2;
const NFTA_PAYLOAD_DREG: u16 = 1;
const NFTA_PAYLOAD_BASE: u16 = 2;
const NFTA_PAYLOAD_OFFSET: u16 = 3;
const NFTA_PAYLOAD_LEN: u16 = 4;

// values
pub const NFPROTO_INET: u8 = 1;
pub const NF_INET_LOCAL_IN: u32 = 1;
pub const NF_INET_LOCAL_OUT: u32 = 3;
pub const NF_ACCEPT: u32 = 1;
pub const NF_DROP: u32 = 0;
const NFT_REG_VERDICT: u32 = 0;
const NFT_REG_1: u32 = 1;
const NFT_CMP_EQ: u32 = 0;
pub const NFT_META_NFPROTO: u32 = 15;
pub const NFT_META_L4PROTO: u32 = 16;
pub const NFT_META_IIFNAME: u32 = 6;
pub const NFT_META_OIFNAME: u32 = 7;
pub const NFT_META_CGROUP: u32 = 23;
pub const NFT_PAYLOAD_NETWORK_HEADER: u32 = 1;
pub const NFT_PAYLOAD_TRANSPORT_HEADER: u32 = 2;

fn align4(len: usize) -> usize {
    (len + 3) & !3
}

fn put_attr(out: &mut Vec<u8>, attr_type: u16, payload: &[u8]) {
    let len = 4 + payload.len();
    out.extend_from_slice(&(len as u16).to_ne_bytes());
    out.extend_from_slice(&attr_type.to_ne_bytes());
    out.extend_from_slice(payload);
    out.resize(out.len() + (align4(payload.len()) - payload.len()), 0);
}

fn put_nested(out: &mut Vec<u8>, attr_type: u16, children: &[u8]) {
    put_attr(out, attr_type | NLA_F_NESTED, children);
}

fn put_str(out: &mut Vec<u8>, attr_type: u16, s: &str) {
    let mut bytes = s.as_bytes().to_vec();
    bytes.push(0);
    put_attr(out, attr_type, &bytes);
}

fn put_be32(out: &mut Vec<u8>, attr_type: u16, v: u32) {
    put_attr(out, attr_type, &v.to_be_bytes());
}

/// One nf_tables expression, encoded as (name, data attrs).
fn expr(name: &str, data: &[u8]) -> Vec<u8> {
    let mut elem = Vec::new();
    put_str(&mut elem, NFTA_EXPR_NAME, name);
    put_nested(&mut elem, NFTA_EXPR_DATA, data);
    let mut out = Vec::new();
    put_nested(&mut out, NFTA_LIST_ELEM, &elem);
    out
}

/// `meta <key> => reg1`
pub fn expr_meta(key: u32) -> Vec<u8> {
    let mut data = Vec::new();
    put_be32(&mut data, NFTA_META_KEY, key);
    put_be32(&mut data, NFTA_META_DREG, NFT_REG_1);
    expr("meta", &data)
}

/// `cmp reg1 == value`
pub fn expr_cmp_eq(value: &[u8]) -> Vec<u8> {
    let mut inner = Vec::new();
    put_attr(&mut inner, NFTA_DATA_VALUE, value);
    let mut data = Vec::new();
    put_be32(&mut data, NFTA_CMP_SREG, NFT_REG_1);
    put_be32(&mut data, NFTA_CMP_OP, NFT_CMP_EQ);
    put_nested(&mut data, NFTA_CMP_DATA, &inner);
    expr("cmp", &data)
}

/// `payload load <len>@<base+offset> => reg1`
pub fn expr_payload(base: u32, offset: u32, len: u32) -> Vec<u8> {
    let mut data = Vec::new();
    put_be32(&mut data, NFTA_PAYLOAD_DREG, NFT_REG_1);
    put_be32(&mut data, NFTA_PAYLOAD_BASE, base);
    put_be32(&mut data, NFTA_PAYLOAD_OFFSET, offset);
    put_be32(&mut data, NFTA_PAYLOAD_LEN, len);
    expr("payload", &data)
}

/// `counter` (zero-initialized; useful when debugging rule matching)
pub fn expr_counter() -> Vec<u8> {
    expr("counter", &[])
}

/// `verdict accept|drop`
pub fn expr_verdict(code: u32) -> Vec<u8> {
    let mut verdict = Vec::new();
    put_be32(&mut verdict, NFTA_VERDICT_CODE, code);
    let mut inner = Vec::new();
    put_nested(&mut inner, NFTA_DATA_VERDICT, &verdict);
    let mut data = Vec::new();
    put_be32(&mut data, NFTA_IMMEDIATE_DREG, NFT_REG_VERDICT);
    put_nested(&mut data, NFTA_IMMEDIATE_DATA, &inner);
    expr("immediate", &data)
}

struct MsgBuilder {
    buf: Vec<u8>,
    seq: u32,
    acked: Vec<u32>,
}

impl MsgBuilder {
    fn new() -> Self {
        MsgBuilder {
            buf: Vec::new(),
            seq: 1,
            acked: Vec::new(),
        }
    }

    fn push(&mut self, msg_type: u16, flags: u16, family: u8, res_id: u16, payload: &[u8], want_ack: bool) {
        let seq = self.seq;
        self.seq += 1;
        if want_ack {
            self.acked.push(seq);
        }
        let total = 16 + 4 + payload.len();
        self.buf.extend_from_slice(&(total as u32).to_ne_bytes());
        self.buf.extend_from_slice(&msg_type.to_ne_bytes());
        let flags = if want_ack { flags | NLM_F_ACK } else { flags };
        self.buf.extend_from_slice(&flags.to_ne_bytes());
        self.buf.extend_from_slice(&seq.to_ne_bytes());
        self.buf.extend_from_slice(&0u32.to_ne_bytes()); // pid
        self.buf.push(family);
        self.buf.push(NFNETLINK_V0);
        self.buf.extend_from_slice(&res_id.to_be_bytes());
        self.buf.extend_from_slice(payload);
        let pad = align4(self.buf.len()) - self.buf.len();
        self.buf.resize(self.buf.len() + pad, 0);
    }

    fn push_nft(&mut self, msg: u16, flags: u16, family: u8, payload: &[u8]) {
        self.push(
            (NFNL_SUBSYS_NFTABLES << 8) | msg,
            NLM_F_REQUEST | flags,
            family,
            0,
            payload,
            true,
        );
    }
}

/// Netlink socket bound to NETLINK_NETFILTER in the caller's current netns.
pub struct NftSocket {
    fd: RawFd,
}

impl NftSocket {
    pub fn open() -> io::Result<Self> {
        let fd = unsafe {
            libc::socket(
                libc::AF_NETLINK,
                libc::SOCK_RAW | libc::SOCK_CLOEXEC,
                NETLINK_NETFILTER,
            )
        };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        // Receive timeout bounds every exchange; nothing here may hang a
        // teardown path.
        let tv = libc::timeval {
            tv_sec: 5,
            tv_usec: 0,
        };
        unsafe {
            libc::setsockopt(
                fd,
                libc::SOL_SOCKET,
                libc::SO_RCVTIMEO,
                &tv as *const _ as *const libc::c_void,
                std::mem::size_of::<libc::timeval>() as u32,
            );
        }
        Ok(NftSocket { fd })
    }

    fn send(&self, buf: &[u8]) -> io::Result<()> {
        let rc = unsafe { libc::send(self.fd, buf.as_ptr() as *const libc::c_void, buf.len(), 0) };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }

    fn recv(&self, buf: &mut [u8]) -> io::Result<usize> {
        let rc = unsafe { libc::recv(self.fd, buf.as_mut_ptr() as *mut libc::c_void, buf.len(), 0) };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(rc as usize)
    }

    /// Send a prepared batch and wait for per-message acks.
    fn run_batch(&self, mut b: MsgBuilder) -> io::Result<()> {
        // Wrap commands in batch begin/end (no acks requested for those).
        let mut outer = MsgBuilder::new();
        outer.push(NFNL_MSG_BATCH_BEGIN, NLM_F_REQUEST, 0, NFNL_SUBSYS_NFTABLES, &[], false);
        b.rewrite_seqs(outer.seq);
        outer.seq += b.acked.len() as u32;
        let expected = b.acked.clone();
        outer.buf.extend_from_slice(&b.buf);
        outer.push(NFNL_MSG_BATCH_END, NLM_F_REQUEST, 0, NFNL_SUBSYS_NFTABLES, &[], false);

        self.send(&outer.buf)?;

        let mut pending: std::collections::HashSet<u32> = expected.into_iter().collect();
        let mut buf = vec![0u8; 65536];
        while !pending.is_empty() {
            let n = self.recv(&mut buf)?;
            for (hdr, payload) in parse_messages(&buf[..n]) {
                if hdr.msg_type == NLMSG_ERROR {
                    let errno = i32::from_ne_bytes(payload[0..4].try_into().unwrap_or_default());
                    if errno != 0 {
                        return Err(io::Error::from_raw_os_error(-errno));
                    }
                    pending.remove(&hdr.seq);
                }
            }
        }
        Ok(())
    }

    /// All nf_tables table names currently present in this netns.
    pub fn list_tables(&self) -> io::Result<Vec<String>> {
        let mut b = MsgBuilder::new();
        b.push(
            (NFNL_SUBSYS_NFTABLES << 8) | NFT_MSG_GETTABLE,
            NLM_F_REQUEST | NLM_F_DUMP,
            0,
            0,
            &[],
            false,
        );
        self.send(&b.buf)?;
        let mut names = Vec::new();
        let mut buf = vec![0u8; 65536];
        loop {
            let n = self.recv(&mut buf)?;
            let mut done = false;
            for (hdr, payload) in parse_messages(&buf[..n]) {
                match hdr.msg_type {
                    NLMSG_DONE => done = true,
                    NLMSG_ERROR => {
                        let errno = i32::from_ne_bytes(payload[0..4].try_into().unwrap_or_default());
                        if errno != 0 {
                            return Err(io::Error::from_raw_os_error(-errno));
                        }
                    }
                    t if t == (NFNL_SUBSYS_NFTABLES << 8) | NFT_MSG_NEWTABLE => {
                        // skip nfgenmsg, then walk attributes
                        if payload.len() > 4 {
                            if let Some(name) = find_string_attr(&payload[4..], NFTA_TABLE_NAME) {
                                names.push(name);
                            }
                        }
                        if hdr.flags & NLM_F_MULTI == 0 {
                            done = true;
                        }
                    }
                    _ => {}
                }
            }
            if done {
                break;
            }
        }
        Ok(names)
    }

    /// Create table `name` (family inet) with base chains `in`/`out`
    /// (filter, hook input/output, policy accept) and the given rules.
    /// `rules` are (chain, expressions) pairs appended in order.
    pub fn create_table(&self, name: &str, rules: &[(&'static str, Vec<Vec<u8>>)]) -> io::Result<()> {
        self.create_table_prio(name, 0, rules)
    }

    pub fn create_table_prio(
        &self,
        name: &str,
        priority: i32,
        rules: &[(&'static str, Vec<Vec<u8>>)],
    ) -> io::Result<()> {
        let mut b = MsgBuilder::new();

        let mut tbl = Vec::new();
        put_str(&mut tbl, NFTA_TABLE_NAME, name);
        b.push_nft(NFT_MSG_NEWTABLE, NLM_F_CREATE, NFPROTO_INET, &tbl);

        for (chain, hook) in [("in", NF_INET_LOCAL_IN), ("out", NF_INET_LOCAL_OUT)] {
            let mut ch = Vec::new();
            put_str(&mut ch, NFTA_CHAIN_TABLE, name);
            put_str(&mut ch, NFTA_CHAIN_NAME, chain);
            let mut hk = Vec::new();
            put_be32(&mut hk, NFTA_HOOK_HOOKNUM, hook);
            put_be32(&mut hk, NFTA_HOOK_PRIORITY, priority as u32);
            put_nested(&mut ch, NFTA_CHAIN_HOOK, &hk);
            put_be32(&mut ch, NFTA_CHAIN_POLICY, NF_ACCEPT);
            put_str(&mut ch, NFTA_CHAIN_TYPE, "filter");
            b.push_nft(NFT_MSG_NEWCHAIN, NLM_F_CREATE, NFPROTO_INET, &ch);
        }

        for (chain, exprs) in rules {
            let mut rl = Vec::new();
            put_str(&mut rl, NFTA_RULE_TABLE, name);
            put_str(&mut rl, NFTA_RULE_CHAIN, chain);
            let mut list = Vec::new();
            for e in exprs {
                list.extend_from_slice(e);
            }
            put_nested(&mut rl, NFTA_RULE_EXPRESSIONS, &list);
            b.push_nft(NFT_MSG_NEWRULE, NLM_F_CREATE | NLM_F_APPEND, NFPROTO_INET, &rl);
        }

        self.run_batch(b)
    }

    /// Debug view of a table's rules: (chain, expressions hex) in kernel
    /// order. Diagnostic aid; not part of the sync path.
    pub fn dump_rules(&self, table: &str) -> io::Result<Vec<(String, String)>> {
        const NFT_MSG_GETRULE: u16 = 7;
        let mut b = MsgBuilder::new();
        let mut tbl = Vec::new();
        put_str(&mut tbl, NFTA_RULE_TABLE, table);
        b.push(
            (NFNL_SUBSYS_NFTABLES << 8) | NFT_MSG_GETRULE,
            NLM_F_REQUEST | NLM_F_DUMP,
            NFPROTO_INET,
            0,
            &tbl,
            false,
        );
        self.send(&b.buf)?;
        let mut out = Vec::new();
        let mut buf = vec![0u8; 262144];
        loop {
            let n = self.recv(&mut buf)?;
            let mut done = false;
            for (hdr, payload) in parse_messages(&buf[..n]) {
                match hdr.msg_type {
                    NLMSG_DONE => done = true,
                    NLMSG_ERROR => {
                        let errno = i32::from_ne_bytes(payload[0..4].try_into().unwrap_or_default());
                        if errno != 0 {
                            return Err(io::Error::from_raw_os_error(-errno));
                        }
                    }
                    t if t == (NFNL_SUBSYS_NFTABLES << 8) | 6 || t == (NFNL_SUBSYS_NFTABLES << 8) | NFT_MSG_GETRULE => {
                        if payload.len() > 4 {
                            let attrs = &payload[4..];
                            let chain = find_string_attr(attrs, NFTA_RULE_CHAIN).unwrap_or_default();
                            let exprs = find_raw_attr(attrs, NFTA_RULE_EXPRESSIONS)
                                .map(hex_of)
                                .unwrap_or_default();
                            out.push((chain, exprs));
                        }
                        if hdr.flags & NLM_F_MULTI == 0 {
                            done = true;
                        }
                    }
                    _ => {}
                }
            }
            if done {
                break;
            }
        }
        Ok(out)
    }

    /// Delete table `name` if present; Ok(false) when it was not there.
    pub fn delete_table(&self, name: &str) -> io::Result<bool> {
        if !self.list_tables()?.iter().any(|t| t == name) {
            return Ok(false);
        }
        let mut b = MsgBuilder::new();
        let mut tbl = Vec::new();
        put_str(&mut tbl, NFTA_TABLE_NAME, name);
        b.push_nft(NFT_MSG_DELTABLE, 0, NFPROTO_INET, &tbl);
        self.run_batch(b)?;
        Ok(true)
    }
}

impl Drop for NftSocket {
    fn drop(&mut self) {
        unsafe { libc::close(self.fd) };
    }
}

impl MsgBuilder {
    /// Rebase sequence numbers after the batch-begin message is prepended.
    fn rewrite_seqs(&mut self, base: u32) {
        let mut off = 0usize;
        let mut idx = 0usize;
        while off + 16 <= self.buf.len() {
            let len = u32::from_ne_bytes(self.buf[off..off + 4].try_into().unwrap()) as usize;
            let new_seq = base + idx as u32;
            self.buf[off + 8..off + 12].copy_from_slice(&new_seq.to_ne_bytes());
            idx += 1;
            off += align4(len.max(16));
        }
        for (i, ack) in self.acked.iter_mut().enumerate() {
            *ack = base + i as u32;
        }
    }
}

struct NlHdr {
    msg_type: u16,
    flags: u16,
    seq: u32,
}

fn parse_messages(buf: &[u8]) -> Vec<(NlHdr, Vec<u8>)> {
    let mut out = Vec::new();
    let mut off = 0usize;
    while off + 16 <= buf.len() {
        let len = u32::from_ne_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
        if len < 16 || off + len > buf.len() {
            break;
        }
        let msg_type = u16::from_ne_bytes(buf[off + 4..off + 6].try_into().unwrap());
        let flags = u16::from_ne_bytes(buf[off + 6..off + 8].try_into().unwrap());
        let seq = u32::from_ne_bytes(buf[off + 8..off + 12].try_into().unwrap());
        out.push((NlHdr { msg_type, flags, seq }, buf[off + 16..off + len].to_vec()));
        off += align4(len);
    }
    out
}

fn hex_of(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn find_raw_attr<'a>(mut attrs: &'a [u8], wanted: u16) -> Option<&'a [u8]> {
    while attrs.len() >= 4 {
        let len = u16::from_ne_bytes(attrs[0..2].try_into().ok()?) as usize;
        let ty = u16::from_ne_bytes(attrs[2..4].try_into().ok()?) & 0x3FFF;
        if len < 4 || len > attrs.len() {
            return None;
        }
        if ty == wanted {
            return Some(&attrs[4..len]);
        }
        attrs = &attrs[align4(len)..];
    }
    None
}

fn find_string_attr(mut attrs: &[u8], wanted: u16) -> Option<String> {
    while attrs.len() >= 4 {
        let len = u16::from_ne_bytes(attrs[0..2].try_into().ok()?) as usize;
        let ty = u16::from_ne_bytes(attrs[2..4].try_into().ok()?) & 0x3FFF;
        if len < 4 || len > attrs.len() {
            return None;
        }
        if ty == wanted {
            let raw = &attrs[4..len];
            let end = raw.iter().position(|b| *b == 0).unwrap_or(raw.len());
            return Some(String::from_utf8_lossy(&raw[..end]).into_owned());
        }
        attrs = &attrs[align4(len)..];
    }
    None
}

/// Run `f` on a thread joined to the network namespace behind `netns_path`.
///
/// Namespace changes are thread-local, so the caller's netns is untouched.
pub fn with_netns<T: Send + 'static>(
    netns_path: &std::path::Path,
    f: impl FnOnce() -> io::Result<T> + Send + 'static,
) -> io::Result<T> {
    use std::os::unix::ffi::OsStrExt;
    let c = std::ffi::CString::new(netns_path.as_os_str().as_bytes())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "netns path contains NUL"))?;
    let handle = std::thread::spawn(move || -> io::Result<T> {
        let fd = unsafe { libc::open(c.as_ptr(), libc::O_RDONLY | libc::O_CLOEXEC) };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        let rc = unsafe { libc::setns(fd, libc::CLONE_NEWNET) };
        unsafe { libc::close(fd) };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        f()
    });
    handle
        .join()
        .map_err(|_| io::Error::other("netns worker panicked"))?
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_encoding_is_padded_and_typed() {
        let mut out = Vec::new();
        put_str(&mut out, NFTA_TABLE_NAME, "abc");
        // len = 4 header + 4 payload ("abc\0"), already aligned
        assert_eq!(out.len(), 8);
        assert_eq!(u16::from_ne_bytes([out[0], out[1]]), 8);
        assert_eq!(u16::from_ne_bytes([out[2], out[3]]), NFTA_TABLE_NAME);
        assert_eq!(&out[4..8], b"abc\0");

        let mut nested = Vec::new();
        put_nested(&mut nested, NFTA_CHAIN_HOOK, &out);
        assert_eq!(
            u16::from_ne_bytes([nested[2], nested[3]]),
            NFTA_CHAIN_HOOK | NLA_F_NESTED
        );
    }

    #[test]
    fn expressions_have_name_then_data() {
        let e = expr_meta(NFT_META_CGROUP);
        // outer list elem, nested flag set
        assert_eq!(u16::from_ne_bytes([e[2], e[3]]) & 0x3FFF, NFTA_LIST_ELEM);
        let inner = &e[4..];
        assert_eq!(u16::from_ne_bytes([inner[2], inner[3]]), NFTA_EXPR_NAME);
        assert_eq!(&inner[4..8], b"meta");
    }

    #[test]
    fn seq_rewrite_covers_every_message() {
        let mut b = MsgBuilder::new();
        b.push_nft(NFT_MSG_NEWTABLE, NLM_F_CREATE, NFPROTO_INET, &[]);
        b.push_nft(NFT_MSG_NEWCHAIN, NLM_F_CREATE, NFPROTO_INET, &[]);
        b.rewrite_seqs(100);
        assert_eq!(b.acked, vec![100, 101]);
        let msgs = parse_messages(&b.buf);
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].0.seq, 100);
        assert_eq!(msgs[1].0.seq, 101);
    }
}
