//! Synthetic traffic traces and their file formats.
//!
//! A trace is a time-ordered list of packets as they leave end hosts.
//! Generators build per-connection scripts and lay them on a timeline in
//! which connection open/close packets (SYN, FIN, RST and the first packet
//! of a UDP flow) are spaced at least `event_gap` apart. Spacing keeps the
//! order of state-changing packets stable under small queueing delays.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{Read, Write};
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Direction, FlowKey, Protocol, TcpFlags, Time};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: Time,
    /// Wire tuple: for reverse packets the server is the source.
    pub flow: FlowKey,
    pub direction: Direction,
    pub tcp_flags: TcpFlags,
    pub payload_len: u32,
    pub payload_tag: String,
}

impl TraceRecord {
    pub fn client_flow(&self) -> FlowKey {
        self.flow.client_view(self.direction)
    }

    /// Connection open/close packet.
    pub fn is_event(&self) -> bool {
        self.tcp_flags.intersects(TcpFlags::SYN | TcpFlags::FIN | TcpFlags::RST)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a trace file")]
    BadMagic,
    #[error("unsupported trace version {0}")]
    BadVersion(u16),
    #[error("truncated trace")]
    Truncated,
    #[error("record {index}: {msg}")]
    Record { index: usize, msg: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid profile: {0}")]
    Profile(String),
}

/// Traffic shape to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "kebab-case")]
pub enum TraceProfile {
    Empty,
    UniformFlows {
        packets: usize,
        flows: usize,
    },
    HeavyHitter {
        packets: usize,
        flows: usize,
        /// Fraction of flows opened by the single heavy host.
        heavy_share: f64,
    },
    PortscanAttack {
        packets: usize,
        flows: usize,
        scanners: usize,
        probes: usize,
    },
    TrojanEmbedded {
        count: usize,
        #[serde(default)]
        noise_flows: usize,
    },
    Mixed {
        packets: usize,
        flows: usize,
        #[serde(default)]
        scanners: usize,
        #[serde(default)]
        probes: usize,
        #[serde(default)]
        trojans: usize,
        #[serde(default)]
        udp_share: f64,
    },
}

fn default_think() -> Time {
    20_000
}

fn default_duration() -> Time {
    100_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    #[serde(flatten)]
    pub profile: TraceProfile,
    #[serde(default)]
    pub seed: u64,
    /// Minimum spacing between connection open/close packets.
    #[serde(default)]
    pub event_gap: Time,
    /// Mean spacing between consecutive packets of one connection.
    #[serde(default = "default_think")]
    pub mean_think: Time,
    /// Window over which connections start.
    #[serde(default = "default_duration")]
    pub duration: Time,
    /// Offset added to every timestamp.
    #[serde(default)]
    pub start: Time,
}

impl TraceSpec {
    pub fn new(profile: TraceProfile, seed: u64) -> Self {
        TraceSpec {
            profile,
            seed,
            event_gap: 0,
            mean_think: default_think(),
            duration: default_duration(),
            start: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Step {
    flow: FlowKey,
    dir: Direction,
    flags: TcpFlags,
    len: u32,
    tag: String,
    event: bool,
}

#[derive(Clone, Debug)]
struct Script {
    start: Time,
    steps: Vec<Step>,
}

struct Gen {
    rng: ChaCha8Rng,
    think: Time,
    next_port: u16,
}

impl Gen {
    fn sport(&mut self) -> u16 {
        let p = self.next_port;
        self.next_port = if self.next_port == u16::MAX { 10_000 } else { self.next_port + 1 };
        p
    }

    fn data_len(&mut self) -> u32 {
        self.rng.gen_range(64..1400)
    }

    /// TCP connection of exactly `n` packets; `tag` labels the first data
    /// packet.
    fn tcp(&mut self, flow: FlowKey, n: usize, tag: Option<&str>) -> Vec<Step> {
        let mut s = Vec::with_capacity(n);
        let mk = |dir, flags, len, tag: &str, event| Step {
            flow,
            dir,
            flags,
            len,
            tag: tag.to_string(),
            event,
        };
        if n == 0 {
            return s;
        }
        s.push(mk(Direction::Forward, TcpFlags::SYN, 0, "", true));
        if n >= 2 {
            s.push(mk(Direction::Reverse, TcpFlags::SYN | TcpFlags::ACK, 0, "", true));
        }
        let data = n.saturating_sub(4);
        let mut tag = tag;
        for _ in 0..data {
            let dir = if self.rng.gen_bool(0.5) { Direction::Forward } else { Direction::Reverse };
            let dir = if tag.is_some() { Direction::Forward } else { dir };
            let len = self.data_len();
            s.push(mk(dir, TcpFlags::ACK, len, tag.take().unwrap_or(""), false));
        }
        if n >= 3 {
            s.push(mk(Direction::Forward, TcpFlags::FIN | TcpFlags::ACK, 0, "", true));
        }
        if n >= 4 {
            s.push(mk(Direction::Reverse, TcpFlags::FIN | TcpFlags::ACK, 0, "", true));
        }
        s
    }

    fn udp(&mut self, flow: FlowKey, n: usize) -> Vec<Step> {
        (0..n)
            .map(|i| Step {
                flow,
                dir: if i > 0 && self.rng.gen_bool(0.3) { Direction::Reverse } else { Direction::Forward },
                flags: TcpFlags::empty(),
                len: self.data_len(),
                tag: String::new(),
                event: i == 0,
            })
            .collect()
    }

    /// Probes to closed ports, each answered by a reset.
    fn scan(&mut self, host: Ipv4Addr, target: Ipv4Addr, probes: usize) -> Vec<Step> {
        let mut s = Vec::new();
        for i in 0..probes {
            let flow = FlowKey::new(host, target, self.sport(), 1000 + i as u16, Protocol::Tcp);
            s.push(Step {
                flow,
                dir: Direction::Forward,
                flags: TcpFlags::SYN,
                len: 0,
                tag: String::new(),
                event: true,
            });
            s.push(Step {
                flow,
                dir: Direction::Reverse,
                flags: TcpFlags::RST | TcpFlags::ACK,
                len: 0,
                tag: String::new(),
                event: true,
            });
        }
        s
    }

    /// SSH, then HTML/ZIP/EXE over FTP, then IRC, from one host. All five
    /// connections open first so the tagged packets follow each other
    /// closely; the connections close at the end.
    fn trojan(&mut self, host: Ipv4Addr) -> Vec<Step> {
        let parts: [(Ipv4Addr, u16, &str); 5] = [
            (Ipv4Addr::new(52, 1, 0, 1), 22, "ssh"),
            (Ipv4Addr::new(52, 1, 0, 2), 21, "ftp:html"),
            (Ipv4Addr::new(52, 1, 0, 2), 21, "ftp:zip"),
            (Ipv4Addr::new(52, 1, 0, 2), 21, "ftp:exe"),
            (Ipv4Addr::new(52, 1, 0, 3), 6667, "irc"),
        ];
        let conns: Vec<(Vec<Step>, &str)> = parts
            .iter()
            .map(|(dst, port, tag)| {
                let flow = FlowKey::new(host, *dst, self.sport(), *port, Protocol::Tcp);
                (self.tcp(flow, 5, Some(tag)), *tag)
            })
            .collect();
        let mut s = Vec::new();
        for (c, _) in &conns {
            s.extend_from_slice(&c[..2]);
        }
        for (c, _) in &conns {
            s.push(c[2].clone());
        }
        for (c, _) in &conns {
            s.extend_from_slice(&c[3..]);
        }
        s
    }
}

pub const TROJAN_PACKETS: usize = 25;

fn client(i: usize) -> Ipv4Addr {
    Ipv4Addr::new(10, 0, (i / 250) as u8, (i % 250) as u8 + 1)
}

fn server(i: usize) -> (Ipv4Addr, u16) {
    (Ipv4Addr::new(52, 0, 0, (i % 20) as u8 + 1), if i.is_multiple_of(3) { 443 } else { 80 })
}

/// Splits `total` packets over `n` flows as evenly as possible.
fn split(total: usize, n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    (0..n).map(|i| total / n + usize::from(i < total % n)).collect()
}

pub fn generate(spec: &TraceSpec) -> Result<Vec<TraceRecord>, TraceError> {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        think: spec.mean_think.max(1),
        next_port: 10_000,
    };
    let mut scripts: Vec<Vec<Step>> = Vec::new();
    let tcp_flows = |g: &mut Gen, scripts: &mut Vec<Vec<Step>>, sizes: &[usize], host_of: &dyn Fn(usize) -> Ipv4Addr| {
        for (i, n) in sizes.iter().enumerate() {
            let (dst, port) = server(i);
            let flow = FlowKey::new(host_of(i), dst, g.sport(), port, Protocol::Tcp);
            scripts.push(g.tcp(flow, *n, None));
        }
    };
    match &spec.profile {
        TraceProfile::Empty => {}
        TraceProfile::UniformFlows { packets, flows } => {
            let sizes = split(*packets, *flows);
            tcp_flows(&mut g, &mut scripts, &sizes, &client);
        }
        TraceProfile::HeavyHitter {
            packets,
            flows,
            heavy_share,
        } => {
            if !(0.0..=1.0).contains(heavy_share) {
                return Err(TraceError::Profile("heavy_share must be within [0, 1]".into()));
            }
            let sizes = split(*packets, *flows);
            let heavy = (*flows as f64 * heavy_share).round() as usize;
            tcp_flows(&mut g, &mut scripts, &sizes, &|i| if i < heavy { client(0) } else { client(i) });
        }
        TraceProfile::PortscanAttack {
            packets,
            flows,
            scanners,
            probes,
        } => {
            let scan_pkts = scanners * probes * 2;
            if scan_pkts > *packets {
                return Err(TraceError::Profile("scan probes exceed the packet budget".into()));
            }
            for s in 0..*scanners {
                let host = Ipv4Addr::new(10, 9, 0, s as u8 + 1);
                scripts.push(g.scan(host, Ipv4Addr::new(52, 0, 0, 1), *probes));
            }
            let sizes = split(packets - scan_pkts, *flows);
            tcp_flows(&mut g, &mut scripts, &sizes, &client);
        }
        TraceProfile::TrojanEmbedded { count, noise_flows } => {
            for k in 0..*count {
                scripts.push(g.trojan(Ipv4Addr::new(10, 1, (k / 250) as u8, (k % 250) as u8 + 1)));
            }
            let sizes = vec![6; *noise_flows];
            tcp_flows(&mut g, &mut scripts, &sizes, &client);
        }
        TraceProfile::Mixed {
            packets,
            flows,
            scanners,
            probes,
            trojans,
            udp_share,
        } => {
            let fixed = scanners * probes * 2 + trojans * TROJAN_PACKETS;
            if fixed > *packets {
                return Err(TraceError::Profile("scanners and trojans exceed the packet budget".into()));
            }
            for s in 0..*scanners {
                let host = Ipv4Addr::new(10, 9, 0, s as u8 + 1);
                scripts.push(g.scan(host, Ipv4Addr::new(52, 0, 0, 1), *probes));
            }
            for k in 0..*trojans {
                scripts.push(g.trojan(Ipv4Addr::new(10, 1, 0, k as u8 + 1)));
            }
            let sizes = split(packets - fixed, *flows);
            let udp = (*flows as f64 * udp_share.clamp(0.0, 1.0)).round() as usize;
            for (i, n) in sizes.iter().enumerate() {
                let (dst, port) = server(i);
                if i < udp {
                    let flow = FlowKey::new(client(i), dst, g.sport(), 53, Protocol::Udp);
                    scripts.push(g.udp(flow, *n));
                } else {
                    let flow = FlowKey::new(client(i), dst, g.sport(), port, Protocol::Tcp);
                    scripts.push(g.tcp(flow, *n, None));
                }
            }
        }
    }
    let mut placed = Vec::new();
    for steps in scripts {
        let start = g.rng.gen_range(0..spec.duration.max(1));
        placed.push(Script { start, steps });
    }
    Ok(lay_out(placed, spec, &mut g))
}

/// Assigns times: steps of one script follow each other after a random
/// think time; events additionally keep `event_gap` from the previous event.
fn lay_out(scripts: Vec<Script>, spec: &TraceSpec, g: &mut Gen) -> Vec<TraceRecord> {
    let mut heap = BinaryHeap::new();
    for (i, s) in scripts.iter().enumerate() {
        if !s.steps.is_empty() {
            heap.push(Reverse((s.start, i, 0usize)));
        }
    }
    let mut out: Vec<(Time, usize, TraceRecord)> = Vec::new();
    let mut last_event: Option<Time> = None;
    let mut seq = 0usize;
    while let Some(Reverse((desired, si, step))) = heap.pop() {
        let st = &scripts[si].steps[step];
        let mut t = desired;
        if st.event {
            if let Some(le) = last_event {
                t = t.max(le + spec.event_gap);
            }
            last_event = Some(t);
        }
        out.push((
            t,
            seq,
            TraceRecord {
                time: spec.start + t,
                flow: match st.dir {
                    Direction::Forward => st.flow,
                    Direction::Reverse => st.flow.reversed(),
                },
                direction: st.dir,
                tcp_flags: st.flags,
                payload_len: st.len,
                payload_tag: st.tag.clone(),
            },
        ));
        seq += 1;
        if step + 1 < scripts[si].steps.len() {
            let think = g.rng.gen_range(g.think / 2..=g.think + g.think / 2).max(1);
            heap.push(Reverse((t + think, si, step + 1)));
        }
    }
    out.sort_by_key(|(t, s, _)| (*t, *s));
    out.into_iter().map(|(_, _, r)| r).collect()
}

/// Packets per client-view flow.
pub fn flow_load(records: &[TraceRecord]) -> BTreeMap<FlowKey, u64> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.client_flow()).or_insert(0) += 1;
    }
    m
}

/// Hosts whose packets, in trace order, contain a complete signature.
pub fn embedded_signatures(records: &[TraceRecord]) -> Vec<Ipv4Addr> {
    let mut first: BTreeMap<Ipv4Addr, BTreeMap<&str, usize>> = BTreeMap::new();
    let mut last_irc: BTreeMap<Ipv4Addr, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let host = r.client_flow().src_ip;
        match r.payload_tag.to_ascii_lowercase().as_str() {
            "ssh" => {
                first.entry(host).or_default().entry("ssh").or_insert(i);
            }
            "ftp:html" => {
                first.entry(host).or_default().entry("html").or_insert(i);
            }
            "ftp:zip" => {
                first.entry(host).or_default().entry("zip").or_insert(i);
            }
            "ftp:exe" => {
                first.entry(host).or_default().entry("exe").or_insert(i);
            }
            "irc" => {
                last_irc.insert(host, i);
            }
            _ => {}
        }
    }
    first
        .iter()
        .filter(|(h, m)| {
            let (Some(ssh), Some(irc)) = (m.get("ssh"), last_irc.get(h)) else {
                return false;
            };
            ["html", "zip", "exe"].iter().all(|d| m.get(d).is_some_and(|t| ssh < t && t < irc))
        })
        .map(|(h, _)| *h)
        .collect()
}

const MAGIC: &[u8; 4] = b"CHCT";
const VERSION: u16 = 1;

pub fn encode(records: &[TraceRecord]) -> Vec<u8> {
    let mut b = Vec::with_capacity(16 + records.len() * 40);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_be_bytes());
    b.extend_from_slice(&(records.len() as u64).to_be_bytes());
    for r in records {
        b.extend_from_slice(&r.time.to_be_bytes());
        b.extend_from_slice(&r.flow.src_ip.octets());
        b.extend_from_slice(&r.flow.dst_ip.octets());
        b.extend_from_slice(&r.flow.src_port.to_be_bytes());
        b.extend_from_slice(&r.flow.dst_port.to_be_bytes());
        b.push(r.flow.proto.number());
        b.push(match r.direction {
            Direction::Forward => 0,
            Direction::Reverse => 1,
        });
        b.push(r.tcp_flags.bits());
        b.extend_from_slice(&r.payload_len.to_be_bytes());
        b.extend_from_slice(&(r.payload_tag.len() as u16).to_be_bytes());
        b.extend_from_slice(r.payload_tag.as_bytes());
    }
    b
}

pub fn decode(buf: &[u8]) -> Result<Vec<TraceRecord>, TraceError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], TraceError> {
        let s = buf.get(pos..pos + n).ok_or(TraceError::Truncated)?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(TraceError::BadMagic);
    }
    let version = u16::from_be_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(TraceError::BadVersion(version));
    }
    let count = u64::from_be_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let time = u64::from_be_bytes(take(8)?.try_into().unwrap());
        let src: [u8; 4] = take(4)?.try_into().unwrap();
        let dst: [u8; 4] = take(4)?.try_into().unwrap();
        let sport = u16::from_be_bytes(take(2)?.try_into().unwrap());
        let dport = u16::from_be_bytes(take(2)?.try_into().unwrap());
        let head = take(3)?;
        let (proto, dir, flags) = (head[0], head[1], head[2]);
        let len = u32::from_be_bytes(take(4)?.try_into().unwrap());
        let tlen = u16::from_be_bytes(take(2)?.try_into().unwrap()) as usize;
        let tag = String::from_utf8(take(tlen)?.to_vec()).map_err(|_| TraceError::Record {
            index,
            msg: "payload tag is not utf-8".into(),
        })?;
        let proto = Protocol::from_number(proto).ok_or_else(|| TraceError::Record {
            index,
            msg: format!("unknown protocol {proto}"),
        })?;
        let direction = match dir {
            0 => Direction::Forward,
            1 => Direction::Reverse,
            d => {
                return Err(TraceError::Record {
                    index,
                    msg: format!("bad direction {d}"),
                })
            }
        };
        out.push(TraceRecord {
            time,
            flow: FlowKey::new(src.into(), dst.into(), sport, dport, proto),
            direction,
            tcp_flags: TcpFlags::from_bits_truncate(flags),
            payload_len: len,
            payload_tag: tag,
        });
    }
    if pos != buf.len() {
        return Err(TraceError::Truncated);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    time: Time,
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    proto: String,
    direction: String,
    flags: String,
    payload_len: u32,
    payload_tag: String,
}

fn flags_text(f: TcpFlags) -> String {
    let mut s = String::new();
    for (flag, c) in [(TcpFlags::SYN, 'S'), (TcpFlags::ACK, 'A'), (TcpFlags::FIN, 'F'), (TcpFlags::RST, 'R')] {
        if f.contains(flag) {
            s.push(c);
        }
    }
    s
}

pub fn write_csv<W: Write>(records: &[TraceRecord], w: W) -> Result<(), TraceError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(CsvRow {
            time: r.time,
            src_ip: r.flow.src_ip,
            dst_ip: r.flow.dst_ip,
            src_port: r.flow.src_port,
            dst_port: r.flow.dst_port,
            proto: format!("{:?}", r.flow.proto).to_lowercase(),
            direction: match r.direction {
                Direction::Forward => "forward".into(),
                Direction::Reverse => "reverse".into(),
            },
            flags: flags_text(r.tcp_flags),
            payload_len: r.payload_len,
            payload_tag: r.payload_tag.clone(),
        })?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (index, row) in rd.deserialize::<CsvRow>().enumerate() {
        let row = row?;
        let bad = |msg: String| TraceError::Record { index, msg };
        let proto = match row.proto.as_str() {
            "tcp" => Protocol::Tcp,
            "udp" => Protocol::Udp,
            "icmp" => Protocol::Icmp,
            p => return Err(bad(format!("unknown protocol {p}"))),
        };
        let direction = match row.direction.as_str() {
            "forward" => Direction::Forward,
            "reverse" => Direction::Reverse,
            d => return Err(bad(format!("unknown direction {d}"))),
        };
        let mut flags = TcpFlags::empty();
        for c in row.flags.chars() {
            flags |= match c {
                'S' => TcpFlags::SYN,
                'A' => TcpFlags::ACK,
                'F' => TcpFlags::FIN,
                'R' => TcpFlags::RST,
                c => return Err(bad(format!("unknown flag {c}"))),
            };
        }
        out.push(TraceRecord {
            time: row.time,
            flow: FlowKey::new(row.src_ip, row.dst_ip, row.src_port, row.dst_port, proto),
            direction,
            tcp_flags: flags,
            payload_len: row.payload_len,
            payload_tag: row.payload_tag,
        });
    }
    Ok(out)
}

/// Loads a trace, choosing the format by extension (`.csv` or binary).
pub fn load(path: &std::path::Path) -> Result<Vec<TraceRecord>, TraceError> {
    if path.extension().is_some_and(|e| e == "csv") {
        read_csv(std::fs::File::open(path)?)
    } else {
        decode(&std::fs::read(path)?)
    }
}

pub fn save(path: &std::path::Path, records: &[TraceRecord]) -> Result<(), TraceError> {
    if path.extension().is_some_and(|e| e == "csv") {
        write_csv(records, std::fs::File::create(path)?)
    } else {
        std::fs::write(path, encode(records))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(profile: TraceProfile) -> Vec<TraceRecord> {
        generate(&TraceSpec::new(profile, 7)).unwrap()
    }

    #[test]
    fn empty_profile_is_empty() {
        assert!(gen(TraceProfile::Empty).is_empty());
    }

    #[test]
    fn uniform_flows_are_even() {
        let t = gen(TraceProfile::UniformFlows {
            packets: 10_000,
            flows: 500,
        });
        assert_eq!(t.len(), 10_000);
        let load = flow_load(&t);
        assert_eq!(load.len(), 500);
        for n in load.values() {
            assert!((16..=24).contains(n), "{n}");
        }
    }

    #[test]
    fn times_are_sorted_and_syn_first() {
        let t = gen(TraceProfile::Mixed {
            packets: 3000,
            flows: 120,
            scanners: 2,
            probes: 10,
            trojans: 2,
            udp_share: 0.2,
        });
        assert_eq!(t.len(), 3000);
        assert!(t.windows(2).all(|w| w[0].time <= w[1].time));
        let mut seen = std::collections::BTreeSet::new();
        for r in &t {
            let f = r.client_flow();
            if f.proto == Protocol::Tcp && seen.insert(f) {
                assert!(r.tcp_flags.contains(TcpFlags::SYN) && r.direction == Direction::Forward);
            }
        }
    }

    #[test]
    fn events_respect_gap() {
        let mut spec = TraceSpec::new(
            TraceProfile::Mixed {
                packets: 2000,
                flows: 100,
                scanners: 1,
                probes: 5,
                trojans: 1,
                udp_share: 0.1,
            },
            3,
        );
        spec.event_gap = 50_000;
        let t = generate(&spec).unwrap();
        let mut first_udp = std::collections::BTreeSet::new();
        let events: Vec<Time> = t
            .iter()
            .filter(|r| r.is_event() || (r.flow.proto == Protocol::Udp && first_udp.insert(r.client_flow())))
            .map(|r| r.time)
            .collect();
        assert!(events.windows(2).all(|w| w[1] - w[0] >= 50_000));
    }

    #[test]
    fn trojan_embedded_has_exact_count() {
        let t = gen(TraceProfile::TrojanEmbedded {
            count: 11,
            noise_flows: 30,
        });
        assert_eq!(embedded_signatures(&t).len(), 11);
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let t = gen(TraceProfile::Mixed {
            packets: 500,
            flows: 40,
            scanners: 1,
            probes: 3,
            trojans: 1,
            udp_share: 0.3,
        });
        assert_eq!(decode(&encode(&t)).unwrap(), t);
        let mut buf = Vec::new();
        write_csv(&t, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn damaged_binary_is_rejected() {
        let t = gen(TraceProfile::UniformFlows { packets: 10, flows: 2 });
        let b = encode(&t);
        assert!(matches!(decode(&b[..b.len() - 1]), Err(TraceError::Truncated)));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(TraceError::BadMagic)));
    }
}
