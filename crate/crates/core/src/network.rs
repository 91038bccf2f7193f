//! Simulated peer-to-peer agent network.
//!
//! Agents only talk to their neighbours, one message per directed edge and
//! payload kind per round. A round is a barrier: `exchange` returns only once
//! every message of the round has been delivered.

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};
#[cfg(unix)]
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::C64;

/// Undirected neighbour sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Validates symmetry, absence of self-loops and index ranges; neighbour
    /// lists are sorted.
    pub fn new(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let z = neighbors.len();
        if z == 0 {
            return Err(Error::invalid("a network needs at least one agent"));
        }
        if z > u16::MAX as usize {
            return Err(Error::invalid("too many agents for the wire format"));
        }
        for (a, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&b| b >= z || b == a) {
                return Err(Error::invalid(format!("agent {a} has an invalid neighbour list")));
            }
        }
        for (a, list) in neighbors.iter().enumerate() {
            for &b in list {
                if neighbors[b].binary_search(&a).is_err() {
                    return Err(Error::invalid(format!("edge {a} -> {b} is not symmetric")));
                }
            }
        }
        Ok(Self { neighbors })
    }

    /// Ring of `z` agents; two agents form a single edge.
    pub fn ring(z: usize) -> Result<Self> {
        if z < 2 {
            return Err(Error::invalid("a ring needs at least 2 agents"));
        }
        let neighbors = (0..z)
            .map(|a| {
                let mut v = vec![(a + 1) % z, (a + z - 1) % z];
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        Self::new(neighbors)
    }

    pub fn fully_connected(z: usize) -> Result<Self> {
        Self::new((0..z).map(|a| (0..z).filter(|&b| b != a).collect()).collect())
    }

    /// Agents with no neighbours at all.
    pub fn isolated(z: usize) -> Result<Self> {
        Self::new(vec![Vec::new(); z])
    }

    pub fn num_agents(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, agent: usize) -> &[usize] {
        &self.neighbors[agent]
    }

    pub fn degree(&self, agent: usize) -> usize {
        self.neighbors[agent].len()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// `(from, to)` for every directed edge.
    pub fn directed_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, list)| list.iter().map(move |&b| (a, b)))
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.num_agents()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(a) = queue.pop_front() {
            for &b in &self.neighbors[a] {
                if !seen[b] {
                    seen[b] = true;
                    queue.push_back(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Disjoint wavelength index sets, one per agent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WavelengthPartition {
    blocks: Vec<Vec<usize>>,
}

impl WavelengthPartition {
    pub fn new(blocks: Vec<Vec<usize>>, num_wavelengths: usize) -> Result<Self> {
        let mut seen = vec![false; num_wavelengths];
        for block in &blocks {
            if block.is_empty() {
                return Err(Error::invalid("every agent needs at least one wavelength"));
            }
            for &j in block {
                if j >= num_wavelengths || seen[j] {
                    return Err(Error::invalid(format!("wavelength {j} is out of range or assigned twice")));
                }
                seen[j] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("partition does not cover every wavelength"));
        }
        Ok(Self { blocks })
    }

    /// Contiguous blocks whose sizes differ by at most one, larger blocks first.
    pub fn contiguous(num_wavelengths: usize, agents: usize) -> Result<Self> {
        if agents == 0 || num_wavelengths < agents {
            return Err(Error::invalid(format!(
                "cannot split {num_wavelengths} wavelengths over {agents} agents"
            )));
        }
        let base = num_wavelengths / agents;
        let extra = num_wavelengths % agents;
        let mut start = 0;
        let blocks = (0..agents)
            .map(|a| {
                let len = base + usize::from(a < extra);
                let block: Vec<usize> = (start..start + len).collect();
                start += len;
                block
            })
            .collect();
        Self::new(blocks, num_wavelengths)
    }

    pub fn num_agents(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, agent: usize) -> &[usize] {
        &self.blocks[agent]
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn owner_of(&self, wavelength: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.contains(&wavelength))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum PayloadKind {
    GammaGain = 1,
    GammaDirectional = 2,
}

impl TryFrom<u8> for PayloadKind {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(PayloadKind::GammaGain),
            2 => Ok(PayloadKind::GammaDirectional),
            other => Err(Error::Wire(format!("unknown payload kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub round: u32,
    pub from: u16,
    pub to: u16,
    pub kind: PayloadKind,
    pub payload: Vec<C64>,
}

const HEADER_LEN: usize = 4 + 2 + 2 + 1 + 4;

impl Envelope {
    /// Length-prefixed frame, all integers and floats big-endian:
    /// `len:u32 | round:u32 | from:u16 | to:u16 | kind:u8 | count:u32 | count × (re:f64, im:f64)`.
    pub fn encode(&self) -> Vec<u8> {
        let body = HEADER_LEN + 16 * self.payload.len();
        let mut out = Vec::with_capacity(4 + body);
        out.extend_from_slice(&(body as u32).to_be_bytes());
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&self.from.to_be_bytes());
        out.extend_from_slice(&self.to.to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.re.to_be_bytes());
            out.extend_from_slice(&v.im.to_be_bytes());
        }
        out
    }

    /// Decodes one complete frame (including its length prefix).
    pub fn decode(frame: &[u8]) -> Result<Self> {
        let (len_bytes, body) = frame
            .split_first_chunk::<4>()
            .ok_or_else(|| Error::Wire("frame shorter than its length prefix".into()))?;
        let len = u32::from_be_bytes(*len_bytes) as usize;
        if body.len() != len {
            return Err(Error::Wire(format!("length prefix says {len} bytes, frame has {}", body.len())));
        }
        Self::decode_body(body)
    }

    fn decode_body(body: &[u8]) -> Result<Self> {
        if body.len() < HEADER_LEN {
            return Err(Error::Wire("record shorter than its header".into()));
        }
        let round = u32::from_be_bytes(body[0..4].try_into().unwrap());
        let from = u16::from_be_bytes(body[4..6].try_into().unwrap());
        let to = u16::from_be_bytes(body[6..8].try_into().unwrap());
        let kind = PayloadKind::try_from(body[8])?;
        let count = u32::from_be_bytes(body[9..13].try_into().unwrap()) as usize;
        let rest = &body[HEADER_LEN..];
        if rest.len() != 16 * count {
            return Err(Error::Wire(format!("payload count {count} does not match {} bytes", rest.len())));
        }
        let payload = rest
            .chunks_exact(16)
            .map(|c| {
                C64::new(
                    f64::from_be_bytes(c[..8].try_into().unwrap()),
                    f64::from_be_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect();
        Ok(Self { round, from, to, kind, payload })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut body = vec![0u8; u32::from_be_bytes(len) as usize];
        r.read_exact(&mut body)?;
        Self::decode_body(&body)
    }
}

/// Moves one round of messages between neighbours.
pub trait Transport {
    /// `outgoing` must hold exactly one envelope for every directed edge of
    /// `topology`, all stamped with `round` and `kind`. The result holds, for
    /// each agent, the envelopes addressed to it ordered like its neighbour list.
    fn exchange(
        &mut self,
        topology: &Topology,
        round: u32,
        kind: PayloadKind,
        outgoing: Vec<Envelope>,
    ) -> Result<Vec<Vec<Envelope>>>;
}

fn protocol(round: u32, from: usize, to: usize, reason: impl Into<String>) -> Error {
    Error::Protocol { round, from: from as u16, to: to as u16, reason: reason.into() }
}

/// Checks that `outgoing` covers each directed edge exactly once and returns
/// the envelopes keyed by edge.
fn index_outgoing(
    topology: &Topology,
    round: u32,
    kind: PayloadKind,
    outgoing: Vec<Envelope>,
) -> Result<BTreeMap<(usize, usize), Envelope>> {
    let mut by_edge = BTreeMap::new();
    for env in outgoing {
        let (from, to) = (env.from as usize, env.to as usize);
        if env.round != round || env.kind != kind {
            return Err(protocol(round, from, to, "envelope stamped with the wrong round or kind"));
        }
        if from >= topology.num_agents() || topology.neighbors(from).binary_search(&to).is_err() {
            return Err(protocol(round, from, to, "no such edge"));
        }
        if by_edge.insert((from, to), env).is_some() {
            return Err(protocol(round, from, to, "duplicate message"));
        }
    }
    if let Some((from, to)) = topology.directed_edges().find(|e| !by_edge.contains_key(e)) {
        return Err(protocol(round, from, to, "missing message at barrier"));
    }
    Ok(by_edge)
}

/// Direct hand-off inside one process.
#[derive(Debug, Default)]
pub struct InMemoryTransport {
    delivered: u64,
}

impl InMemoryTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }
}

impl Transport for InMemoryTransport {
    fn exchange(
        &mut self,
        topology: &Topology,
        round: u32,
        kind: PayloadKind,
        outgoing: Vec<Envelope>,
    ) -> Result<Vec<Vec<Envelope>>> {
        let mut by_edge = index_outgoing(topology, round, kind, outgoing)?;
        let mut inbox = Vec::with_capacity(topology.num_agents());
        for to in 0..topology.num_agents() {
            let mut mine = Vec::with_capacity(topology.degree(to));
            for &from in topology.neighbors(to) {
                mine.push(by_edge.remove(&(from, to)).expect("validated"));
            }
            inbox.push(mine);
        }
        self.delivered += inbox.iter().map(Vec::len).sum::<usize>() as u64;
        Ok(inbox)
    }
}

/// Serialises every message through a Unix socket pair per directed edge.
#[cfg(unix)]
pub struct SocketTransport {
    links: BTreeMap<(usize, usize), (std::os::unix::net::UnixStream, std::os::unix::net::UnixStream)>,
    delivered: u64,
}

#[cfg(unix)]
impl SocketTransport {
    pub fn new(topology: &Topology) -> Result<Self> {
        let mut links = BTreeMap::new();
        for edge in topology.directed_edges() {
            let (tx, rx) = std::os::unix::net::UnixStream::pair()?;
            rx.set_read_timeout(Some(Duration::from_secs(10)))?;
            links.insert(edge, (tx, rx));
        }
        Ok(Self { links, delivered: 0 })
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }
}

#[cfg(unix)]
impl Transport for SocketTransport {
    fn exchange(
        &mut self,
        topology: &Topology,
        round: u32,
        kind: PayloadKind,
        outgoing: Vec<Envelope>,
    ) -> Result<Vec<Vec<Envelope>>> {
        let by_edge = index_outgoing(topology, round, kind, outgoing)?;
        for (edge, env) in &by_edge {
            let (tx, _) = self
                .links
                .get_mut(edge)
                .ok_or_else(|| protocol(round, edge.0, edge.1, "transport was built for another topology"))?;
            env.write_to(tx)?;
        }
        let mut inbox = Vec::with_capacity(topology.num_agents());
        for to in 0..topology.num_agents() {
            let mut mine = Vec::with_capacity(topology.degree(to));
            for &from in topology.neighbors(to) {
                let (_, rx) = self.links.get_mut(&(from, to)).expect("validated");
                let env = Envelope::read_from(rx)?;
                if env.round != round || env.kind != kind || (env.from as usize, env.to as usize) != (from, to) {
                    return Err(protocol(round, from, to, "out-of-order message on link"));
                }
                mine.push(env);
            }
            inbox.push(mine);
        }
        self.delivered += by_edge.len() as u64;
        Ok(inbox)
    }
}
