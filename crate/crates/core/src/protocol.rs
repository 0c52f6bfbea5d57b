//! Link-layer state machines: emit-time negotiation, heralding attempts and
//! entanglement swapping at the Yb repeater.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{UwMemory, UwParams, YbMemory, YbParams};
use crate::photonic::{
    bsm_collect, classify_clicks, herald_is_genuine, BinSchedule, BsmInput, BsmParams,
    ClassicalChannel, ClickRecord, HeraldOutcome, NodeId, Photon, Provenance, Qfc, QfcParams,
    QuantumChannel,
};
use crate::sim::{check_probability, Handler, RandomSource, SimTime, Simulation, TimeBin};
use crate::state::{Basis, BellLabel, BellState, QuantumManager, QubitId};
use crate::tomography::{basis_for_pair, rate, Tomography};

/// Wavelength shared by all photons at a heterogeneous BSM.
pub const BSM_WAVELENGTH_NM: f64 = 746.0;

const STDERR_RESAMPLES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    YbYb,
    YbUw,
    UwYbUw,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::YbYb => "yb_yb",
            Topology::YbUw => "yb_uw",
            Topology::UwYbUw => "uw_yb_uw",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    pub attenuation_db_per_km: f64,
    pub processing_delay_us: f64,
    /// Fraction of each link's length between its first node and the BSM.
    pub bsm_position: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            attenuation_db_per_km: crate::photonic::DEFAULT_ATTENUATION_DB_PER_KM,
            processing_delay_us: crate::photonic::DEFAULT_PROCESSING_DELAY_US,
            bsm_position: 0.5,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.attenuation_db_per_km.is_finite() && self.attenuation_db_per_km >= 0.0) {
            return Err(Error::invalid("channel.attenuation_db_per_km", "must be non-negative"));
        }
        if !(self.processing_delay_us.is_finite() && self.processing_delay_us >= 0.0) {
            return Err(Error::invalid("channel.processing_delay_us", "must be non-negative"));
        }
        check_probability("channel.bsm_position", self.bsm_position)
    }

    fn quantum(&self, km: f64) -> QuantumChannel {
        QuantumChannel {
            length_km: km,
            attenuation_db_per_km: self.attenuation_db_per_km,
        }
    }

    fn classical(&self, km: f64) -> ClassicalChannel {
        ClassicalChannel {
            distance_km: km,
            processing_delay: SimTime::from_us(self.processing_delay_us),
        }
    }
}

/// Physical description of one network instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub topology: Topology,
    /// Length of each elementary link.
    pub link_distance_km: f64,
    pub yb: YbParams,
    pub uw: UwParams,
    pub qfc: QfcParams,
    pub bsm: BsmParams,
    pub channel: ChannelParams,
}

impl NetworkConfig {
    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            link_distance_km: 1.0,
            yb: YbParams::default(),
            uw: UwParams::default(),
            qfc: QfcParams::default(),
            bsm: BsmParams::default(),
            channel: ChannelParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.link_distance_km.is_finite() && self.link_distance_km > 0.0) {
            return Err(Error::invalid("link_distance_km", "must be positive"));
        }
        self.yb.validate()?;
        self.effective_uw().validate()?;
        self.qfc.validate()?;
        self.bsm.validate()?;
        self.channel.validate()
    }

    /// Transmon parameters with bin timing taken from the Yb side.
    pub fn effective_uw(&self) -> UwParams {
        let mut uw = self.uw.clone();
        uw.inherit_bins(&self.yb);
        uw
    }

    /// Product of the readout fidelities of the two devices measured per pair.
    pub fn measurement_fidelity(&self) -> f64 {
        let (yb, uw) = (self.yb.readout_fidelity, self.uw.readout_fidelity);
        match self.topology {
            Topology::YbYb => yb * yb,
            Topology::YbUw => yb * uw,
            Topology::UwYbUw => uw * uw,
        }
    }
}

/// When to stop a run. Whichever limit is reached first wins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopCondition {
    pub pairs: Option<u64>,
    pub attempts: Option<u64>,
    pub deadline_s: f64,
}

impl Default for StopCondition {
    fn default() -> Self {
        Self {
            pairs: Some(200),
            attempts: None,
            deadline_s: 600.0,
        }
    }
}

impl StopCondition {
    pub fn validate(&self) -> Result<()> {
        if !(self.deadline_s.is_finite() && self.deadline_s > 0.0) {
            return Err(Error::invalid("stop.deadline_s", "must be positive"));
        }
        Ok(())
    }
}

/// Preparation length and the offset from the end of preparation to the
/// start of the early emission bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeTiming {
    pub prep: SimTime,
    pub early_offset: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptSchedule {
    pub prep_start: [SimTime; 2],
    /// Start of each node's early emission bin.
    pub emit_time: [SimTime; 2],
    pub bin_width: SimTime,
    pub bin_separation: SimTime,
    /// Early-bin arrival at the BSM shared by both arms.
    pub bsm_arrival_target: SimTime,
}

impl AttemptSchedule {
    /// Back-computes emission and preparation times from a common arrival.
    pub fn for_target(
        target: SimTime,
        timing: [NodeTiming; 2],
        delays: [SimTime; 2],
        bin_width: SimTime,
        bin_separation: SimTime,
    ) -> Self {
        let emit_time = [target - delays[0], target - delays[1]];
        let prep_start = [
            emit_time[0] - timing[0].early_offset - timing[0].prep,
            emit_time[1] - timing[1].early_offset - timing[1].prep,
        ];
        Self {
            prep_start,
            emit_time,
            bin_width,
            bin_separation,
            bsm_arrival_target: target,
        }
    }

    pub fn bins(&self) -> BinSchedule {
        BinSchedule {
            early_start: self.bsm_arrival_target,
            separation: self.bin_separation,
            width: self.bin_width,
        }
    }
}

/// Earliest common arrival time such that every node can finish preparing
/// after `start` and still emit in time.
pub fn arrival_target(start: SimTime, nodes: impl IntoIterator<Item = (NodeTiming, SimTime)>) -> SimTime {
    let lead = nodes
        .into_iter()
        .map(|(t, delay)| t.prep + t.early_offset + delay)
        .max()
        .unwrap_or(SimTime::ZERO);
    start + lead
}

/// Agreement for one attempt starting no earlier than `start`: the slower
/// node gates the attempt and both early bins reach the BSM together.
pub fn negotiate_schedule(
    start: SimTime,
    timing: [NodeTiming; 2],
    arms: [&QuantumChannel; 2],
    bin_width: SimTime,
    bin_separation: SimTime,
) -> AttemptSchedule {
    let delays = [arms[0].delay(), arms[1].delay()];
    let target = arrival_target(start, [(timing[0], delays[0]), (timing[1], delays[1])]);
    AttemptSchedule::for_target(target, timing, delays, bin_width, bin_separation)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    ScheduleProposal,
    ScheduleAgree,
    Herald(HeraldOutcome),
    SwapOutcome(BellState),
}

/// Classical protocol message, recorded when tracing is on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub sent: SimTime,
    pub delivered: SimTime,
    pub from: NodeId,
    pub to: NodeId,
    pub link: usize,
    pub kind: MessageKind,
}

impl fmt::Display for ProtocolMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:>16} ps  link {}  node {} -> node {}  {:?}  (sent {} ps)",
            self.delivered.as_ps(),
            self.link,
            self.from.0,
            self.to.0,
            self.kind,
            self.sent.as_ps()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntanglementRecord {
    pub pair_id: u64,
    pub nodes: [NodeId; 2],
    pub label: BellLabel,
    pub herald_time: SimTime,
    /// Oracle only: both heralding clicks came from the memories' photons and
    /// no swap was corrupted. Protocol logic never reads it.
    pub true_entanglement: bool,
    /// Time each end waited between its herald and its measurement.
    pub wait: [SimTime; 2],
}

/// Bookkeeping for one swap at the repeater.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapSession {
    pub herald_times: [SimTime; 2],
    pub labels: [BellLabel; 2],
    pub swap_time: SimTime,
    pub outcome: BellState,
    pub corrupted: bool,
}

impl SwapSession {
    /// How long the earlier link waited for the later one.
    pub fn wait(&self) -> SimTime {
        let [a, b] = self.herald_times;
        a.max(b) - a.min(b)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub attempts: u64,
    pub heralds: u64,
    pub failures: u64,
    pub false_positives: u64,
    pub reloads: u64,
    pub losses: u64,
    pub swaps: u64,
    pub swap_corruptions: u64,
    pub transmon_decays: u64,
    /// Largest early-bin arrival mismatch between the two arms.
    pub max_arrival_skew_ps: u64,
    pub total_swap_wait_ps: u64,
}

/// Hardware inventory of an instantiated network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Structure {
    pub bsms: usize,
    pub qfcs: usize,
    pub transducers: usize,
    pub yb_registers: usize,
    pub yb_atoms: usize,
    pub transmons: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub topology: Topology,
    pub seed: u64,
    pub elapsed_s: f64,
    /// Heralded pairs for two-node links, end-to-end pairs after swapping.
    pub pairs: u64,
    pub rate_hz: f64,
    pub fidelity_bound: Option<f64>,
    pub fidelity_stderr: Option<f64>,
    /// Oracle only.
    pub true_fraction: f64,
    pub events: u64,
    pub stats: RunStats,
    pub tomography: Tomography,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub records: Vec<EntanglementRecord>,
    pub messages: Vec<ProtocolMessage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Device {
    Yb { mem: usize, atom: usize },
    Uw { mem: usize },
}

#[derive(Clone, Debug)]
struct LinkEnd {
    device: Device,
    node: NodeId,
    fiber: QuantumChannel,
    notice: ClassicalChannel,
    qfc: Option<Qfc>,
}

#[derive(Clone, Copy, Debug)]
struct Herald {
    label: BellLabel,
    time: SimTime,
    genuine: bool,
}

#[derive(Clone, Debug)]
struct Link {
    ends: [LinkEnd; 2],
    bsm_node: NodeId,
    schedule: Option<AttemptSchedule>,
    in_flight: [Vec<Photon>; 2],
    herald: Option<Herald>,
}

/// Pair being read out by its two ends.
#[derive(Clone, Copy, Debug)]
struct PendingPair {
    record: usize,
    basis: Basis,
    outcomes: [Option<Option<u8>>; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    Negotiated { link: usize },
    CycleStart,
    Emit { link: usize, side: usize },
    Resolve { link: usize },
    HeraldNotice { link: usize, side: usize },
    SwapNotice { end: usize },
}

/// One simulation instance: devices, links and the application on top.
pub struct Network {
    config: NetworkConfig,
    stop: StopCondition,
    qm: QuantumManager,
    yb: Vec<YbMemory>,
    uw: Vec<UwMemory>,
    links: Vec<Link>,
    stats: RunStats,
    tomography: Tomography,
    records: Vec<EntanglementRecord>,
    sessions: Vec<SwapSession>,
    messages: Option<Vec<ProtocolMessage>>,
    negotiated: usize,
    notices_pending: usize,
    cycle_free_at: SimTime,
    attempting: Vec<usize>,
    pending: Option<PendingPair>,
    swap_correction: bool,
    error: Option<Error>,
}

impl Network {
    pub fn new(config: NetworkConfig, stop: StopCondition, trace: bool) -> Result<Self> {
        config.validate()?;
        stop.validate()?;
        let mut qm = QuantumManager::new();
        let uw_params = config.effective_uw();
        let ch = &config.channel;
        let d = config.link_distance_km;
        let arm = [d * ch.bsm_position, d * (1.0 - ch.bsm_position)];
        let qfc_for = |wavelength: f64| Qfc::new(config.qfc.with_input(wavelength));
        let end = |device, node: u32, km: f64, qfc: Option<Qfc>| LinkEnd {
            device,
            node: NodeId(node),
            fiber: ch.quantum(km),
            notice: ch.classical(km),
            qfc,
        };
        let yb_wl = config.yb.emit_wavelength_nm;
        let uw_wl = uw_params.emit_wavelength_nm;

        let mut yb = Vec::new();
        let mut uw = Vec::new();
        let links = match config.topology {
            Topology::YbYb => {
                yb.push(YbMemory::new(config.yb.clone(), NodeId(0), 1, &mut qm));
                yb.push(YbMemory::new(config.yb.clone(), NodeId(1), 1, &mut qm));
                vec![Link::new(
                    [
                        end(Device::Yb { mem: 0, atom: 0 }, 0, arm[0], None),
                        end(Device::Yb { mem: 1, atom: 0 }, 1, arm[1], None),
                    ],
                    NodeId(2),
                )]
            }
            Topology::YbUw => {
                yb.push(YbMemory::new(config.yb.clone(), NodeId(0), 1, &mut qm));
                uw.push(UwMemory::new(uw_params.clone(), NodeId(1), &mut qm));
                vec![Link::new(
                    [
                        end(Device::Yb { mem: 0, atom: 0 }, 0, arm[0], Some(qfc_for(yb_wl))),
                        end(Device::Uw { mem: 0 }, 1, arm[1], Some(qfc_for(uw_wl))),
                    ],
                    NodeId(2),
                )]
            }
            Topology::UwYbUw => {
                uw.push(UwMemory::new(uw_params.clone(), NodeId(0), &mut qm));
                yb.push(YbMemory::new(config.yb.clone(), NodeId(1), 2, &mut qm));
                uw.push(UwMemory::new(uw_params.clone(), NodeId(2), &mut qm));
                // the repeater sits on the inner side of both links
                vec![
                    Link::new(
                        [
                            end(Device::Uw { mem: 0 }, 0, arm[0], Some(qfc_for(uw_wl))),
                            end(Device::Yb { mem: 0, atom: 0 }, 1, arm[1], Some(qfc_for(yb_wl))),
                        ],
                        NodeId(3),
                    ),
                    Link::new(
                        [
                            end(Device::Yb { mem: 0, atom: 1 }, 1, arm[1], Some(qfc_for(yb_wl))),
                            end(Device::Uw { mem: 1 }, 2, arm[0], Some(qfc_for(uw_wl))),
                        ],
                        NodeId(4),
                    ),
                ]
            }
        };
        let m = config.measurement_fidelity();
        Ok(Self {
            config,
            stop,
            qm,
            yb,
            uw,
            links,
            stats: RunStats::default(),
            tomography: Tomography::new(m),
            records: Vec::new(),
            sessions: Vec::new(),
            messages: trace.then(Vec::new),
            negotiated: 0,
            notices_pending: 0,
            cycle_free_at: SimTime::ZERO,
            attempting: Vec::new(),
            pending: None,
            swap_correction: false,
            error: None,
        })
    }

    pub fn structure(&self) -> Structure {
        let qfcs = self
            .links
            .iter()
            .flat_map(|l| l.ends.iter())
            .filter(|e| e.qfc.is_some())
            .count();
        Structure {
            bsms: self.links.len(),
            qfcs,
            transducers: self.uw.len(),
            yb_registers: self.yb.len(),
            yb_atoms: self.yb.iter().map(|m| m.atom_count()).sum(),
            transmons: self.uw.len(),
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Runs to completion with the given seed.
    pub fn run(mut self, seed: u64) -> Result<RunOutcome> {
        let mut sim = Simulation::new(seed);
        for link in 0..self.links.len() {
            self.start_negotiation(&mut sim, link);
        }
        let deadline = SimTime::from_secs(self.stop.deadline_s);
        sim.run_until(deadline, &mut self);
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        let elapsed = sim.now().min(deadline).as_secs();
        let pairs = self.records.len() as u64;
        self.stats.reloads = self.yb.iter().map(|m| m.reloads).sum();
        self.stats.losses = self.yb.iter().map(|m| m.losses).sum();
        self.stats.transmon_decays = self.uw.iter().map(|m| m.decoherence_events).sum();
        let true_pairs = self.records.iter().filter(|r| r.true_entanglement).count();
        let summary = RunSummary {
            topology: self.config.topology,
            seed,
            elapsed_s: elapsed,
            pairs,
            rate_hz: rate(pairs, elapsed)?,
            fidelity_bound: self.tomography.bound(),
            fidelity_stderr: self.tomography.bound_stderr(STDERR_RESAMPLES, seed),
            true_fraction: if pairs == 0 {
                0.0
            } else {
                true_pairs as f64 / pairs as f64
            },
            events: sim.executed(),
            stats: self.stats,
            tomography: self.tomography,
        };
        Ok(RunOutcome {
            summary,
            records: self.records,
            messages: self.messages.unwrap_or_default(),
        })
    }

    fn log(&mut self, sent: SimTime, delivered: SimTime, from: NodeId, to: NodeId, link: usize, kind: MessageKind) {
        if let Some(log) = &mut self.messages {
            log.push(ProtocolMessage {
                sent,
                delivered,
                from,
                to,
                link,
                kind,
            });
        }
    }

    /// Proposal from the first node of the link and the agreement coming back.
    fn start_negotiation(&mut self, sim: &mut Simulation<Event>, link: usize) {
        let [a, b] = [self.links[link].ends[0].node, self.links[link].ends[1].node];
        let channel = self.config.channel.classical(self.config.link_distance_km);
        let now = sim.now();
        let proposal = channel.send(now);
        let agree = channel.send(proposal);
        self.log(now, proposal, a, b, link, MessageKind::ScheduleProposal);
        self.log(proposal, agree, b, a, link, MessageKind::ScheduleAgree);
        sim.schedule(agree, Event::Negotiated { link });
    }

    fn timing(&self, device: Device) -> NodeTiming {
        match device {
            Device::Yb { mem, .. } => NodeTiming {
                prep: self.yb[mem].next_prep_duration(),
                early_offset: self.yb[mem].params.early_bin_offset(),
            },
            Device::Uw { mem } => NodeTiming {
                prep: self.uw[mem].params.prep_time(),
                early_offset: SimTime::ZERO,
            },
        }
    }

    fn qubit(&self, device: Device) -> QubitId {
        match device {
            Device::Yb { mem, atom } => self.yb[mem].qubit(atom),
            Device::Uw { mem } => self.uw[mem].qubit(),
        }
    }

    fn stop_reached(&self) -> bool {
        self.stop.pairs.is_some_and(|n| self.records.len() as u64 >= n)
            || self.stop.attempts.is_some_and(|n| self.stats.attempts >= n)
    }

    fn cycle_start(&mut self, sim: &mut Simulation<Event>) -> Result<()> {
        if self.stop_reached() {
            sim.halt();
            return Ok(());
        }
        let now = sim.now();
        self.attempting = (0..self.links.len())
            .filter(|&l| self.links[l].herald.is_none())
            .collect();
        if self.attempting.is_empty() {
            return Err(Error::Protocol("cycle started with every link holding".into()));
        }
        let bin_width = self.config.yb.bin_width();
        let bin_separation = self.config.yb.bin_separation();

        let mut nodes = Vec::new();
        for &l in &self.attempting {
            for end in &self.links[l].ends {
                nodes.push((self.timing(end.device), end.fiber.delay()));
            }
        }
        // links attempting in the same cycle share one arrival time so the
        // repeater prepares its atoms together
        let target = arrival_target(now, nodes);

        let mut yb_preps: Vec<(usize, Vec<usize>, SimTime)> = Vec::new();
        for &l in &self.attempting.clone() {
            let ends = &self.links[l].ends;
            let timing = [self.timing(ends[0].device), self.timing(ends[1].device)];
            let delays = [ends[0].fiber.delay(), ends[1].fiber.delay()];
            let sched = AttemptSchedule::for_target(target, timing, delays, bin_width, bin_separation);
            for side in 0..2 {
                match ends[side].device {
                    Device::Yb { mem, atom } => match yb_preps.iter_mut().find(|p| p.0 == mem) {
                        Some(entry) => {
                            entry.1.push(atom);
                            entry.2 = entry.2.min(sched.prep_start[side]);
                        }
                        None => yb_preps.push((mem, vec![atom], sched.prep_start[side])),
                    },
                    Device::Uw { mem } => {
                        self.uw[mem].initialize_prep(sched.prep_start[side], &mut self.qm, sim.rng())?;
                    }
                }
                sim.schedule(sched.emit_time[side], Event::Emit { link: l, side });
            }
            sim.schedule(sched.bins().end(), Event::Resolve { link: l });
            self.links[l].schedule = Some(sched);
        }
        for (mem, atoms, start) in yb_preps {
            self.yb[mem].initialize_cool_prep(&atoms, start, &mut self.qm, sim.rng())?;
        }
        self.notices_pending = 2 * self.attempting.len();
        self.cycle_free_at = now;
        Ok(())
    }

    fn emit(&mut self, sim: &mut Simulation<Event>, link: usize, side: usize) -> Result<()> {
        let now = sim.now();
        let device = self.links[link].ends[side].device;
        let photons = match device {
            Device::Yb { mem, atom } => self.yb[mem]
                .excite(atom, now, &mut self.qm, sim.rng())?
                .into_iter()
                .collect(),
            Device::Uw { mem } => self.uw[mem].excite(now, &mut self.qm, sim.rng())?.photons,
        };
        let fiber = self.links[link].ends[side].fiber;
        let survivors: Vec<Photon> = photons
            .into_iter()
            .filter(|_| fiber.transmit(now, sim.rng()).is_some())
            .collect();
        self.links[link].in_flight[side] = survivors;
        Ok(())
    }

    fn resolve(&mut self, sim: &mut Simulation<Event>, l: usize) -> Result<()> {
        let now = sim.now();
        let sched = self.links[l]
            .schedule
            .ok_or_else(|| Error::Protocol("resolve without a schedule".into()))?;
        let bins = sched.bins();
        let mut inputs = Vec::new();
        let mut arrivals = [SimTime::ZERO; 2];
        for side in 0..2 {
            let photons = std::mem::take(&mut self.links[l].in_flight[side]);
            let end = &self.links[l].ends[side];
            let arrival = sched.emit_time[side] + end.fiber.delay();
            arrivals[side] = arrival;
            let bsm_node = self.links[l].bsm_node;
            let photons = match &mut self.links[l].ends[side].qfc {
                Some(qfc) => qfc.convert(photons, bsm_node, arrival, sim.rng()),
                None => photons,
            };
            for p in photons {
                let bin = match (p.bin, p.source_qubit) {
                    (Some(b), _) => b,
                    (None, Some(q)) => {
                        if sim.rng().chance(self.qm.population_one(q)?) {
                            TimeBin::Early
                        } else {
                            TimeBin::Late
                        }
                    }
                    (None, None) => return Err(Error::Protocol("photon without a bin".into())),
                };
                let offset = match bin {
                    TimeBin::Early => SimTime::ZERO,
                    TimeBin::Late => sched.bin_separation,
                };
                inputs.push(BsmInput {
                    bin,
                    time: arrival + offset,
                    provenance: if p.is_noise {
                        Provenance::Noise
                    } else {
                        Provenance::Signal(p.source)
                    },
                });
            }
        }
        let skew = arrivals[0].max(arrivals[1]) - arrivals[0].min(arrivals[1]);
        self.stats.max_arrival_skew_ps = self.stats.max_arrival_skew_ps.max(skew.as_ps());

        let clicks = bsm_collect(&self.config.bsm, &inputs, &bins, sim.rng());
        let outcome = classify_clicks(&clicks);
        self.stats.attempts += 1;
        match outcome.label() {
            None => self.stats.failures += 1,
            Some(label) => {
                self.stats.heralds += 1;
                let genuine = herald_is_genuine(&clicks);
                self.update_memories(sim.rng(), l, label, genuine, &clicks)?;
                self.links[l].herald = Some(Herald {
                    label,
                    time: now,
                    genuine,
                });
                if self.config.topology != Topology::UwYbUw {
                    self.open_pair(l, label, now, genuine);
                }
            }
        }
        let bsm_node = self.links[l].bsm_node;
        for side in 0..2 {
            let end = &self.links[l].ends[side];
            let (to, at) = (end.node, end.notice.send(now));
            self.log(now, at, bsm_node, to, l, MessageKind::Herald(outcome));
            sim.schedule(at, Event::HeraldNotice { link: l, side });
        }
        Ok(())
    }

    /// Genuine heralds project the two memories onto the heralded Bell state;
    /// false positives leave each memory collapsed in Z, consistent with the
    /// bin its own photon was detected in when it was.
    fn update_memories(
        &mut self,
        rng: &mut RandomSource,
        l: usize,
        label: BellLabel,
        genuine: bool,
        clicks: &[ClickRecord],
    ) -> Result<()> {
        let q = [
            self.qubit(self.links[l].ends[0].device),
            self.qubit(self.links[l].ends[1].device),
        ];
        if genuine {
            self.qm.herald_merge(q[0], q[1], label)?;
            return Ok(());
        }
        self.stats.false_positives += 1;
        for side in 0..2 {
            let node = self.links[l].ends[side].node;
            let key = self.qm.isolate(q[side], rng)?;
            let seen = clicks.iter().find(|c| c.provenance == Provenance::Signal(node));
            match seen {
                Some(click) => {
                    let one = Complex64::new(1.0, 0.0);
                    let zero = Complex64::new(0.0, 0.0);
                    let amps = match click.bin {
                        TimeBin::Early => [zero, one],
                        TimeBin::Late => [one, zero],
                    };
                    self.qm.set_single(key, amps)?;
                }
                None => {
                    self.qm.measure(key, q[side], Basis::Z, rng)?;
                }
            }
        }
        Ok(())
    }

    fn open_pair(&mut self, l: usize, label: BellLabel, time: SimTime, genuine: bool) {
        let pair_id = self.records.len() as u64;
        self.records.push(EntanglementRecord {
            pair_id,
            nodes: [self.links[l].ends[0].node, self.links[l].ends[1].node],
            label,
            herald_time: time,
            true_entanglement: genuine,
            wait: [SimTime::ZERO; 2],
        });
        self.pending = Some(PendingPair {
            record: pair_id as usize,
            basis: basis_for_pair(pair_id),
            outcomes: [None, None],
        });
    }

    /// Device readout; `None` if the Yb atom is gone.
    fn read(&mut self, device: Device, basis: Basis, now: SimTime, rng: &mut RandomSource) -> Result<(Option<u8>, SimTime)> {
        match device {
            Device::Yb { mem, atom } => {
                let m = &mut self.yb[mem];
                let bit = m.readout(atom, basis, &mut self.qm, rng)?;
                Ok((bit, m.params.readout_time()))
            }
            Device::Uw { mem } => {
                let m = &mut self.uw[mem];
                let bit = m.readout(basis, now, &mut self.qm, rng)?;
                Ok((Some(bit), m.params.readout_time()))
            }
        }
    }

    fn record_outcome(&mut self, side: usize, outcome: Option<u8>, now: SimTime) -> Result<()> {
        let mut pair = self
            .pending
            .ok_or_else(|| Error::Protocol("measurement without a pending pair".into()))?;
        pair.outcomes[side] = Some(outcome);
        let rec = &mut self.records[pair.record];
        rec.wait[side] = now.saturating_sub(rec.herald_time);
        let label = rec.label;
        match pair.outcomes {
            [Some(a), Some(b)] => {
                self.pending = None;
                match (a, b) {
                    (Some(a), Some(b)) => self.tomography.record(label, pair.basis, a, b),
                    _ => self.tomography.discarded += 1,
                }
            }
            _ => self.pending = Some(pair),
        }
        Ok(())
    }

    fn herald_notice(&mut self, sim: &mut Simulation<Event>, l: usize, side: usize) -> Result<()> {
        let now = sim.now();
        let two_node = self.config.topology != Topology::UwYbUw;
        if two_node && self.links[l].herald.is_some() {
            let basis = self.pending.map(|p| p.basis).unwrap_or(Basis::Z);
            let device = self.links[l].ends[side].device;
            let (bit, busy) = self.read(device, basis, now, sim.rng())?;
            self.record_outcome(side, bit, now)?;
            self.cycle_free_at = self.cycle_free_at.max(now + busy);
        } else {
            self.cycle_free_at = self.cycle_free_at.max(now);
        }
        self.notices_pending -= 1;
        if self.notices_pending > 0 {
            return Ok(());
        }
        if two_node {
            self.links[l].herald = None;
        } else if self.links.iter().all(|link| link.herald.is_some()) {
            self.swap(sim)?;
        }
        sim.schedule(self.cycle_free_at, Event::CycleStart);
        Ok(())
    }

    /// Bell measurement of the two repeater atoms once both links are known
    /// to be heralded. The ends measure as soon as they hear of the swap; the
    /// repeater stays busy for its own readout.
    fn swap(&mut self, sim: &mut Simulation<Event>) -> Result<()> {
        let now = sim.now();
        let heralds = [
            self.links[0].herald.take().expect("checked"),
            self.links[1].herald.take().expect("checked"),
        ];
        let (mem, atoms) = match (self.links[0].ends[1].device, self.links[1].ends[0].device) {
            (Device::Yb { mem, atom: a }, Device::Yb { atom: b, .. }) => (mem, [a, b]),
            _ => return Err(Error::Protocol("repeater must be a Yb register".into())),
        };
        let repeater = &mut self.yb[mem];
        repeater.set_heralded(atoms[0], true);
        repeater.set_heralded(atoms[1], true);
        let out = repeater.swap(atoms[0], atoms[1], &mut self.qm, sim.rng())?;
        let busy = repeater.params.readout_time();
        let e2e = BellState::compose(heralds[0].label.as_bell(), out.measured, heralds[1].label.as_bell());
        self.swap_correction = !e2e.x;
        let label = if e2e.z {
            BellLabel::PsiMinus
        } else {
            BellLabel::PsiPlus
        };
        let session = SwapSession {
            herald_times: [heralds[0].time, heralds[1].time],
            labels: [heralds[0].label, heralds[1].label],
            swap_time: now,
            outcome: out.measured,
            corrupted: out.corrupted,
        };
        self.stats.swaps += 1;
        self.stats.swap_corruptions += out.corrupted as u64;
        self.stats.total_swap_wait_ps += session.wait().as_ps();
        self.sessions.push(session);

        let pair_id = self.records.len() as u64;
        self.records.push(EntanglementRecord {
            pair_id,
            nodes: [self.links[0].ends[0].node, self.links[1].ends[1].node],
            label,
            herald_time: heralds[0].time.max(heralds[1].time),
            true_entanglement: heralds[0].genuine && heralds[1].genuine && !out.corrupted,
            wait: [SimTime::ZERO; 2],
        });
        self.pending = Some(PendingPair {
            record: pair_id as usize,
            basis: basis_for_pair(pair_id),
            outcomes: [None, None],
        });
        let from = self.links[0].ends[1].node;
        let channel = self.config.channel.classical(self.config.link_distance_km);
        let at = channel.send(now);
        for (end, link) in [(0usize, 0usize), (1, 1)] {
            let to = self.links[link].ends[if end == 0 { 0 } else { 1 }].node;
            self.log(now, at, from, to, link, MessageKind::SwapOutcome(out.measured));
            sim.schedule(at, Event::SwapNotice { end });
        }
        self.cycle_free_at = self.cycle_free_at.max(now + busy);
        Ok(())
    }

    fn swap_notice(&mut self, sim: &mut Simulation<Event>, end: usize) -> Result<()> {
        let now = sim.now();
        let basis = self
            .pending
            .map(|p| p.basis)
            .ok_or_else(|| Error::Protocol("swap notice without a pending pair".into()))?;
        let m = &mut self.uw[end];
        m.settle(now, &mut self.qm, sim.rng())?;
        if end == 1 && self.swap_correction {
            m.correct_x(&mut self.qm)?;
        }
        let bit = m.readout(basis, now, &mut self.qm, sim.rng())?;
        self.record_outcome(end, Some(bit), now)?;
        // end-to-end waits are measured from the earlier link's herald
        if let Some(session) = self.sessions.last() {
            let rec = self.records.last_mut().expect("pending pair has a record");
            rec.wait[end] = now - session.herald_times[end];
        }
        Ok(())
    }

    fn dispatch(&mut self, sim: &mut Simulation<Event>, event: Event) -> Result<()> {
        match event {
            Event::Negotiated { .. } => {
                self.negotiated += 1;
                if self.negotiated == self.links.len() {
                    sim.schedule(sim.now(), Event::CycleStart);
                }
                Ok(())
            }
            Event::CycleStart => self.cycle_start(sim),
            Event::Emit { link, side } => self.emit(sim, link, side),
            Event::Resolve { link } => self.resolve(sim, link),
            Event::HeraldNotice { link, side } => self.herald_notice(sim, link, side),
            Event::SwapNotice { end } => self.swap_notice(sim, end),
        }
    }
}

impl Link {
    fn new(ends: [LinkEnd; 2], bsm_node: NodeId) -> Self {
        Self {
            ends,
            bsm_node,
            schedule: None,
            in_flight: [Vec::new(), Vec::new()],
            herald: None,
        }
    }
}

impl Handler<Event> for Network {
    fn handle(&mut self, sim: &mut Simulation<Event>, event: Event) {
        if let Err(e) = self.dispatch(sim, event) {
            self.error = Some(e);
            sim.halt();
        }
    }
}

/// Builds and runs one instance.
pub fn run(config: &NetworkConfig, stop: &StopCondition, seed: u64, trace: bool) -> Result<RunOutcome> {
    Network::new(config.clone(), stop.clone(), trace)?.run(seed)
}
