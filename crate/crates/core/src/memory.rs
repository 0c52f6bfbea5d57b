//! Matter-qubit memories: the Yb neutral-atom register and the transmon with
//! its microwave-optical transducer.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photonic::{NodeId, Photon};
use crate::sim::{check_probability, RandomSource, SimTime};
use crate::state::{Basis, QuantumManager, QubitId, StateKey};

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive, got {v}")))
    }
}

/// Yb device parameters. Times carry their unit in the field name.
///
/// `excite_pulse_time_ns` is read off the pulse diagram and is approximate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct YbParams {
    pub reload_time_ms: f64,
    pub attempts_per_reload: u32,
    pub initialize_time_us: f64,
    pub init_loss_prob: f64,
    pub cooling_time_ms: f64,
    pub state_prep_time_us: f64,
    pub bin_width_ns: f64,
    pub bin_separation_us: f64,
    pub excite_pulse_time_ns: f64,
    pub raman_pi_time_us: f64,
    pub post_excite_delay_us: f64,
    pub branch_emit: f64,
    pub branch_ground: f64,
    pub branch_lost: f64,
    pub state_lifetime_ns: f64,
    pub photon_collection_efficiency: f64,
    pub emit_wavelength_nm: f64,
    pub swap_fidelity: f64,
    pub readout_time_ms: f64,
    pub readout_fidelity: f64,
}

impl Default for YbParams {
    fn default() -> Self {
        Self {
            reload_time_ms: 500.0,
            attempts_per_reload: 128,
            initialize_time_us: 51.4,
            init_loss_prob: 0.03,
            cooling_time_ms: 1.4,
            state_prep_time_us: 5.3,
            bin_width_ns: 520.0,
            bin_separation_us: 2.8,
            excite_pulse_time_ns: 100.0,
            raman_pi_time_us: 0.7,
            post_excite_delay_us: 2.1,
            branch_emit: 0.64,
            branch_ground: 0.35,
            branch_lost: 0.01,
            state_lifetime_ns: 330.0,
            photon_collection_efficiency: 0.5,
            emit_wavelength_nm: 1389.0,
            swap_fidelity: 0.98,
            readout_time_ms: 37.5,
            readout_fidelity: 0.995,
        }
    }
}

impl YbParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("yb.init_loss_prob", self.init_loss_prob),
            ("yb.branch_emit", self.branch_emit),
            ("yb.branch_ground", self.branch_ground),
            ("yb.branch_lost", self.branch_lost),
            ("yb.photon_collection_efficiency", self.photon_collection_efficiency),
            ("yb.swap_fidelity", self.swap_fidelity),
            ("yb.readout_fidelity", self.readout_fidelity),
        ] {
            check_probability(name, p)?;
        }
        let branches = self.branch_emit + self.branch_ground + self.branch_lost;
        if (branches - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "yb.branch_emit",
                format!("branch ratios must sum to 1, got {branches}"),
            ));
        }
        for (name, v) in [
            ("yb.reload_time_ms", self.reload_time_ms),
            ("yb.initialize_time_us", self.initialize_time_us),
            ("yb.cooling_time_ms", self.cooling_time_ms),
            ("yb.state_prep_time_us", self.state_prep_time_us),
            ("yb.bin_width_ns", self.bin_width_ns),
            ("yb.bin_separation_us", self.bin_separation_us),
            ("yb.excite_pulse_time_ns", self.excite_pulse_time_ns),
            ("yb.raman_pi_time_us", self.raman_pi_time_us),
            ("yb.post_excite_delay_us", self.post_excite_delay_us),
            ("yb.state_lifetime_ns", self.state_lifetime_ns),
            ("yb.emit_wavelength_nm", self.emit_wavelength_nm),
            ("yb.readout_time_ms", self.readout_time_ms),
        ] {
            check_positive(name, v)?;
        }
        if self.attempts_per_reload == 0 {
            return Err(Error::invalid("yb.attempts_per_reload", "must be at least 1"));
        }
        if self.bin_width() >= self.bin_separation() {
            return Err(Error::invalid(
                "yb.bin_width_ns",
                "time bins must not overlap (width < separation)",
            ));
        }
        Ok(())
    }

    pub fn reload_time(&self) -> SimTime {
        SimTime::from_ms(self.reload_time_ms)
    }

    pub fn bin_width(&self) -> SimTime {
        SimTime::from_ns(self.bin_width_ns)
    }

    pub fn bin_separation(&self) -> SimTime {
        SimTime::from_us(self.bin_separation_us)
    }

    /// Initialization, cooling and state preparation without reload.
    pub fn prep_time(&self) -> SimTime {
        SimTime::from_us(self.initialize_time_us)
            + SimTime::from_ms(self.cooling_time_ms)
            + SimTime::from_us(self.state_prep_time_us)
    }

    /// Offset from the start of generation to the start of the early bin.
    pub fn early_bin_offset(&self) -> SimTime {
        SimTime::from_ns(self.excite_pulse_time_ns)
    }

    /// Early pulse, bin separation, late bin.
    pub fn generation_time(&self) -> SimTime {
        self.early_bin_offset() + self.bin_separation() + self.bin_width()
    }

    /// Probability that the excited state has not decayed by the end of the bin.
    pub fn late_decay_prob(&self) -> f64 {
        (-self.bin_width_ns / self.state_lifetime_ns).exp()
    }

    pub fn in_bin_emission_prob(&self) -> f64 {
        1.0 - self.late_decay_prob()
    }

    pub fn readout_time(&self) -> SimTime {
        SimTime::from_ms(self.readout_time_ms)
    }

    /// Probability that a trapped, prepared atom puts a 1389 nm photon into
    /// the fiber on one attempt.
    pub fn fiber_entry_prob(&self) -> f64 {
        self.branch_emit * self.in_bin_emission_prob() * self.photon_collection_efficiency
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AtomStatus {
    /// In the tweezer, qubit state held by the quantum manager.
    Trapped,
    /// Decayed to |g⟩ through the non-telecom branch; trapped, qubit lost.
    Ground,
    /// Out of the trap until the next reload.
    Lost,
}

#[derive(Clone, Debug)]
struct Atom {
    qubit: QubitId,
    status: AtomStatus,
    heralded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrepResult {
    pub ready_time: SimTime,
    pub reloaded: bool,
    /// Any prepared atom is lost after this step.
    pub lost: bool,
}

/// Outcome of the decay after a telecom excitation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayBranch {
    Emit,
    Ground,
    Lost,
}

/// Outcome of a Bell measurement inside the register.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwapOutcome {
    pub measured: crate::state::BellState,
    /// The resulting pair was replaced by an uncorrelated product pair.
    pub corrupted: bool,
}

/// A Yb tweezer register: one or more atoms sharing one reload clock.
#[derive(Clone, Debug)]
pub struct YbMemory {
    pub params: YbParams,
    pub node: NodeId,
    atoms: Vec<Atom>,
    attempts_since_reload: u64,
    pub reloads: u64,
    pub losses: u64,
}

impl YbMemory {
    pub fn new(params: YbParams, node: NodeId, atoms: usize, qm: &mut QuantumManager) -> Self {
        let atoms = (0..atoms)
            .map(|_| Atom {
                qubit: qm.new_qubit(),
                // the first attempt always reloads
                status: AtomStatus::Lost,
                heralded: false,
            })
            .collect();
        Self {
            params,
            node,
            atoms,
            attempts_since_reload: 0,
            reloads: 0,
            losses: 0,
        }
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn qubit(&self, atom: usize) -> QubitId {
        self.atoms[atom].qubit
    }

    pub fn status(&self, atom: usize) -> AtomStatus {
        self.atoms[atom].status
    }

    /// Zero while the atom is lost.
    pub fn emission_efficiency(&self, atom: usize) -> f64 {
        match self.atoms[atom].status {
            AtomStatus::Lost => 0.0,
            _ => self.params.photon_collection_efficiency,
        }
    }

    pub fn attempts_since_reload(&self) -> u64 {
        self.attempts_since_reload
    }

    /// Whether the next call to `initialize_cool_prep` pays the reload.
    pub fn reload_due(&self) -> bool {
        self.attempts_since_reload % u64::from(self.params.attempts_per_reload) == 0
    }

    /// Duration of the next preparation, known before it runs.
    pub fn next_prep_duration(&self) -> SimTime {
        let base = self.params.prep_time();
        if self.reload_due() {
            base + self.params.reload_time()
        } else {
            base
        }
    }

    pub fn set_heralded(&mut self, atom: usize, heralded: bool) {
        self.atoms[atom].heralded = heralded;
    }

    pub fn is_heralded(&self, atom: usize) -> bool {
        self.atoms[atom].heralded
    }

    /// Reset (when due), initialization, cooling and state preparation for the
    /// listed atoms. Advances the shared attempt counter once.
    pub fn initialize_cool_prep(
        &mut self,
        atoms: &[usize],
        start: SimTime,
        qm: &mut QuantumManager,
        rng: &mut RandomSource,
    ) -> Result<PrepResult> {
        let reloaded = self.reload_due();
        let mut elapsed = SimTime::ZERO;
        if reloaded {
            elapsed += self.params.reload_time();
            self.reloads += 1;
            for atom in &mut self.atoms {
                if atom.status == AtomStatus::Lost {
                    atom.status = AtomStatus::Trapped;
                }
            }
        }
        elapsed += self.params.prep_time();
        let mut lost = false;
        for &i in atoms {
            let atom = &mut self.atoms[i];
            atom.heralded = false;
            if atom.status == AtomStatus::Ground {
                atom.status = AtomStatus::Trapped;
            }
            if atom.status == AtomStatus::Trapped && rng.chance(self.params.init_loss_prob) {
                atom.status = AtomStatus::Lost;
                self.losses += 1;
            }
            lost |= atom.status == AtomStatus::Lost;
            qm.prepare_plus(atom.qubit, rng)?;
        }
        self.attempts_since_reload += 1;
        Ok(PrepResult {
            ready_time: start + elapsed,
            reloaded,
            lost,
        })
    }

    pub fn sample_branch(&self, rng: &mut RandomSource) -> DecayBranch {
        let u = rng.unit();
        if u < self.params.branch_emit {
            DecayBranch::Emit
        } else if u < self.params.branch_emit + self.params.branch_ground {
            DecayBranch::Ground
        } else {
            DecayBranch::Lost
        }
    }

    /// Generation step. Returns the 1389 nm photon that reaches the fiber, if
    /// any, tagged for emission at the start of the early bin.
    pub fn excite(
        &mut self,
        atom: usize,
        early_bin_start: SimTime,
        qm: &mut QuantumManager,
        rng: &mut RandomSource,
    ) -> Result<Option<Photon>> {
        if self.atoms[atom].status != AtomStatus::Trapped {
            return Ok(None);
        }
        match self.sample_branch(rng) {
            DecayBranch::Emit => {}
            DecayBranch::Ground => {
                // the non-telecom photon carries away which-state information
                self.atoms[atom].status = AtomStatus::Ground;
                let key = qm.isolate(self.atoms[atom].qubit, rng)?;
                qm.measure(key, self.atoms[atom].qubit, Basis::Z, rng)?;
                return Ok(None);
            }
            DecayBranch::Lost => {
                self.atoms[atom].status = AtomStatus::Lost;
                self.losses += 1;
                return Ok(None);
            }
        }
        if !rng.chance(self.params.in_bin_emission_prob()) {
            return Ok(None);
        }
        if !rng.chance(self.emission_efficiency(atom)) {
            return Ok(None);
        }
        let q = self.atoms[atom].qubit;
        Ok(Some(Photon::signal(
            self.params.emit_wavelength_nm,
            qm.key_of(q)?,
            q,
            self.node,
            early_bin_start,
        )))
    }

    /// Fluorescence readout in `basis`. `None` when the atom is gone.
    pub fn readout(
        &mut self,
        atom: usize,
        basis: Basis,
        qm: &mut QuantumManager,
        rng: &mut RandomSource,
    ) -> Result<Option<u8>> {
        if self.atoms[atom].status == AtomStatus::Lost {
            return Ok(None);
        }
        let q = self.atoms[atom].qubit;
        let bit = qm.measure(qm.key_of(q)?, q, basis, rng)?;
        Ok(Some(flip(bit, self.params.readout_fidelity, rng)))
    }

    /// Bell measurement of two atoms of this register, merging their remote
    /// partners. With probability `1 − swap_fidelity` the resulting pair is
    /// replaced by an uncorrelated product pair.
    pub fn swap(
        &mut self,
        atom_a: usize,
        atom_b: usize,
        qm: &mut QuantumManager,
        rng: &mut RandomSource,
    ) -> Result<SwapOutcome> {
        if !(self.atoms[atom_a].heralded && self.atoms[atom_b].heralded) {
            return Err(Error::Protocol(
                "swap requested on an atom without a heralded link".into(),
            ));
        }
        let (qa, qb) = (self.atoms[atom_a].qubit, self.atoms[atom_b].qubit);
        let mut partners = Vec::new();
        for q in [qa, qb] {
            for &h in qm.holders(qm.key_of(q)?)? {
                if h != qa && h != qb {
                    partners.push(h);
                }
            }
        }
        let res = qm.bell_measure(qa, qb, rng)?;
        let corrupted = !rng.chance(self.params.swap_fidelity);
        if corrupted {
            for q in partners {
                depolarize(q, qm, rng)?;
            }
        }
        self.atoms[atom_a].heralded = false;
        self.atoms[atom_b].heralded = false;
        Ok(SwapOutcome {
            measured: res.outcome,
            corrupted,
        })
    }
}

/// Replaces `q` by one of |0⟩, |1⟩, |+⟩, |−⟩ at random, breaking any
/// correlation with a partner. The four states average to the identity.
fn depolarize(q: QubitId, qm: &mut QuantumManager, rng: &mut RandomSource) -> Result<()> {
    let key = qm.isolate(q, rng)?;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let amps = match rng.below(4) {
        0 => [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
        1 => [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
        2 => [Complex64::new(h, 0.0), Complex64::new(h, 0.0)],
        _ => [Complex64::new(h, 0.0), Complex64::new(-h, 0.0)],
    };
    qm.set_single(key, amps)
}

fn flip(bit: u8, fidelity: f64, rng: &mut RandomSource) -> u8 {
    if rng.chance(1.0 - fidelity) {
        bit ^ 1
    } else {
        bit
    }
}

/// Transmon parameters. Bin timing is inherited from the Yb partner on
/// heterogeneous links.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UwParams {
    pub initialize_time_us: f64,
    pub pi_pulse_time_ns: f64,
    pub half_pi_pulse_time_ns: f64,
    pub raman_emit_time_ns: f64,
    pub bin_width_ns: f64,
    pub bin_separation_us: f64,
    pub late_pulse_lead_ns: f64,
    pub coherence_time_ms: f64,
    pub transducer_efficiency: f64,
    /// Mean number of noise photons added per transduction.
    pub transducer_noise: f64,
    pub emit_wavelength_nm: f64,
    pub readout_time_ns: f64,
    pub readout_fidelity: f64,
}

impl Default for UwParams {
    fn default() -> Self {
        Self {
            initialize_time_us: 500.0,
            pi_pulse_time_ns: 20.0,
            half_pi_pulse_time_ns: 10.0,
            raman_emit_time_ns: 520.0,
            bin_width_ns: 520.0,
            bin_separation_us: 2.8,
            late_pulse_lead_ns: 40.0,
            coherence_time_ms: 0.5,
            transducer_efficiency: 0.6,
            transducer_noise: 0.047,
            emit_wavelength_nm: 1550.0,
            readout_time_ns: 88.0,
            readout_fidelity: 0.992,
        }
    }
}

impl UwParams {
    pub fn validate(&self) -> Result<()> {
        check_probability("uw.transducer_efficiency", self.transducer_efficiency)?;
        check_probability("uw.readout_fidelity", self.readout_fidelity)?;
        if !(self.transducer_noise.is_finite() && self.transducer_noise >= 0.0) {
            return Err(Error::invalid("uw.transducer_noise", "must be non-negative"));
        }
        for (name, v) in [
            ("uw.initialize_time_us", self.initialize_time_us),
            ("uw.pi_pulse_time_ns", self.pi_pulse_time_ns),
            ("uw.half_pi_pulse_time_ns", self.half_pi_pulse_time_ns),
            ("uw.raman_emit_time_ns", self.raman_emit_time_ns),
            ("uw.bin_width_ns", self.bin_width_ns),
            ("uw.bin_separation_us", self.bin_separation_us),
            ("uw.late_pulse_lead_ns", self.late_pulse_lead_ns),
            ("uw.coherence_time_ms", self.coherence_time_ms),
            ("uw.emit_wavelength_nm", self.emit_wavelength_nm),
            ("uw.readout_time_ns", self.readout_time_ns),
        ] {
            check_positive(name, v)?;
        }
        if self.bin_width() >= self.bin_separation() {
            return Err(Error::invalid(
                "uw.bin_width_ns",
                "time bins must not overlap (width < separation)",
            ));
        }
        Ok(())
    }

    /// Takes the bin width and separation of a Yb partner.
    pub fn inherit_bins(&mut self, yb: &YbParams) {
        self.bin_width_ns = yb.bin_width_ns;
        self.raman_emit_time_ns = yb.bin_width_ns;
        self.bin_separation_us = yb.bin_separation_us;
    }

    pub fn bin_width(&self) -> SimTime {
        SimTime::from_ns(self.bin_width_ns)
    }

    pub fn bin_separation(&self) -> SimTime {
        SimTime::from_us(self.bin_separation_us)
    }

    pub fn coherence_time(&self) -> SimTime {
        SimTime::from_ms(self.coherence_time_ms)
    }

    /// π then π/2 pulse.
    pub fn state_prep_time(&self) -> SimTime {
        SimTime::from_ns(self.pi_pulse_time_ns + self.half_pi_pulse_time_ns)
    }

    pub fn prep_time(&self) -> SimTime {
        SimTime::from_us(self.initialize_time_us) + self.state_prep_time()
    }

    /// Early emission, wait, late emission.
    pub fn generation_time(&self) -> SimTime {
        self.bin_separation() + SimTime::from_ns(self.raman_emit_time_ns)
    }

    /// Relaxation probability of |e⟩ over a time `t`.
    pub fn decay_prob(&self, t: SimTime) -> f64 {
        1.0 - (-(t.as_ps() as f64) / self.coherence_time().as_ps() as f64).exp()
    }

    /// Relaxation of |e⟩ while waiting between early and late pulses.
    pub fn window_decay_prob(&self) -> f64 {
        self.decay_prob(self.bin_separation())
    }

    pub fn readout_time(&self) -> SimTime {
        SimTime::from_ns(self.readout_time_ns)
    }
}

/// Photons produced by one transmon generation step.
#[derive(Clone, Debug, Default)]
pub struct Emission {
    pub photons: Vec<Photon>,
    /// The qubit relaxed during the bin-separation wait.
    pub decohered: bool,
}

/// Microwave-optical conversion: the signal survives with the transducer
/// efficiency and a Poisson number of noise photons joins it, each in a
/// uniformly chosen bin.
pub fn transduce(
    photon: Option<Photon>,
    params: &UwParams,
    node: NodeId,
    now: SimTime,
    rng: &mut RandomSource,
) -> Result<Vec<Photon>> {
    let mut out = Vec::new();
    if let Some(p) = photon {
        if rng.chance(params.transducer_efficiency) {
            out.push(p);
        }
    }
    for _ in 0..rng.poisson(params.transducer_noise)? {
        let bin = rng.uniform_bin();
        out.push(Photon::noise(params.emit_wavelength_nm, node, now, bin));
    }
    Ok(out)
}

/// Transmon memory with lazily applied T1 relaxation.
#[derive(Clone, Debug)]
pub struct UwMemory {
    pub params: UwParams,
    pub node: NodeId,
    qubit: QubitId,
    settled_at: SimTime,
    pub decoherence_events: u64,
}

impl UwMemory {
    pub fn new(params: UwParams, node: NodeId, qm: &mut QuantumManager) -> Self {
        Self {
            params,
            node,
            qubit: qm.new_qubit(),
            settled_at: SimTime::ZERO,
            decoherence_events: 0,
        }
    }

    pub fn qubit(&self) -> QubitId {
        self.qubit
    }

    pub fn key(&self, qm: &QuantumManager) -> Result<StateKey> {
        qm.key_of(self.qubit)
    }

    /// Initialization and preparation of the plus state; returns the ready time.
    pub fn initialize_prep(
        &mut self,
        start: SimTime,
        qm: &mut QuantumManager,
        rng: &mut RandomSource,
    ) -> Result<SimTime> {
        qm.prepare_plus(self.qubit, rng)?;
        let ready = start + self.params.prep_time();
        self.settled_at = ready;
        Ok(ready)
    }

    /// Generation step starting at `early_bin_start`: window relaxation, then a
    /// 1550 nm photon through the transducer.
    pub fn excite(
        &mut self,
        early_bin_start: SimTime,
        qm: &mut QuantumManager,
        rng: &mut RandomSource,
    ) -> Result<Emission> {
        let key = qm.key_of(self.qubit)?;
        let decohered = qm.amplitude_damp(key, self.qubit, self.params.window_decay_prob(), rng)?;
        if decohered {
            self.decoherence_events += 1;
        }
        let photon = Photon::signal(
            self.params.emit_wavelength_nm,
            key,
            self.qubit,
            self.node,
            early_bin_start,
        );
        let photons = transduce(Some(photon), &self.params, self.node, early_bin_start, rng)?;
        self.settled_at = early_bin_start + self.params.generation_time();
        Ok(Emission { photons, decohered })
    }

    /// Applies the relaxation accumulated since the last update.
    pub fn settle(
        &mut self,
        now: SimTime,
        qm: &mut QuantumManager,
        rng: &mut RandomSource,
    ) -> Result<bool> {
        if now <= self.settled_at {
            return Ok(false);
        }
        let p = self.params.decay_prob(now - self.settled_at);
        self.settled_at = now;
        let decayed = qm.amplitude_damp(qm.key_of(self.qubit)?, self.qubit, p, rng)?;
        if decayed {
            self.decoherence_events += 1;
        }
        Ok(decayed)
    }

    pub fn readout(
        &mut self,
        basis: Basis,
        now: SimTime,
        qm: &mut QuantumManager,
        rng: &mut RandomSource,
    ) -> Result<u8> {
        self.settle(now, qm, rng)?;
        let bit = qm.measure(qm.key_of(self.qubit)?, self.qubit, basis, rng)?;
        Ok(flip(bit, self.params.readout_fidelity, rng))
    }

    /// Swap correction: an X on the transmon.
    pub fn correct_x(&mut self, qm: &mut QuantumManager) -> Result<()> {
        qm.apply_x(self.qubit)
    }

    pub fn correction_time(&self) -> SimTime {
        SimTime::from_ns(self.params.pi_pulse_time_ns)
    }
}
