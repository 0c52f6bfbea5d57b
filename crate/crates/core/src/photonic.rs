//! Flying-qubit hardware: photons, fiber, classical links, frequency
//! converters and the time-bin Bell-state measurement.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sim::{check_probability, RandomSource, SimTime, TimeBin};
use crate::state::{BellLabel, QubitId, StateKey};

/// Signal speed in fiber, km per second.
pub const FIBER_SPEED_KM_PER_S: f64 = 2.0e5;
pub const DEFAULT_ATTENUATION_DB_PER_KM: f64 = 0.3;
pub const DEFAULT_PROCESSING_DELAY_US: f64 = 10.0;

/// Wavelengths closer than this are treated as equal.
const WAVELENGTH_TOL_NM: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

/// Propagation delay over `km` of fiber.
pub fn propagation_delay(km: f64) -> SimTime {
    SimTime::from_secs(km / FIBER_SPEED_KM_PER_S)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Photon {
    pub wavelength_nm: f64,
    /// Key of the emitting memory for signal photons, `None` for noise.
    pub state_key: Option<StateKey>,
    pub source_qubit: Option<QubitId>,
    pub is_noise: bool,
    pub emit_time: SimTime,
    pub source: NodeId,
    /// Noise photons are born in a definite bin; signal photons get theirs
    /// from the memory amplitudes at the BSM.
    pub bin: Option<TimeBin>,
}

impl Photon {
    pub fn signal(
        wavelength_nm: f64,
        key: StateKey,
        qubit: QubitId,
        source: NodeId,
        emit_time: SimTime,
    ) -> Self {
        Self {
            wavelength_nm,
            state_key: Some(key),
            source_qubit: Some(qubit),
            is_noise: false,
            emit_time,
            source,
            bin: None,
        }
    }

    pub fn noise(wavelength_nm: f64, source: NodeId, emit_time: SimTime, bin: TimeBin) -> Self {
        Self {
            wavelength_nm,
            state_key: None,
            source_qubit: None,
            is_noise: true,
            emit_time,
            source,
            bin: Some(bin),
        }
    }
}

fn same_wavelength(a: f64, b: f64) -> bool {
    (a - b).abs() < WAVELENGTH_TOL_NM
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantumChannel {
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
}

impl QuantumChannel {
    pub fn new(length_km: f64) -> Self {
        Self {
            length_km,
            attenuation_db_per_km: DEFAULT_ATTENUATION_DB_PER_KM,
        }
    }

    pub fn survival(&self) -> f64 {
        10f64.powf(-self.attenuation_db_per_km * self.length_km / 10.0)
    }

    pub fn delay(&self) -> SimTime {
        propagation_delay(self.length_km)
    }

    /// Returns the arrival time, or `None` if the photon is absorbed.
    pub fn transmit(&self, departure: SimTime, rng: &mut RandomSource) -> Option<SimTime> {
        rng.chance(self.survival()).then(|| departure + self.delay())
    }
}

/// Classical link with latency `d / c + D_processing`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalChannel {
    pub distance_km: f64,
    pub processing_delay: SimTime,
}

impl ClassicalChannel {
    pub fn new(distance_km: f64) -> Self {
        Self {
            distance_km,
            processing_delay: SimTime::from_us(DEFAULT_PROCESSING_DELAY_US),
        }
    }

    pub fn latency(&self) -> SimTime {
        propagation_delay(self.distance_km) + self.processing_delay
    }

    /// Delivery time of a message sent at `now`.
    pub fn send(&self, now: SimTime) -> SimTime {
        now + self.latency()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QfcParams {
    pub efficiency: f64,
    /// Probability of a noise photon in each time bin.
    pub noise_rate: f64,
    pub input_wavelength_nm: f64,
    pub output_wavelength_nm: f64,
}

impl Default for QfcParams {
    fn default() -> Self {
        Self {
            efficiency: 0.99,
            noise_rate: 0.005,
            input_wavelength_nm: 1389.0,
            output_wavelength_nm: 746.0,
        }
    }
}

impl QfcParams {
    pub fn validate(&self) -> Result<()> {
        check_probability("qfc.efficiency", self.efficiency)?;
        check_probability("qfc.noise_rate", self.noise_rate)?;
        Ok(())
    }

    pub fn with_input(&self, input_wavelength_nm: f64) -> Self {
        Self {
            input_wavelength_nm,
            ..self.clone()
        }
    }
}

/// A frequency converter with running counters.
#[derive(Clone, Debug)]
pub struct Qfc {
    pub params: QfcParams,
    pub converted: u64,
    pub failed: u64,
    pub mismatched: u64,
    pub noise_emitted: u64,
}

impl Qfc {
    pub fn new(params: QfcParams) -> Self {
        Self {
            params,
            converted: 0,
            failed: 0,
            mismatched: 0,
            noise_emitted: 0,
        }
    }

    /// Converts `photon` (if any) and adds per-bin noise photons.
    ///
    /// Photons already carrying a bin (noise from upstream) convert with the
    /// same efficiency as signal photons.
    pub fn convert(
        &mut self,
        input: Vec<Photon>,
        source: NodeId,
        now: SimTime,
        rng: &mut RandomSource,
    ) -> Vec<Photon> {
        let p = &self.params;
        let mut out = Vec::with_capacity(input.len() + 2);
        for mut photon in input {
            if !same_wavelength(photon.wavelength_nm, p.input_wavelength_nm) {
                self.mismatched += 1;
                continue;
            }
            if rng.chance(p.efficiency) {
                photon.wavelength_nm = p.output_wavelength_nm;
                self.converted += 1;
                out.push(photon);
            } else {
                self.failed += 1;
            }
        }
        for bin in [TimeBin::Early, TimeBin::Late] {
            if rng.chance(p.noise_rate) {
                self.noise_emitted += 1;
                out.push(Photon::noise(p.output_wavelength_nm, source, now, bin));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BsmParams {
    pub detector_efficiency: f64,
    pub detection_rate_hz: f64,
    pub dark_count_rate_hz: f64,
}

impl Default for BsmParams {
    fn default() -> Self {
        Self {
            detector_efficiency: 0.85,
            detection_rate_hz: 25e6,
            dark_count_rate_hz: 11.0,
        }
    }
}

impl BsmParams {
    pub fn validate(&self) -> Result<()> {
        check_probability("bsm.detector_efficiency", self.detector_efficiency)?;
        if !(self.detection_rate_hz.is_finite() && self.detection_rate_hz > 0.0) {
            return Err(crate::Error::invalid(
                "bsm.detection_rate_hz",
                "must be positive",
            ));
        }
        if !(self.dark_count_rate_hz.is_finite() && self.dark_count_rate_hz >= 0.0) {
            return Err(crate::Error::invalid(
                "bsm.dark_count_rate_hz",
                "must be non-negative",
            ));
        }
        Ok(())
    }

    /// Detector dead time, one over the detection rate.
    pub fn detection_window(&self) -> SimTime {
        SimTime::from_secs(1.0 / self.detection_rate_hz)
    }

    /// Probability of a dark click on one detector during one bin.
    pub fn dark_probability(&self, bin_width: SimTime) -> f64 {
        (self.dark_count_rate_hz * bin_width.as_secs()).min(1.0)
    }
}

/// Early/late bin windows at the BSM for one attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinSchedule {
    pub early_start: SimTime,
    pub separation: SimTime,
    pub width: SimTime,
}

impl BinSchedule {
    pub fn start(&self, bin: TimeBin) -> SimTime {
        match bin {
            TimeBin::Early => self.early_start,
            TimeBin::Late => self.early_start + self.separation,
        }
    }

    pub fn bin_of(&self, t: SimTime) -> Option<TimeBin> {
        [TimeBin::Early, TimeBin::Late]
            .into_iter()
            .find(|&b| t >= self.start(b) && t < self.start(b) + self.width)
    }

    /// End of the late bin, when the attempt can be classified.
    pub fn end(&self) -> SimTime {
        self.start(TimeBin::Late) + self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Signal(NodeId),
    Noise,
    Dark,
}

/// A photon presented to the detectors in a definite bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsmInput {
    pub bin: TimeBin,
    pub time: SimTime,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub detector: u8,
    pub bin: TimeBin,
    pub time: SimTime,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeraldOutcome {
    PsiPlus,
    PsiMinus,
    Failure,
}

impl HeraldOutcome {
    pub fn label(self) -> Option<BellLabel> {
        match self {
            HeraldOutcome::PsiPlus => Some(BellLabel::PsiPlus),
            HeraldOutcome::PsiMinus => Some(BellLabel::PsiMinus),
            HeraldOutcome::Failure => None,
        }
    }
}

/// Detects `inputs` on the two detectors behind the beam splitter and adds
/// dark counts. Each photon is detected with the detector efficiency and
/// routed to either detector with probability ½; a detector ignores anything
/// within one detection window of its previous click.
pub fn bsm_collect(
    params: &BsmParams,
    inputs: &[BsmInput],
    bins: &BinSchedule,
    rng: &mut RandomSource,
) -> Vec<ClickRecord> {
    let mut candidates: Vec<ClickRecord> = Vec::with_capacity(inputs.len() + 1);
    for input in inputs {
        if rng.chance(params.detector_efficiency) {
            candidates.push(ClickRecord {
                detector: rng.below(2) as u8,
                bin: input.bin,
                time: input.time,
                provenance: input.provenance,
            });
        }
    }
    let p_dark = params.dark_probability(bins.width);
    if p_dark > 0.0 {
        for detector in 0..2u8 {
            for bin in [TimeBin::Early, TimeBin::Late] {
                if rng.chance(p_dark) {
                    let offset = SimTime((rng.unit() * bins.width.as_ps() as f64) as u64);
                    candidates.push(ClickRecord {
                        detector,
                        bin,
                        time: bins.start(bin) + offset,
                        provenance: Provenance::Dark,
                    });
                }
            }
        }
    }
    // stable sort keeps input order among simultaneous photons
    candidates.sort_by_key(|c| (c.detector, c.time));
    let window = params.detection_window();
    let mut clicks = Vec::with_capacity(candidates.len());
    let mut last: [Option<SimTime>; 2] = [None, None];
    for cand in candidates {
        let d = cand.detector as usize;
        if let Some(prev) = last[d] {
            if cand.time < prev + window {
                continue;
            }
        }
        last[d] = Some(cand.time);
        clicks.push(cand);
    }
    clicks.sort_by_key(|c| (c.time, c.detector));
    clicks
}

/// Exactly one early and one late click herald ψ⁺ (same detector) or ψ⁻
/// (different detectors); every other pattern fails.
pub fn classify_clicks(clicks: &[ClickRecord]) -> HeraldOutcome {
    let mut early = clicks.iter().filter(|c| c.bin == TimeBin::Early);
    let mut late = clicks.iter().filter(|c| c.bin == TimeBin::Late);
    match (early.next(), early.next(), late.next(), late.next()) {
        (Some(e), None, Some(l), None) if e.detector == l.detector => HeraldOutcome::PsiPlus,
        (Some(_), None, Some(_), None) => HeraldOutcome::PsiMinus,
        _ => HeraldOutcome::Failure,
    }
}

/// Whether a successful click pattern came from two signal photons emitted by
/// different nodes. Verification only: protocol logic never reads this.
pub fn herald_is_genuine(clicks: &[ClickRecord]) -> bool {
    if classify_clicks(clicks) == HeraldOutcome::Failure {
        return false;
    }
    match clicks {
        [a, b] => matches!(
            (a.provenance, b.provenance),
            (Provenance::Signal(x), Provenance::Signal(y)) if x != y
        ),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn click(detector: u8, bin: TimeBin) -> ClickRecord {
        ClickRecord {
            detector,
            bin,
            time: SimTime::ZERO,
            provenance: Provenance::Dark,
        }
    }

    fn bins() -> BinSchedule {
        BinSchedule {
            early_start: SimTime::from_us(10.0),
            separation: SimTime::from_us(2.8),
            width: SimTime::from_ns(520.0),
        }
    }

    #[test]
    fn one_km_channel() {
        let ch = QuantumChannel::new(1.0);
        assert!((ch.survival() - 0.933_254).abs() < 1e-6);
        assert_eq!(ch.delay(), SimTime::from_us(5.0));
        let zero = QuantumChannel::new(0.0);
        assert_eq!(zero.survival(), 1.0);
        assert_eq!(zero.delay(), SimTime::ZERO);
        let lossless = QuantumChannel {
            length_km: 80.0,
            attenuation_db_per_km: 0.0,
        };
        assert_eq!(lossless.survival(), 1.0);
    }

    #[test]
    fn empirical_survival_matches_attenuation() {
        let ch = QuantumChannel::new(10.0);
        let mut rng = RandomSource::new(4);
        let n = 100_000;
        let ok = (0..n)
            .filter(|_| ch.transmit(SimTime::ZERO, &mut rng).is_some())
            .count() as f64;
        let p = ch.survival();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((ok / n as f64 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn classical_latency() {
        assert_eq!(ClassicalChannel::new(1.0).latency(), SimTime::from_us(15.0));
        assert_eq!(ClassicalChannel::new(0.0).latency(), SimTime::from_us(10.0));
        assert_eq!(ClassicalChannel::new(20.0).latency(), SimTime::from_us(110.0));
        assert_eq!(
            ClassicalChannel::new(1.0).send(SimTime::from_us(3.0)),
            SimTime::from_us(18.0)
        );
    }

    fn yb_photon(rng_key: StateKey) -> Photon {
        Photon::signal(1389.0, rng_key, QubitId(0), NodeId(0), SimTime::ZERO)
    }

    fn some_key() -> StateKey {
        let mut qm = crate::state::QuantumManager::new();
        let q = qm.new_qubit();
        qm.key_of(q).unwrap()
    }

    #[test]
    fn ideal_qfc_converts_exactly_one() {
        let mut qfc = Qfc::new(QfcParams {
            efficiency: 1.0,
            noise_rate: 0.0,
            ..QfcParams::default()
        });
        let mut rng = RandomSource::new(1);
        let out = qfc.convert(vec![yb_photon(some_key())], NodeId(0), SimTime::ZERO, &mut rng);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].wavelength_nm, 746.0);
        assert!(!out[0].is_noise);
    }

    #[test]
    fn qfc_efficiency_statistics() {
        let mut qfc = Qfc::new(QfcParams {
            noise_rate: 0.0,
            ..QfcParams::default()
        });
        let mut rng = RandomSource::new(2);
        let key = some_key();
        let n = 100_000;
        let converted: usize = (0..n)
            .map(|_| qfc.convert(vec![yb_photon(key)], NodeId(0), SimTime::ZERO, &mut rng).len())
            .sum();
        assert!((converted as i64 - 99_000).abs() <= 300, "{converted}");
    }

    #[test]
    fn qfc_noise_per_bin() {
        let mut qfc = Qfc::new(QfcParams::default());
        let mut rng = RandomSource::new(3);
        let n = 100_000;
        let mut per_bin = [0i64; 2];
        for _ in 0..n {
            for p in qfc.convert(Vec::new(), NodeId(0), SimTime::ZERO, &mut rng) {
                assert!(p.is_noise);
                per_bin[(p.bin == Some(TimeBin::Late)) as usize] += 1;
            }
        }
        for count in per_bin {
            assert!((count - 500).abs() <= 70, "{count}");
        }
    }

    #[test]
    fn qfc_absorbs_wrong_wavelength() {
        let mut qfc = Qfc::new(QfcParams {
            efficiency: 1.0,
            noise_rate: 0.0,
            ..QfcParams::default()
        });
        let mut rng = RandomSource::new(1);
        let mut p = yb_photon(some_key());
        p.wavelength_nm = 1550.0;
        assert!(qfc.convert(vec![p], NodeId(0), SimTime::ZERO, &mut rng).is_empty());
        assert_eq!(qfc.mismatched, 1);
    }

    #[test]
    fn dark_probability_per_bin() {
        let p = BsmParams::default().dark_probability(SimTime::from_ns(520.0));
        assert!((p - 5.72e-6).abs() < 1e-12);
        assert_eq!(BsmParams::default().detection_window(), SimTime::from_ns(40.0));
    }

    #[test]
    fn two_detected_signals_give_two_signal_clicks() {
        let params = BsmParams {
            detector_efficiency: 1.0,
            dark_count_rate_hz: 0.0,
            ..BsmParams::default()
        };
        let b = bins();
        let inputs = [
            BsmInput {
                bin: TimeBin::Early,
                time: b.start(TimeBin::Early),
                provenance: Provenance::Signal(NodeId(0)),
            },
            BsmInput {
                bin: TimeBin::Late,
                time: b.start(TimeBin::Late),
                provenance: Provenance::Signal(NodeId(1)),
            },
        ];
        let mut rng = RandomSource::new(8);
        let clicks = bsm_collect(&params, &inputs, &b, &mut rng);
        assert_eq!(clicks.len(), 2);
        assert!(clicks
            .iter()
            .all(|c| matches!(c.provenance, Provenance::Signal(_))));
        assert!(herald_is_genuine(&clicks));
    }

    #[test]
    fn blind_detectors_only_see_darks() {
        let params = BsmParams {
            detector_efficiency: 0.0,
            dark_count_rate_hz: 1e6,
            ..BsmParams::default()
        };
        let b = bins();
        let input = BsmInput {
            bin: TimeBin::Early,
            time: b.early_start,
            provenance: Provenance::Noise,
        };
        let mut rng = RandomSource::new(9);
        for _ in 0..1000 {
            let clicks = bsm_collect(&params, &[input; 3], &b, &mut rng);
            assert!(clicks.iter().all(|c| c.provenance == Provenance::Dark));
        }
    }

    #[test]
    fn dead_time_suppresses_close_clicks() {
        let params = BsmParams {
            detector_efficiency: 1.0,
            dark_count_rate_hz: 0.0,
            ..BsmParams::default()
        };
        let b = bins();
        let inputs: Vec<BsmInput> = (0..6)
            .map(|i| BsmInput {
                bin: TimeBin::Early,
                time: b.early_start + SimTime::from_ns(10.0 * i as f64),
                provenance: Provenance::Noise,
            })
            .collect();
        let mut rng = RandomSource::new(10);
        for _ in 0..200 {
            let clicks = bsm_collect(&params, &inputs, &b, &mut rng);
            for d in 0..2 {
                let times: Vec<SimTime> =
                    clicks.iter().filter(|c| c.detector == d).map(|c| c.time).collect();
                for w in times.windows(2) {
                    assert!(w[1] - w[0] >= params.detection_window());
                }
            }
        }
    }

    #[test]
    fn click_patterns() {
        use TimeBin::*;
        assert_eq!(
            classify_clicks(&[click(0, Early), click(1, Late)]),
            HeraldOutcome::PsiMinus
        );
        assert_eq!(
            classify_clicks(&[click(0, Early), click(0, Late)]),
            HeraldOutcome::PsiPlus
        );
        assert_eq!(classify_clicks(&[click(0, Early)]), HeraldOutcome::Failure);
        assert_eq!(
            classify_clicks(&[click(0, Early), click(1, Early)]),
            HeraldOutcome::Failure
        );
        assert_eq!(classify_clicks(&[]), HeraldOutcome::Failure);
    }

    #[test]
    fn noise_in_accepted_pair_is_not_genuine() {
        let mut a = click(0, TimeBin::Early);
        a.provenance = Provenance::Signal(NodeId(0));
        let mut b = click(1, TimeBin::Late);
        b.provenance = Provenance::Noise;
        assert!(!herald_is_genuine(&[a, b]));
        b.provenance = Provenance::Signal(NodeId(0));
        assert!(!herald_is_genuine(&[a, b]));
        b.provenance = Provenance::Signal(NodeId(1));
        assert!(herald_is_genuine(&[a, b]));
    }

    #[test]
    fn bin_lookup() {
        let b = bins();
        assert_eq!(b.bin_of(b.early_start), Some(TimeBin::Early));
        assert_eq!(b.bin_of(b.early_start + b.width), None);
        assert_eq!(b.bin_of(b.start(TimeBin::Late)), Some(TimeBin::Late));
        assert_eq!(b.bin_of(SimTime::ZERO), None);
    }
}
