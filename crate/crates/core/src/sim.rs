//! Deterministic discrete-event engine.
//!
//! Time is an integer number of picoseconds. Events are ordered by
//! `(time, sequence)` where `sequence` is a monotone insertion counter, so
//! equal-time events run in the order they were scheduled. Every simulation
//! instance owns exactly one [`RandomSource`].

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PS_PER_NS: f64 = 1e3;
const PS_PER_US: f64 = 1e6;
const PS_PER_MS: f64 = 1e9;
const PS_PER_S: f64 = 1e12;

/// Simulated time in integer picoseconds since simulation start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_ps(ps: u64) -> Self {
        SimTime(ps)
    }

    pub fn from_ns(ns: f64) -> Self {
        Self::from_scaled(ns, PS_PER_NS)
    }

    pub fn from_us(us: f64) -> Self {
        Self::from_scaled(us, PS_PER_US)
    }

    pub fn from_ms(ms: f64) -> Self {
        Self::from_scaled(ms, PS_PER_MS)
    }

    pub fn from_secs(s: f64) -> Self {
        Self::from_scaled(s, PS_PER_S)
    }

    fn from_scaled(v: f64, scale: f64) -> Self {
        assert!(v.is_finite() && v >= 0.0, "time must be finite and non-negative, got {v}");
        SimTime((v * scale).round() as u64)
    }

    pub fn as_ps(self) -> u64 {
        self.0
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / PS_PER_S
    }

    pub fn as_us(self) -> f64 {
        self.0 as f64 / PS_PER_US
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_sub(rhs.0).expect("negative time difference"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} ms", self.0 as f64 / PS_PER_MS)
    }
}

/// Handle returned by [`Simulation::schedule`]; used to cancel a pending event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

struct Scheduled<E> {
    time: SimTime,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Receives events popped from the queue.
pub trait Handler<E> {
    fn handle(&mut self, sim: &mut Simulation<E>, event: E);
}

impl<E, F: FnMut(&mut Simulation<E>, E)> Handler<E> for F {
    fn handle(&mut self, sim: &mut Simulation<E>, event: E) {
        self(sim, event)
    }
}

/// Event queue, virtual clock and random source of one simulation instance.
pub struct Simulation<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Scheduled<E>>>,
    cancelled: HashSet<u64>,
    halted: bool,
    executed: u64,
    rng: RandomSource,
}

impl<E> Simulation<E> {
    pub fn new(seed: u64) -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            halted: false,
            executed: 0,
            rng: RandomSource::new(seed),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn rng(&mut self) -> &mut RandomSource {
        &mut self.rng
    }

    /// Total events executed over the lifetime of the instance.
    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    /// Enqueues `payload` at absolute time `time`.
    ///
    /// Panics if `time` is earlier than the current clock: an event scheduling
    /// into the past is a logic error in the caller.
    pub fn schedule(&mut self, time: SimTime, payload: E) -> EventHandle {
        assert!(
            time >= self.now,
            "causality violation: scheduling at {time} while clock is {}",
            self.now
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled { time, seq, payload }));
        EventHandle(seq)
    }

    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> EventHandle {
        self.schedule(self.now + delay, payload)
    }

    /// Cancels a pending event. Returns false if it already ran or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_seq {
            return false;
        }
        let pending = self.queue.iter().any(|Reverse(s)| s.seq == handle.0);
        pending && self.cancelled.insert(handle.0)
    }

    /// Stops the current `run_until` after the event being handled.
    pub fn halt(&mut self) {
        self.halted = true;
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Executes every event with time ≤ `deadline` and returns how many ran.
    ///
    /// If the queue drains (or the next event lies beyond the deadline) the
    /// clock is advanced to `deadline`. A [`halt`](Self::halt) leaves the clock
    /// at the time of the halting event.
    pub fn run_until<H: Handler<E>>(&mut self, deadline: SimTime, handler: &mut H) -> u64 {
        self.halted = false;
        let mut count = 0;
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.time > deadline {
                break;
            }
            let Reverse(ev) = self.queue.pop().expect("peeked");
            if self.cancelled.remove(&ev.seq) {
                continue;
            }
            assert!(ev.time >= self.now, "event time precedes clock");
            self.now = ev.time;
            count += 1;
            self.executed += 1;
            handler.handle(self, ev.payload);
            if self.halted {
                return count;
            }
        }
        if deadline > self.now {
            self.now = deadline;
        }
        count
    }
}

/// Seeded random stream owned by one simulation instance.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bernoulli(&mut self, p: f64) -> Result<bool> {
        check_probability("p", p)?;
        Ok(self.chance(p))
    }

    /// Bernoulli draw for probabilities already validated by the caller.
    pub(crate) fn chance(&mut self, p: f64) -> bool {
        debug_assert!((0.0..=1.0).contains(&p));
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.rng.random::<f64>() < p
        }
    }

    pub fn poisson(&mut self, mean: f64) -> Result<u64> {
        if !(mean.is_finite() && mean >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "mean".into(),
                reason: format!("Poisson mean must be finite and >= 0, got {mean}"),
            });
        }
        if mean == 0.0 {
            return Ok(0);
        }
        let dist = Poisson::new(mean).map_err(|e| Error::InvalidParameter {
            name: "mean".into(),
            reason: e.to_string(),
        })?;
        Ok(dist.sample(&mut self.rng) as u64)
    }

    /// Binomial draw for a probability already validated by the caller.
    pub fn binomial(&mut self, n: u64, p: f64) -> u64 {
        if n == 0 || p <= 0.0 {
            return 0;
        }
        if p >= 1.0 {
            return n;
        }
        Binomial::new(n, p).expect("validated probability").sample(&mut self.rng)
    }

    /// Fair coin between the early and late time bin.
    pub fn uniform_bin(&mut self) -> TimeBin {
        if self.rng.random::<bool>() {
            TimeBin::Early
        } else {
            TimeBin::Late
        }
    }

    /// Uniform real in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        self.rng.random_range(0..n)
    }
}

/// Which half of a time-bin qubit a photon or click belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TimeBin {
    Early,
    Late,
}

pub(crate) fn check_probability(name: &str, p: f64) -> Result<()> {
    if p.is_finite() && (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: name.into(),
            reason: format!("probability must lie in [0, 1], got {p}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_units_are_exact() {
        assert_eq!(SimTime::from_ns(40.0).as_ps(), 40_000);
        assert_eq!(SimTime::from_us(51.4).as_ps(), 51_400_000);
        assert_eq!(SimTime::from_ms(500.0).as_ps(), 500_000_000_000);
        assert_eq!(SimTime::from_secs(1.0), SimTime::from_ms(1000.0));
    }

    #[test]
    fn same_time_runs_before_next_picosecond() {
        let mut sim = Simulation::new(1);
        sim.schedule(SimTime(1), "later");
        sim.schedule(SimTime(0), "now");
        let mut seen = Vec::new();
        sim.run_until(SimTime(10), &mut |_: &mut Simulation<&str>, e| seen.push(e));
        assert_eq!(seen, ["now", "later"]);
    }

    #[test]
    fn equal_times_run_in_insertion_order() {
        let mut sim = Simulation::new(1);
        for i in 0..5 {
            sim.schedule(SimTime(7), i);
        }
        let mut seen = Vec::new();
        sim.run_until(SimTime(7), &mut |_: &mut Simulation<i32>, e| seen.push(e));
        assert_eq!(seen, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn cancelled_event_never_runs() {
        let mut sim = Simulation::new(1);
        let h = sim.schedule(SimTime(5), 1);
        sim.schedule(SimTime(6), 2);
        assert!(sim.cancel(h));
        assert!(!sim.cancel(h));
        let mut seen = Vec::new();
        let n = sim.run_until(SimTime(10), &mut |_: &mut Simulation<i32>, e| seen.push(e));
        assert_eq!(seen, [2]);
        assert_eq!(n, 1);
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut sim: Simulation<()> = Simulation::new(1);
        let n = sim.run_until(SimTime::from_secs(1.0), &mut |_: &mut Simulation<()>, _| {});
        assert_eq!(n, 0);
        assert_eq!(sim.now(), SimTime::from_secs(1.0));
    }

    #[test]
    fn counts_only_events_before_deadline() {
        let mut sim = Simulation::new(1);
        for t in [1, 2, 3, 20] {
            sim.schedule(SimTime(t), ());
        }
        let n = sim.run_until(SimTime(10), &mut |_: &mut Simulation<()>, _| {});
        assert_eq!(n, 3);
        assert_eq!(sim.pending(), 1);
    }

    #[test]
    fn child_events_are_counted() {
        // parent at t=1 schedules child at t=4; both precede deadline 5
        let mut sim = Simulation::new(1);
        sim.schedule(SimTime(1), true);
        let n = sim.run_until(SimTime(5), &mut |s: &mut Simulation<bool>, parent: bool| {
            if parent {
                s.schedule_in(SimTime(3), false);
            }
        });
        assert_eq!(n, 2);
    }

    #[test]
    #[should_panic(expected = "causality violation")]
    fn scheduling_in_the_past_panics() {
        let mut sim = Simulation::new(1);
        sim.schedule(SimTime(10), ());
        sim.run_until(SimTime(10), &mut |s: &mut Simulation<()>, _| {
            s.schedule(SimTime(3), ());
        });
    }

    #[test]
    fn halt_stops_mid_run() {
        let mut sim = Simulation::new(1);
        for t in 1..=5 {
            sim.schedule(SimTime(t), t);
        }
        let n = sim.run_until(SimTime(100), &mut |s: &mut Simulation<u64>, e| {
            if e == 3 {
                s.halt();
            }
        });
        assert_eq!(n, 3);
        assert_eq!(sim.now(), SimTime(3));
    }

    #[test]
    fn bernoulli_edges_and_range() {
        let mut r = RandomSource::new(9);
        assert!((0..1000).all(|_| !r.bernoulli(0.0).unwrap()));
        assert!((0..1000).all(|_| r.bernoulli(1.0).unwrap()));
        assert!(r.bernoulli(1.5).is_err());
        assert!(r.bernoulli(-0.1).is_err());
        assert!(r.poisson(-1.0).is_err());
        assert_eq!(r.poisson(0.0).unwrap(), 0);
    }

    #[test]
    fn poisson_tail_matches_closed_form() {
        let mut r = RandomSource::new(2024);
        let n = 1_000_000;
        let hits = (0..n).filter(|_| r.poisson(0.047).unwrap() >= 1).count();
        let p = hits as f64 / n as f64;
        let expected = 1.0 - (-0.047f64).exp();
        assert!((expected - 0.0459).abs() < 1e-4);
        assert!((p - expected).abs() < 0.001, "{p}");
    }

    #[test]
    fn sample_means_within_three_sigma() {
        let mut r = RandomSource::new(77);
        let n = 1_000_000f64;
        let p = 0.3;
        let k = (0..n as u64).filter(|_| r.bernoulli(p).unwrap()).count() as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((k / n - p).abs() < 3.0 * sigma);

        let mean = 0.5;
        let total: u64 = (0..n as u64).map(|_| r.poisson(mean).unwrap()).sum();
        let sigma = (mean / n).sqrt();
        assert!((total as f64 / n - mean).abs() < 3.0 * sigma);
    }

    #[test]
    fn equal_seeds_give_equal_streams() {
        let mut a = RandomSource::new(5);
        let mut b = RandomSource::new(5);
        for _ in 0..100 {
            assert_eq!(a.unit().to_bits(), b.unit().to_bits());
            assert_eq!(a.uniform_bin(), b.uniform_bin());
        }
    }
}
