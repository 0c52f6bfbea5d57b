//! Independent reference computations shared by the integration suites.
#![allow(dead_code)]

use std::f64::consts::FRAC_1_SQRT_2;

use hqnet::memory::{UwParams, YbParams};
use hqnet::photonic::{classify_clicks, ClickRecord, HeraldOutcome, Provenance};
use hqnet::sim::{RandomSource, SimTime, TimeBin};
use hqnet::state::{Basis, BellLabel, BellState};
use hqnet::tomography::{bootstrap_stderr, fidelity_bound, TomographyStats};
use num_complex::Complex64;

type C = Complex64;

fn c(re: f64) -> C {
    C::new(re, 0.0)
}

// ---------------------------------------------------------------------------
// click patterns

/// Every (detector, bin) combination a click can take.
pub const SLOTS: [(u8, TimeBin); 4] = [
    (0, TimeBin::Early),
    (0, TimeBin::Late),
    (1, TimeBin::Early),
    (1, TimeBin::Late),
];

/// All ordered click lists of length 0..=4 over the four slots.
pub fn all_patterns() -> Vec<Vec<ClickRecord>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..4 {
        let mut next = Vec::new();
        for p in &frontier {
            for s in 0..4 {
                let mut q = p.clone();
                q.push(s);
                next.push(q);
            }
        }
        out.extend(next.iter().map(|p| to_clicks(p)));
        frontier = next;
    }
    out
}

fn to_clicks(slots: &[usize]) -> Vec<ClickRecord> {
    slots
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let (detector, bin) = SLOTS[s];
            ClickRecord {
                detector,
                bin,
                time: SimTime::from_ns(i as f64),
                provenance: Provenance::Dark,
            }
        })
        .collect()
}

/// Occupancy table lookup: a herald is exactly one early and one late click,
/// nothing else; the detectors decide the sign.
pub fn expected_outcome(clicks: &[ClickRecord]) -> HeraldOutcome {
    let mut counts = [0usize; 4];
    for cl in clicks {
        let slot = SLOTS
            .iter()
            .position(|&(d, b)| d == cl.detector && b == cl.bin)
            .unwrap();
        counts[slot] += 1;
    }
    match counts {
        [1, 1, 0, 0] | [0, 0, 1, 1] => HeraldOutcome::PsiPlus,
        [1, 0, 0, 1] | [0, 1, 1, 0] => HeraldOutcome::PsiMinus,
        _ => HeraldOutcome::Failure,
    }
}

/// Number of patterns on which the classifier disagrees with the table.
pub fn classifier_mismatches() -> (usize, usize) {
    let patterns = all_patterns();
    let bad = patterns
        .iter()
        .filter(|p| classify_clicks(p) != expected_outcome(p))
        .count();
    (bad, patterns.len())
}

// ---------------------------------------------------------------------------
// Bell composition

/// Four-qubit brute force: |left⟩₁₂ ⊗ |right⟩₃₄ projected onto
/// ⟨outcome|₂₃; returns the fidelity of the normalised 1–4 state with the
/// composed label.
pub fn composition_fidelity(left: BellState, outcome: BellState, right: BellState) -> f64 {
    let l = left.amplitudes();
    let r = right.amplitudes();
    let o = outcome.amplitudes();
    let mut out = [c(0.0); 4];
    for q1 in 0..2 {
        for q4 in 0..2 {
            let mut acc = c(0.0);
            for q2 in 0..2 {
                for q3 in 0..2 {
                    acc += o[2 * q2 + q3].conj() * l[2 * q1 + q2] * r[2 * q3 + q4];
                }
            }
            out[2 * q1 + q4] = acc;
        }
    }
    let norm: f64 = out.iter().map(|a| a.norm_sqr()).sum();
    let expected = BellState::compose(left, outcome, right).amplitudes();
    let overlap: C = expected.iter().zip(&out).map(|(e, a)| e.conj() * a).sum();
    overlap.norm_sqr() / norm
}

pub fn worst_composition() -> f64 {
    let mut worst = 1.0f64;
    for l in BellState::ALL {
        for o in BellState::ALL {
            for r in BellState::ALL {
                worst = worst.min(composition_fidelity(l, o, r));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// synthetic two-qubit states

pub type Density = [[C; 4]; 4];

pub fn pure(amps: [C; 4]) -> Density {
    let n: f64 = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    let mut rho = [[c(0.0); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            rho[i][j] = amps[i] * amps[j].conj() / (n * n);
        }
    }
    rho
}

pub fn mix(parts: &[(f64, Density)]) -> Density {
    let mut rho = [[c(0.0); 4]; 4];
    for (w, r) in parts {
        for i in 0..4 {
            for j in 0..4 {
                rho[i][j] += r[i][j] * *w;
            }
        }
    }
    rho
}

fn hh(rho: &Density) -> Density {
    let h = FRAC_1_SQRT_2;
    let mut u = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let sign = if ((i & j) as u32).count_ones() % 2 == 1 { -1.0 } else { 1.0 };
            u[i][j] = sign * h * h;
        }
    }
    let mut out = [[c(0.0); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = c(0.0);
            for k in 0..4 {
                for l in 0..4 {
                    acc += rho[k][l] * u[i][k] * u[j][l];
                }
            }
            out[i][j] = acc;
        }
    }
    out
}

/// ⟨ψ⁺|ρ|ψ⁺⟩ straight from the matrix elements.
pub fn psi_plus_fidelity(rho: &Density) -> f64 {
    0.5 * (rho[1][1].re + rho[2][2].re + rho[1][2].re + rho[2][1].re)
}

/// Twenty states spanning Bell, product, Werner, damped and random pure.
pub fn synthetic_states(rng: &mut RandomSource) -> Vec<Density> {
    let h = FRAC_1_SQRT_2;
    let psi_p = pure([c(0.0), c(h), c(h), c(0.0)]);
    let psi_m = pure([c(0.0), c(h), c(-h), c(0.0)]);
    let phi_p = pure([c(h), c(0.0), c(0.0), c(h)]);
    let white = mix(&[
        (0.25, pure([c(1.0), c(0.0), c(0.0), c(0.0)])),
        (0.25, pure([c(0.0), c(1.0), c(0.0), c(0.0)])),
        (0.25, pure([c(0.0), c(0.0), c(1.0), c(0.0)])),
        (0.25, pure([c(0.0), c(0.0), c(0.0), c(1.0)])),
    ]);
    let mut states = vec![
        psi_p,
        psi_m,
        phi_p,
        white,
        pure([c(0.0), c(1.0), c(0.0), c(0.0)]),
        pure([c(0.5), c(0.5), c(0.5), c(0.5)]),
        pure([c(1.0), c(0.0), c(0.0), c(0.0)]),
    ];
    for p in [0.9, 0.7, 0.5, 0.3] {
        states.push(mix(&[(p, psi_p), (1.0 - p, white)]));
    }
    // ψ⁺ with the first qubit amplitude-damped
    for gamma in [0.2f64, 0.6] {
        let s = (1.0 - gamma).sqrt();
        let kept = pure([c(0.0), c(h), c(h * s), c(0.0)]);
        let w = 0.5 * (1.0 + s * s);
        let jumped = pure([c(1.0), c(0.0), c(0.0), c(0.0)]);
        states.push(mix(&[(w, kept), (1.0 - w, jumped)]));
    }
    states.push(mix(&[(0.5, psi_p), (0.5, phi_p)]));
    states.push(mix(&[(0.6, psi_p), (0.4, psi_m)]));
    while states.len() < 20 {
        let mut a = [c(0.0); 4];
        for v in &mut a {
            *v = C::new(rng.unit() - 0.5, rng.unit() - 0.5);
        }
        states.push(pure(a));
    }
    states
}

fn sample(probs: &[f64], rng: &mut RandomSource) -> usize {
    let mut u = rng.unit();
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}

/// Measures `pairs` copies of `rho` with strict Z/X alternation.
pub fn measure_state(rho: &Density, pairs: u64, rng: &mut RandomSource) -> TomographyStats {
    let pz: Vec<f64> = (0..4).map(|i| rho[i][i].re.max(0.0)).collect();
    let x = hh(rho);
    let px: Vec<f64> = (0..4).map(|i| x[i][i].re.max(0.0)).collect();
    let mut stats = TomographyStats::new(BellLabel::PsiPlus, 1.0);
    for n in 0..pairs {
        let (basis, probs) = if n % 2 == 0 { (Basis::Z, &pz) } else { (Basis::X, &px) };
        let k = sample(probs, rng);
        stats.accumulate(basis, (k >> 1) as u8, (k & 1) as u8);
    }
    stats
}

/// (bound, stderr, true fidelity) for each synthetic state at `pairs` pairs.
pub fn bound_vs_truth(pairs: u64, seed: u64) -> Vec<(f64, f64, f64)> {
    let mut rng = RandomSource::new(seed);
    synthetic_states(&mut rng)
        .iter()
        .enumerate()
        .map(|(i, rho)| {
            let stats = measure_state(rho, pairs, &mut rng);
            let bound = fidelity_bound(&stats).unwrap();
            let se = bootstrap_stderr(&stats, 200, seed ^ i as u64).unwrap();
            (bound, se, psi_plus_fidelity(rho))
        })
        .collect()
}

// ---------------------------------------------------------------------------

/// (library value, reference) for the two exponential laws at default
/// parameters: Yb excited state surviving one bin, transmon relaxing in 2.8 μs.
pub fn exponential_law() -> [(f64, f64); 2] {
    [
        (YbParams::default().late_decay_prob(), 0.2068),
        (UwParams::default().decay_prob(SimTime::from_us(2.8)), 0.0056),
    ]
}
