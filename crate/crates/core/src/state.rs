//! State-vector bookkeeping for memory qubits.
//!
//! Every qubit holds exactly one [`StateKey`]; qubits described by one joint
//! state share a key. Stored states cover one or two qubits. Swapping builds a
//! transient four-qubit register internally and hands back two-qubit results.
//!
//! Basis convention: for every memory, the component that emits into the
//! early time bin is `|1⟩` and the other component is `|0⟩`. For the transmon
//! `|1⟩ = |e⟩` and `|0⟩ = |g⟩`, so energy relaxation maps `|1⟩ → |0⟩`.
//! Amplitude index bit order: the first holder is the most significant bit.

use std::collections::HashMap;
use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::RandomSource;

const NORM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QubitId(pub u32);

/// Opaque identifier shared by every qubit described by one joint state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StateKey(u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    X,
    Z,
}

/// The two Bell states a time-bin BSM can herald.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BellLabel {
    /// (|01⟩ + |10⟩)/√2
    PsiPlus,
    /// (|01⟩ − |10⟩)/√2
    PsiMinus,
}

impl BellLabel {
    pub fn as_bell(self) -> BellState {
        match self {
            BellLabel::PsiPlus => BellState::PSI_PLUS,
            BellLabel::PsiMinus => BellState::PSI_MINUS,
        }
    }
}

/// A Bell state written as `(I ⊗ XˣZᶻ)|Φ⁺⟩`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BellState {
    pub x: bool,
    pub z: bool,
}

impl BellState {
    pub const PHI_PLUS: BellState = BellState { x: false, z: false };
    pub const PHI_MINUS: BellState = BellState { x: false, z: true };
    pub const PSI_PLUS: BellState = BellState { x: true, z: false };
    pub const PSI_MINUS: BellState = BellState { x: true, z: true };

    pub const ALL: [BellState; 4] = [
        Self::PHI_PLUS,
        Self::PHI_MINUS,
        Self::PSI_PLUS,
        Self::PSI_MINUS,
    ];

    /// Amplitudes over |00⟩, |01⟩, |10⟩, |11⟩.
    pub fn amplitudes(self) -> [Complex64; 4] {
        let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        let sign = if self.z { -h } else { h };
        if self.x {
            [zero, h, sign, zero]
        } else {
            [h, zero, zero, sign]
        }
    }

    /// Label of the end-to-end pair after swapping `left` and `right` with a
    /// middle Bell measurement yielding `outcome`: Pauli frames compose by XOR.
    pub fn compose(left: BellState, outcome: BellState, right: BellState) -> BellState {
        BellState {
            x: left.x ^ outcome.x ^ right.x,
            z: left.z ^ outcome.z ^ right.z,
        }
    }

    pub fn psi_label(self) -> Option<BellLabel> {
        match (self.x, self.z) {
            (true, false) => Some(BellLabel::PsiPlus),
            (true, true) => Some(BellLabel::PsiMinus),
            _ => None,
        }
    }
}

/// Amplitudes of one or two qubits plus the ordered list of holders.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    holders: Vec<QubitId>,
    amps: Vec<Complex64>,
}

impl JointState {
    pub fn holders(&self) -> &[QubitId] {
        &self.holders
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Small dense register used for intermediate computations.
#[derive(Clone, Debug)]
struct Register {
    holders: Vec<QubitId>,
    amps: Vec<Complex64>,
}

impl Register {
    fn n(&self) -> usize {
        self.holders.len()
    }

    fn position(&self, q: QubitId) -> Option<usize> {
        self.holders.iter().position(|&h| h == q)
    }

    fn mask(&self, pos: usize) -> usize {
        1 << (self.n() - 1 - pos)
    }

    fn tensor(self, other: Register) -> Register {
        let mut amps = Vec::with_capacity(self.amps.len() * other.amps.len());
        for a in &self.amps {
            for b in &other.amps {
                amps.push(a * b);
            }
        }
        let mut holders = self.holders;
        holders.extend(other.holders);
        Register { holders, amps }
    }

    fn prob_one(&self, pos: usize) -> f64 {
        let m = self.mask(pos);
        self.amps
            .iter()
            .enumerate()
            .filter(|(i, _)| i & m != 0)
            .map(|(_, a)| a.norm_sqr())
            .sum()
    }

    fn apply_1q(&mut self, pos: usize, g: [[Complex64; 2]; 2]) {
        let m = self.mask(pos);
        for i in 0..self.amps.len() {
            if i & m == 0 {
                let (a0, a1) = (self.amps[i], self.amps[i | m]);
                self.amps[i] = g[0][0] * a0 + g[0][1] * a1;
                self.amps[i | m] = g[1][0] * a0 + g[1][1] * a1;
            }
        }
    }

    fn apply_cnot(&mut self, control: usize, target: usize) {
        let (mc, mt) = (self.mask(control), self.mask(target));
        for i in 0..self.amps.len() {
            if i & mc != 0 && i & mt == 0 {
                self.amps.swap(i, i | mt);
            }
        }
    }

    fn normalize(&mut self) -> Result<()> {
        let norm = self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if norm < 1e-15 {
            return Err(Error::state("state collapsed to zero norm"));
        }
        for a in &mut self.amps {
            *a /= norm;
        }
        Ok(())
    }

    /// Measures `pos` in Z, collapses, and removes it from the register.
    fn measure_out(&mut self, pos: usize, rng: &mut RandomSource) -> Result<u8> {
        let p1 = self.prob_one(pos).clamp(0.0, 1.0);
        let bit = u8::from(rng.chance(p1));
        self.remove(pos, bit)?;
        Ok(bit)
    }

    /// Keeps the branch where `pos` equals `bit` and drops that qubit.
    fn remove(&mut self, pos: usize, bit: u8) -> Result<()> {
        let m = self.mask(pos);
        let want = if bit == 1 { m } else { 0 };
        let amps: Vec<Complex64> = self
            .amps
            .iter()
            .enumerate()
            .filter(|(i, _)| i & m == want)
            .map(|(_, a)| *a)
            .collect();
        self.amps = amps;
        self.holders.remove(pos);
        self.normalize()
    }

    /// Reorders holders to `order`, which must be a permutation of them.
    fn permute(&mut self, order: &[QubitId]) {
        let n = self.n();
        let src: Vec<usize> = order
            .iter()
            .map(|q| self.position(*q).expect("permutation holder"))
            .collect();
        let mut amps = vec![Complex64::new(0.0, 0.0); self.amps.len()];
        for (i, a) in self.amps.iter().enumerate() {
            let mut j = 0;
            for (new_pos, &old_pos) in src.iter().enumerate() {
                let bit = (i >> (n - 1 - old_pos)) & 1;
                j |= bit << (n - 1 - new_pos);
            }
            amps[j] = *a;
        }
        self.amps = amps;
        self.holders = order.to_vec();
    }
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn hadamard() -> [[Complex64; 2]; 2] {
    let h = c(FRAC_1_SQRT_2);
    [[h, h], [h, -h]]
}

fn pauli_x() -> [[Complex64; 2]; 2] {
    [[c(0.0), c(1.0)], [c(1.0), c(0.0)]]
}

/// Result of a Bell measurement between two qubits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwapResult {
    /// Bell state observed on the measured pair.
    pub outcome: BellState,
    /// Key now shared by the two outer qubits (or their single keys).
    pub ends: (StateKey, StateKey),
}

/// Owner of every joint state in one simulation instance.
#[derive(Debug, Default)]
pub struct QuantumManager {
    states: HashMap<StateKey, JointState>,
    key_of: HashMap<QubitId, StateKey>,
    next_key: u64,
    next_qubit: u32,
}

impl QuantumManager {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates a qubit in |0⟩ with its own key.
    pub fn new_qubit(&mut self) -> QubitId {
        let q = QubitId(self.next_qubit);
        self.next_qubit += 1;
        self.store(Register {
            holders: vec![q],
            amps: vec![c(1.0), c(0.0)],
        });
        q
    }

    pub fn key_of(&self, q: QubitId) -> Result<StateKey> {
        self.key_of
            .get(&q)
            .copied()
            .ok_or_else(|| Error::state(format!("unknown qubit {q:?}")))
    }

    pub fn state(&self, key: StateKey) -> Result<&JointState> {
        self.states
            .get(&key)
            .ok_or_else(|| Error::state(format!("unknown key {key:?}")))
    }

    pub fn holders(&self, key: StateKey) -> Result<&[QubitId]> {
        Ok(self.state(key)?.holders())
    }

    pub fn live_keys(&self) -> usize {
        self.states.len()
    }

    /// Whether `q` shares its state with another qubit.
    pub fn is_shared(&self, q: QubitId) -> Result<bool> {
        Ok(self.state(self.key_of(q)?)?.holders.len() > 1)
    }

    /// Probability that `q` is found in |1⟩.
    pub fn population_one(&self, q: QubitId) -> Result<f64> {
        let reg = self.register(self.key_of(q)?)?;
        let pos = reg.position(q).expect("holder");
        Ok(reg.prob_one(pos))
    }

    /// Sets a single-qubit key to (|0⟩ + |1⟩)/√2.
    pub fn set_plus_state(&mut self, key: StateKey) -> Result<()> {
        self.set_single(key, [c(FRAC_1_SQRT_2), c(FRAC_1_SQRT_2)])
    }

    pub fn set_single(&mut self, key: StateKey, amps: [Complex64; 2]) -> Result<()> {
        let st = self
            .states
            .get_mut(&key)
            .ok_or_else(|| Error::state(format!("unknown key {key:?}")))?;
        if st.holders.len() != 1 {
            return Err(Error::state("set_single on a key bound to a pair"));
        }
        let norm = (amps[0].norm_sqr() + amps[1].norm_sqr()).sqrt();
        if norm < 1e-15 {
            return Err(Error::state("zero-norm single-qubit state"));
        }
        st.amps = vec![amps[0] / norm, amps[1] / norm];
        Ok(())
    }

    /// Detaches `q` from any partner by a Z measurement, leaving it alone
    /// under its own key. No-op for unshared qubits.
    pub fn isolate(&mut self, q: QubitId, rng: &mut RandomSource) -> Result<StateKey> {
        if self.is_shared(q)? {
            self.measure(self.key_of(q)?, q, Basis::Z, rng)?;
        }
        self.key_of(q)
    }

    /// Isolates `q` and resets it to the plus state.
    pub fn prepare_plus(&mut self, q: QubitId, rng: &mut RandomSource) -> Result<StateKey> {
        let key = self.isolate(q, rng)?;
        self.set_plus_state(key)?;
        Ok(key)
    }

    /// Binds two single-qubit keys into the named Bell state under a new key.
    pub fn entangle_pair(&mut self, a: StateKey, b: StateKey, label: BellLabel) -> Result<StateKey> {
        if a == b {
            return Err(Error::state("entangle_pair needs two distinct keys"));
        }
        let qa = self.single_holder(a)?;
        let qb = self.single_holder(b)?;
        self.states.remove(&a);
        self.states.remove(&b);
        Ok(self.store(Register {
            holders: vec![qa, qb],
            amps: label.as_bell().amplitudes().to_vec(),
        }))
    }

    /// Projects two single qubits onto the heralded ψ± subspace.
    ///
    /// For single-qubit states (a₀, a₁) and (b₀, b₁) the result is
    /// a₀b₁|01⟩ ± a₁b₀|10⟩ normalised, which equals the Bell state when both
    /// inputs are plus states.
    pub fn herald_merge(&mut self, a: QubitId, b: QubitId, label: BellLabel) -> Result<StateKey> {
        let (ka, kb) = (self.key_of(a)?, self.key_of(b)?);
        if ka == kb {
            return Err(Error::state("herald_merge needs two distinct keys"));
        }
        self.single_holder(ka)?;
        self.single_holder(kb)?;
        let sa = self.states.remove(&ka).expect("checked").amps;
        let sb = self.states.remove(&kb).expect("checked").amps;
        let sign = match label {
            BellLabel::PsiPlus => 1.0,
            BellLabel::PsiMinus => -1.0,
        };
        let mut reg = Register {
            holders: vec![a, b],
            amps: vec![c(0.0), sa[0] * sb[1], sa[1] * sb[0] * sign, c(0.0)],
        };
        if let Err(e) = reg.normalize() {
            // restore inputs so the caller can recover
            self.store(Register { holders: vec![a], amps: sa });
            self.store(Register { holders: vec![b], amps: sb });
            return Err(e);
        }
        Ok(self.store(reg))
    }

    /// Born-rule measurement of `holder` in `basis`. The measured qubit leaves
    /// the joint state in the post-measurement basis state; any partner keeps
    /// the conditional state under its own key.
    pub fn measure(
        &mut self,
        key: StateKey,
        holder: QubitId,
        basis: Basis,
        rng: &mut RandomSource,
    ) -> Result<u8> {
        let mut reg = self.register(key)?;
        let pos = reg
            .position(holder)
            .ok_or_else(|| Error::state(format!("{holder:?} does not hold {key:?}")))?;
        if basis == Basis::X {
            reg.apply_1q(pos, hadamard());
        }
        self.states.remove(&key);
        let bit = reg.measure_out(pos, rng)?;
        let mut post = [c(0.0), c(0.0)];
        post[bit as usize] = c(1.0);
        if basis == Basis::X {
            let h = FRAC_1_SQRT_2;
            post = if bit == 0 { [c(h), c(h)] } else { [c(h), c(-h)] };
        }
        self.store(Register {
            holders: vec![holder],
            amps: post.to_vec(),
        });
        if !reg.holders.is_empty() {
            self.store(reg);
        }
        Ok(bit)
    }

    /// Energy relaxation of `holder` with decay probability `p_decay`.
    ///
    /// Unravelled as a quantum jump: with probability `p_decay · P(|1⟩)` the
    /// holder jumps to |0⟩ (returns true); otherwise the no-jump Kraus operator
    /// diag(1, √(1−p)) is applied and the state renormalised.
    pub fn amplitude_damp(
        &mut self,
        key: StateKey,
        holder: QubitId,
        p_decay: f64,
        rng: &mut RandomSource,
    ) -> Result<bool> {
        crate::sim::check_probability("p_decay", p_decay)?;
        let mut reg = self.register(key)?;
        let pos = reg
            .position(holder)
            .ok_or_else(|| Error::state(format!("{holder:?} does not hold {key:?}")))?;
        if p_decay == 0.0 {
            return Ok(false);
        }
        let m = reg.mask(pos);
        let p_jump = (p_decay * reg.prob_one(pos)).clamp(0.0, 1.0);
        let jumped = rng.chance(p_jump);
        if jumped {
            for i in 0..reg.amps.len() {
                if i & m == 0 {
                    reg.amps[i] = reg.amps[i | m];
                    reg.amps[i | m] = c(0.0);
                }
            }
        } else {
            let keep = (1.0 - p_decay).sqrt();
            for (i, a) in reg.amps.iter_mut().enumerate() {
                if i & m != 0 {
                    *a *= keep;
                }
            }
        }
        reg.normalize()?;
        self.states.get_mut(&key).expect("checked").amps = reg.amps;
        Ok(jumped)
    }

    /// Applies a Pauli X to `q` (the swap correction pulse).
    pub fn apply_x(&mut self, q: QubitId) -> Result<()> {
        let key = self.key_of(q)?;
        let mut reg = self.register(key)?;
        let pos = reg.position(q).expect("holder");
        reg.apply_1q(pos, pauli_x());
        self.states.get_mut(&key).expect("checked").amps = reg.amps;
        Ok(())
    }

    /// Bell measurement of `mid_a` and `mid_b` (in that order). Their partners,
    /// if any, end up sharing a key; the measured qubits are left in Z basis
    /// states under their own keys.
    pub fn bell_measure(
        &mut self,
        mid_a: QubitId,
        mid_b: QubitId,
        rng: &mut RandomSource,
    ) -> Result<SwapResult> {
        let (ka, kb) = (self.key_of(mid_a)?, self.key_of(mid_b)?);
        let mut reg = if ka == kb {
            self.register(ka)?
        } else {
            self.register(ka)?.tensor(self.register(kb)?)
        };
        self.states.remove(&ka);
        self.states.remove(&kb);
        let ends: Vec<QubitId> = reg
            .holders
            .iter()
            .copied()
            .filter(|&q| q != mid_a && q != mid_b)
            .collect();

        let pa = reg.position(mid_a).expect("mid_a");
        let pb = reg.position(mid_b).expect("mid_b");
        reg.apply_cnot(pa, pb);
        reg.apply_1q(pa, hadamard());
        // measure the later position first so the earlier index stays valid
        let (z_bit, x_bit) = if pa > pb {
            let z = reg.measure_out(pa, rng)?;
            let x = reg.measure_out(pb, rng)?;
            (z, x)
        } else {
            let x = reg.measure_out(pb, rng)?;
            let z = reg.measure_out(pa, rng)?;
            (z, x)
        };
        let outcome = BellState {
            x: x_bit == 1,
            z: z_bit == 1,
        };
        for (q, bit) in [(mid_a, z_bit), (mid_b, x_bit)] {
            let mut amps = vec![c(0.0), c(0.0)];
            amps[bit as usize] = c(1.0);
            self.store(Register { holders: vec![q], amps });
        }
        let keys = match ends.len() {
            0 => (self.key_of(mid_a)?, self.key_of(mid_b)?),
            1 => {
                let k = self.store(reg);
                (k, k)
            }
            _ => {
                reg.permute(&ends);
                let k = self.store(reg);
                (k, k)
            }
        };
        Ok(SwapResult {
            outcome,
            ends: keys,
        })
    }

    fn single_holder(&self, key: StateKey) -> Result<QubitId> {
        let st = self.state(key)?;
        match st.holders.as_slice() {
            [q] => Ok(*q),
            _ => Err(Error::state("expected a single-qubit key")),
        }
    }

    fn register(&self, key: StateKey) -> Result<Register> {
        let st = self.state(key)?;
        Ok(Register {
            holders: st.holders.clone(),
            amps: st.amps.clone(),
        })
    }

    fn store(&mut self, reg: Register) -> StateKey {
        debug_assert!(reg.n() <= 2, "stored states cover at most two qubits");
        let key = StateKey(self.next_key);
        self.next_key += 1;
        for q in &reg.holders {
            self.key_of.insert(*q, key);
        }
        self.states.insert(
            key,
            JointState {
                holders: reg.holders,
                amps: reg.amps,
            },
        );
        key
    }

    /// Checks that every stored state has unit norm.
    pub fn check_norms(&self) -> Result<()> {
        for (k, st) in &self.states {
            if (st.norm() - 1.0).abs() > NORM_TOL {
                return Err(Error::state(format!("{k:?} has norm {}", st.norm())));
            }
        }
        Ok(())
    }
}
