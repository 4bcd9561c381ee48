//! Modality-aware temperature calibration.
//!
//! Every item carries a [`ModalityComposition`]. Its uniform indicator weights
//! pick out entries of the trainable [`TemperatureVector`], giving an instance
//! temperature; pairs use the mean of their two instance temperatures, and the
//! calibrated logit is cosine similarity divided by that pair temperature.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{contract, Result};
use crate::numerics::dot;

/// Lower bound applied to every instance temperature.
pub const TEMPERATURE_FLOOR: f64 = 1e-6;

/// Number of base modalities.
pub const NUM_MODALITIES: usize = 4;

/// Base modalities, in the fixed order used by every per-modality vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Image,
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [
        Modality::Text,
        Modality::Image,
        Modality::Audio,
        Modality::Video,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> char {
        match self {
            Modality::Text => 'T',
            Modality::Image => 'I',
            Modality::Audio => 'A',
            Modality::Video => 'V',
        }
    }

    pub fn from_symbol(c: char) -> Option<Modality> {
        match c {
            'T' => Some(Modality::Text),
            'I' => Some(Modality::Image),
            'A' => Some(Modality::Audio),
            'V' => Some(Modality::Video),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

/// A non-empty subset of {T, I, A, V}.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityComposition(u8);

impl ModalityComposition {
    pub fn new(modalities: &[Modality]) -> Result<Self> {
        let bits = modalities.iter().fold(0u8, |b, m| b | (1 << m.index()));
        Self::from_bits(bits)
    }

    pub fn single(m: Modality) -> Self {
        ModalityComposition(1 << m.index())
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits == 0 || bits >= 1 << NUM_MODALITIES {
            return Err(contract(format!(
                "invalid modality composition bits {bits:#06b}"
            )));
        }
        Ok(ModalityComposition(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// All 15 non-empty compositions, ordered by bit pattern.
    pub fn all() -> impl Iterator<Item = ModalityComposition> {
        (1u8..(1 << NUM_MODALITIES)).map(ModalityComposition)
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Always false; compositions are non-empty by construction.
    pub fn is_empty(self) -> bool {
        false
    }

    pub fn modalities(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.contains(m))
    }
}

impl fmt::Display for ModalityComposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in self.modalities() {
            write!(f, "{}", m.symbol())?;
        }
        Ok(())
    }
}

impl fmt::Debug for ModalityComposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{self}}}")
    }
}

/// Parses strings such as `"T"` or `"AV"`; order and repetition are ignored.
impl FromStr for ModalityComposition {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut bits = 0u8;
        for c in s.chars() {
            let m = Modality::from_symbol(c)
                .ok_or_else(|| contract(format!("unknown modality symbol {c:?} in {s:?}")))?;
            bits |= 1 << m.index();
        }
        Self::from_bits(bits)
    }
}

/// Serialized as a list of modality symbols, e.g. `["A", "V"]`.
impl Serialize for ModalityComposition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let names: Vec<String> = self.modalities().map(|m| m.symbol().to_string()).collect();
        names.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModalityComposition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names.concat().parse().map_err(serde::de::Error::custom)
    }
}

/// Trainable per-modality temperatures, ordered T, I, A, V.
///
/// Entries are unconstrained; the floor is applied where they are used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureVector(pub [f64; NUM_MODALITIES]);

impl TemperatureVector {
    pub fn constant(tau: f64) -> Self {
        TemperatureVector([tau; NUM_MODALITIES])
    }

    pub fn get(&self, m: Modality) -> f64 {
        self.0[m.index()]
    }
}

/// Uniform mass over the active modalities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndicatorWeights(pub [f64; NUM_MODALITIES]);

pub fn indicator_weights(m: ModalityComposition) -> IndicatorWeights {
    let share = 1.0 / m.len() as f64;
    let mut w = [0.0; NUM_MODALITIES];
    for modality in m.modalities() {
        w[modality.index()] = share;
    }
    IndicatorWeights(w)
}

/// An instance temperature and whether the floor was hit.
///
/// When `floored` is set the temperature is constant in `τ`, so no gradient
/// flows back to the temperature vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceTemperature {
    pub value: f64,
    pub floored: bool,
}

pub fn instance_temperature(w: &IndicatorWeights, tau: &TemperatureVector) -> InstanceTemperature {
    let raw = dot(&w.0, &tau.0);
    if raw > TEMPERATURE_FLOOR {
        InstanceTemperature {
            value: raw,
            floored: false,
        }
    } else {
        InstanceTemperature {
            value: TEMPERATURE_FLOOR,
            floored: true,
        }
    }
}

/// Symmetric pair temperature `(τ(q) + τ(p)) / 2`.
pub fn pair_temperature(tau_q: f64, tau_p: f64) -> Result<f64> {
    if !(tau_q > 0.0 && tau_p > 0.0) {
        return Err(contract(format!(
            "pair temperature needs positive inputs, got {tau_q} and {tau_p}"
        )));
    }
    Ok(0.5 * (tau_q + tau_p))
}

/// Tolerance on `‖e‖ − 1` accepted for embeddings fed to the logit.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

pub(crate) fn check_unit(e: &[f64], what: &str) -> Result<()> {
    let n = dot(e, e).sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(contract(format!("{what} is not unit-norm (norm {n})")));
    }
    Ok(())
}

/// Calibrated logit `sim(e_q, e_p) / τ_pair` with its partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedLogit {
    pub value: f64,
    pub cosine: f64,
    /// ∂ℓ/∂e_q = e_p / τ_pair
    pub d_query: Vec<f64>,
    /// ∂ℓ/∂e_p = e_q / τ_pair
    pub d_target: Vec<f64>,
    /// ∂ℓ/∂τ_pair = −sim / τ_pair²
    pub d_tau: f64,
}

pub fn calibrated_logit(e_q: &[f64], e_p: &[f64], tau_pair: f64) -> Result<CalibratedLogit> {
    if e_q.len() != e_p.len() {
        return Err(contract(format!(
            "embedding widths differ: {} vs {}",
            e_q.len(),
            e_p.len()
        )));
    }
    if !(tau_pair > 0.0) {
        return Err(contract(format!(
            "pair temperature must be positive, got {tau_pair}"
        )));
    }
    check_unit(e_q, "query embedding")?;
    check_unit(e_p, "target embedding")?;
    let cosine = dot(e_q, e_p);
    Ok(CalibratedLogit {
        value: cosine / tau_pair,
        cosine,
        d_query: e_p.iter().map(|x| x / tau_pair).collect(),
        d_target: e_q.iter().map(|x| x / tau_pair).collect(),
        d_tau: -cosine / (tau_pair * tau_pair),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LEARNED: TemperatureVector = TemperatureVector([0.0130, 0.0127, 0.0219, 0.0223]);

    fn comp(s: &str) -> ModalityComposition {
        s.parse().unwrap()
    }

    #[test]
    fn weights_examples() {
        assert_eq!(indicator_weights(comp("T")).0, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(indicator_weights(comp("AV")).0, [0.0, 0.0, 0.5, 0.5]);
        assert_eq!(indicator_weights(comp("TIAV")).0, [0.25; 4]);
    }

    #[test]
    fn empty_composition_is_rejected() {
        assert!(ModalityComposition::new(&[]).is_err());
        assert!("".parse::<ModalityComposition>().is_err());
        assert!("TX".parse::<ModalityComposition>().is_err());
    }

    #[test]
    fn weights_lie_on_simplex() {
        for m in ModalityComposition::all() {
            let w = indicator_weights(m).0;
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            for modality in Modality::ALL {
                assert_eq!(w[modality.index()] > 0.0, m.contains(modality));
            }
        }
        assert_eq!(ModalityComposition::all().count(), 15);
    }

    #[test]
    fn instance_temperature_examples() {
        let t = instance_temperature(&indicator_weights(comp("T")), &LEARNED);
        assert_eq!(
            t,
            InstanceTemperature {
                value: 0.0130,
                floored: false
            }
        );
        let av = instance_temperature(&indicator_weights(comp("AV")), &LEARNED);
        assert!((av.value - 0.0221).abs() < 1e-15);
        let neg = instance_temperature(
            &indicator_weights(comp("IA")),
            &TemperatureVector::constant(-1.0),
        );
        assert_eq!(
            neg,
            InstanceTemperature {
                value: TEMPERATURE_FLOOR,
                floored: true
            }
        );
    }

    #[test]
    fn pair_temperature_examples() {
        assert!((pair_temperature(0.0130, 0.0223).unwrap() - 0.01765).abs() < 1e-15);
        assert_eq!(pair_temperature(0.02, 0.02).unwrap(), 0.02);
        assert!(pair_temperature(0.0, 0.02).is_err());
        assert!(pair_temperature(0.02, -1.0).is_err());
    }

    #[test]
    fn logit_examples() {
        let e = [0.6, 0.8];
        assert!((calibrated_logit(&e, &e, 0.02).unwrap().value - 50.0).abs() < 1e-12);
        let o = [-0.8, 0.6];
        assert_eq!(calibrated_logit(&e, &o, 0.3).unwrap().value, 0.0);
        let anti = [-0.6, -0.8];
        let l = calibrated_logit(&e, &anti, 0.0130).unwrap().value;
        assert!((l + 76.923_076_923_076_92).abs() < 1e-9);
        assert!(calibrated_logit(&[1.0, 1.0], &e, 0.02).is_err());
    }

    #[test]
    fn logit_tau_derivative_matches_central_difference() {
        let e_q = [0.6, 0.0, 0.8];
        let e_p = [0.0, 0.6, 0.8];
        for tau in [0.013, 0.02, 0.3] {
            let l = calibrated_logit(&e_q, &e_p, tau).unwrap();
            let h = tau * 1e-5;
            let fd = (calibrated_logit(&e_q, &e_p, tau + h).unwrap().value
                - calibrated_logit(&e_q, &e_p, tau - h).unwrap().value)
                / (2.0 * h);
            assert!(
                ((fd - l.d_tau) / l.d_tau).abs() < 1e-6,
                "tau {tau}: {fd} vs {}",
                l.d_tau
            );
        }
    }

    #[test]
    fn composition_serializes_as_symbols() {
        let json = serde_json::to_string(&comp("VA")).unwrap();
        assert_eq!(json, r#"["A","V"]"#);
        assert_eq!(
            serde_json::from_str::<ModalityComposition>(&json).unwrap(),
            comp("AV")
        );
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    proptest! {
        #[test]
        fn halving_temperature_doubles_logit(
            a in proptest::collection::vec(-1.0f64..1.0, 5),
            b in proptest::collection::vec(-1.0f64..1.0, 5),
            tau in 0.005f64..1.0,
        ) {
            prop_assume!(dot(&a, &a) > 1e-3 && dot(&b, &b) > 1e-3);
            let (a, b) = (unit(a), unit(b));
            let full = calibrated_logit(&a, &b, tau).unwrap().value;
            let half = calibrated_logit(&a, &b, tau / 2.0).unwrap().value;
            prop_assert!((half - 2.0 * full).abs() <= 1e-12 * full.abs().max(1.0));
        }

        #[test]
        fn temperature_is_permutation_equivariant(
            bits in 1u8..16,
            tau in proptest::array::uniform4(0.001f64..0.1),
            perm_seed in 0usize..24,
        ) {
            // Relabel modalities by a permutation and move τ entries with them.
            let mut perm = [0usize, 1, 2, 3];
            let mut k = perm_seed;
            for i in (1..4).rev() {
                perm.swap(i, k % (i + 1));
                k /= i + 1;
            }
            let m = ModalityComposition::from_bits(bits).unwrap();
            let permuted_bits = (0..4).filter(|&i| bits & (1 << i) != 0).fold(0u8, |b, i| b | (1 << perm[i]));
            let pm = ModalityComposition::from_bits(permuted_bits).unwrap();
            let mut ptau = [0.0; 4];
            for i in 0..4 {
                ptau[perm[i]] = tau[i];
            }
            let a = instance_temperature(&indicator_weights(m), &TemperatureVector(tau));
            let b = instance_temperature(&indicator_weights(pm), &TemperatureVector(ptau));
            prop_assert!((a.value - b.value).abs() < 1e-15);
        }

        #[test]
        fn pair_temperature_is_symmetric(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
            prop_assert_eq!(pair_temperature(a, b).unwrap(), pair_temperature(b, a).unwrap());
        }
    }
}
