//! Electrode layouts and the longitudinal bipolar montage.

use crate::error::{LunaError, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MontageKind {
    Unipolar,
    Bipolar,
}

impl MontageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MontageKind::Unipolar => "unipolar",
            MontageKind::Bipolar => "bipolar",
        }
    }
}

impl std::str::FromStr for MontageKind {
    type Err = LunaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unipolar" => Ok(Self::Unipolar),
            "bipolar" => Ok(Self::Bipolar),
            other => Err(LunaError::Montage(format!("unknown montage kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Electrode {
    pub label: String,
    /// Unit-sphere coordinates: x toward the right ear, y toward the nasion,
    /// z toward the vertex.
    pub position: [f64; 3],
}

/// Ordered channel labels and positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MontageLayout {
    pub id: String,
    pub kind: MontageKind,
    channels: Vec<Electrode>,
}

/// Longitudinal derivations of the double-banana montage, in output order.
pub const BIPOLAR_PAIRS: [(&str, &str); 20] = [
    ("Fp1", "F7"),
    ("F7", "T3"),
    ("T3", "T5"),
    ("T5", "O1"),
    ("Fp2", "F8"),
    ("F8", "T4"),
    ("T4", "T6"),
    ("T6", "O2"),
    ("T3", "C3"),
    ("C3", "CZ"),
    ("Fp1", "F3"),
    ("F3", "C3"),
    ("C3", "P3"),
    ("P3", "O1"),
    ("Fp2", "F4"),
    ("F4", "C4"),
    ("C4", "P4"),
    ("P4", "O2"),
    ("CZ", "C4"),
    ("C4", "T4"),
];

/// The 19 electrodes of the classic 10–20 system.
pub const STANDARD_1020: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz", "P4", "T6", "O1", "O2",
];

/// 62-electrode extended layout used by emotion-recognition recordings.
pub const SEED_62: [&str; 62] = [
    "FP1", "FPZ", "FP2", "AF3", "AF4", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8", "FT7", "FC5", "FC3",
    "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8", "T7", "C5", "C3", "C1", "CZ", "C2", "C4", "C6", "T8", "TP7", "CP5",
    "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8", "P7", "P5", "P3", "P1", "PZ", "P2", "P4", "P6", "P8", "PO7",
    "PO5", "PO3", "POZ", "PO4", "PO6", "PO8", "CB1", "O1", "OZ", "O2", "CB2",
];

impl MontageLayout {
    /// Build and validate a layout.
    pub fn new(id: impl Into<String>, kind: MontageKind, channels: Vec<Electrode>) -> Result<Self> {
        let m = Self {
            id: id.into(),
            kind,
            channels,
        };
        m.validate()?;
        Ok(m)
    }

    /// Unipolar layout from labels, positions taken from the built-in table.
    pub fn from_labels(id: impl Into<String>, labels: &[&str]) -> Result<Self> {
        let channels = labels
            .iter()
            .map(|l| {
                standard_position(l)
                    .map(|position| Electrode {
                        label: l.to_string(),
                        position,
                    })
                    .ok_or_else(|| LunaError::Montage(format!("no built-in position for '{l}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(id, MontageKind::Unipolar, channels)
    }

    pub fn standard_1020() -> Self {
        Self::from_labels("standard_1020", &STANDARD_1020).expect("built-in table covers 10-20")
    }

    pub fn seed62() -> Self {
        Self::from_labels("seed62", &SEED_62).expect("built-in table covers the 62-channel set")
    }

    /// The 20-channel longitudinal bipolar layout derived from standard positions.
    pub fn double_banana() -> Self {
        bipolar_layout(&Self::standard_1020()).expect("10-20 layout holds every pair member")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.channels {
            if !seen.insert(e.label.to_ascii_uppercase()) {
                return Err(LunaError::Montage(format!("duplicate label '{}'", e.label)));
            }
            let norm = e.position.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(0.99..=1.01).contains(&norm) || e.position.iter().any(|v| !v.is_finite()) {
                return Err(LunaError::Montage(format!(
                    "position of '{}' has norm {norm:.4}, expected unit length",
                    e.label
                )));
            }
        }
        if self.channels.is_empty() {
            return Err(LunaError::Montage("montage has no channels".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> &[Electrode] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.channels.iter().map(|e| e.label.as_str()).collect()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.channels.iter().map(|e| e.position).collect()
    }

    /// Case-insensitive lookup that also resolves the T3/T7-style aliases.
    pub fn find(&self, label: &str) -> Option<usize> {
        let want = canonical(label);
        self.channels.iter().position(|e| canonical(&e.label) == want)
    }

    /// Same layout with channels reordered: output channel `i` is input `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let channels = perm
            .iter()
            .map(|&i| {
                self.channels
                    .get(i)
                    .cloned()
                    .ok_or_else(|| LunaError::Montage(format!("channel index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.id.clone(), self.kind, channels)
    }

    /// `n` electrodes `E000, E001, ...` spread over the upper hemisphere on a
    /// Fibonacci spiral. Used where a layout of arbitrary size is needed.
    pub fn spherical(n: usize) -> Result<Self> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let channels = (0..n)
            .map(|i| {
                let z = 1.0 - (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let a = golden * i as f64;
                Electrode {
                    label: format!("E{i:03}"),
                    position: [r * a.cos(), r * a.sin(), z],
                }
            })
            .collect();
        Self::new(format!("spherical{n}"), MontageKind::Unipolar, channels)
    }

    /// First `n` channels.
    pub fn truncated(&self, n: usize, id: impl Into<String>) -> Result<Self> {
        Self::new(id, self.kind, self.channels.iter().take(n).cloned().collect())
    }
}

/// Derive the bipolar layout of [`BIPOLAR_PAIRS`] from a unipolar one.
/// Each derived position is the normalized midpoint of its two electrodes.
pub fn bipolar_layout(unipolar: &MontageLayout) -> Result<MontageLayout> {
    let mut channels = Vec::with_capacity(BIPOLAR_PAIRS.len());
    for (a, b) in BIPOLAR_PAIRS {
        let ia = unipolar
            .find(a)
            .ok_or_else(|| LunaError::MissingElectrode(a.to_string()))?;
        let ib = unipolar
            .find(b)
            .ok_or_else(|| LunaError::MissingElectrode(b.to_string()))?;
        let pa = unipolar.channels[ia].position;
        let pb = unipolar.channels[ib].position;
        let mid = [pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]];
        channels.push(Electrode {
            label: format!("{a}-{b}"),
            position: normalize(mid),
        });
    }
    MontageLayout::new(format!("{}-bipolar", unipolar.id), MontageKind::Bipolar, channels)
}

fn canonical(label: &str) -> String {
    let up = label.trim().to_ascii_uppercase();
    match up.as_str() {
        "T3" => "T7".into(),
        "T4" => "T8".into(),
        "T5" => "P7".into(),
        "T6" => "P8".into(),
        "M1" => "A1".into(),
        "M2" => "A2".into(),
        _ => up,
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn from_angles(theta_deg: f64, phi_deg: f64) -> [f64; 3] {
    let (t, p) = (theta_deg.to_radians(), phi_deg.to_radians());
    [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]
}

fn slerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
    let omega = dot.acos();
    if omega < 1e-12 {
        return a;
    }
    let (wa, wb) = (((1.0 - t) * omega).sin() / omega.sin(), (t * omega).sin() / omega.sin());
    normalize([wa * a[0] + wb * b[0], wa * a[1] + wb * b[1], wa * a[2] + wb * b[2]])
}

/// Idealized spherical position of a 10–10 label.
///
/// Each coronal row runs from its midline electrode to the equatorial ring
/// through Fpz, T8, Oz and T7; lateral electrodes are spaced evenly along the
/// arc between the two.
pub fn standard_position(label: &str) -> Option<[f64; 3]> {
    let name = canonical(label);
    match name.as_str() {
        "A1" => return Some(from_angles(115.0, 180.0)),
        "A2" => return Some(from_angles(115.0, 0.0)),
        "CB1" => return Some(from_angles(115.0, -115.0)),
        "CB2" => return Some(from_angles(115.0, -65.0)),
        _ => {}
    }
    let split = name.find(|c: char| c.is_ascii_digit() || c == 'Z')?;
    let (row, col) = name.split_at(split);
    // (midline polar angle, midline azimuth, equatorial azimuth on the right)
    let (mid_theta, mid_phi, eq_phi) = match row {
        "FP" => (90.0, 90.0, 72.0),
        "AF" => (67.5, 90.0, 54.0),
        "F" => (45.0, 90.0, 36.0),
        "FC" | "FT" => (22.5, 90.0, 18.0),
        "C" | "T" => (0.0, 0.0, 0.0),
        "CP" | "TP" => (22.5, -90.0, -18.0),
        "P" => (45.0, -90.0, -36.0),
        "PO" => (67.5, -90.0, -54.0),
        "O" => (90.0, -90.0, -72.0),
        _ => return None,
    };
    let mid = from_angles(mid_theta, mid_phi);
    if col == "Z" {
        return (!matches!(row, "FT" | "T" | "TP")).then_some(mid);
    }
    let idx: u32 = col.parse().ok()?;
    let frac = match (row, idx) {
        ("FT" | "T" | "TP", 7 | 8) => 1.0,
        ("FT" | "T" | "TP", _) => return None,
        ("FP" | "O", 1 | 2) => 1.0,
        ("FP" | "O", _) => return None,
        ("AF" | "PO", 3 | 4) => 0.5,
        ("AF" | "PO", 5 | 6) => 0.75,
        ("AF" | "PO", 7 | 8) => 1.0,
        (_, 1 | 2) => 0.25,
        (_, 3 | 4) => 0.5,
        (_, 5 | 6) => 0.75,
        (_, 7 | 8) => 1.0,
        _ => return None,
    };
    let edge = from_angles(90.0, eq_phi);
    let mut p = slerp(mid, edge, frac);
    if idx % 2 == 1 {
        p[0] = -p[0];
    }
    Some(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_positions_are_unit_and_lateralized() {
        for l in SEED_62.iter().chain(STANDARD_1020.iter()) {
            let p = standard_position(l).unwrap_or_else(|| panic!("{l}"));
            let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12, "{l}");
        }
        assert!(standard_position("C3").unwrap()[0] < 0.0);
        assert!(standard_position("C4").unwrap()[0] > 0.0);
        assert!(standard_position("Fp1").unwrap()[1] > 0.9);
        assert!(standard_position("O2").unwrap()[1] < -0.9);
        assert!(standard_position("Cz").unwrap()[2] > 0.999);
        assert_eq!(standard_position("T3"), standard_position("T7"));
        assert!(standard_position("X9").is_none());
        assert!(standard_position("T5Z").is_none());
    }

    #[test]
    fn c4_sits_halfway_to_t8() {
        let c4 = standard_position("C4").unwrap();
        let want = from_angles(45.0, 0.0);
        for i in 0..3 {
            assert!((c4[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn layouts_have_expected_sizes() {
        assert_eq!(MontageLayout::standard_1020().len(), 19);
        assert_eq!(MontageLayout::seed62().len(), 62);
        let bp = MontageLayout::double_banana();
        assert_eq!(bp.len(), 20);
        assert_eq!(bp.kind, MontageKind::Bipolar);
        assert_eq!(bp.labels()[0], "Fp1-F7");
        assert_eq!(bp.labels()[19], "C4-T4");
    }

    #[test]
    fn duplicate_labels_rejected() {
        let e = Electrode {
            label: "Cz".into(),
            position: [0.0, 0.0, 1.0],
        };
        let err = MontageLayout::new("x", MontageKind::Unipolar, vec![e.clone(), e]).unwrap_err();
        assert!(matches!(err, LunaError::Montage(_)));
    }

    #[test]
    fn non_unit_positions_rejected() {
        let e = Electrode {
            label: "Cz".into(),
            position: [0.0, 0.0, 1.5],
        };
        assert!(MontageLayout::new("x", MontageKind::Unipolar, vec![e]).is_err());
    }

    #[test]
    fn missing_pair_member_is_named() {
        let m = MontageLayout::from_labels("m", &["Fp1", "Fp2"]).unwrap();
        match bipolar_layout(&m) {
            Err(LunaError::MissingElectrode(name)) => assert_eq!(name, "F7"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
