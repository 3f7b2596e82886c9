//! Zernike polynomials on the unit disk.
//!
//! Modes are unit-RMS normalized (the Noll convention): the radial part is
//! scaled by `sqrt(n + 1)` for `m = 0` and by `sqrt(2 (n + 1))` otherwise, so
//! an amplitude of `a` µm contributes exactly `a` µm of RMS wavefront error.
//!
//! Angles are measured counter-clockwise from the +x axis with the pupil y
//! axis pointing up. Positive `m` carries `cos(m θ)`, negative `m` carries
//! `sin(|m| θ)`. Both ANSI (0-based) and Noll (1-based) single indices are
//! supported up to radial order 7.
//!
//! | ANSI j | 0 | 1 | 2 | 3 | 4 | 5 | 6 | 7 | 8 | 9 | 10 | 11 | 12 | 13 | 14 |
//! | ------ | - | - | - | - | - | - | - | - | - | - | -- | -- | -- | -- | -- |
//! | n      | 0 | 1 | 1 | 2 | 2 | 2 | 3 | 3 | 3 | 3 | 4  | 4  | 4  | 4  | 4  |
//! | m      | 0 |-1 | 1 |-2 | 0 | 2 |-3 |-1 | 1 | 3 | -4 | -2 | 0  | 2  | 4  |

use std::fmt;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest radial order the toolkit evaluates.
pub const MAX_ORDER: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Ansi,
    Noll,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Ansi => write!(f, "ansi"),
            Scheme::Noll => write!(f, "noll"),
        }
    }
}

/// A Zernike mode, addressed by `(n, m)` and remembered under the scheme it
/// was requested in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModeIndex {
    scheme: Scheme,
    n: u32,
    m: i32,
}

impl ModeIndex {
    pub fn from_nm(scheme: Scheme, n: u32, m: i32) -> Result<Self> {
        if n > MAX_ORDER {
            return Err(Error::Range(format!(
                "radial order {n} exceeds the supported maximum {MAX_ORDER}"
            )));
        }
        let am = m.unsigned_abs();
        if am > n || !(n - am).is_multiple_of(2) {
            return Err(Error::validation(format!(
                "invalid Zernike pair (n={n}, m={m}): need |m| <= n and n - |m| even"
            )));
        }
        Ok(ModeIndex { scheme, n, m })
    }

    /// `(n, m)` for single index `j` under `scheme`.
    pub fn from_single_index(scheme: Scheme, j: u32) -> Result<Self> {
        let (n, m) = match scheme {
            Scheme::Ansi => ansi_to_nm(j)?,
            Scheme::Noll => noll_to_nm(j)?,
        };
        ModeIndex::from_nm(scheme, n, m)
    }

    pub fn ansi(j: u32) -> Result<Self> {
        Self::from_single_index(Scheme::Ansi, j)
    }

    pub fn noll(j: u32) -> Result<Self> {
        Self::from_single_index(Scheme::Noll, j)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
    pub fn n(&self) -> u32 {
        self.n
    }
    pub fn m(&self) -> i32 {
        self.m
    }

    /// Single index under the mode's own scheme.
    pub fn j(&self) -> u32 {
        self.index_in(self.scheme)
    }

    pub fn index_in(&self, scheme: Scheme) -> u32 {
        match scheme {
            Scheme::Ansi => nm_to_ansi(self.n, self.m),
            Scheme::Noll => nm_to_noll(self.n, self.m),
        }
    }

    pub fn ansi_index(&self) -> u32 {
        nm_to_ansi(self.n, self.m)
    }

    /// Same mode, relabelled under another scheme.
    pub fn with_scheme(&self, scheme: Scheme) -> ModeIndex {
        ModeIndex { scheme, ..*self }
    }

    /// Same physical mode regardless of scheme label.
    pub fn same_mode(&self, other: &ModeIndex) -> bool {
        self.n == other.n && self.m == other.m
    }

    pub fn name(&self) -> &'static str {
        match (self.n, self.m) {
            (0, 0) => "piston",
            (1, -1) => "vertical tilt",
            (1, 1) => "horizontal tilt",
            (2, -2) => "oblique astigmatism",
            (2, 0) => "defocus",
            (2, 2) => "vertical astigmatism",
            (3, -3) => "vertical trefoil",
            (3, -1) => "vertical coma",
            (3, 1) => "horizontal coma",
            (3, 3) => "oblique trefoil",
            (4, -4) => "oblique quadrafoil",
            (4, -2) => "oblique secondary astigmatism",
            (4, 0) => "primary spherical",
            (4, 2) => "vertical secondary astigmatism",
            (4, 4) => "vertical quadrafoil",
            _ => "higher order",
        }
    }

    /// Normalized value at polar pupil coordinates.
    pub fn evaluate(&self, rho: f64, theta: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Domain(format!("rho = {rho} outside [0, 1]")));
        }
        Ok(self.evaluate_unchecked(rho, theta))
    }

    pub(crate) fn evaluate_unchecked(&self, rho: f64, theta: f64) -> f64 {
        self.radial_poly().eval(rho) * self.angular(theta)
    }

    fn angular(&self, theta: f64) -> f64 {
        match self.m {
            0 => 1.0,
            m if m > 0 => (m as f64 * theta).cos(),
            m => ((-m) as f64 * theta).sin(),
        }
    }

    pub(crate) fn radial_poly(&self) -> RadialPoly {
        RadialPoly::new(self.n, self.m.unsigned_abs())
    }
}

impl fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} (n={}, m={})",
            self.scheme,
            self.j(),
            self.n,
            self.m
        )
    }
}

pub fn mode_from_single_index(scheme: Scheme, j: u32) -> Result<ModeIndex> {
    ModeIndex::from_single_index(scheme, j)
}

pub fn evaluate_mode(mode: &ModeIndex, rho: f64, theta: f64) -> Result<f64> {
    mode.evaluate(rho, theta)
}

fn ansi_to_nm(j: u32) -> Result<(u32, i32)> {
    let mut n = 0u32;
    while (n + 1) * (n + 2) / 2 <= j {
        n += 1;
        if n > MAX_ORDER {
            return Err(Error::Range(format!(
                "ANSI index {j} exceeds order {MAX_ORDER}"
            )));
        }
    }
    let m = 2 * j as i32 - (n * (n + 2)) as i32;
    Ok((n, m))
}

fn nm_to_ansi(n: u32, m: i32) -> u32 {
    ((n * (n + 2)) as i32 + m) as u32 / 2
}

fn noll_to_nm(j: u32) -> Result<(u32, i32)> {
    if j == 0 {
        return Err(Error::Range("Noll indices start at 1".into()));
    }
    let mut n = 0u32;
    while (n + 1) * (n + 2) / 2 < j {
        n += 1;
        if n > MAX_ORDER {
            return Err(Error::Range(format!(
                "Noll index {j} exceeds order {MAX_ORDER}"
            )));
        }
    }
    let p = j - n * (n + 1) / 2 - 1;
    let am = if n.is_multiple_of(2) {
        2 * p.div_ceil(2)
    } else {
        2 * (p / 2) + 1
    };
    let m = if am == 0 {
        0
    } else if j.is_multiple_of(2) {
        am as i32
    } else {
        -(am as i32)
    };
    Ok((n, m))
}

fn nm_to_noll(n: u32, m: i32) -> u32 {
    let base = n * (n + 1) / 2 + 1;
    let am = m.unsigned_abs();
    let p = if n.is_multiple_of(2) {
        if am == 0 {
            0
        } else {
            am - 1
        }
    } else {
        am - 1
    };
    let j = base + p;
    if am == 0 {
        return j;
    }
    let want_even = m > 0;
    if j.is_multiple_of(2) == want_even {
        j
    } else {
        j + 1
    }
}

/// Normalized radial polynomial as explicit coefficients of `rho^(n - 2k)`.
#[derive(Debug, Clone)]
pub(crate) struct RadialPoly {
    terms: Vec<(i32, f64)>,
}

impl RadialPoly {
    fn new(n: u32, am: u32) -> Self {
        let fact = |k: u32| (1..=k).map(|v| v as f64).product::<f64>();
        let norm = if am == 0 {
            ((n + 1) as f64).sqrt()
        } else {
            (2.0 * (n + 1) as f64).sqrt()
        };
        let terms = (0..=(n - am) / 2)
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                let c = sign * fact(n - k)
                    / (fact(k) * fact((n + am) / 2 - k) * fact((n - am) / 2 - k));
                ((n - 2 * k) as i32, norm * c)
            })
            .collect();
        RadialPoly { terms }
    }

    pub(crate) fn eval(&self, rho: f64) -> f64 {
        self.terms.iter().map(|&(p, c)| c * rho.powi(p)).sum()
    }
}

/// Ordered list of modes with one amplitude (µm RMS) per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeVector {
    modes: Vec<ModeIndex>,
    amps: Vec<f64>,
}

impl AmplitudeVector {
    pub fn new(modes: Vec<ModeIndex>, amps: Vec<f64>) -> Result<Self> {
        if modes.len() != amps.len() {
            return Err(Error::validation(format!(
                "{} modes but {} amplitudes",
                modes.len(),
                amps.len()
            )));
        }
        for (i, a) in modes.iter().enumerate() {
            if modes[..i].iter().any(|b| b.same_mode(a)) {
                return Err(Error::validation(format!("duplicate mode {a}")));
            }
        }
        if amps.iter().any(|a| !a.is_finite()) {
            return Err(Error::validation("non-finite amplitude"));
        }
        Ok(AmplitudeVector { modes, amps })
    }

    pub fn zeros(modes: Vec<ModeIndex>) -> Result<Self> {
        let n = modes.len();
        Self::new(modes, vec![0.0; n])
    }

    pub fn modes(&self) -> &[ModeIndex] {
        &self.modes
    }

    pub fn amps(&self) -> &[f64] {
        &self.amps
    }

    pub fn amps_mut(&mut self) -> &mut [f64] {
        &mut self.amps
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn get(&self, mode: &ModeIndex) -> Option<f64> {
        self.modes
            .iter()
            .position(|m| m.same_mode(mode))
            .map(|i| self.amps[i])
    }

    pub fn scaled(&self, factor: f64) -> AmplitudeVector {
        AmplitudeVector {
            modes: self.modes.clone(),
            amps: self.amps.iter().map(|a| a * factor).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModeIndex, f64)> {
        self.modes.iter().zip(self.amps.iter().copied())
    }

    /// Wavefront value in µm at a pupil point; caller guarantees `rho <= 1`.
    pub(crate) fn wavefront_at(&self, polys: &[RadialPoly], rho: f64, theta: f64) -> f64 {
        self.modes
            .iter()
            .zip(polys)
            .zip(&self.amps)
            .map(|((mode, poly), a)| a * poly.eval(rho) * mode.angular(theta))
            .sum()
    }

    pub(crate) fn radial_polys(&self) -> Vec<RadialPoly> {
        self.modes.iter().map(|m| m.radial_poly()).collect()
    }
}

/// Serializable form used by amplitude JSON files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeAmplitude {
    pub scheme: Scheme,
    pub j: u32,
    pub n: u32,
    pub m: i32,
    pub amplitude_um: f64,
}

impl AmplitudeVector {
    pub fn to_records(&self) -> Vec<ModeAmplitude> {
        self.iter()
            .map(|(mode, a)| ModeAmplitude {
                scheme: mode.scheme(),
                j: mode.j(),
                n: mode.n(),
                m: mode.m(),
                amplitude_um: a,
            })
            .collect()
    }

    /// Rebuilds from records; `(scheme, j)` is authoritative and must agree
    /// with the stated `(n, m)`.
    pub fn from_records(records: &[ModeAmplitude]) -> Result<Self> {
        let mut modes = Vec::with_capacity(records.len());
        let mut amps = Vec::with_capacity(records.len());
        for r in records {
            let mode = ModeIndex::from_single_index(r.scheme, r.j)?;
            if mode.n() != r.n || mode.m() != r.m {
                return Err(Error::validation(format!(
                    "{} {} is (n={}, m={}), record says (n={}, m={})",
                    r.scheme,
                    r.j,
                    mode.n(),
                    mode.m(),
                    r.n,
                    r.m
                )));
            }
            modes.push(mode);
            amps.push(r.amplitude_um);
        }
        AmplitudeVector::new(modes, amps)
    }
}

#[derive(Debug, Clone)]
pub struct WavefrontMap {
    /// Wavefront in µm, row 0 at the top of the pupil.
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
    pub size: usize,
}

/// Pixel-centre polar coordinates `(rho, theta)` of every cell of a
/// `size × size` grid spanning the unit disk's bounding square, rows running
/// top to bottom. Corners have `rho > 1`.
pub fn disk_coordinates(size: usize) -> impl Iterator<Item = ((usize, usize), f64, f64)> {
    let half = size as f64 / 2.0;
    (0..size).flat_map(move |r| {
        (0..size).map(move |c| {
            let x = (c as f64 + 0.5 - half) / half;
            let y = (half - r as f64 - 0.5) / half;
            ((r, c), x.hypot(y), y.atan2(x))
        })
    })
}

pub fn wavefront(amplitudes: &AmplitudeVector, size: usize) -> Result<WavefrontMap> {
    if amplitudes.is_empty() {
        return Err(Error::validation("wavefront needs at least one mode"));
    }
    if size < 16 {
        return Err(Error::validation(format!(
            "wavefront size {size} below minimum 16"
        )));
    }
    let polys = amplitudes.radial_polys();
    let mut values = Array2::zeros((size, size));
    let mut mask = Array2::from_elem((size, size), false);
    for ((r, c), rho, theta) in disk_coordinates(size) {
        if rho <= 1.0 {
            mask[[r, c]] = true;
            values[[r, c]] = amplitudes.wavefront_at(&polys, rho, theta);
        }
    }
    Ok(WavefrontMap { values, mask, size })
}

impl WavefrontMap {
    pub fn rms(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        Zip::from(&self.values).and(&self.mask).for_each(|v, &m| {
            if m {
                sum += v * v;
                count += 1;
            }
        });
        (sum / count.max(1) as f64).sqrt()
    }
}
