//! Synthetic guided-wave data generation and the preprocessing chain:
//! band-pass compression, baseline subtraction, curation, class balancing,
//! and the on-disk dataset container.
//!
//! The synthesizer is deliberately phenomenological: tone-burst wavepackets
//! with group delays, geometric spreading, dispersion stretching, first-order
//! image-source boundary reflections, ray attenuation through the load
//! footprint, and a weak scattered packet from the load. It is an oracle for
//! verifying the learning pipeline, not a plate-elastodynamics solver. With a
//! zeroed [`SymmetryBreakSpec`] and zero noise its output is exactly
//! D4-covariant.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor;

/// Transducer corner positions in mm, indexed counterclockwise from the
/// lower-left corner; matches `dihedral::GroupElement::corner`.
pub const TRANSDUCERS: [[f64; 2]; 4] = [
    [-175.0, -175.0],
    [175.0, -175.0],
    [175.0, 175.0],
    [-175.0, 175.0],
];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PlateConfig {
    /// Plate side length, mm.
    pub side_mm: f64,
    /// Plate thickness, mm (descriptive only).
    pub thickness_mm: f64,
    /// Side of the square on which the transducers sit, mm.
    pub transducer_square_mm: f64,
    /// Side of the square contact-load face, mm.
    pub load_face_mm: f64,
    /// Load positions per grid axis.
    pub grid_n: usize,
    /// Side of the square swept by load centers, mm.
    pub grid_span_mm: f64,
    /// Excitation center frequency, kHz.
    pub excitation_khz: f64,
    /// Cycles in the Hanning-windowed tone burst.
    pub excitation_cycles: f64,
    /// Record window, ms.
    pub window_ms: f64,
    /// Samples per record.
    pub n_samples: usize,
    /// A0 group velocity, m/s.
    pub v_a0: f64,
    /// S0 group velocity, m/s.
    pub v_s0: f64,
    /// Additive Gaussian noise standard deviation (signal units).
    pub noise: f64,
    /// Samples dropped from the front of the 192-sample compressed record.
    pub trim: usize,
}

impl Default for PlateConfig {
    fn default() -> Self {
        Self {
            side_mm: 610.0,
            thickness_mm: 1.2,
            transducer_square_mm: 350.0,
            load_face_mm: 40.0,
            grid_n: 51,
            grid_span_mm: 250.0,
            excitation_khz: 300.0,
            excitation_cycles: 5.0,
            window_ms: 0.4,
            n_samples: 10_000,
            v_a0: 2250.0,
            v_s0: 5400.0,
            noise: 0.005,
            trim: 34,
        }
    }
}

impl PlateConfig {
    pub fn compressed_len(&self) -> usize {
        RECON_LEN - self.trim
    }

    /// Load-center positions of the sampling grid, row-major over (x, y).
    pub fn grid_positions(&self) -> Vec<[f64; 2]> {
        let n = self.grid_n;
        let half = self.grid_span_mm / 2.0;
        let mut out = Vec::with_capacity(n * n);
        for iy in 0..n {
            for ix in 0..n {
                let frac = |i: usize| {
                    if n == 1 {
                        0.5
                    } else {
                        i as f64 / (n - 1) as f64
                    }
                };
                out.push([-half + self.grid_span_mm * frac(ix), -half + self.grid_span_mm * frac(iy)]);
            }
        }
        out
    }
}

/// Controlled departures from exact D4 symmetry in the synthetic plate.
/// An all-zero spec yields exactly covariant data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct SymmetryBreakSpec {
    /// Relative group-velocity anisotropy amplitude, v(θ) = v·(1 + a·cos 2θ).
    pub anisotropy: f64,
    /// Relative velocity gradient across the plate (thickness/temperature
    /// trend): v picks up a factor 1 + g·(x + y)/side at position (x, y).
    pub gradient: f64,
    /// Relative per-transducer gain spread.
    pub gain_jitter: f64,
    /// Per-transducer timing jitter, ms.
    pub phase_jitter: f64,
    /// Relative per-edge reflection-coefficient spread.
    pub reflection_jitter: f64,
    /// Seed for drawing the frozen plate irregularities.
    pub seed: u64,
}

/// Frozen realization of the plate irregularities.
struct SymmetryBreak {
    anisotropy: f64,
    gradient: f64,
    gain: [f64; 4],
    delay: [f64; 4],
    edge_coeff: [f64; 4],
}

impl SymmetryBreakSpec {
    pub fn is_zero(&self) -> bool {
        self.anisotropy == 0.0
            && self.gradient == 0.0
            && self.gain_jitter == 0.0
            && self.phase_jitter == 0.0
            && self.reflection_jitter == 0.0
    }

    fn realize(&self) -> SymmetryBreak {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut draw = |amp: f64| -> f64 {
            let u: f64 = rng.gen_range(-1.0..1.0);
            amp * u
        };
        let mut gain = [1.0; 4];
        let mut delay = [0.0; 4];
        let mut edge_coeff = [1.0; 4];
        for g in gain.iter_mut() {
            *g = 1.0 + draw(self.gain_jitter);
        }
        for d in delay.iter_mut() {
            *d = draw(self.phase_jitter);
        }
        for e in edge_coeff.iter_mut() {
            *e = 1.0 + draw(self.reflection_jitter);
        }
        SymmetryBreak {
            anisotropy: self.anisotropy,
            gradient: self.gradient,
            gain,
            delay,
            edge_coeff,
        }
    }
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

const BASE_REFLECTION: f64 = 0.25;
const S0_RELATIVE_AMP: f64 = 0.3;
const LOAD_TRANSMISSION: f64 = 0.55;
const SCATTER_AMP: f64 = 0.02;
/// Dispersion stretching per mm of travel.
const DISPERSION_PER_MM: f64 = 5e-4;
/// Geometric-spreading distance floor, mm.
const SPREAD_FLOOR_MM: f64 = 25.0;

struct Arrival {
    /// Group delay, ms.
    t: f64,
    amp: f64,
    /// Packet stretch factor from dispersion.
    stretch: f64,
    /// Cycles per ms.
    freq: f64,
    cycles: f64,
}

/// Accumulate `a` into `out` sampled at `fs` samples per ms, visiting only
/// the packet's support.
fn add_packet(out: &mut [f64], fs: f64, a: &Arrival) {
    let duration = a.cycles / a.freq * a.stretch;
    let start = (a.t * fs).floor().max(0.0) as usize;
    let stop = (((a.t + duration) * fs).ceil() as usize).min(out.len());
    // dispersion stretches the envelope and conserves packet energy
    let amp = a.amp / a.stretch.sqrt();
    for (n, slot) in out.iter_mut().enumerate().take(stop).skip(start) {
        let u = (n as f64 / fs - a.t) / a.stretch;
        if u < 0.0 {
            continue;
        }
        let window = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * u * a.freq / a.cycles).cos());
        *slot += amp * (2.0 * std::f64::consts::PI * a.freq * u).sin() * window;
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distance from point `p` to segment `a`–`b`.
fn segment_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    dist([a[0] + t * ab[0], a[1] + t * ab[1]], p)
}

/// Travel time of a polyline path in ms under directional anisotropy and a
/// spatial velocity gradient (evaluated at each leg midpoint).
fn path_time(points: &[[f64; 2]], v_m_s: f64, brk: &SymmetryBreak, side_mm: f64) -> f64 {
    // mm / (mm/ms); v in m/s equals mm/ms numerically
    let mut t = 0.0;
    for w in points.windows(2) {
        let d = dist(w[0], w[1]);
        let theta = (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]);
        let mid = [(w[0][0] + w[1][0]) / 2.0, (w[0][1] + w[1][1]) / 2.0];
        let v = v_m_s
            * (1.0 + brk.anisotropy * (2.0 * theta).cos())
            * (1.0 + brk.gradient * (mid[0] + mid[1]) / side_mm);
        t += d / v;
    }
    t
}

fn path_length(points: &[[f64; 2]]) -> f64 {
    points.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Smallest distance from the load center to any leg of the path.
fn path_load_distance(points: &[[f64; 2]], load: [f64; 2]) -> f64 {
    points
        .windows(2)
        .map(|w| segment_distance(w[0], w[1], load))
        .fold(f64::INFINITY, f64::min)
}

/// Transmission of a ray passing a load centered `d` away: full absorption
/// strength on the ray, Gaussian diffraction falloff with the footprint
/// side as length scale.
fn load_transmission(d: f64, radius: f64) -> f64 {
    let scale = 2.0 * radius;
    1.0 - (1.0 - LOAD_TRANSMISSION) * (-(d / scale) * (d / scale)).exp()
}

/// Mirror `p` across edge `e` of the plate (0: x=-h, 1: x=+h, 2: y=-h, 3: y=+h).
fn mirror(p: [f64; 2], e: usize, half_side: f64) -> [f64; 2] {
    match e {
        0 => [-2.0 * half_side - p[0], p[1]],
        1 => [2.0 * half_side - p[0], p[1]],
        2 => [p[0], -2.0 * half_side - p[1]],
        _ => [p[0], 2.0 * half_side - p[1]],
    }
}

/// Where the segment `a`→`b` crosses edge `e`, if it does.
fn edge_crossing(a: [f64; 2], b: [f64; 2], e: usize, half_side: f64) -> Option<[f64; 2]> {
    let (coord, level) = match e {
        0 => (0, -half_side),
        1 => (0, half_side),
        2 => (1, -half_side),
        _ => (1, half_side),
    };
    let d = [b[0] - a[0], b[1] - a[1]];
    if d[coord] == 0.0 {
        return None;
    }
    let t = (level - a[coord]) / d[coord];
    if !(0.0..=1.0).contains(&t) {
        return None;
    }
    let p = [a[0] + t * d[0], a[1] + t * d[1]];
    (p[1 - coord].abs() <= half_side).then_some(p)
}

/// Reflection point on edge `e` for the ray sender → edge → receiver.
fn reflection_point(s: [f64; 2], r: [f64; 2], e: usize, half_side: f64) -> Option<[f64; 2]> {
    edge_crossing(mirror(s, e, half_side), r, e, half_side)
}

/// Bounce points on edges `e` then `f` for the ray sender → e → f → receiver.
fn double_reflection_points(
    s: [f64; 2],
    r: [f64; 2],
    e: usize,
    f: usize,
    half_side: f64,
) -> Option<([f64; 2], [f64; 2])> {
    let img1 = mirror(s, e, half_side);
    let img2 = mirror(img1, f, half_side);
    // unfold back to front: last bounce on f, then first bounce on e
    let pf = edge_crossing(img2, r, f, half_side)?;
    let pe = edge_crossing(img1, pf, e, half_side)?;
    Some((pe, pf))
}

/// Synthesize the 4×4 set of 10,000-sample transducer records for one
/// actuation round: entry `[s][r]` is the voltage at receiver `r` when
/// transducer `s` actuates. `load` is the contact-load center in mm, or
/// `None` for a baseline record. `seed` drives the additive noise only;
/// plate irregularities are frozen by `sym.seed`.
pub fn synthesize(
    plate: &PlateConfig,
    load: Option<[f64; 2]>,
    sym: &SymmetryBreakSpec,
    seed: u64,
) -> Result<Tensor> {
    if let Some(p) = load {
        let half = plate.grid_span_mm / 2.0;
        if p[0].abs() > half + 1e-9 || p[1].abs() > half + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "load ({}, {}) outside the sampled square of side {} mm",
                p[0], p[1], plate.grid_span_mm
            )));
        }
    }
    let brk = sym.realize();
    let fs = plate.n_samples as f64 / plate.window_ms;
    let freq = plate.excitation_khz; // kHz == cycles per ms
    let half_side = plate.side_mm / 2.0;
    let load_radius = plate.load_face_mm / 2.0;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let modes = [(plate.v_a0, 1.0), (plate.v_s0, S0_RELATIVE_AMP)];
    let mut data = vec![0.0f64; 16 * plate.n_samples];

    for (s_idx, &s_pos) in TRANSDUCERS.iter().enumerate() {
        for (r_idx, &r_pos) in TRANSDUCERS.iter().enumerate() {
            let trace =
                &mut data[(s_idx * 4 + r_idx) * plate.n_samples..][..plate.n_samples];
            let coupling = brk.gain[s_idx] * brk.gain[r_idx];
            let extra_delay = brk.delay[s_idx] + brk.delay[r_idx];

            // candidate paths: direct, one bounce off each edge, two bounces
            // off each ordered edge pair
            let mut paths: Vec<(Vec<[f64; 2]>, f64)> = vec![(vec![s_pos, r_pos], 1.0)];
            for e in 0..4 {
                if let Some(p) = reflection_point(s_pos, r_pos, e, half_side) {
                    paths.push((
                        vec![s_pos, p, r_pos],
                        BASE_REFLECTION * brk.edge_coeff[e],
                    ));
                }
            }
            for e in 0..4 {
                for f in 0..4 {
                    if f == e {
                        continue;
                    }
                    if let Some((pe, pf)) =
                        double_reflection_points(s_pos, r_pos, e, f, half_side)
                    {
                        paths.push((
                            vec![s_pos, pe, pf, r_pos],
                            BASE_REFLECTION
                                * BASE_REFLECTION
                                * brk.edge_coeff[e]
                                * brk.edge_coeff[f],
                        ));
                    }
                }
            }

            for (path, coeff) in &paths {
                let d = path_length(path);
                let spread = 1.0 / d.max(SPREAD_FLOOR_MM).sqrt();
                let transmission = match load {
                    Some(x) => load_transmission(path_load_distance(path, x), load_radius),
                    None => 1.0,
                };
                for &(v, mode_amp) in &modes {
                    add_packet(
                        trace,
                        fs,
                        &Arrival {
                            t: path_time(path, v, &brk, plate.side_mm) + extra_delay,
                            amp: coupling * coeff * mode_amp * spread * transmission,
                            stretch: 1.0 + DISPERSION_PER_MM * d,
                            freq,
                            cycles: plate.excitation_cycles,
                        },
                    );
                }
            }

            // weak packet scattered off the load itself
            if let Some(x) = load {
                let path = vec![s_pos, x, r_pos];
                let d = path_length(&path);
                let spread = 1.0 / (d / 2.0).max(SPREAD_FLOOR_MM).sqrt();
                for &(v, mode_amp) in &modes {
                    add_packet(
                        trace,
                        fs,
                        &Arrival {
                            t: path_time(&path, v, &brk, plate.side_mm) + extra_delay,
                            amp: SCATTER_AMP * coupling * mode_amp * spread,
                            stretch: 1.0 + DISPERSION_PER_MM * d,
                            freq,
                            cycles: plate.excitation_cycles,
                        },
                    );
                }
            }

            if plate.noise > 0.0 {
                for v in trace.iter_mut() {
                    *v += plate.noise * normal.sample(&mut noise_rng);
                }
            }
        }
    }
    Tensor::new(vec![4, 4, plate.n_samples], data)
}

// ---------------------------------------------------------------------------
// Band-pass compression
// ---------------------------------------------------------------------------

/// Raw record length expected by [`compress`].
pub const RAW_LEN: usize = 10_000;
/// Compressed grid length before trimming.
pub const RECON_LEN: usize = 192;
/// First and last retained FFT bins (2.5 kHz resolution: 180–417.5 kHz).
pub const BAND_BINS: std::ops::RangeInclusive<usize> = 72..=167;

/// Band-pass a 10,000-sample record to the retained 96 complex bins and
/// resynthesize on a 192-sample grid; drop the first `trim` samples and
/// remove the residual mean. Linear in the input.
pub fn compress(x: &[f64], trim: usize) -> Result<Vec<f64>> {
    if x.len() != RAW_LEN {
        return Err(Error::Shape(format!(
            "compress expects {} samples, got {}",
            RAW_LEN,
            x.len()
        )));
    }
    if trim >= RECON_LEN {
        return Err(Error::InvalidArgument(format!("trim {trim} too large")));
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(RAW_LEN).process(&mut buf);

    let mut y = vec![0.0f64; RECON_LEN];
    let scale = 2.0 / RAW_LEN as f64;
    for k in BAND_BINS {
        let xk = buf[k];
        let w = 2.0 * std::f64::consts::PI * k as f64 / RECON_LEN as f64;
        for (n, slot) in y.iter_mut().enumerate() {
            let phase = w * n as f64;
            *slot += scale * (xk.re * phase.cos() - xk.im * phase.sin());
        }
    }
    let mut out = y[trim..].to_vec();
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    for v in out.iter_mut() {
        *v -= mean;
    }
    Ok(out)
}

/// Spectral amplitude signature over the retained band (96 values).
pub fn band_spectrum(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != RAW_LEN {
        return Err(Error::Shape(format!(
            "band_spectrum expects {} samples, got {}",
            RAW_LEN,
            x.len()
        )));
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(RAW_LEN).process(&mut buf);
    Ok(BAND_BINS.map(|k| buf[k].norm() * 2.0 / RAW_LEN as f64).collect())
}

/// Compress every trace of a raw `[4, 4, n_samples]` record.
pub fn compress_adjacency(raw: &Tensor, trim: usize) -> Result<Tensor> {
    let shape = raw.shape();
    if shape.len() != 3 || shape[0] != 4 || shape[1] != 4 {
        return Err(Error::Shape(format!("expected [4, 4, T], got {:?}", shape)));
    }
    let t_raw = shape[2];
    let t_out = RECON_LEN - trim;
    let mut data = Vec::with_capacity(16 * t_out);
    for p in 0..16 {
        data.extend(compress(&raw.data()[p * t_raw..][..t_raw], trim)?);
    }
    Tensor::new(vec![4, 4, t_out], data)
}

/// Elementwise V − B.
pub fn baseline_subtract(v: &Tensor, b: &Tensor) -> Result<Tensor> {
    if v.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "baseline_subtract: {:?} vs {:?}",
            v.shape(),
            b.shape()
        )));
    }
    v.sub(b)
}

// ---------------------------------------------------------------------------
// Dataset container
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Example {
    /// Load center in mm; `None` marks an undamaged (baseline-combination) record.
    pub position: Option<[f64; 2]>,
    /// Compressed adjacency record, `[4, 4, 158]`, not baseline-subtracted.
    pub adjacency: Tensor,
    /// Band-spectrum signature of the actuation signal (96 values).
    pub excitation_spectrum: Vec<f64>,
}

impl Example {
    pub fn is_damaged(&self) -> bool {
        self.position.is_some()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CurationLog {
    pub removed_spectral: usize,
    pub removed_received: usize,
    pub removed_amplitude: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub plate: PlateConfig,
    pub sym: SymmetryBreakSpec,
    pub seed: u64,
    /// Compressed baseline (no-load) adjacency records, `[4, 4, 158]` each.
    pub baselines: Vec<Tensor>,
    pub examples: Vec<Example>,
    pub curation: CurationLog,
}

impl Dataset {
    /// Mean of the stored baselines.
    pub fn mean_baseline(&self) -> Result<Tensor> {
        if self.baselines.is_empty() {
            return Err(Error::Data("dataset has no baselines".into()));
        }
        let mut acc = self.baselines[0].clone();
        for b in &self.baselines[1..] {
            acc.add_assign(b);
        }
        acc.scale_assign(crate::Scalar::from(1.0) / self.baselines.len() as f64);
        Ok(acc)
    }

    /// Residual of example `i` against the mean baseline.
    pub fn residual(&self, i: usize) -> Result<Tensor> {
        baseline_subtract(&self.examples[i].adjacency, &self.mean_baseline()?)
    }

    /// Residuals of example `i` against each stored baseline.
    pub fn residual_variants(&self, i: usize) -> Result<Vec<Tensor>> {
        self.baselines
            .iter()
            .map(|b| baseline_subtract(&self.examples[i].adjacency, b))
            .collect()
    }
}

fn mix_seed(base: u64, index: u64) -> u64 {
    // splitmix64 round keeps per-position noise streams independent
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of baseline acquisitions stored with a dataset.
pub const N_BASELINES: usize = 6;

/// Generate a full synthetic dataset: `N_BASELINES` no-load acquisitions and
/// one loaded acquisition per grid position. Noise streams are keyed by
/// (seed, record index) so generation order cannot change the bytes.
pub fn generate_dataset(
    plate: &PlateConfig,
    sym: &SymmetryBreakSpec,
    seed: u64,
) -> Result<Dataset> {
    let excitation = excitation_record(plate);
    let spectrum = band_spectrum(&excitation)?;
    let mut baselines = Vec::with_capacity(N_BASELINES);
    for b in 0..N_BASELINES {
        let raw = synthesize(plate, None, sym, mix_seed(seed, b as u64))?;
        baselines.push(compress_adjacency(&raw, plate.trim)?);
    }
    let positions = plate.grid_positions();
    let mut examples = Vec::with_capacity(positions.len());
    for (i, &p) in positions.iter().enumerate() {
        let raw = synthesize(plate, Some(p), sym, mix_seed(seed, (N_BASELINES + i) as u64))?;
        examples.push(Example {
            position: Some(p),
            adjacency: compress_adjacency(&raw, plate.trim)?,
            excitation_spectrum: spectrum.clone(),
        });
    }
    Ok(Dataset {
        plate: plate.clone(),
        sym: sym.clone(),
        seed,
        baselines,
        examples,
        curation: CurationLog::default(),
    })
}

/// The nominal actuation record: the tone burst at the start of the window.
pub fn excitation_record(plate: &PlateConfig) -> Vec<f64> {
    let fs = plate.n_samples as f64 / plate.window_ms;
    let mut out = vec![0.0; plate.n_samples];
    add_packet(
        &mut out,
        fs,
        &Arrival {
            t: 0.0,
            amp: 1.0,
            stretch: 1.0,
            freq: plate.excitation_khz,
            cycles: plate.excitation_cycles,
        },
    );
    out
}

// ---------------------------------------------------------------------------
// Curation, balancing, splitting
// ---------------------------------------------------------------------------

/// Curation thresholds; any threshold set to infinity disables its filter.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationThresholds {
    /// Max Euclidean distance of an example's excitation band spectrum from
    /// the fleet mean spectrum.
    pub tau_spec: f64,
    /// Max Euclidean distance of the received adjacency record from the
    /// per-path dataset mean, in units of the mean distance.
    pub tau_recv: f64,
    /// Max post-subtraction amplitude, in units of the dataset median of
    /// per-example max amplitudes.
    pub tau_amp: f64,
}

impl Default for CurationThresholds {
    fn default() -> Self {
        Self {
            tau_spec: 0.5,
            tau_recv: 4.0,
            tau_amp: 5.0,
        }
    }
}

/// Apply the three quality filters in order, removing flagged examples and
/// recording counts in the dataset's curation log.
pub fn curate(mut ds: Dataset, thresholds: &CurationThresholds) -> Result<Dataset> {
    // (1) excitation spectrum vs fleet mean
    if thresholds.tau_spec.is_finite() && !ds.examples.is_empty() {
        let bins = ds.examples[0].excitation_spectrum.len();
        let mut mean = vec![0.0; bins];
        for e in &ds.examples {
            for (m, &v) in mean.iter_mut().zip(&e.excitation_spectrum) {
                *m += v;
            }
        }
        let norm = ds.examples.len() as f64;
        for m in mean.iter_mut() {
            *m /= norm;
        }
        let mean_mag = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let before = ds.examples.len();
        ds.examples.retain(|e| {
            let d = e
                .excitation_spectrum
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d / mean_mag <= thresholds.tau_spec
        });
        ds.curation.removed_spectral += before - ds.examples.len();
    }

    // (2) received record vs per-path mean
    if thresholds.tau_recv.is_finite() && ds.examples.len() > 1 {
        let mut mean = ds.examples[0].adjacency.clone();
        for e in &ds.examples[1..] {
            mean.add_assign(&e.adjacency);
        }
        mean.scale_assign(1.0 / ds.examples.len() as f64);
        let dists: Vec<f64> = ds
            .examples
            .iter()
            .map(|e| e.adjacency.sub(&mean).map(|d| d.frobenius_norm()))
            .collect::<Result<Vec<f64>>>()?;
        let mean_dist = (dists.iter().sum::<f64>() / dists.len() as f64).max(1e-300);
        let before = ds.examples.len();
        let mut keep = dists.iter().map(|d| d / mean_dist <= thresholds.tau_recv);
        ds.examples.retain(|_| keep.next().unwrap());
        ds.curation.removed_received += before - ds.examples.len();
    }

    // (3) post-subtraction max amplitude
    if thresholds.tau_amp.is_finite() && !ds.examples.is_empty() {
        let base = ds.mean_baseline()?;
        let amps: Vec<f64> = ds
            .examples
            .iter()
            .map(|e| e.adjacency.sub(&base).map(|d| d.max_abs()))
            .collect::<Result<Vec<f64>>>()?;
        let mut sorted = amps.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2].max(1e-300);
        let before = ds.examples.len();
        let mut keep = amps.iter().map(|a| a / median <= thresholds.tau_amp);
        ds.examples.retain(|_| keep.next().unwrap());
        ds.curation.removed_amplitude += before - ds.examples.len();
    }
    Ok(ds)
}

/// Draw a normalized convex combination of the baselines.
pub fn baseline_combination(baselines: &[Tensor], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if baselines.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 baselines to form combinations".into(),
        ));
    }
    let mut coeffs: Vec<f64> = (0..baselines.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = coeffs.iter().sum();
    for c in coeffs.iter_mut() {
        *c /= total;
    }
    let mut acc = Tensor::zeros(baselines[0].shape());
    for (c, b) in coeffs.iter().zip(baselines) {
        let mut term = b.clone();
        term.scale_assign(*c);
        acc.add_assign(&term);
    }
    Ok(acc)
}

/// Append undamaged examples built from normalized convex combinations of
/// the baselines until class counts are equal.
pub fn balance_detection(mut ds: Dataset, seed: u64) -> Result<Dataset> {
    if ds.baselines.len() < 2 {
        return Err(Error::InvalidArgument(
            "balance_detection needs at least 2 baselines".into(),
        ));
    }
    let damaged = ds.examples.iter().filter(|e| e.is_damaged()).count();
    let undamaged = ds.examples.len() - damaged;
    let spectrum = ds
        .examples
        .first()
        .map(|e| e.excitation_spectrum.clone())
        .unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in undamaged..damaged {
        ds.examples.push(Example {
            position: None,
            adjacency: baseline_combination(&ds.baselines, &mut rng)?,
            excitation_spectrum: spectrum.clone(),
        });
    }
    Ok(ds)
}

/// Split by load location: every example sharing a location lands on one
/// side. Undamaged examples are split individually at the same ratio.
pub fn split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    let key = |e: &Example| -> Option<(i64, i64)> {
        e.position
            .map(|p| ((p[0] * 10.0).round() as i64, (p[1] * 10.0).round() as i64))
    };
    // group example indices by location; undamaged examples stand alone
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut seen: std::collections::HashMap<(i64, i64), usize> = std::collections::HashMap::new();
    for (i, e) in ds.examples.iter().enumerate() {
        match key(e) {
            Some(k) => {
                if let Some(&g) = seen.get(&k) {
                    groups[g].push(i);
                } else {
                    seen.insert(k, groups.len());
                    groups.push(vec![i]);
                }
            }
            None => groups.push(vec![i]),
        }
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher–Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (order.len() as f64 * ratio).round() as usize;
    let pick = |idxs: &[usize]| -> Dataset {
        let mut sel: Vec<usize> = idxs.iter().flat_map(|&g| groups[g].iter().copied()).collect();
        sel.sort_unstable();
        Dataset {
            plate: ds.plate.clone(),
            sym: ds.sym.clone(),
            seed: ds.seed,
            baselines: ds.baselines.clone(),
            examples: sel.iter().map(|&i| ds.examples[i].clone()).collect(),
            curation: ds.curation.clone(),
        }
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

// ---------------------------------------------------------------------------
// File format
//
// Byte layout (integers little-endian):
//   magic  b"PWDS"
//   u32    format version (1)
//   u32    header length
//   []     JSON header {plate, sym, seed, curation, n_baselines, positions}
//   []     baselines  [B, 4, 4, 158]  f64 LE
//   []     adjacency  [N, 4, 4, 158]  f64 LE
//   []     spectra    [N, 96]         f64 LE
// ---------------------------------------------------------------------------

const DATASET_MAGIC: &[u8; 4] = b"PWDS";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    plate: PlateConfig,
    sym: SymmetryBreakSpec,
    seed: u64,
    curation: CurationLog,
    n_baselines: usize,
    spectrum_bins: usize,
    positions: Vec<Option<[f64; 2]>>,
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let t_len = ds.plate.compressed_len();
    let header = DatasetHeader {
        plate: ds.plate.clone(),
        sym: ds.sym.clone(),
        seed: ds.seed,
        curation: ds.curation.clone(),
        n_baselines: ds.baselines.len(),
        spectrum_bins: ds
            .examples
            .first()
            .map(|e| e.excitation_spectrum.len())
            .unwrap_or(0),
        positions: ds.examples.iter().map(|e| e.position).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(DATASET_MAGIC)?;
    f.write_all(&DATASET_VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    let write_tensor = |f: &mut dyn IoWrite, t: &Tensor| -> Result<()> {
        if t.shape() != [4, 4, t_len] {
            return Err(Error::Shape(format!(
                "dataset tensor shape {:?}, expected [4, 4, {}]",
                t.shape(),
                t_len
            )));
        }
        for &v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for b in &ds.baselines {
        write_tensor(&mut f, b)?;
    }
    for e in &ds.examples {
        write_tensor(&mut f, &e.adjacency)?;
    }
    for e in &ds.examples {
        for &v in &e.excitation_spectrum {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_f64s(f: &mut dyn IoRead, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    f.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Data("not a platewave dataset".into()));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != DATASET_VERSION {
        return Err(Error::Data("unsupported dataset version".into()));
    }
    f.read_exact(&mut word)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(word) as usize];
    f.read_exact(&mut header_bytes)?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)?;
    let t_len = header.plate.compressed_len();
    let mut baselines = Vec::with_capacity(header.n_baselines);
    for _ in 0..header.n_baselines {
        baselines.push(Tensor::new(vec![4, 4, t_len], read_f64s(&mut f, 16 * t_len)?)?);
    }
    let mut adjacency = Vec::with_capacity(header.positions.len());
    for _ in 0..header.positions.len() {
        adjacency.push(Tensor::new(vec![4, 4, t_len], read_f64s(&mut f, 16 * t_len)?)?);
    }
    let mut examples = Vec::with_capacity(header.positions.len());
    for (pos, adj) in header.positions.iter().zip(adjacency) {
        examples.push(Example {
            position: *pos,
            adjacency: adj,
            excitation_spectrum: read_f64s(&mut f, header.spectrum_bins)?,
        });
    }
    Ok(Dataset {
        plate: header.plate,
        sym: header.sym,
        seed: header.seed,
        baselines,
        examples,
        curation: header.curation,
    })
}

/// Import externally recorded compressed data laid out as a directory of
/// whitespace/comma-separated text files. Expected per-example layout:
/// `<name>.txt` with 16 rows of 158 values (sender-major adjacency order)
/// plus an optional `positions.csv` manifest mapping `name,x_mm,y_mm`.
/// Missing manifest entries yield undamaged examples; unreadable files are
/// skipped. Returns `None` when the directory does not exist.
pub fn import_external(dir: &Path, plate: &PlateConfig) -> Result<Option<Dataset>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let t_len = plate.compressed_len();
    let mut positions: std::collections::HashMap<String, [f64; 2]> =
        std::collections::HashMap::new();
    let manifest = dir.join("positions.csv");
    if manifest.is_file() {
        for line in std::fs::read_to_string(&manifest)?.lines() {
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() == 3 {
                if let (Ok(x), Ok(y)) = (parts[1].parse(), parts[2].parse()) {
                    positions.insert(parts[0].to_string(), [x, y]);
                }
            }
        }
    }
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    names.sort();
    let mut baselines = Vec::new();
    let mut examples = Vec::new();
    for path in names {
        let Ok(text) = std::fs::read_to_string(&path) else {
            continue;
        };
        let values: Vec<f64> = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .filter_map(|s| s.parse().ok())
            .collect();
        if values.len() != 16 * t_len {
            continue;
        }
        let tensor = Tensor::new(vec![4, 4, t_len], values)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if stem.starts_with("baseline") {
            baselines.push(tensor);
        } else {
            examples.push(Example {
                position: positions.get(&stem).copied(),
                adjacency: tensor,
                excitation_spectrum: Vec::new(),
            });
        }
    }
    if baselines.is_empty() && examples.is_empty() {
        return Ok(None);
    }
    Ok(Some(Dataset {
        plate: plate.clone(),
        sym: SymmetryBreakSpec::default(),
        seed: 0,
        baselines,
        examples,
        curation: CurationLog::default(),
    }))
}
