//! CIR recordings: the CIR1 file container, corpus manifests, subject splits
//! and a synthetic generator standing in for measured data.
//!
//! CIR1 layout, little-endian:
//!
//! ```text
//! magic "CIR1" | version u32 | K u32 | L u32 | T_c f64 (s) | label u8 | subject u8
//! K·L × (real f32, imag f32), packet-major
//! ```
//!
//! Samples are stored as f32 and promoted to f64 (exactly) when processed.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const CIR_MAGIC: &[u8; 4] = b"CIR1";
pub const CIR_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 1 + 1;

/// Nominal inter-packet period.
pub const DEFAULT_SAMPLING_PERIOD: f64 = 0.27e-3;
pub const DEFAULT_RANGE_BINS: usize = 110;

pub const CLASS_NAMES: [&str; 4] = ["walking", "running", "sitting", "waving"];

#[derive(Clone, Debug, PartialEq)]
pub struct CirRecording {
    /// `packets × bins` complex gains, packet-major.
    pub cir: Vec<Complex32>,
    pub packets: usize,
    pub bins: usize,
    pub label: u8,
    pub subject: u8,
    pub sampling_period: f64,
}

impl CirRecording {
    pub fn new(cir: Vec<Complex32>, packets: usize, bins: usize, label: u8, subject: u8, sampling_period: f64) -> Result<Self> {
        if cir.len() != packets * bins {
            return Err(Error::dim("cir_recording", format!("{} values for {packets}×{bins}", cir.len())));
        }
        Ok(Self { cir, packets, bins, label, subject, sampling_period })
    }

    pub fn at(&self, packet: usize, bin: usize) -> Complex32 {
        self.cir[packet * self.bins + bin]
    }
}

pub fn encode_cir(rec: &CirRecording) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + rec.cir.len() * 8);
    out.extend_from_slice(CIR_MAGIC);
    out.extend_from_slice(&CIR_VERSION.to_le_bytes());
    out.extend_from_slice(&(rec.packets as u32).to_le_bytes());
    out.extend_from_slice(&(rec.bins as u32).to_le_bytes());
    out.extend_from_slice(&rec.sampling_period.to_bits().to_le_bytes());
    out.push(rec.label);
    out.push(rec.subject);
    for c in &rec.cir {
        out.extend_from_slice(&c.re.to_bits().to_le_bytes());
        out.extend_from_slice(&c.im.to_bits().to_le_bytes());
    }
    out
}

pub fn decode_cir(buf: &[u8]) -> Result<CirRecording> {
    if buf.len() < HEADER_LEN {
        return Err(Error::format(
            buf.len() as u64,
            format!("truncated header: expected {HEADER_LEN} bytes, got {}", buf.len()),
        ));
    }
    if &buf[..4] != CIR_MAGIC {
        return Err(Error::format(0, "bad magic, expected CIR1"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CIR_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let packets = u32_at(8) as usize;
    let bins = u32_at(12) as usize;
    let sampling_period = f64::from_bits(u64::from_le_bytes(buf[16..24].try_into().unwrap()));
    let (label, subject) = (buf[24], buf[25]);
    let expected = (packets as u64) * (bins as u64) * 8;
    let actual = (buf.len() - HEADER_LEN) as u64;
    if actual != expected {
        return Err(Error::format(
            HEADER_LEN as u64 + actual.min(expected),
            format!("body length mismatch: expected {expected} bytes for {packets}×{bins}, got {actual}"),
        ));
    }
    let cir = buf[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_bits(u32::from_le_bytes(c[..4].try_into().unwrap())),
                f32::from_bits(u32::from_le_bytes(c[4..].try_into().unwrap())),
            )
        })
        .collect();
    CirRecording::new(cir, packets, bins, label, subject, sampling_period)
}

pub fn write_cir(path: &Path, rec: &CirRecording) -> Result<()> {
    std::fs::write(path, encode_cir(rec))?;
    Ok(())
}

pub fn read_cir(path: &Path) -> Result<CirRecording> {
    decode_cir(&std::fs::read(path)?)
}

/// One row of a corpus manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u8,
    pub subject: u8,
    pub packets: usize,
}

pub const MANIFEST_HEADER: &str = "path,label,subject,K";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for e in entries {
        s.push_str(&format!("{},{},{},{}\n", e.path.display(), e.label, e.subject, e.packets));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.lines().enumerate() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if i == 0 {
            if line.trim() != MANIFEST_HEADER {
                return Err(Error::format(0, format!("manifest header must be '{MANIFEST_HEADER}'")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(line_offset, format!("malformed manifest row {}: '{line}'", i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let p = PathBuf::from(f[0]);
        out.push(ManifestEntry {
            path: if p.is_absolute() { p } else { base.join(p) },
            label: f[1].trim().parse().map_err(|_| bad())?,
            subject: f[2].trim().parse().map_err(|_| bad())?,
            packets: f[3].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Outcome of [`split_by_subject`].
#[derive(Clone, Debug)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
    /// Items whose subject is in none of the three sets.
    pub unassigned: Vec<T>,
    /// One message per (split, class) pair without any item.
    pub warnings: Vec<String>,
}

/// Partitions items by subject id. Subject sets must be disjoint.
pub fn split_by_subject<T>(
    items: Vec<T>,
    key: impl Fn(&T) -> (u8, u8),
    num_classes: usize,
    train: &[u8],
    val: &[u8],
    test: &[u8],
) -> Result<Split<T>> {
    let sets: [BTreeSet<u8>; 3] = [train.iter().copied().collect(), val.iter().copied().collect(), test.iter().copied().collect()];
    for a in 0..3 {
        for b in a + 1..3 {
            if let Some(s) = sets[a].intersection(&sets[b]).next() {
                return Err(Error::contract(format!("subject {s} assigned to more than one split")));
            }
        }
    }
    let mut out = Split { train: Vec::new(), val: Vec::new(), test: Vec::new(), unassigned: Vec::new(), warnings: Vec::new() };
    let mut seen = [vec![false; num_classes], vec![false; num_classes], vec![false; num_classes]];
    for item in items {
        let (subject, label) = key(&item);
        let slot = sets.iter().position(|s| s.contains(&subject));
        if let Some(flag) = slot.and_then(|k| seen[k].get_mut(label as usize)) {
            *flag = true;
        }
        match slot {
            Some(0) => out.train.push(item),
            Some(1) => out.val.push(item),
            Some(2) => out.test.push(item),
            _ => out.unassigned.push(item),
        }
    }
    for (name, flags) in ["train", "val", "test"].iter().zip(&seen) {
        for (c, present) in flags.iter().enumerate() {
            if !present {
                let msg = format!("class {c} has no items in the {name} split");
                log::warn!("{msg}");
                out.warnings.push(msg);
            }
        }
    }
    Ok(out)
}

/// Time envelope applied to a moving path's amplitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Envelope {
    Constant,
    /// Gaussian bump at a random position; `width` is the standard deviation as
    /// a fraction of the recording length.
    Burst { width: f64 },
}

/// A moving reflector: `a·env(t)·exp(j(φ₀ + depth·sin(2πft + ψ)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathProfile {
    /// Range-bin offset from the target's centre bin.
    pub bin_offset: isize,
    pub amplitude: f64,
    pub base_phase: f64,
    pub mod_freq_hz: f64,
    pub mod_depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassProfile {
    pub name: String,
    pub paths: Vec<PathProfile>,
    pub envelope: Envelope,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: Vec<ClassProfile>,
    pub noise_std: f64,
    pub clutter_amplitude: f64,
    pub packets: usize,
    pub bins: usize,
    pub sampling_period: f64,
    /// Relative per-recording jitter on modulation frequency and amplitude.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let path = |bin_offset, amplitude, mod_freq_hz, mod_depth| PathProfile {
            bin_offset,
            amplitude,
            base_phase: 0.0,
            mod_freq_hz,
            mod_depth,
        };
        Self {
            classes: vec![
                ClassProfile {
                    name: "walking".into(),
                    paths: vec![path(0, 1.0, 30.0, 8.0), path(1, 0.8, 30.0, 7.0)],
                    envelope: Envelope::Constant,
                },
                ClassProfile {
                    name: "running".into(),
                    paths: vec![path(-1, 1.0, 60.0, 16.0), path(0, 1.2, 60.0, 18.0), path(1, 1.0, 60.0, 16.0)],
                    envelope: Envelope::Constant,
                },
                ClassProfile {
                    name: "sitting".into(),
                    paths: vec![path(0, 1.5, 5.0, 2.5), path(1, 1.0, 5.0, 2.5)],
                    envelope: Envelope::Burst { width: 0.35 },
                },
                ClassProfile {
                    name: "waving".into(),
                    paths: vec![path(0, 0.5, 150.0, 6.0), path(1, 0.4, 150.0, 6.0)],
                    envelope: Envelope::Constant,
                },
            ],
            noise_std: 0.05,
            clutter_amplitude: 1.0,
            packets: 7488,
            bins: DEFAULT_RANGE_BINS,
            sampling_period: DEFAULT_SAMPLING_PERIOD,
            jitter: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = 0.5 / self.sampling_period;
        if !(self.sampling_period > 0.0) {
            return Err(Error::config("sampling period must be positive"));
        }
        if self.classes.is_empty() || self.bins == 0 || self.packets == 0 {
            return Err(Error::config("synthetic corpus needs classes, bins and packets"));
        }
        if self.noise_std < 0.0 || self.clutter_amplitude < 0.0 || !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config("noise, clutter must be ≥ 0 and jitter in [0,1)"));
        }
        for c in &self.classes {
            for p in &c.paths {
                if p.amplitude < 0.0 {
                    return Err(Error::config(format!("class {}: negative path amplitude", c.name)));
                }
                let f_max = p.mod_freq_hz * (1.0 + self.jitter);
                if f_max >= nyquist {
                    return Err(Error::config(format!(
                        "class {}: modulation {} Hz (with jitter {f_max:.1} Hz) violates Nyquist {nyquist:.1} Hz",
                        c.name, p.mod_freq_hz
                    )));
                }
                if p.bin_offset.unsigned_abs() * 2 + 1 > self.bins {
                    return Err(Error::config(format!("class {}: path offset exceeds bin count", c.name)));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic seed for one recording.
fn recording_seed(seed: u64, class_id: usize, subject: u8, index: u64) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [class_id as u64, subject as u64, index] {
        h = (h ^ v).wrapping_mul(0x100_0000_01B3).rotate_left(29);
    }
    h
}

/// Generates one recording of `class_id` for `subject`; `index` distinguishes
/// repeated recordings. Static clutter differs per subject (room placement),
/// moving paths are placed at a random centre bin.
pub fn synth_generate(cfg: &SynthConfig, class_id: usize, subject: u8, index: u64) -> Result<CirRecording> {
    cfg.validate()?;
    let class = cfg
        .classes
        .get(class_id)
        .ok_or_else(|| Error::config(format!("class {class_id} not in synthetic profile")))?;
    let (k, l) = (cfg.packets, cfg.bins);
    let mut clutter_rng = ChaCha8Rng::seed_from_u64(recording_seed(cfg.seed, usize::MAX, subject, 0));
    let clutter: Vec<(f64, f64)> = (0..l)
        .map(|_| {
            let a = cfg.clutter_amplitude * clutter_rng.gen_range(0.2..1.0);
            let ph = clutter_rng.gen_range(0.0..2.0 * PI);
            (a * ph.cos(), a * ph.sin())
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(recording_seed(cfg.seed, class_id, subject, index));
    let max_off = class.paths.iter().map(|p| p.bin_offset.unsigned_abs()).max().unwrap_or(0);
    let centre = rng.gen_range(max_off..l - max_off) as isize;
    // subject-specific gait speed
    let speed = 1.0 + cfg.jitter * (((subject as f64) * 0.618).fract() - 0.5);
    let burst_centre = rng.gen_range(0.3..0.7) * k as f64;
    let common_phase = rng.gen_range(0.0..2.0 * PI);
    struct Active {
        bin: usize,
        amp: f64,
        phase0: f64,
        omega: f64,
        depth: f64,
        psi: f64,
    }
    let paths: Vec<Active> = class
        .paths
        .iter()
        .map(|p| Active {
            bin: (centre + p.bin_offset) as usize,
            amp: p.amplitude * (1.0 + cfg.jitter * rng.gen_range(-1.0..1.0)),
            phase0: p.base_phase + common_phase + rng.gen_range(0.0..2.0 * PI),
            omega: 2.0 * PI * p.mod_freq_hz * speed * (1.0 + 0.5 * cfg.jitter * rng.gen_range(-1.0..1.0)),
            depth: p.mod_depth,
            psi: rng.gen_range(0.0..2.0 * PI),
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut cir = Vec::with_capacity(k * l);
    for pk in 0..k {
        let t = pk as f64 * cfg.sampling_period;
        let env = match class.envelope {
            Envelope::Constant => 1.0,
            Envelope::Burst { width } => {
                let z = (pk as f64 - burst_centre) / (width * k as f64);
                (-0.5 * z * z).exp()
            }
        };
        for (bin, &(cr, ci)) in clutter.iter().enumerate() {
            let (mut re, mut im) = (cr, ci);
            for p in paths.iter().filter(|p| p.bin == bin) {
                let phi = p.phase0 + p.depth * (p.omega * t + p.psi).sin();
                re += p.amp * env * phi.cos();
                im += p.amp * env * phi.sin();
            }
            if cfg.noise_std > 0.0 {
                re += noise.sample(&mut rng);
                im += noise.sample(&mut rng);
            }
            cir.push(Complex32::new(re as f32, im as f32));
        }
    }
    CirRecording::new(cir, k, l, class_id as u8, subject, cfg.sampling_period)
}
