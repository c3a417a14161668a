//! Deterministic synthetic fleet with planted alarm patterns.
//!
//! Each turbine gets one operational row per 10-minute slot and a status
//! log. Patterns are planted as non-overlapping episodes of fixed length
//! whose count is chosen so each pattern covers its configured share of
//! slots. Starting `signature_lead_slots` before every onset and lasting
//! through the episode, two parameters per pattern carry a signature: a constant shift
//! and a ramp that grows across the window. `snr` scales both relative to the
//! unit noise; `snr = 0` plants alarms with no operational signal.
//!
//! Background parameters follow a few shared AR(1) latent factors, and the
//! first `redundant` of them get a near-copy so the correlation filter has
//! something to merge. Non-critical noise alarms fire at random.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::forest::derive_seed;
use crate::ingest::{AlarmKind, IngestError, Manifest, OperationalRecord, StatusEvent, TurbineStore};
use crate::patterns::AlarmSet;
use crate::time::{Timestamp, SLOT_SECONDS};
use crate::trainer::fnv1a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPattern {
    pub alarms: Vec<String>,
    /// Share of slots during which the pattern is active.
    pub prevalence: f64,
    pub episode_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub turbines: usize,
    pub turbine_prefix: String,
    pub days: u32,
    pub start: Timestamp,
    pub parameters: usize,
    pub redundant: usize,
    pub latent_factors: usize,
    pub snr: f64,
    /// Slots of signature before each onset.
    pub signature_lead_slots: usize,
    pub patterns: Vec<PlantedPattern>,
    pub noise_alarms: usize,
    pub noise_alarms_per_day: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            turbines: 1,
            turbine_prefix: "WT".into(),
            days: 30,
            start: Timestamp::from_secs(1_704_067_200),
            parameters: 12,
            redundant: 2,
            latent_factors: 3,
            snr: 4.0,
            signature_lead_slots: 6,
            patterns: vec![
                PlantedPattern {
                    alarms: vec!["C01".into(), "C02".into()],
                    prevalence: 0.10,
                    episode_slots: 12,
                },
                PlantedPattern {
                    alarms: vec!["C03".into()],
                    prevalence: 0.06,
                    episode_slots: 9,
                },
                PlantedPattern {
                    alarms: vec!["C04".into(), "C05".into(), "C06".into()],
                    prevalence: 0.04,
                    episode_slots: 6,
                },
            ],
            noise_alarms: 6,
            noise_alarms_per_day: 4.0,
        }
    }
}

const BASE_NAMES: [&str; 12] = [
    "wind_speed",
    "rotor_speed",
    "active_power",
    "gearbox_oil_temp",
    "gen_bearing_temp",
    "nacelle_temp",
    "pitch_angle",
    "yaw_error",
    "hydraulic_pressure",
    "converter_temp",
    "ambient_temp",
    "grid_voltage",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Index into [`SynthConfig::patterns`].
    pub pattern: usize,
    pub start: Timestamp,
    /// Exclusive.
    pub end: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurbineTruth {
    pub turbine_id: String,
    pub episodes: Vec<Episode>,
    /// Planted pattern per slot, `None` for normal slots.
    pub slot_patterns: Vec<Option<usize>>,
}

impl TurbineTruth {
    /// Share of slots covered by pattern `p`.
    pub fn coverage(&self, p: usize) -> f64 {
        self.slot_patterns.iter().filter(|s| **s == Some(p)).count() as f64 / self.slot_patterns.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    /// `(pattern index, parameter name, kind)` of every signature parameter.
    pub signatures: Vec<(usize, String, String)>,
    pub turbines: Vec<TurbineTruth>,
}

impl GroundTruth {
    pub fn planted_sets(&self) -> Vec<AlarmSet> {
        self.config
            .patterns
            .iter()
            .map(|p| p.alarms.iter().cloned().collect())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthTurbine {
    pub id: String,
    pub operational: Vec<OperationalRecord>,
    pub status: Vec<StatusEvent>,
}

#[derive(Debug, Clone)]
pub struct SynthFleet {
    pub manifest: Manifest,
    pub turbines: Vec<SynthTurbine>,
    pub truth: GroundTruth,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Layout {
    names: Vec<String>,
    /// Per pattern: (constant param, ramp param).
    signature: Vec<(usize, usize)>,
    /// Background params and their factor.
    background: Vec<(usize, usize)>,
    /// (copy, source)
    copies: Vec<(usize, usize)>,
}

fn layout(c: &SynthConfig) -> Result<Layout, SynthError> {
    let sig = 2 * c.patterns.len();
    let background = c.parameters.checked_sub(sig + c.redundant).filter(|&b| b >= c.redundant);
    let Some(nb) = background else {
        return Err(SynthError::Config(format!(
            "{} parameters cannot hold {} signature, {} redundant pairs",
            c.parameters, sig, c.redundant
        )));
    };
    let mut names: Vec<String> = (0..c.parameters)
        .map(|i| BASE_NAMES.get(i).map_or_else(|| format!("param_{i:02}"), |s| s.to_string()))
        .collect();
    let background: Vec<(usize, usize)> = (0..nb).map(|i| (i, i % c.latent_factors.max(1))).collect();
    let copies: Vec<(usize, usize)> = (0..c.redundant).map(|i| (nb + i, i)).collect();
    for &(copy, src) in &copies {
        names[copy] = format!("{}_b", names[src]);
    }
    let signature = (0..c.patterns.len()).map(|p| (nb + c.redundant + 2 * p, nb + c.redundant + 2 * p + 1)).collect();
    Ok(Layout {
        names,
        signature,
        background,
        copies,
    })
}

fn validate(c: &SynthConfig) -> Result<(), SynthError> {
    if c.turbines == 0 || c.days == 0 {
        return Err(SynthError::Config("turbines and days must be positive".into()));
    }
    if !c.start.is_slot_aligned() {
        return Err(SynthError::Config("start must be slot aligned".into()));
    }
    if !(c.snr >= 0.0) {
        return Err(SynthError::Config("snr must be >= 0".into()));
    }
    let mut seen = BTreeSet::new();
    for p in &c.patterns {
        if p.alarms.is_empty() || p.episode_slots < 2 || !(0.0..1.0).contains(&p.prevalence) {
            return Err(SynthError::Config(format!("bad pattern {:?}", p.alarms)));
        }
        for a in &p.alarms {
            if !seen.insert(a.clone()) {
                return Err(SynthError::Config(format!("alarm {a} used by two patterns")));
            }
        }
    }
    let slots = c.days as usize * 144;
    let needed: usize = c
        .patterns
        .iter()
        .map(|p| episodes_for(p, slots) * (p.episode_slots + c.signature_lead_slots + 1))
        .sum();
    if needed > slots {
        return Err(SynthError::Config("patterns do not fit in the range".into()));
    }
    Ok(())
}

fn episodes_for(p: &PlantedPattern, slots: usize) -> usize {
    (p.prevalence * slots as f64 / p.episode_slots as f64).round() as usize
}

pub fn turbine_ids(c: &SynthConfig) -> Vec<String> {
    let width = c.turbines.to_string().len().max(2);
    (1..=c.turbines).map(|i| format!("{}{:0width$}", c.turbine_prefix, i)).collect()
}

/// Places episodes without overlap. Each one reserves its lead-in window and
/// one spare slot so signatures never touch another episode.
fn place_episodes(c: &SynthConfig, slots: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    let mut items: Vec<usize> = Vec::new();
    for (i, p) in c.patterns.iter().enumerate() {
        items.extend(std::iter::repeat(i).take(episodes_for(p, slots)));
    }
    items.shuffle(rng);
    let reserved: usize = items
        .iter()
        .map(|&i| c.patterns[i].episode_slots + c.signature_lead_slots + 1)
        .sum();
    let free = slots - reserved;
    let mut cuts: Vec<usize> = (0..items.len()).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::new();
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (k, &i) in items.iter().enumerate() {
        cursor += cuts[k] - prev_cut;
        prev_cut = cuts[k];
        let start = cursor + c.signature_lead_slots;
        let end = start + c.patterns[i].episode_slots;
        out.push((i, start, end));
        cursor = end + 1;
    }
    out
}

fn generate_turbine(c: &SynthConfig, lay: &Layout, id: &str) -> (SynthTurbine, TurbineTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, fnv1a(id)));
    let slots = c.days as usize * 144;
    let placed = place_episodes(c, slots, &mut rng);
    let mut slot_patterns = vec![None; slots];
    // signature strength per slot per pattern: (const, ramp)
    let mut sig = vec![(0.0f64, 0.0f64, usize::MAX); slots];
    for &(p, s, e) in &placed {
        for k in s..e {
            slot_patterns[k] = Some(p);
        }
        let w0 = s - c.signature_lead_slots;
        let width = (e - w0) as f64;
        for k in w0..e {
            sig[k] = (c.snr, c.snr * 2.0 * ((k - w0) as f64 + 1.0) / width, p);
        }
    }
    let nf = c.latent_factors.max(1);
    let offsets: Vec<f64> = (0..c.parameters).map(|_| rng.gen_range(5.0..50.0)).collect();
    let loadings: Vec<f64> = (0..c.parameters).map(|_| rng.gen_range(0.6..1.4)).collect();
    let mut factors = vec![0.0; nf];
    let mut sig_noise = vec![0.0; lay.signature.len() * 2];
    let mut operational = Vec::with_capacity(slots);
    for (k, s) in sig.iter().enumerate() {
        for f in factors.iter_mut() {
            *f = 0.9 * *f + 0.4359 * rng.sample::<f64, _>(StandardNormal);
        }
        for n in sig_noise.iter_mut() {
            *n = 0.5 * *n + 0.866 * rng.sample::<f64, _>(StandardNormal);
        }
        let mut values = vec![0.0; c.parameters];
        for &(i, f) in &lay.background {
            values[i] = offsets[i] + 3.0 * loadings[i] * factors[f] + 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        for &(copy, src) in &lay.copies {
            values[copy] = 1.02 * values[src] + 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
        for (p, &(ci, ri)) in lay.signature.iter().enumerate() {
            let (mut dc, mut dr) = (0.0, 0.0);
            if s.2 == p {
                dc = s.0;
                dr = s.1;
            }
            values[ci] = offsets[ci] + sig_noise[2 * p] + dc;
            values[ri] = offsets[ri] + sig_noise[2 * p + 1] + dr;
        }
        operational.push(OperationalRecord {
            turbine_id: id.to_string(),
            timestamp: c.start.add_slots(k as i64),
            values,
        });
    }
    let mut status = Vec::new();
    let mut episodes = Vec::new();
    for &(p, s, e) in &placed {
        let start = c.start.add_slots(s as i64);
        let last = c.start.add_slots(e as i64 - 1);
        for a in &c.patterns[p].alarms {
            status.push(event(id, start.add_secs(rng.gen_range(0..300)), a, AlarmKind::Activation));
            status.push(event(id, last.add_secs(rng.gen_range(301..600)), a, AlarmKind::Deactivation));
        }
        episodes.push(Episode {
            pattern: p,
            start,
            end: c.start.add_slots(e as i64),
        });
    }
    let noise_total = (c.noise_alarms_per_day * c.days as f64).round() as usize;
    if c.noise_alarms > 0 {
        let mut busy_until = vec![0i64; c.noise_alarms];
        let mut starts: Vec<i64> = (0..noise_total)
            .map(|_| rng.gen_range(0..(slots as i64 * SLOT_SECONDS)))
            .collect();
        starts.sort_unstable();
        for off in starts {
            let code = rng.gen_range(0..c.noise_alarms);
            if off < busy_until[code] {
                continue;
            }
            let dur = rng.gen_range(60..3 * SLOT_SECONDS);
            let name = noise_code(code);
            status.push(event(id, c.start.add_secs(off), &name, AlarmKind::Activation));
            status.push(event(id, c.start.add_secs(off + dur), &name, AlarmKind::Deactivation));
            busy_until[code] = off + dur + 1;
        }
    }
    status.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.kind.code().cmp(b.kind.code()).reverse()));
    (
        SynthTurbine {
            id: id.to_string(),
            operational,
            status,
        },
        TurbineTruth {
            turbine_id: id.to_string(),
            episodes,
            slot_patterns,
        },
    )
}

fn noise_code(i: usize) -> String {
    format!("N{:02}", i + 1)
}

fn event(id: &str, t: Timestamp, alarm: &str, kind: AlarmKind) -> StatusEvent {
    StatusEvent {
        turbine_id: id.to_string(),
        timestamp: t,
        alarm_code: alarm.to_string(),
        kind,
    }
}

/// Generates the whole fleet in memory. Same config, same output.
pub fn generate(c: &SynthConfig) -> Result<SynthFleet, SynthError> {
    validate(c)?;
    let lay = layout(c)?;
    let ids = turbine_ids(c);
    let critical: Vec<String> = c.patterns.iter().flat_map(|p| p.alarms.clone()).collect();
    let mut alarms = critical.clone();
    alarms.extend((0..c.noise_alarms).map(noise_code));
    let manifest = Manifest {
        parameters: lay.names.clone(),
        alarms,
        critical_alarms: critical,
        turbines: ids.clone(),
    };
    manifest.validate()?;
    let mut turbines = Vec::new();
    let mut truths = Vec::new();
    for id in &ids {
        let (t, truth) = generate_turbine(c, &lay, id);
        turbines.push(t);
        truths.push(truth);
    }
    let mut signatures = Vec::new();
    for (p, &(ci, ri)) in lay.signature.iter().enumerate() {
        signatures.push((p, lay.names[ci].clone(), "constant".to_string()));
        signatures.push((p, lay.names[ri].clone(), "ramp".to_string()));
    }
    Ok(SynthFleet {
        manifest,
        turbines,
        truth: GroundTruth {
            config: c.clone(),
            signatures,
            turbines: truths,
        },
    })
}

impl SynthFleet {
    /// Creates a store at `root` holding the whole fleet and writes
    /// `ground_truth.json` next to it.
    pub fn write_store(&self, root: impl AsRef<Path>) -> Result<TurbineStore, SynthError> {
        let root = root.as_ref();
        let store = TurbineStore::create(root, self.manifest.clone())?;
        for t in &self.turbines {
            store.append(&t.id, &t.operational)?;
            store.append(&t.id, &t.status)?;
        }
        let json = serde_json::to_vec_pretty(&self.truth).map_err(std::io::Error::other)?;
        std::fs::write(root.join("ground_truth.json"), json)?;
        Ok(store)
    }
}
