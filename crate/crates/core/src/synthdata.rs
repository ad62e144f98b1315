//! Synthetic confounded soundscapes with known strong labels.
//!
//! Each clip is generated by a small causal process. A lead class is drawn
//! uniformly, and the co-occurrence matrix `rho` pulls further classes in
//! with it. The labels then choose the background: a class linked to a
//! texture with strength `s` selects that texture with probability `s`,
//! otherwise the texture is drawn uniformly. Events and background are added
//! in the power domain and the result is logged, so the spectrogram is
//! exactly aligned with the strong labels.
//!
//! The training split keeps both confounders. The decorrelated evaluation
//! split switches them off (one class per clip, uniform texture), which is
//! the setting where a model that learnt context instead of the events
//! themselves loses accuracy.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::tensorio::{self, DType};

/// Frames per second used to convert frame indices to seconds.
pub const FRAME_RATE: f64 = 25.0;

/// Name of the dataset description written next to the manifest.
pub const DATASET_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Background texture preferred by a class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundLink {
    pub class: usize,
    pub texture: usize,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub frames: usize,
    pub mel_bins: usize,
    /// `rho[a][b]`: probability that `b` joins a clip led by `a`.
    pub cooccurrence: Vec<Vec<f64>>,
    pub background: Vec<BackgroundLink>,
    pub textures: usize,
    pub min_events: usize,
    pub max_events: usize,
    /// Event duration bounds as fractions of the clip length.
    pub min_event_frac: f64,
    pub max_event_frac: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let k = 6;
        let mut rho = vec![vec![0.1; k]; k];
        for (a, row) in rho.iter_mut().enumerate() {
            row[a] = 1.0;
        }
        rho[0][1] = 0.9;
        rho[1][0] = 0.9;
        GeneratorConfig {
            classes: k,
            frames: 240,
            mel_bins: 64,
            cooccurrence: rho,
            background: vec![BackgroundLink {
                class: 5,
                texture: 0,
                strength: 0.9,
            }],
            textures: 4,
            min_events: 1,
            max_events: k,
            min_event_frac: 0.1,
            max_event_frac: 0.3,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.classes;
        let bad = |m: String| Err(Error::Config(m));
        if k == 0 {
            return bad("need at least one class".into());
        }
        if self.frames == 0 || self.mel_bins < 8 {
            return bad("frames must be positive and mel_bins at least 8".into());
        }
        if self.cooccurrence.len() != k || self.cooccurrence.iter().any(|r| r.len() != k) {
            return bad(format!("cooccurrence must be {k}x{k}"));
        }
        for a in 0..k {
            for b in 0..k {
                let p = self.cooccurrence[a][b];
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("cooccurrence[{a}][{b}] = {p} outside [0, 1]"));
                }
                if a != b && p != self.cooccurrence[b][a] {
                    return bad(format!("cooccurrence not symmetric at ({a}, {b})"));
                }
            }
        }
        if self.textures == 0 {
            return bad("need at least one texture".into());
        }
        for l in &self.background {
            if l.class >= k || l.texture >= self.textures || !(0.0..=1.0).contains(&l.strength) {
                return bad(format!("invalid background link {l:?}"));
            }
        }
        if self.min_events == 0 || self.min_events > self.max_events {
            return bad(format!(
                "events per clip must satisfy 1 <= min <= max, got {}..{}",
                self.min_events, self.max_events
            ));
        }
        if !(self.min_event_frac > 0.0 && self.min_event_frac <= self.max_event_frac) {
            return bad("event duration fractions must satisfy 0 < min <= max".into());
        }
        Ok(())
    }

    /// The same generator with every confounder removed.
    pub fn decorrelated(&self) -> Self {
        let mut cfg = self.clone();
        for (a, row) in cfg.cooccurrence.iter_mut().enumerate() {
            for (b, p) in row.iter_mut().enumerate() {
                *p = if a == b { 1.0 } else { 0.0 };
            }
        }
        cfg.background.iter_mut().for_each(|l| l.strength = 0.0);
        cfg
    }
}

/// One annotated event, in frames, `onset < offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrongLabel {
    pub class: usize,
    pub onset: usize,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub spec: Spectrogram,
    pub weak: Vec<usize>,
    pub strong: Vec<StrongLabel>,
    pub texture: usize,
}

/// Draws a lead class uniformly and adds every other class `b`
/// independently with probability `rho[lead][b]`. If that exceeds
/// `max_events` classes, the most probable followers are kept, ties broken
/// at random.
///
/// Returns the lead and the sorted label set.
pub fn sample_labels(cfg: &GeneratorConfig, rng: &mut impl Rng) -> (usize, Vec<usize>) {
    let k = cfg.classes;
    let lead = rng.gen_range(0..k);
    let mut followers: Vec<usize> = (0..k)
        .filter(|&b| b != lead && rng.gen_bool(cfg.cooccurrence[lead][b]))
        .collect();
    if followers.len() + 1 > cfg.max_events {
        followers.shuffle(rng);
        let rho = &cfg.cooccurrence[lead];
        followers.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]));
        followers.truncate(cfg.max_events - 1);
    }
    followers.push(lead);
    followers.sort_unstable();
    (lead, followers)
}

/// Spectral envelope of every class and texture for a generator config.
#[derive(Clone, Debug)]
pub struct Palette {
    /// `[k][mel_bins]`, peak 1.
    pub events: Vec<Vec<f64>>,
    /// `[textures][mel_bins]`, peak 1.
    pub textures: Vec<Vec<f64>>,
}

const FLOOR_POWER: f64 = 1e-3;
const TEXTURE_POWER: f64 = 2e-2;
const EVENT_POWER: f64 = 0.3;
const JITTER: f64 = 0.3;

impl Palette {
    pub fn new(classes: usize, textures: usize, mel_bins: usize) -> Self {
        let bump = |centre: f64, width: f64| -> Vec<f64> {
            (0..mel_bins)
                .map(|b| (-0.5 * ((b as f64 - centre) / width).powi(2)).exp())
                .collect()
        };
        let m = mel_bins as f64;
        let events = (0..classes)
            .map(|c| {
                // A fundamental band at a class-specific position with two
                // overtones whose spacing also depends on the class.
                let base = 2.0 + (m * 0.45) * c as f64 / classes as f64;
                let spacing = m * (0.12 + 0.05 * (c % 3) as f64);
                let mut env = vec![0.0; mel_bins];
                for (h, gain) in [(0.0, 1.0), (1.0, 0.6), (2.0, 0.35)] {
                    let centre = base + h * spacing;
                    if centre < m {
                        for (e, v) in env.iter_mut().zip(bump(centre, 1.2)) {
                            *e += gain * v;
                        }
                    }
                }
                normalise(env)
            })
            .collect();
        let textures = (0..textures)
            .map(|t| {
                // Broad noise with a texture-specific tilt and centre.
                let centre = m * (t as f64 + 0.5) / textures.max(1) as f64;
                let tilt = if t % 2 == 0 { -1.5 } else { 1.5 };
                let env: Vec<f64> = (0..mel_bins)
                    .map(|b| {
                        let x = b as f64 / m;
                        let band = (-0.5 * ((b as f64 - centre) / (m * 0.18)).powi(2)).exp();
                        band * (tilt * (x - 0.5)).exp()
                    })
                    .collect();
                normalise(env)
            })
            .collect();
        Palette { events, textures }
    }
}

fn normalise(mut v: Vec<f64>) -> Vec<f64> {
    let peak = v.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        v.iter_mut().for_each(|x| *x /= peak);
    }
    v
}

fn event_frames(cfg: &GeneratorConfig, rng: &mut impl Rng) -> usize {
    let lo = ((cfg.min_event_frac * cfg.frames as f64).round() as usize).max(1);
    let hi = ((cfg.max_event_frac * cfg.frames as f64).round() as usize).max(lo);
    rng.gen_range(lo..=hi)
}

/// Places an event of `duration` frames at a uniform onset.
pub fn place_event(duration: usize, frames: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if duration == 0 || duration > frames {
        return Err(Error::InvalidArgument(format!(
            "event of {duration} frames does not fit a clip of {frames}"
        )));
    }
    let onset = rng.gen_range(0..=frames - duration);
    Ok((onset, onset + duration))
}

/// Renders a clip for `labels`: one event per label, plus repeats of present
/// classes up to `min_events`.
pub fn render_clip(
    labels: &[usize],
    cfg: &GeneratorConfig,
    palette: &Palette,
    rng: &mut impl Rng,
) -> Result<SynthClip> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("a clip needs at least one label".into()));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= cfg.classes) {
        return Err(Error::ClassOutOfRange {
            index: c,
            classes: cfg.classes,
        });
    }
    let (n, bins) = (cfg.frames, cfg.mel_bins);
    let texture = pick_texture(labels, cfg, rng);

    let mut events: Vec<usize> = labels.to_vec();
    while events.len() < cfg.min_events {
        events.push(labels[rng.gen_range(0..labels.len())]);
    }
    let mut strong = Vec::with_capacity(events.len());
    for &class in &events {
        let duration = event_frames(cfg, rng);
        let (onset, offset) = place_event(duration, n, rng)?;
        strong.push(StrongLabel {
            class,
            onset,
            offset,
        });
    }

    let jitter = Normal::new(0.0, JITTER).expect("positive std");
    let tex_env = &palette.textures[texture];
    let mut power = vec![0.0; bins * n];
    for b in 0..bins {
        for t in 0..n {
            let floor = FLOOR_POWER * jitter.sample(rng).exp();
            let bg = TEXTURE_POWER * tex_env[b] * jitter.sample(rng).exp();
            power[b * n + t] = floor + bg;
        }
    }
    for ev in &strong {
        let gain = EVENT_POWER * rng.gen_range(0.7..1.3);
        let env = &palette.events[ev.class];
        for (b, &e) in env.iter().enumerate() {
            if e < 1e-4 {
                continue;
            }
            for t in ev.onset..ev.offset {
                power[b * n + t] += gain * e * jitter.sample(rng).exp();
            }
        }
    }
    let values = power.into_iter().map(f64::ln).collect();
    let spec = Spectrogram::new(Tensor::new([bins, n], values)?, 1.0 / FRAME_RATE)?;
    strong.sort_by_key(|s| (s.onset, s.class, s.offset));
    let mut weak: Vec<usize> = strong.iter().map(|s| s.class).collect();
    weak.sort_unstable();
    weak.dedup();
    Ok(SynthClip {
        spec,
        weak,
        strong,
        texture,
    })
}

fn pick_texture(labels: &[usize], cfg: &GeneratorConfig, rng: &mut impl Rng) -> usize {
    for link in &cfg.background {
        if labels.contains(&link.class) && rng.gen_bool(link.strength) {
            return link.texture;
        }
    }
    rng.gen_range(0..cfg.textures)
}

/// Deterministic per-clip seed, independent of generation order.
pub fn clip_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples labels and renders clip `index` of a stream.
pub fn generate_clip(
    cfg: &GeneratorConfig,
    palette: &Palette,
    stream: u64,
    index: u64,
) -> Result<SynthClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed, stream, index));
    let (_, labels) = sample_labels(cfg, &mut rng);
    render_clip(&labels, cfg, palette, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    EvalConfounded,
    EvalDecorrelated,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::EvalConfounded, Split::EvalDecorrelated];
    pub const EVAL: [Split; 2] = [Split::EvalConfounded, Split::EvalDecorrelated];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::EvalConfounded => "eval-confounded",
            Split::EvalDecorrelated => "eval-decorrelated",
        }
    }

    /// Sub-seed stream of the split's clips.
    pub fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::EvalConfounded => 2,
            Split::EvalDecorrelated => 3,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Manifest line as written by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub split: Split,
    pub weak: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong: Option<Vec<StrongLabel>>,
}

/// Requested clip counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub eval_confounded: usize,
    pub eval_decorrelated: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            eval_confounded: 300,
            eval_decorrelated: 300,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::EvalConfounded => self.eval_confounded,
            Split::EvalDecorrelated => self.eval_decorrelated,
        }
    }
}

/// Contents of `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub generator: GeneratorConfig,
    pub sizes: SplitSizes,
}

/// Writes all three splits under `out_dir` and returns the manifest.
/// Clips are rendered in parallel; the output bytes do not depend on the
/// number of worker threads.
pub fn emit_dataset(
    cfg: &GeneratorConfig,
    sizes: SplitSizes,
    out_dir: &Path,
) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let palette = Palette::new(cfg.classes, cfg.textures, cfg.mel_bins);
    let decorrelated = cfg.decorrelated();
    let mut manifest = Vec::new();
    for split in Split::ALL {
        let split_cfg = if split == Split::EvalDecorrelated {
            &decorrelated
        } else {
            cfg
        };
        let dir = out_dir.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let records: Vec<ManifestRecord> = (0..sizes.get(split))
            .into_par_iter()
            .map(|i| {
                let clip = generate_clip(split_cfg, &palette, split.stream(), i as u64)?;
                let rel = format!("{}/{:05}.cst", split.name(), i);
                tensorio::write_tensor(&out_dir.join(&rel), clip.spec.values(), DType::F32)?;
                Ok(ManifestRecord {
                    path: rel,
                    split,
                    weak: clip.weak,
                    strong: (split != Split::Train).then_some(clip.strong),
                })
            })
            .collect::<Result<_>>()?;
        manifest.extend(records);
    }

    let mut text = String::new();
    for r in &manifest {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_file(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
    let info = DatasetInfo {
        generator: cfg.clone(),
        sizes,
    };
    let json = serde_json::to_string_pretty(&info).expect("info serializes");
    write_file(&out_dir.join(DATASET_FILE), json.as_bytes())?;
    Ok(manifest)
}

fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}
