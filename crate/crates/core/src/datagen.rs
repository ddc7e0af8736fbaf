//! Synthesis of (observation, motion) training pairs with deliberately
//! mistimed keyframes.
//!
//! Each clip gets one or more keyframes at kinematic extrema. A keyframe at
//! `k` is shifted by `dk` in `[-P, P]`: the observation keeps the clip outside
//! `[k - W, k + W)`, and inside that window only the pose `Y[k]` survives, placed
//! at `k + dk`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_motion;
use crate::motion::{refresh_positions, Motion, PoseLayout};
use crate::observation::ObservationSignal;
use crate::skeleton::{axis_angle_matrix, matrix_to_rot6d, Skeleton};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    /// Clip length F in frames.
    pub clip_len: usize,
    /// Largest absolute keyframe shift P.
    pub max_shift: usize,
    /// Removal half-window W.
    pub window: usize,
    pub keyframes_min: usize,
    pub keyframes_max: usize,
    /// Stride between consecutive clips sliced from a source motion.
    pub stride: usize,
    pub seed: u64,
    /// Disables temporal shifting (every dk is 0), giving classic
    /// in-betweening pairs.
    pub no_time: bool,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            clip_len: 60,
            max_shift: 5,
            window: 10,
            keyframes_min: 1,
            keyframes_max: 4,
            stride: 30,
            seed: 0,
            no_time: false,
        }
    }
}

impl DatagenConfig {
    /// Every violated constraint, prefixed with `prefix`.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.clip_len < 2 * self.window + 2 {
            out.push(format!(
                "{prefix}clip_len: {} must be at least 2*window+2 = {}",
                self.clip_len,
                2 * self.window + 2
            ));
        }
        if self.max_shift >= self.window {
            out.push(format!(
                "{prefix}max_shift: {} must be smaller than window {}",
                self.max_shift, self.window
            ));
        }
        if self.keyframes_min < 1 {
            out.push(format!("{prefix}keyframes_min: must be at least 1"));
        }
        if self.keyframes_max < self.keyframes_min {
            out.push(format!(
                "{prefix}keyframes_max: {} is below keyframes_min {}",
                self.keyframes_max, self.keyframes_min
            ));
        }
        if self.stride == 0 {
            out.push(format!("{prefix}stride: must be positive"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: usize,
    pub offset: usize,
    pub keyframes: Vec<usize>,
    pub shifts: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub observation: ObservationSignal,
    pub target: Motion,
    pub provenance: Provenance,
}

impl TrainingPair {
    /// The shifted keyposes as `(index in observation, original index in target)`.
    pub fn placements(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.provenance
            .keyframes
            .iter()
            .zip(&self.provenance.shifts)
            .map(|(&k, &dk)| ((k as i64 + dk) as usize, k))
    }
}

/// Clip start offsets: every `stride` frames, plus one clip aligned to the end
/// when the stride does not land there.
pub fn slice_offsets(total: usize, len: usize, stride: usize) -> Vec<usize> {
    if total < len || stride == 0 {
        return Vec::new();
    }
    let mut offsets: Vec<usize> = (0..=total - len).step_by(stride).collect();
    if *offsets.last().unwrap() != total - len {
        offsets.push(total - len);
    }
    offsets
}

pub fn slice_clips(motion: &Motion, len: usize, stride: usize) -> Vec<Motion> {
    slice_offsets(motion.num_frames(), len, stride)
        .into_iter()
        .map(|o| motion.slice(o, o + len).expect("offsets are in range"))
        .collect()
}

/// Mean joint speed per frame, `s(f)` for `f >= 1` (index 0 is unused).
pub fn mean_joint_speed(motion: &Motion) -> Vec<f64> {
    let layout = motion.layout();
    let fps = motion.fps() as f64;
    let mut speed = vec![0.0; motion.num_frames()];
    for f in 1..motion.num_frames() {
        let a = layout.positions_of(motion.frame(f - 1));
        let b = layout.positions_of(motion.frame(f));
        let total: f64 = a
            .iter()
            .zip(&b)
            .map(|(p, q)| ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt())
            .sum();
        speed[f] = total / layout.num_joints as f64 * fps;
    }
    speed
}

/// Frames where the mean joint speed is a strict local extremum, at least
/// `window` frames away from both clip ends. Falls back to the middle frame.
pub fn find_extrema(motion: &Motion, window: usize) -> Vec<usize> {
    let n = motion.num_frames();
    let speed = mean_joint_speed(motion);
    let lo = window.max(2);
    let hi = (n - 1).saturating_sub(window).min(n.saturating_sub(2));
    let mut out: Vec<usize> = (lo..=hi)
        .filter(|&f| {
            let (p, c, q) = (speed[f - 1], speed[f], speed[f + 1]);
            (c > p && c > q) || (c < p && c < q)
        })
        .collect();
    if out.is_empty() {
        out.push(n / 2);
    }
    out
}

/// Constraint mask for shifted keyframes `(k, dk)`: everything in
/// `[k - W, k + dk)` and `[k + dk + 1, k + W)` is unconstrained.
pub fn constraint_mask(len: usize, placements: &[(usize, i64)], window: usize) -> Vec<bool> {
    let mut mask = vec![true; len];
    for &(k, dk) in placements {
        let shifted = k as i64 + dk;
        let lo = k as i64 - window as i64;
        let hi = k as i64 + window as i64;
        for f in (lo.max(0)..shifted).chain((shifted + 1)..hi.min(len as i64)) {
            mask[f as usize] = false;
        }
        if (0..len as i64).contains(&shifted) {
            mask[shifted as usize] = true;
        }
    }
    mask
}

/// Builds one training pair from a clip of exactly `cfg.clip_len` frames.
pub fn make_pair<R: Rng + ?Sized>(
    target: &Motion,
    cfg: &DatagenConfig,
    rng: &mut R,
) -> Result<TrainingPair> {
    cfg.validate()?;
    if target.num_frames() != cfg.clip_len {
        return Err(Error::LengthMismatch {
            expected: cfg.clip_len,
            actual: target.num_frames(),
        });
    }
    let w = cfg.window;
    let mut pool = find_extrema(target, w);
    let wanted = rng.random_range(cfg.keyframes_min..=cfg.keyframes_max);
    let mut chosen: Vec<usize> = Vec::with_capacity(wanted);
    'outer: for _ in 0..wanted {
        for _attempt in 0..10 {
            if pool.is_empty() {
                break 'outer;
            }
            let k = pool.swap_remove(rng.random_range(0..pool.len()));
            if chosen.iter().all(|&c| c.abs_diff(k) >= 2 * w) {
                chosen.push(k);
                continue 'outer;
            }
        }
        break;
    }
    chosen.sort_unstable();
    let p = cfg.max_shift as i64;
    let shifts: Vec<i64> = chosen
        .iter()
        .map(|_| if cfg.no_time { 0 } else { rng.random_range(-p..=p) })
        .collect();

    let placements: Vec<(usize, i64)> = chosen.iter().copied().zip(shifts.iter().copied()).collect();
    let mask = constraint_mask(cfg.clip_len, &placements, w);
    let mut buffer = target.frames().to_owned();
    for &(k, dk) in &placements {
        let row = target.frame(k).to_owned();
        buffer.row_mut((k as i64 + dk) as usize).assign(&row);
    }
    let observation = ObservationSignal::from_masked(*target.layout(), target.fps(), buffer, mask)?;
    Ok(TrainingPair {
        observation,
        target: target.clone(),
        provenance: Provenance {
            source: 0,
            offset: 0,
            keyframes: chosen,
            shifts,
        },
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for the clip at (`source`, `offset`).
pub fn pair_rng(seed: u64, source: usize, offset: usize) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ source as u64) ^ offset as u64);
    ChaCha8Rng::seed_from_u64(s)
}

/// Slices every source and draws one pair per clip.
pub fn generate_pairs(sources: &[Motion], cfg: &DatagenConfig) -> Result<Vec<TrainingPair>> {
    if sources.is_empty() {
        return Err(Error::Invalid("no source motions".into()));
    }
    cfg.validate()?;
    let mut pairs = Vec::new();
    for (source, motion) in sources.iter().enumerate() {
        for offset in slice_offsets(motion.num_frames(), cfg.clip_len, cfg.stride) {
            let clip = motion.slice(offset, offset + cfg.clip_len)?;
            let mut rng = pair_rng(cfg.seed, source, offset);
            let mut pair = make_pair(&clip, cfg, &mut rng)?;
            pair.provenance.source = source;
            pair.provenance.offset = offset;
            pairs.push(pair);
        }
    }
    Ok(pairs)
}

pub const PAIR_MAGIC: &[u8; 4] = b"LKPR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DatagenConfig,
    pub layout: PoseLayout,
    pub fps: u32,
    pub pairs: usize,
    /// Free-form metadata from the caller (e.g. the resolved run config hash).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub annotations: serde_json::Map<String, serde_json::Value>,
}

fn pair_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("pairs").join(format!("pair_{index:06}.bin"))
}

pub fn encode_pair(pair: &TrainingPair) -> Vec<u8> {
    let (f, d) = pair.target.frames().dim();
    let prov = serde_json::to_vec(&pair.provenance).expect("provenance serializes");
    let mut out = Vec::with_capacity(16 + 8 * f * d + f + 4 + prov.len());
    out.extend_from_slice(PAIR_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in pair.observation.buffer().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend(pair.observation.mask().iter().map(|&m| m as u8));
    for v in pair.target.frames().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(&(prov.len() as u32).to_le_bytes());
    out.extend_from_slice(&prov);
    out
}

pub fn decode_pair(bytes: &[u8], layout: PoseLayout, fps: u32) -> Result<TrainingPair> {
    let bad = |msg: String| Error::MalformedHeader(msg);
    if bytes.len() < 16 || &bytes[..4] != PAIR_MAGIC {
        return Err(bad("not a pair record (bad magic)".into()));
    }
    let u32_at = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad(format!("record truncated at byte {at}")))
    };
    if u32_at(4)? != 1 {
        return Err(bad("unsupported pair record version".into()));
    }
    let f = u32_at(8)? as usize;
    let d = u32_at(12)? as usize;
    if d != layout.dim() {
        return Err(Error::DimensionMismatch {
            frame: 0,
            expected: layout.dim(),
            actual: d,
        });
    }
    let floats = |start: usize| -> Result<Array2<f64>> {
        let end = start + 4 * f * d;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| bad(format!("record truncated at byte {start}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Array2::from_shape_vec((f, d), data).expect("shape checked"))
    };
    let x = floats(16)?;
    let mask_start = 16 + 4 * f * d;
    let mask: Vec<bool> = bytes
        .get(mask_start..mask_start + f)
        .ok_or_else(|| bad("record truncated in mask".into()))?
        .iter()
        .map(|&b| b != 0)
        .collect();
    let y = floats(mask_start + f)?;
    let json_len_at = mask_start + f + 4 * f * d;
    let json_len = u32_at(json_len_at)? as usize;
    let json = bytes
        .get(json_len_at + 4..json_len_at + 4 + json_len)
        .ok_or_else(|| bad("record truncated in provenance".into()))?;
    let provenance: Provenance =
        serde_json::from_slice(json).map_err(|e| Error::json("pair provenance", e))?;
    Ok(TrainingPair {
        observation: ObservationSignal::from_masked(layout, fps, x, mask)?,
        target: Motion::new(layout, fps, y)?,
        provenance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub pairs: usize,
    pub sources: usize,
    pub constrained_frames: usize,
}

/// Generates pairs from `sources` and writes them under `dir`
/// (`manifest.json` plus `pairs/pair_NNNNNN.bin`).
pub fn build_dataset(
    sources: &[Motion],
    cfg: &DatagenConfig,
    dir: &Path,
    annotations: serde_json::Map<String, serde_json::Value>,
) -> Result<DatasetSummary> {
    let pairs = generate_pairs(sources, cfg)?;
    write_dataset(&pairs, cfg, dir, annotations)?;
    Ok(DatasetSummary {
        pairs: pairs.len(),
        sources: sources.len(),
        constrained_frames: pairs
            .iter()
            .map(|p| p.observation.constrained_frames().count())
            .sum(),
    })
}

pub fn write_dataset(
    pairs: &[TrainingPair],
    cfg: &DatagenConfig,
    dir: &Path,
    annotations: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Invalid("cannot write an empty dataset".into()))?;
    let pairs_dir = dir.join("pairs");
    fs::create_dir_all(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;
    for (i, pair) in pairs.iter().enumerate() {
        let path = pair_path(dir, i);
        fs::write(&path, encode_pair(pair)).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = DatasetManifest {
        version: 1,
        config: cfg.clone(),
        layout: *first.target.layout(),
        fps: first.target.fps(),
        pairs: pairs.len(),
        annotations,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// A dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<TrainingPair>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        if manifest.version != 1 {
            return Err(Error::MalformedHeader(format!(
                "{}: unsupported dataset version {}",
                path.display(),
                manifest.version
            )));
        }
        let pairs = (0..manifest.pairs)
            .map(|i| {
                let path = pair_path(dir, i);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                decode_pair(&bytes, manifest.layout, manifest.fps).map_err(|e| {
                    Error::Invalid(format!("{}: {e}", path.display()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, pairs })
    }
}

/// Loads every `.json` / `.lkm` motion file in `dir` (sorted by name) as a
/// source for dataset generation.
pub fn read_sources(dir: &Path, layout: PoseLayout) -> Result<Vec<Motion>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "lkm")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| read_motion(p, Some(&layout)).map(|f| f.motion))
        .collect()
}

/// Height below which a contact joint counts as touching the ground.
pub const CONTACT_HEIGHT: f64 = 0.05;
/// Lowest and highest sinusoid frequency used by the synthesizer, in Hz.
pub const SYNTH_MIN_FREQ: f64 = 0.25;
pub const SYNTH_MAX_FREQ: f64 = 1.5;
/// Per-axis bound on the summed sinusoid amplitudes of the root's
/// horizontal translation, in meters.
pub const SYNTH_ROOT_SWAY: f64 = 0.4;
/// Per-axis bound on the vertical bob of the root, in meters.
pub const SYNTH_ROOT_BOB: f64 = 0.05;
pub const SYNTH_ROOT_HEIGHT: f64 = 0.9;
/// Per-axis bound on joint rotation amplitude, in radians.
pub const SYNTH_JOINT_SWING: f64 = 0.6;

/// Sum of 2 to 5 sinusoids whose amplitudes add up to at most `cap`.
struct Wave {
    terms: Vec<(f64, f64, f64)>,
}

impl Wave {
    fn random<R: Rng>(rng: &mut R, cap: f64, max_freq: f64) -> Self {
        let n = rng.random_range(2..=5);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let scale = cap * rng.random_range(0.5..1.0) / total;
        let terms = weights
            .into_iter()
            .map(|w| {
                let freq = rng.random_range(SYNTH_MIN_FREQ..max_freq);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (w * scale, std::f64::consts::TAU * freq, phase)
            })
            .collect();
        Wave { terms }
    }

    fn at(&self, t: f64) -> f64 {
        self.terms.iter().map(|(a, w, p)| a * (w * t + p).sin()).sum()
    }
}

/// Procedural smooth motions standing in for a mocap corpus. Joint rotations
/// and root translation are driven by band-limited sinusoid sums (below
/// `fps / 6`); contact flags mark contact joints below [`CONTACT_HEIGHT`].
pub fn synth_source_motions(
    n: usize,
    skeleton: &Skeleton,
    frames: usize,
    fps: u32,
    seed: u64,
) -> Result<Vec<Motion>> {
    if n == 0 {
        return Err(Error::Invalid("need at least one source motion".into()));
    }
    let layout = PoseLayout::for_skeleton(skeleton);
    let max_freq = SYNTH_MAX_FREQ.min(fps as f64 / 6.0 * 0.99);
    (0..n)
        .map(|i| {
            let mut rng = pair_rng(seed, i, usize::MAX);
            let joint_waves: Vec<[Wave; 3]> = (0..skeleton.num_joints())
                .map(|_| std::array::from_fn(|_| Wave::random(&mut rng, SYNTH_JOINT_SWING, max_freq)))
                .collect();
            let root_waves = [
                Wave::random(&mut rng, SYNTH_ROOT_SWAY, max_freq),
                Wave::random(&mut rng, SYNTH_ROOT_BOB, max_freq),
                Wave::random(&mut rng, SYNTH_ROOT_SWAY, max_freq),
            ];
            let mut data = Array2::zeros((frames, layout.dim()));
            for (f, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
                let t = f as f64 / fps as f64;
                for (j, waves) in joint_waves.iter().enumerate() {
                    let v = [waves[0].at(t), waves[1].at(t), waves[2].at(t)];
                    let angle = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    let r = matrix_to_rot6d(&axis_angle_matrix(v, angle));
                    for k in 0..6 {
                        row[6 * j + k] = r[k];
                    }
                }
                let base = layout.root_translation().start;
                row[base] = root_waves[0].at(t);
                row[base + 1] = SYNTH_ROOT_HEIGHT + root_waves[1].at(t);
                row[base + 2] = root_waves[2].at(t);
            }
            let motion = refresh_positions(&Motion::new(layout, fps, data)?, skeleton)?;
            let mut data = motion.into_frames();
            let contacts = layout.contacts().start;
            for mut row in data.axis_iter_mut(Axis(0)) {
                let positions = layout.positions_of(row.view());
                for (c, &joint) in skeleton.contact_joints().iter().enumerate() {
                    row[contacts + c] = if positions[joint][1] < CONTACT_HEIGHT { 1.0 } else { 0.0 };
                }
            }
            Motion::new(layout, fps, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::IDENTITY_6D;

    fn desk_layout() -> PoseLayout {
        PoseLayout::for_skeleton(&Skeleton::desk())
    }

    /// Identity pose with the root following `root(f)`.
    fn root_motion(frames: usize, root: impl Fn(usize) -> [f64; 3]) -> Motion {
        let skeleton = Skeleton::desk();
        let layout = desk_layout();
        let mut data = Array2::zeros((frames, layout.dim()));
        for f in 0..frames {
            for j in 0..layout.num_joints {
                for k in 0..6 {
                    data[[f, 6 * j + k]] = IDENTITY_6D[k];
                }
            }
            let r = root(f);
            for k in 0..3 {
                data[[f, layout.root_translation().start + k]] = r[k];
            }
        }
        refresh_positions(&Motion::new(layout, 30, data).unwrap(), &skeleton).unwrap()
    }

    #[test]
    fn slicing_offsets() {
        let m = root_motion(120, |_| [0.0; 3]);
        assert_eq!(slice_offsets(120, 60, 30), vec![0, 30, 60]);
        assert_eq!(slice_clips(&m, 60, 30).len(), 3);
        assert_eq!(slice_offsets(60, 60, 30), vec![0]);
        assert_eq!(slice_offsets(59, 60, 30), Vec::<usize>::new());
        assert_eq!(slice_offsets(100, 60, 30), vec![0, 30, 40]);
    }

    #[test]
    fn extrema_of_constant_motion_fall_back_to_middle() {
        let m = root_motion(60, |_| [0.0, 0.9, 0.0]);
        assert_eq!(find_extrema(&m, 10), vec![30]);
    }

    #[test]
    fn single_speed_peak_is_found() {
        // x(f) = -cos(pi (f + 1/2) / 60) gives s(f) proportional to sin(pi f / 60),
        // which rises strictly to f = 30 and falls strictly after.
        let m = root_motion(60, |f| {
            [-(std::f64::consts::PI * (f as f64 + 0.5) / 60.0).cos(), 0.9, 0.0]
        });
        let s = mean_joint_speed(&m);
        for f in 1..60 {
            let expected =
                2.0 * (std::f64::consts::PI / 120.0).sin() * (std::f64::consts::PI * f as f64 / 60.0).sin() * 30.0;
            assert!((s[f] - expected).abs() < 1e-9, "frame {f}");
        }
        assert_eq!(find_extrema(&m, 10), vec![30]);
    }

    #[test]
    fn peaks_near_the_boundary_are_excluded() {
        // speed rises until f = 5 then falls for the rest of the clip
        let step = |f: usize| if f <= 5 { f as f64 } else { 5.0 - 0.05 * (f - 5) as f64 };
        let xs: Vec<f64> = (0..60).scan(0.0, |x, f| {
            if f > 0 {
                *x += step(f) * 0.01;
            }
            Some(*x)
        }).collect();
        let m = root_motion(60, |f| [xs[f], 0.9, 0.0]);
        let s = mean_joint_speed(&m);
        assert!(s[5] > s[4] && s[5] > s[6]);
        assert_eq!(find_extrema(&m, 10), vec![30]);
    }

    #[test]
    fn mask_matches_interval_formula() {
        let mask = constraint_mask(60, &[(30, 3)], 10);
        for (f, &m) in mask.iter().enumerate() {
            let expected = !(20..33).contains(&f) && !(34..40).contains(&f);
            assert_eq!(m, expected, "frame {f}");
        }
        assert!(mask[33]);
    }

    fn cfg() -> DatagenConfig {
        DatagenConfig {
            seed: 7,
            ..DatagenConfig::default()
        }
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let bad = DatagenConfig {
            clip_len: 10,
            max_shift: 12,
            keyframes_min: 0,
            stride: 0,
            ..cfg()
        };
        match bad.validate() {
            Err(Error::InvalidConfig(v)) => assert_eq!(v.len(), 4, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pairs_respect_their_placements() {
        let skeleton = Skeleton::desk();
        let sources = synth_source_motions(3, &skeleton, 150, 30, 11).unwrap();
        let pairs = generate_pairs(&sources, &cfg()).unwrap();
        assert_eq!(pairs.len(), 3 * 4);
        let layout = desk_layout();
        for pair in &pairs {
            let prov = &pair.provenance;
            assert!(!prov.keyframes.is_empty() && prov.keyframes.len() <= 4);
            let placements: Vec<(usize, i64)> =
                prov.keyframes.iter().copied().zip(prov.shifts.iter().copied()).collect();
            assert_eq!(pair.observation.mask(), constraint_mask(60, &placements, 10).as_slice());
            for &(k, dk) in &placements {
                assert!(dk.abs() <= 5);
                let _ = k;
            }
            for w in prov.keyframes.windows(2) {
                assert!(w[1] - w[0] >= 20);
            }
            let shifted: Vec<usize> = pair.placements().map(|(s, _)| s).collect();
            for f in pair.observation.constrained_frames() {
                let src = pair
                    .placements()
                    .find(|&(s, _)| s == f)
                    .map(|(_, k)| k)
                    .unwrap_or(f);
                if !shifted.contains(&f) {
                    assert_eq!(src, f);
                }
                for i in 0..layout.dim() {
                    if layout.contacts().contains(&i) {
                        assert_eq!(pair.observation.buffer()[[f, i]], 0.0);
                    } else {
                        assert_eq!(pair.observation.buffer()[[f, i]], pair.target.frame(src)[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn no_time_pairs_are_unshifted() {
        let skeleton = Skeleton::desk();
        let sources = synth_source_motions(2, &skeleton, 120, 30, 3).unwrap();
        let cfg = DatagenConfig {
            no_time: true,
            ..cfg()
        };
        for pair in generate_pairs(&sources, &cfg).unwrap() {
            assert!(pair.provenance.shifts.iter().all(|&d| d == 0));
        }
    }

    #[test]
    fn dataset_is_deterministic_and_loads_back() {
        let skeleton = Skeleton::desk();
        let sources = synth_source_motions(2, &skeleton, 90, 30, 5).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let summary = build_dataset(&sources, &cfg(), a.path(), Default::default()).unwrap();
        build_dataset(&sources, &cfg(), b.path(), Default::default()).unwrap();
        assert_eq!(summary.pairs, 4);
        for i in 0..summary.pairs {
            assert_eq!(
                fs::read(pair_path(a.path(), i)).unwrap(),
                fs::read(pair_path(b.path(), i)).unwrap()
            );
        }
        assert_eq!(
            fs::read(a.path().join("manifest.json")).unwrap(),
            fs::read(b.path().join("manifest.json")).unwrap()
        );
        let loaded = Dataset::load(a.path()).unwrap();
        let direct = generate_pairs(&sources, &cfg()).unwrap();
        assert_eq!(loaded.pairs.len(), direct.len());
        for (l, d) in loaded.pairs.iter().zip(&direct) {
            assert_eq!(l.observation.mask(), d.observation.mask());
            assert_eq!(l.provenance, d.provenance);
            for (x, y) in l.target.frames().iter().zip(d.target.frames().iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert!(build_dataset(&[], &cfg(), a.path(), Default::default()).is_err());
    }

    #[test]
    fn synth_is_smooth_deterministic_and_labels_contacts() {
        let skeleton = Skeleton::desk();
        let a = synth_source_motions(1, &skeleton, 200, 30, 9).unwrap();
        let b = synth_source_motions(1, &skeleton, 200, 30, 9).unwrap();
        assert_eq!(a, b);
        let m = &a[0];
        let layout = *m.layout();
        m.validate_contacts().unwrap();
        // |x''| <= sum(a_i) * w_max^2 for a sinusoid sum; second differences
        // scaled by fps^2 never exceed the continuous bound.
        let w_max = std::f64::consts::TAU * SYNTH_MAX_FREQ;
        let fps2 = 30.0f64 * 30.0;
        let root = layout.root_translation().start;
        for f in 1..199 {
            for (k, cap) in [(0, SYNTH_ROOT_SWAY), (1, SYNTH_ROOT_BOB), (2, SYNTH_ROOT_SWAY)] {
                let acc = (m.frame(f + 1)[root + k] - 2.0 * m.frame(f)[root + k]
                    + m.frame(f - 1)[root + k])
                    * fps2;
                assert!(acc.abs() <= cap * w_max * w_max + 1e-9);
            }
        }
        for f in 0..200 {
            let positions = layout.positions_of(m.frame(f));
            for (c, &j) in skeleton.contact_joints().iter().enumerate() {
                let flag = m.frame(f)[layout.contacts().start + c];
                assert_eq!(flag == 1.0, positions[j][1] < CONTACT_HEIGHT);
            }
        }
    }
}
