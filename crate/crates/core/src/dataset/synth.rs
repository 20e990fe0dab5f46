//! Synthetic skating clips with exact flight annotations.
//!
//! Each clip is a 2D kinematic skater gliding horizontally. Every jump is a
//! preparation crouch, a take-off extension on the B frame, a parabolic flight
//! of the whole skeleton with tucked limbs and an in-plane rotation (seen as
//! horizontal foreshortening), and a landing pose on the E frame that relaxes
//! over the following frames. Coordinates get bounded uniform noise.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::joints::*;
use crate::dataset::{
    FlightSpan, Keypoint, Pose, PoseCandidate, PoseSequence, VideoRecord, NUM_JOINTS,
};
use crate::error::{Error, Result};
use crate::numerics::rng::{rng_at, streams, uniform_symmetric, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub videos: usize,
    pub fps: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub jumps_min: usize,
    pub jumps_max: usize,
    /// Flight length in frames, B through E inclusive.
    pub flight_min: usize,
    pub flight_max: usize,
    /// O frames between consecutive flights.
    pub gap_min: usize,
    pub gap_max: usize,
    /// Probability that a follow-up jump is a combination: a gap of
    /// `combo_gap_min..=combo_gap_max` frames, a flight no longer than the
    /// midpoint of the flight range and a lift scaled by `combo_height`.
    pub combo_prob: f64,
    pub combo_height: f64,
    pub combo_gap_min: usize,
    pub combo_gap_max: usize,
    /// O frames kept before the first flight and after the last.
    pub margin: usize,
    /// Apex height of the hip trajectory, pixels.
    pub jump_height: f64,
    pub torso_px: f64,
    /// Bound of the uniform coordinate noise, pixels.
    pub noise: f64,
    /// Extra noise bound on airborne frames (motion blur), pixels.
    pub flight_blur: f64,
    /// Largest offset, in frames, between an annotated take-off or landing
    /// and the visible one.
    pub label_jitter: usize,
    pub glide_speed: f64,
    pub rotation_buckets: usize,
    pub distractor_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            videos: 200,
            fps: 30.0,
            min_frames: 60,
            max_frames: 120,
            jumps_min: 1,
            jumps_max: 3,
            flight_min: 9,
            flight_max: 15,
            gap_min: 10,
            gap_max: 30,
            combo_prob: 0.5,
            combo_height: 0.6,
            combo_gap_min: 2,
            combo_gap_max: 5,
            margin: 8,
            jump_height: 45.0,
            torso_px: 60.0,
            noise: 1.5,
            flight_blur: 3.0,
            label_jitter: 1,
            glide_speed: 4.0,
            rotation_buckets: 2,
            distractor_prob: 0.0,
        }
    }
}

impl SynthConfig {
    fn min_required(&self) -> usize {
        let gap = self.gap_min.min(self.combo_gap_min);
        2 * self.margin + self.jumps_max * self.flight_min + self.jumps_max.saturating_sub(1) * gap
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.videos == 0
            || self.jumps_min == 0
            || self.rotation_buckets == 0
            || self.min_frames == 0
        {
            return bad("counts must be positive");
        }
        if self.jumps_min > self.jumps_max {
            return bad("jumps_min exceeds jumps_max");
        }
        if self.flight_min < 3 || self.flight_min > self.flight_max {
            return bad("flight lengths must satisfy 3 <= flight_min <= flight_max");
        }
        if self.gap_min == 0
            || self.combo_gap_min == 0
            || self.gap_min > self.gap_max
            || self.combo_gap_min > self.combo_gap_max
        {
            return bad("gaps must be at least one frame and min <= max");
        }
        if self.label_jitter > self.margin {
            return bad("label_jitter exceeds margin");
        }
        if self.min_frames > self.max_frames {
            return bad("min_frames exceeds max_frames");
        }
        if !(self.fps > 0.0)
            || !(self.torso_px > 0.0)
            || self.noise < 0.0
            || self.flight_blur < 0.0
            || self.jump_height < 0.0
        {
            return bad("fps and torso_px must be positive; noise, flight_blur and jump_height non-negative");
        }
        if !(0.0..=1.0).contains(&self.combo_height)
            || !(0.0..=1.0).contains(&self.combo_prob)
            || !(0.0..=1.0).contains(&self.distractor_prob)
        {
            return bad("combo_height and probabilities must lie in [0, 1]");
        }
        if self.min_required() > self.max_frames {
            return Err(Error::Config(format!(
                "{} jumps of at least {} frames with margins need {} frames, but max_frames is {}",
                self.jumps_max,
                self.flight_min,
                self.min_required(),
                self.max_frames
            )));
        }
        Ok(())
    }
}

/// Neutral standing pose in body units: hip midpoint at the origin, image y
/// pointing down, hip-to-shoulder distance exactly 1.
pub fn standing_pose() -> Pose {
    let mut p = [[0.0; 2]; NUM_JOINTS];
    p[NOSE] = [0.0, -1.35];
    p[LEFT_EYE] = [0.05, -1.42];
    p[RIGHT_EYE] = [-0.05, -1.42];
    p[LEFT_EAR] = [0.11, -1.38];
    p[RIGHT_EAR] = [-0.11, -1.38];
    p[LEFT_SHOULDER] = [0.22, -1.0];
    p[RIGHT_SHOULDER] = [-0.22, -1.0];
    p[LEFT_ELBOW] = [0.30, -0.60];
    p[RIGHT_ELBOW] = [-0.30, -0.60];
    p[LEFT_WRIST] = [0.35, -0.25];
    p[RIGHT_WRIST] = [-0.35, -0.25];
    p[LEFT_HIP] = [0.12, 0.0];
    p[RIGHT_HIP] = [-0.12, 0.0];
    p[LEFT_KNEE] = [0.13, 0.55];
    p[RIGHT_KNEE] = [-0.13, 0.55];
    p[LEFT_ANKLE] = [0.14, ANKLE_Y];
    p[RIGHT_ANKLE] = [-0.14, ANKLE_Y];
    p
}

/// Body-unit height of the ankles below the hips in the standing pose; the
/// ankle never changes height relative to the hips while airborne.
pub const ANKLE_Y: f64 = 1.1;

/// Hip lift above the glide baseline at fraction `s ∈ [0, 1]` of a flight.
pub fn flight_lift(height: f64, s: f64) -> f64 {
    height * 4.0 * s * (1.0 - s)
}

const PREP_FRAMES: usize = 6;
const LANDING_RELAX: f64 = 4.0;

struct Jump {
    /// Annotated flight.
    span: FlightSpan,
    /// Visible flight.
    motion: FlightSpan,
    /// Apex hip lift, pixels.
    height: f64,
    revolutions: f64,
}

struct Clip {
    len: usize,
    jumps: Vec<Jump>,
    bucket: usize,
    direction: f64,
    speed: f64,
    x0: f64,
    y0: f64,
    swing_rate: f64,
    swing_phase: f64,
}

fn lerp(a: [f64; 2], b: [f64; 2], w: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * w, a[1] + (b[1] - a[1]) * w]
}

impl Clip {
    fn sample(cfg: &SynthConfig, rng: &mut SeededRng) -> Clip {
        let n = rng.gen_range(cfg.jumps_min..=cfg.jumps_max);
        // combo[i]: jump i follows jump i-1 as a combination
        let combo: Vec<bool> = (0..n)
            .map(|i| i > 0 && rng.gen_bool(cfg.combo_prob))
            .collect();
        let short_max = (cfg.flight_min + cfg.flight_max) / 2;
        let mut lengths: Vec<usize> = combo
            .iter()
            .map(|c| rng.gen_range(cfg.flight_min..=if *c { short_max } else { cfg.flight_max }))
            .collect();
        let mut gaps: Vec<usize> = combo[1..]
            .iter()
            .map(|c| {
                if *c {
                    rng.gen_range(cfg.combo_gap_min..=cfg.combo_gap_max)
                } else {
                    rng.gen_range(cfg.gap_min..=cfg.gap_max)
                }
            })
            .collect();
        let required = |l: &[usize], g: &[usize]| {
            2 * cfg.margin + l.iter().sum::<usize>() + g.iter().sum::<usize>()
        };
        if required(&lengths, &gaps) > cfg.max_frames {
            lengths.iter_mut().for_each(|l| *l = cfg.flight_min);
            gaps.iter_mut().for_each(|g| *g = (*g).min(cfg.gap_min));
        }
        let need = required(&lengths, &gaps);
        let len = rng.gen_range(cfg.min_frames.max(need)..=cfg.max_frames);
        let mut pos = cfg.margin + rng.gen_range(0..=len - need);
        let bucket = rng.gen_range(0..cfg.rotation_buckets);
        let mut jumps = Vec::with_capacity(n);
        for (i, l) in lengths.iter().enumerate() {
            let span = FlightSpan::new(pos, pos + l - 1);
            let revolutions = 1.0 + bucket as f64 + rng.gen_range(-0.2..0.2);
            let j = cfg.label_jitter as i64;
            let mut shift = || rng.gen_range(-j..=j);
            let start = (span.start as i64 + shift()) as usize;
            let end = ((span.end as i64 + shift()) as usize).max(start + 2);
            jumps.push(Jump {
                span,
                motion: FlightSpan::new(start, end),
                revolutions,
                height: cfg.jump_height * if combo[i] { cfg.combo_height } else { 1.0 },
            });
            pos = span.end + 1 + gaps.get(i).copied().unwrap_or(0);
        }
        let direction = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let speed = cfg.glide_speed * rng.gen_range(0.5..1.0);
        Clip {
            len,
            jumps,
            bucket,
            direction,
            speed,
            x0: 960.0 - direction * speed * len as f64 / 2.0,
            y0: 700.0 + rng.gen_range(-50.0..50.0),
            swing_rate: rng.gen_range(0.15..0.3),
            swing_phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn airborne(&self, t: usize) -> bool {
        self.jumps
            .iter()
            .any(|j| t > j.motion.start && t < j.motion.end)
    }

    /// Body-unit pose and hip position (pixels) at frame `t`.
    fn frame(&self, cfg: &SynthConfig, t: usize) -> (Pose, [f64; 2]) {
        let mut p = standing_pose();
        let tf = t as f64;
        let root_x = self.x0 + self.direction * self.speed * tf;
        let mut root_y = self.y0;

        // glide: arm swing and a small stroke of the free leg
        let swing = (self.swing_rate * tf + self.swing_phase).sin();
        p[LEFT_WRIST][0] += 0.15 * swing;
        p[RIGHT_WRIST][0] += 0.15 * swing;
        p[LEFT_ELBOW][0] += 0.08 * swing;
        p[RIGHT_ELBOW][0] += 0.08 * swing;
        p[LEFT_ANKLE][0] += 0.08 * swing;

        for (ji, jump) in self.jumps.iter().enumerate() {
            let FlightSpan { start, end } = jump.motion;
            let prev_end = ji.checked_sub(1).map(|k| self.jumps[k].motion.end);
            let next_start = self
                .jumps
                .get(ji + 1)
                .map_or(usize::MAX, |j| j.motion.start);
            let f = self.direction;
            // preparation crouch: knees forward, ankles closer to the hips
            if t < start && t + PREP_FRAMES >= start && prev_end.map_or(true, |e| t > e) {
                let c = 1.0 - (start - t) as f64 / (PREP_FRAMES as f64 + 1.0);
                for k in [LEFT_KNEE, RIGHT_KNEE] {
                    p[k][0] += 0.2 * c * f;
                    p[k][1] -= 0.15 * c;
                }
                for a in [LEFT_ANKLE, RIGHT_ANKLE] {
                    p[a][1] -= 0.3 * c;
                }
                for w in [LEFT_WRIST, RIGHT_WRIST] {
                    p[w][0] -= 0.3 * c * f;
                }
                root_y += 0.3 * c * cfg.torso_px;
            }
            // take-off extension: arms thrown up over three frames, toes pointed
            let up = 1.0 - (t as f64 - start as f64).abs() / 2.0;
            if up > 0.0 && prev_end.map_or(true, |e| t > e) {
                p[LEFT_WRIST] = lerp(p[LEFT_WRIST], [0.25, -1.15], up);
                p[RIGHT_WRIST] = lerp(p[RIGHT_WRIST], [-0.25, -1.15], up);
                p[LEFT_ELBOW] = lerp(p[LEFT_ELBOW], [0.3, -0.85], up);
                p[RIGHT_ELBOW] = lerp(p[RIGHT_ELBOW], [-0.3, -0.85], up);
            }
            if t == start {
                p[LEFT_ANKLE][1] += 0.1;
                p[RIGHT_ANKLE][1] += 0.1;
            }
            if t > start && t < end {
                let s = (t - start) as f64 / (end - start) as f64;
                let tuck = (s.min(1.0 - s) / 0.2).min(1.0);
                p[LEFT_WRIST] = lerp(p[LEFT_WRIST], [0.08, -0.7], tuck);
                p[RIGHT_WRIST] = lerp(p[RIGHT_WRIST], [-0.08, -0.7], tuck);
                p[LEFT_ELBOW] = lerp(p[LEFT_ELBOW], [0.25, -0.75], tuck);
                p[RIGHT_ELBOW] = lerp(p[RIGHT_ELBOW], [-0.25, -0.75], tuck);
                p[LEFT_ANKLE][0] = p[LEFT_ANKLE][0] * (1.0 - tuck) - 0.03 * tuck;
                p[RIGHT_ANKLE][0] = p[RIGHT_ANKLE][0] * (1.0 - tuck) + 0.03 * tuck;
                let cos = (2.0 * PI * jump.revolutions * s).cos();
                for j in p.iter_mut() {
                    j[0] *= cos;
                }
            }
            if t >= start && t <= end {
                let s = (t - start) as f64 / (end - start) as f64;
                root_y -= flight_lift(jump.height, s);
            }
            if t + 1 == end {
                // arms open just before touch-down
                p[LEFT_WRIST] = lerp(p[LEFT_WRIST], [0.9, -0.85], 0.4);
                p[RIGHT_WRIST] = lerp(p[RIGHT_WRIST], [-0.9, -0.85], 0.4);
            }
            if t >= end && t < next_start {
                // landing: free leg extended back, arms out; relaxes afterwards
                let w = (-((t - end) as f64) / LANDING_RELAX).exp();
                if w > 0.05 {
                    p[LEFT_ANKLE] = lerp(p[LEFT_ANKLE], [-0.6 * f, 0.9], w);
                    p[LEFT_KNEE] = lerp(p[LEFT_KNEE], [-0.3 * f, 0.5], w);
                    p[RIGHT_KNEE][0] += 0.12 * w * f;
                    p[LEFT_WRIST] = lerp(p[LEFT_WRIST], [0.9, -0.85], w);
                    p[RIGHT_WRIST] = lerp(p[RIGHT_WRIST], [-0.9, -0.85], w);
                    p[LEFT_ELBOW] = lerp(p[LEFT_ELBOW], [0.55, -0.9], w);
                    p[RIGHT_ELBOW] = lerp(p[RIGHT_ELBOW], [-0.55, -0.9], w);
                }
            }
        }
        (p, [root_x, root_y])
    }
}

fn to_pixels(body: &Pose, root: [f64; 2], torso_px: f64, noise: f64, rng: &mut SeededRng) -> Pose {
    let mut out = [[0.0; 2]; NUM_JOINTS];
    for (o, b) in out.iter_mut().zip(body) {
        *o = [
            root[0] + torso_px * b[0] + uniform_symmetric(rng, noise),
            root[1] + torso_px * b[1] + uniform_symmetric(rng, noise),
        ];
    }
    out
}

fn candidate(p: &Pose, score: f64) -> PoseCandidate {
    let mut keypoints = [Keypoint {
        x: 0.0,
        y: 0.0,
        score,
    }; NUM_JOINTS];
    for (k, c) in keypoints.iter_mut().zip(p) {
        k.x = c[0];
        k.y = c[1];
    }
    PoseCandidate {
        keypoints,
        confidence: score,
    }
}

/// One generated clip plus the multi-person detections it would produce.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub record: VideoRecord,
    pub detections: Vec<Vec<PoseCandidate>>,
    /// Per-frame hip-midpoint height of the glide baseline, pixels.
    pub baseline_y: f64,
}

pub fn category_name(jumps: usize, bucket: usize) -> String {
    format!("jumps{jumps}-rot{bucket}")
}

/// Clips with their detections; a pure function of `(config, seed)`.
pub fn generate_synthetic_videos(config: &SynthConfig, seed: u64) -> Result<Vec<SyntheticVideo>> {
    config.validate()?;
    (0..config.videos)
        .map(|i| {
            let mut rng = rng_at(seed, streams::SYNTH, i as u64);
            let clip = Clip::sample(config, &mut rng);
            let has_distractor = rng.gen_bool(config.distractor_prob);
            let distractor_dx = 400.0 * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let skater_conf = rng.gen_range(0.8..0.95);
            let mut frames = Vec::with_capacity(clip.len);
            let mut detections = Vec::with_capacity(clip.len);
            for t in 0..clip.len {
                let (body, root) = clip.frame(config, t);
                let blur = if clip.airborne(t) {
                    config.flight_blur
                } else {
                    0.0
                };
                let pose = to_pixels(&body, root, config.torso_px, config.noise + blur, &mut rng);
                let mut cands = vec![candidate(&pose, skater_conf)];
                if has_distractor {
                    let other = standing_pose();
                    let root = [root[0] + distractor_dx, clip.y0];
                    let d = to_pixels(&other, root, config.torso_px, config.noise, &mut rng);
                    let c = candidate(&d, rng.gen_range(0.4..0.7));
                    if rng.gen_bool(0.5) {
                        cands.insert(0, c);
                    } else {
                        cands.push(c);
                    }
                }
                frames.push(pose);
                detections.push(cands);
            }
            let id = format!("synth-{seed}-{i:04}");
            let pose = PoseSequence::new(id, config.fps, frames)?;
            let flights = clip.jumps.iter().map(|j| j.span).collect();
            let record =
                VideoRecord::new(category_name(clip.jumps.len(), clip.bucket), pose, flights)?;
            Ok(SyntheticVideo {
                record,
                detections,
                baseline_y: clip.y0,
            })
        })
        .collect()
}

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<VideoRecord>> {
    Ok(generate_synthetic_videos(config, seed)?
        .into_iter()
        .map(|v| v.record)
        .collect())
}
