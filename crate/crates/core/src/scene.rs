//! Synthetic scenarios: agent and object placement, Gaussian pose noise,
//! ray-cast occlusion, and a deterministic rasterizing BEV encoder.
//!
//! Every agent observes the world relative to its *true* pose, since the sensor
//! measures relative geometry. Its feature map is labeled with its *estimated*
//! pose, and that is the pose collaborators use to place its features. The gap
//! between the two is what shows up as misalignment at fusion time.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{box7d_to_bev, iou_rotated, Box7D, CellIndex, FeatureMap, GridSpec, Mask, Pose2D, QuadBEV};

const STREAM_PLACEMENT: u64 = 1;
const STREAM_POSE_NOISE: u64 = 2;
const STREAM_SIGNATURE: u64 = 3;
const STREAM_ENCODER: u64 = 100;

const PLACEMENT_ATTEMPTS: usize = 2000;
const AGENT_SEPARATION: f64 = 6.0;
const AGENT_CLEARANCE: f64 = 4.0;
const OBJECT_GAP: f64 = 0.6;
const HEADING_JITTER: f64 = 0.05;

/// Deterministic RNG for one named stream of one seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Region {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_max > self.x_min && self.y_max > self.y_min
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    fn sample(&self, rng: &mut impl Rng) -> (f64, f64) {
        (
            rng.random_range(self.x_min..self.x_max),
            rng.random_range(self.y_min..self.y_max),
        )
    }
}

/// Parameters of the rasterizing encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderParams {
    /// Channel-0 evidence on an unoccluded footprint.
    pub amplitude: f64,
    /// Std of the additive Gaussian noise on every value.
    pub noise_floor: f64,
    /// Evidence multiplier on cells the agent cannot see, in `[0, 1]`.
    pub occlusion_attenuation: f64,
    /// Std (meters) of the Gaussian falloff outside the footprint.
    pub edge_softness: f64,
    /// Extra relative evidence at an object's center, fading to zero at the
    /// footprint's inscribed ellipse.
    pub center_gain: f64,
}

impl Default for EncoderParams {
    fn default() -> Self {
        EncoderParams {
            amplitude: 2.0,
            noise_floor: 0.1,
            occlusion_attenuation: 0.2,
            edge_softness: 0.1,
            center_gain: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectSpec {
    Count(usize),
    Explicit(Vec<Box7D>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Agent 0 is the ego.
    pub n_agents: usize,
    pub objects: ObjectSpec,
    pub spawn_region: Region,
    pub object_region: Region,
    pub sigma_e: f64,
    /// Yaw noise std per meter of positional std.
    pub yaw_noise_scale: f64,
    pub grid: GridSpec,
    pub channels: usize,
    pub encoder: EncoderParams,
}

impl ScenarioConfig {
    /// Four agents among sixteen vehicles on a 64 m x 64 m, 0.5 m grid.
    pub fn default_occlusion() -> Self {
        ScenarioConfig {
            n_agents: 4,
            objects: ObjectSpec::Count(16),
            spawn_region: Region::new(-16.0, 16.0, -16.0, 16.0),
            object_region: Region::new(-28.0, 28.0, -28.0, 28.0),
            sigma_e: 0.0,
            yaw_noise_scale: 0.1,
            grid: GridSpec::centered(128, 32.0).expect("static grid"),
            channels: 8,
            encoder: EncoderParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.n_agents > u8::MAX as usize + 1 {
            return Err(Error::param(
                "n_agents",
                format!("must be in 1..=256, got {}", self.n_agents),
            ));
        }
        if !(self.sigma_e >= 0.0 && self.sigma_e.is_finite()) {
            return Err(Error::param("sigma_e", format!("must be >= 0, got {}", self.sigma_e)));
        }
        if !(self.yaw_noise_scale >= 0.0 && self.yaw_noise_scale.is_finite()) {
            return Err(Error::param("yaw_noise_scale", "must be >= 0"));
        }
        if !self.spawn_region.is_valid() {
            return Err(Error::param("spawn_region", "empty region"));
        }
        if !self.object_region.is_valid() {
            return Err(Error::param("object_region", "empty region"));
        }
        if self.channels == 0 || self.channels > u16::MAX as usize {
            return Err(Error::param("channels", "must be in 1..=65535"));
        }
        let e = &self.encoder;
        if !(0.0..=1.0).contains(&e.occlusion_attenuation) {
            return Err(Error::param("occlusion_attenuation", "must be in [0, 1]"));
        }
        if !(e.amplitude.is_finite() && e.noise_floor >= 0.0 && e.noise_floor.is_finite()) {
            return Err(Error::param(
                "encoder",
                "amplitude and noise_floor must be finite, noise_floor >= 0",
            ));
        }
        if !(e.edge_softness > 0.0 && e.edge_softness.is_finite()) {
            return Err(Error::param("edge_softness", "must be > 0"));
        }
        if !(e.center_gain >= 0.0 && e.center_gain.is_finite()) {
            return Err(Error::param("center_gain", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub true_poses: Vec<Pose2D>,
    pub estimated_poses: Vec<Pose2D>,
    /// World-frame objects.
    pub objects: Vec<Box7D>,
}

impl Scene {
    pub fn n_agents(&self) -> usize {
        self.true_poses.len()
    }

    /// Object footprints expressed in an agent's true body frame.
    pub fn footprints_in_agent_frame(&self, agent: usize) -> Vec<QuadBEV> {
        let to_agent = self.true_poses[agent].inverse();
        self.objects.iter().map(|b| box7d_to_bev(b, &to_agent).0).collect()
    }
}

#[derive(Debug, Clone)]
pub struct AgentObservation {
    pub agent: usize,
    pub features: FeatureMap,
    pub visibility: Mask,
    /// World-frame boxes of objects with at least one visible footprint cell.
    pub visible_boxes: Vec<Box7D>,
    pub visible_indices: Vec<usize>,
}

/// Perturbs x and y with independent `N(0, sigma_e^2)` and yaw with
/// `N(0, (sigma_e * yaw_scale)^2)`. Always draws three normals so streams
/// stay aligned across noise levels.
pub fn add_pose_noise(pose: &Pose2D, sigma_e: f64, yaw_scale: f64, rng: &mut impl Rng) -> Pose2D {
    let zx: f64 = rng.sample(StandardNormal);
    let zy: f64 = rng.sample(StandardNormal);
    let zt: f64 = rng.sample(StandardNormal);
    if sigma_e == 0.0 {
        return *pose;
    }
    Pose2D::new(
        pose.x + sigma_e * zx,
        pose.y + sigma_e * zy,
        pose.yaw + sigma_e * yaw_scale * zt,
    )
}

/// A road-aligned heading: a multiple of 90 degrees plus a small jitter.
fn cardinal_heading(rng: &mut impl Rng) -> f64 {
    rng.random_range(0..4) as f64 * FRAC_PI_2 - PI + rng.random_range(-HEADING_JITTER..HEADING_JITTER)
}

fn random_vehicle(rng: &mut impl Rng, region: &Region) -> Result<Box7D> {
    let (x, y) = region.sample(rng);
    let heading = cardinal_heading(rng);
    let l = rng.random_range(3.8..4.8);
    let w = rng.random_range(1.7..2.1);
    let h = rng.random_range(1.4..1.8);
    Box7D::new(x, y, h / 2.0, l, w, h, heading)
}

fn inflated_quad(b: &Box7D, margin: f64) -> QuadBEV {
    let grown = Box7D {
        l: b.l + margin,
        w: b.w + margin,
        ..*b
    };
    box7d_to_bev(&grown, &Pose2D::identity()).0
}

fn overlaps_any(candidate: &Box7D, placed: &[Box7D], margin: f64) -> bool {
    let q = inflated_quad(candidate, margin);
    placed.iter().any(|b| iou_rotated(&q, &inflated_quad(b, margin)) > 0.0)
}

/// Builds a scene. Deterministic in `(config, seed)`.
pub fn generate_scene(config: &ScenarioConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = stream_rng(seed, STREAM_PLACEMENT);

    let mut true_poses: Vec<Pose2D> = Vec::with_capacity(config.n_agents);
    for _ in 0..config.n_agents {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (x, y) = config.spawn_region.sample(&mut rng);
            let yaw = cardinal_heading(&mut rng);
            if true_poses.iter().all(|p| (p.x - x).hypot(p.y - y) >= AGENT_SEPARATION) {
                true_poses.push(Pose2D::new(x, y, yaw));
                placed = true;
                break;
            }
        }
        if !placed {
            // crowded spawn region: fall back to the last sample
            let (x, y) = config.spawn_region.sample(&mut rng);
            true_poses.push(Pose2D::new(x, y, cardinal_heading(&mut rng)));
        }
    }

    let objects = match &config.objects {
        ObjectSpec::Explicit(list) => {
            for (i, b) in list.iter().enumerate() {
                if overlaps_any(b, &list[..i], 0.0) {
                    return Err(Error::param(
                        "objects",
                        format!("object {i} overlaps an earlier object"),
                    ));
                }
            }
            list.clone()
        }
        ObjectSpec::Count(n) => {
            let mut placed: Vec<Box7D> = Vec::with_capacity(*n);
            for index in 0..*n {
                let mut ok = false;
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let b = random_vehicle(&mut rng, &config.object_region)?;
                    let near_agent = true_poses
                        .iter()
                        .any(|p| (p.x - b.x).hypot(p.y - b.y) < AGENT_CLEARANCE + b.l / 2.0);
                    if !near_agent && !overlaps_any(&b, &placed, OBJECT_GAP) {
                        placed.push(b);
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    return Err(Error::Placement {
                        index,
                        attempts: PLACEMENT_ATTEMPTS,
                    });
                }
            }
            placed
        }
    };

    // the ego frame is the reference, so only collaborators carry pose error
    let mut noise_rng = stream_rng(seed, STREAM_POSE_NOISE);
    let estimated_poses = true_poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let noisy = add_pose_noise(p, config.sigma_e, config.yaw_noise_scale, &mut noise_rng);
            if i == 0 {
                *p
            } else {
                noisy
            }
        })
        .collect();

    Ok(Scene {
        seed,
        true_poses,
        estimated_poses,
        objects,
    })
}

/// True if the segment from the origin to `q` passes through the open interior of `quad`.
fn segment_enters(quad: &QuadBEV, q: [f64; 2]) -> bool {
    let pts = quad.corners();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for i in 0..4 {
        let (e0, e1) = (pts[i], pts[(i + 1) % 4]);
        let d = [e1[0] - e0[0], e1[1] - e0[1]];
        // interior: d x (t*q - e0) > 0
        let a = d[0] * q[1] - d[1] * q[0];
        let b = d[0] * e0[1] - d[1] * e0[0];
        if a > 0.0 {
            lo = lo.max(b / a);
        } else if a < 0.0 {
            hi = hi.min(b / a);
        } else if b >= 0.0 {
            return false;
        }
        if lo >= hi {
            return false;
        }
    }
    lo < hi
}

/// Per-cell visibility from the agent's true position. A cell is hidden when the
/// ray to its center passes through another object's footprint; cells inside an
/// object's own footprint are not hidden by that object.
pub fn visibility_mask(scene: &Scene, agent: usize, spec: &GridSpec) -> Result<Mask> {
    if agent >= scene.n_agents() {
        return Err(Error::param("agent", format!("index {agent} out of range")));
    }
    let quads = scene.footprints_in_agent_frame(agent);
    let mut mask = Mask::filled(spec.rows(), spec.cols(), true);
    for r in 0..spec.rows() {
        for c in 0..spec.cols() {
            let q = spec.cell_center(CellIndex::new(r, c));
            let hidden = quads.iter().any(|quad| !quad.contains(q) && segment_enters(quad, q));
            if hidden {
                mask.set(r, c, false);
            }
        }
    }
    Ok(mask)
}

/// Deterministic per-object signature in `[-0.5, 0.5]^len`.
pub fn object_signature(seed: u64, object: usize, len: usize) -> Vec<f64> {
    let mut rng = stream_rng(
        seed ^ (object as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        STREAM_SIGNATURE,
    );
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

struct LocalBox {
    to_local: Pose2D,
    half_l: f64,
    half_w: f64,
    reach: f64,
    center: [f64; 2],
}

/// Rasterizes an agent's observation in its own body frame.
///
/// Channel 0 carries object evidence: `amplitude` over the footprint with a
/// Gaussian falloff outside it, multiplied by `occlusion_attenuation` on hidden
/// cells. Channels `1..C` are the object's signature scaled by channel 0.
/// A seeded noise floor is added everywhere.
pub fn encode_observation(scene: &Scene, agent: usize, config: &ScenarioConfig) -> Result<AgentObservation> {
    let spec = config.grid;
    let enc = config.encoder;
    let visibility = visibility_mask(scene, agent, &spec)?;
    let pose = scene.true_poses[agent];
    let world_to_agent = pose.inverse();

    let boxes: Vec<LocalBox> = scene
        .objects
        .iter()
        .map(|b| {
            let in_agent = b.transformed(&world_to_agent);
            let obj_pose = Pose2D::new(in_agent.x, in_agent.y, in_agent.theta);
            LocalBox {
                to_local: obj_pose.inverse(),
                half_l: b.l / 2.0,
                half_w: b.w / 2.0,
                reach: (b.l / 2.0).hypot(b.w / 2.0) + 5.0 * enc.edge_softness,
                center: [in_agent.x, in_agent.y],
            }
        })
        .collect();
    let signatures: Vec<Vec<f64>> = (0..scene.objects.len())
        .map(|i| object_signature(scene.seed, i, config.channels - 1))
        .collect();

    let mut features = FeatureMap::zeros(config.channels, spec);
    let mut seen = vec![false; scene.objects.len()];
    let two_s2 = 2.0 * enc.edge_softness * enc.edge_softness;
    let mut cell = vec![0f32; config.channels];

    for r in 0..spec.rows() {
        for c in 0..spec.cols() {
            let q = spec.cell_center(CellIndex::new(r, c));
            let mut best: Option<(usize, f64, bool)> = None;
            for (i, b) in boxes.iter().enumerate() {
                if (q[0] - b.center[0]).hypot(q[1] - b.center[1]) > b.reach {
                    continue;
                }
                let [u, v] = b.to_local.apply(q);
                let du = (u.abs() - b.half_l).max(0.0);
                let dv = (v.abs() - b.half_w).max(0.0);
                let d2 = du * du + dv * dv;
                let r2 = (u / b.half_l).powi(2) + (v / b.half_w).powi(2);
                let e = (-d2 / two_s2).exp() * (1.0 + enc.center_gain * (1.0 - r2).max(0.0));
                if best.is_none_or(|(_, be, _)| e > be) {
                    best = Some((i, e, d2 == 0.0));
                }
            }
            let Some((obj, e, inside)) = best else { continue };
            let visible = *visibility.get(r, c);
            if inside && visible {
                seen[obj] = true;
            }
            let mut ev = enc.amplitude * e;
            if !visible {
                ev *= enc.occlusion_attenuation;
            }
            cell[0] = ev as f32;
            for (k, s) in signatures[obj].iter().enumerate() {
                cell[k + 1] = (ev * s) as f32;
            }
            features.write_cell(r, c, &cell);
        }
    }

    if enc.noise_floor > 0.0 {
        let mut rng = stream_rng(scene.seed, STREAM_ENCODER + agent as u64);
        let mut noisy = features.values().to_vec();
        for v in noisy.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + enc.noise_floor * z) as f32;
        }
        features = FeatureMap::from_values(config.channels, spec, noisy)?;
    }

    let visible_indices: Vec<usize> = (0..scene.objects.len()).filter(|&i| seen[i]).collect();
    Ok(AgentObservation {
        agent,
        features,
        visibility,
        visible_boxes: visible_indices.iter().map(|&i| scene.objects[i]).collect(),
        visible_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::world_to_grid;

    fn tiny_config() -> ScenarioConfig {
        ScenarioConfig {
            n_agents: 1,
            objects: ObjectSpec::Count(0),
            spawn_region: Region::new(-0.1, 0.1, -0.1, 0.1),
            object_region: Region::new(-20.0, 20.0, -20.0, 20.0),
            sigma_e: 0.0,
            yaw_noise_scale: 0.1,
            grid: GridSpec::centered(64, 16.0).unwrap(),
            channels: 4,
            encoder: EncoderParams {
                noise_floor: 0.0,
                ..EncoderParams::default()
            },
        }
    }

    fn scene_with(objects: Vec<Box7D>) -> Scene {
        Scene {
            seed: 3,
            true_poses: vec![Pose2D::identity()],
            estimated_poses: vec![Pose2D::identity()],
            objects,
        }
    }

    fn car(x: f64, y: f64) -> Box7D {
        Box7D::new(x, y, 0.8, 4.0, 2.0, 1.6, 0.0).unwrap()
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = ScenarioConfig {
            sigma_e: 0.3,
            ..ScenarioConfig::default_occlusion()
        };
        let a = generate_scene(&cfg, 42).unwrap();
        let b = generate_scene(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_objects_and_zero_noise() {
        let cfg = ScenarioConfig {
            objects: ObjectSpec::Count(0),
            ..ScenarioConfig::default_occlusion()
        };
        let s = generate_scene(&cfg, 1).unwrap();
        assert!(s.objects.is_empty());
        assert_eq!(s.true_poses, s.estimated_poses);
        for p in &s.true_poses {
            assert!(cfg.spawn_region.contains(p.x, p.y));
        }
    }

    #[test]
    fn ego_pose_is_never_perturbed() {
        let cfg = ScenarioConfig {
            sigma_e: 0.5,
            ..ScenarioConfig::default_occlusion()
        };
        let s = generate_scene(&cfg, 9).unwrap();
        assert_eq!(s.true_poses[0], s.estimated_poses[0]);
        assert_ne!(s.true_poses[1], s.estimated_poses[1]);
    }

    #[test]
    fn objects_never_overlap() {
        let cfg = ScenarioConfig::default_occlusion();
        for seed in 0..100 {
            let s = generate_scene(&cfg, seed).unwrap();
            let quads: Vec<_> = s
                .objects
                .iter()
                .map(|b| box7d_to_bev(b, &Pose2D::identity()).0)
                .collect();
            for i in 0..quads.len() {
                for j in i + 1..quads.len() {
                    assert_eq!(iou_rotated(&quads[i], &quads[j]), 0.0, "seed {seed} pair {i},{j}");
                }
            }
        }
    }

    #[test]
    fn placement_fails_when_region_is_too_small() {
        let cfg = ScenarioConfig {
            objects: ObjectSpec::Count(50),
            object_region: Region::new(-5.0, 5.0, -5.0, 5.0),
            spawn_region: Region::new(40.0, 41.0, 40.0, 41.0),
            n_agents: 1,
            ..ScenarioConfig::default_occlusion()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Placement { .. })));
    }

    #[test]
    fn pose_noise_identity_at_zero_sigma() {
        let mut rng = stream_rng(5, 0);
        let p = Pose2D::new(1.0, 2.0, 0.3);
        assert_eq!(add_pose_noise(&p, 0.0, 0.1, &mut rng), p);
    }

    #[test]
    fn pose_noise_sample_std() {
        let mut rng = stream_rng(11, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| add_pose_noise(&Pose2D::identity(), 0.5, 0.1, &mut rng).x)
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - 0.5).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn pose_noise_is_reproducible() {
        let p = Pose2D::new(1.0, 2.0, 0.3);
        let mut a = stream_rng(5, 2);
        let mut b = stream_rng(5, 2);
        for _ in 0..10 {
            assert_eq!(
                add_pose_noise(&p, 0.2, 0.1, &mut a),
                add_pose_noise(&p, 0.2, 0.1, &mut b)
            );
        }
    }

    #[test]
    fn empty_scene_is_fully_visible() {
        let cfg = tiny_config();
        let m = visibility_mask(&scene_with(vec![]), 0, &cfg.grid).unwrap();
        assert_eq!(m.count(), cfg.grid.len());
    }

    /// Independent oracle: the segment crosses an edge properly.
    fn crosses(a: [f64; 2], b: [f64; 2], quad: &QuadBEV) -> bool {
        let orient =
            |p: [f64; 2], q: [f64; 2], r: [f64; 2]| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
        let pts = quad.corners();
        (0..4).any(|i| {
            let (c, d) = (pts[i], pts[(i + 1) % 4]);
            let o1 = orient(a, b, c);
            let o2 = orient(a, b, d);
            let o3 = orient(c, d, a);
            let o4 = orient(c, d, b);
            o1 * o2 < 0.0 && o3 * o4 < 0.0
        })
    }

    #[test]
    fn shadow_matches_segment_oracle() {
        let cfg = tiny_config();
        for obj in [car(6.0, 1.0), Box7D::new(-5.0, 4.0, 0.8, 4.5, 1.9, 1.5, 0.7).unwrap()] {
            let scene = scene_with(vec![obj]);
            let m = visibility_mask(&scene, 0, &cfg.grid).unwrap();
            let quad = box7d_to_bev(&obj, &Pose2D::identity()).0;
            let mut hidden = 0;
            for r in 0..64 {
                for c in 0..64 {
                    let q = cfg.grid.cell_center(CellIndex::new(r, c));
                    let expect = quad.contains(q) || !crosses([0.0, 0.0], q, &quad);
                    assert_eq!(*m.get(r, c), expect, "cell {r},{c}");
                    hidden += usize::from(!expect);
                }
            }
            assert!(hidden > 20);
        }
        // own cell visible
        let scene = scene_with(vec![car(6.0, 1.0)]);
        let m = visibility_mask(&scene, 0, &cfg.grid).unwrap();
        let own = world_to_grid([0.0, 0.0], &cfg.grid).unwrap();
        assert!(*m.get(own.row, own.col));
    }

    #[test]
    fn adding_objects_never_reveals_cells() {
        let cfg = ScenarioConfig::default_occlusion();
        for seed in 0..5 {
            let s = generate_scene(&cfg, seed).unwrap();
            let mut prev = Mask::filled(cfg.grid.rows(), cfg.grid.cols(), true);
            for k in 0..=s.objects.len() {
                let partial = Scene {
                    objects: s.objects[..k].to_vec(),
                    ..s.clone()
                };
                let m = visibility_mask(&partial, 1, &cfg.grid).unwrap();
                for (i, (&now, &before)) in m.as_slice().iter().zip(prev.as_slice()).enumerate() {
                    // cells inside the newly added footprint may flip to visible-as-own
                    if now && !before {
                        let q = cfg.grid.cell_center(cfg.grid.unflat(i));
                        let inside_new = s.footprints_in_agent_frame(1)[k - 1].contains(q);
                        assert!(inside_new, "seed {seed} cell {i} revealed");
                    }
                }
                prev = m;
            }
        }
    }

    #[test]
    fn empty_scene_encodes_to_zero() {
        let cfg = tiny_config();
        let obs = encode_observation(&scene_with(vec![]), 0, &cfg).unwrap();
        assert!(obs.features.values().iter().all(|&v| v == 0.0));
        assert!(obs.visible_boxes.is_empty());
    }

    #[test]
    fn visible_object_peak_lies_in_footprint() {
        let cfg = tiny_config();
        let b = Box7D::new(7.3, -3.1, 0.8, 4.4, 1.9, 1.5, 0.3).unwrap();
        let obs = encode_observation(&scene_with(vec![b]), 0, &cfg).unwrap();
        let plane = cfg.grid.len();
        let (argmax, _) = obs.features.values()[..plane]
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let q = cfg.grid.cell_center(cfg.grid.unflat(argmax));
        assert!(box7d_to_bev(&b, &Pose2D::identity()).0.contains(q));
        assert_eq!(obs.visible_indices, vec![0]);
    }

    #[test]
    fn occluded_peak_is_attenuated() {
        let cfg = ScenarioConfig {
            encoder: EncoderParams {
                occlusion_attenuation: 0.3,
                noise_floor: 0.0,
                ..EncoderParams::default()
            },
            ..tiny_config()
        };
        let target = car(10.0, 0.0);
        let blocker = Box7D::new(4.0, 0.0, 0.8, 1.0, 6.0, 1.6, 0.0).unwrap();
        let peak = |scene: &Scene| {
            let obs = encode_observation(scene, 0, &cfg).unwrap();
            let quad = box7d_to_bev(&target, &Pose2D::identity()).0;
            (0..cfg.grid.len())
                .filter(|&i| quad.contains(cfg.grid.cell_center(cfg.grid.unflat(i))))
                .map(|i| obs.features.values()[i])
                .fold(f32::MIN, f32::max)
        };
        let clear = peak(&scene_with(vec![target]));
        let hidden = peak(&scene_with(vec![target, blocker]));
        assert!((hidden - 0.3 * clear).abs() < 1e-6, "{hidden} vs {clear}");
    }

    #[test]
    fn signatures_scale_with_evidence() {
        let cfg = tiny_config();
        let obs = encode_observation(&scene_with(vec![car(5.0, 5.0)]), 0, &cfg).unwrap();
        let sig = object_signature(3, 0, 3);
        let c = world_to_grid([5.0, 5.0], &cfg.grid).unwrap();
        let v = obs.features.cell_vector(c.row, c.col);
        for k in 0..3 {
            assert!((v[k + 1] as f64 - v[0] as f64 * sig[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn collaborator_evidence_reprojects_onto_ego() {
        let cfg = ScenarioConfig {
            encoder: EncoderParams {
                noise_floor: 0.0,
                ..EncoderParams::default()
            },
            ..ScenarioConfig::default_occlusion()
        };
        let centroid = |obs: &AgentObservation, obj: usize, scene: &Scene| {
            let quad = scene.footprints_in_agent_frame(obs.agent)[obj];
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for i in 0..cfg.grid.len() {
                let p = cfg.grid.cell_center(cfg.grid.unflat(i));
                if quad.contains(p) && obs.features.values()[i] as f64 > 0.5 * cfg.encoder.amplitude {
                    sx += p[0];
                    sy += p[1];
                    n += 1.0;
                }
            }
            [sx / n, sy / n]
        };
        let mut checked = 0;
        for seed in 0..4 {
            let scene = generate_scene(&cfg, seed).unwrap();
            let ego = encode_observation(&scene, 0, &cfg).unwrap();
            let other = encode_observation(&scene, 1, &cfg).unwrap();
            let rel = scene.estimated_poses[0].inverse().compose(&scene.estimated_poses[1]);
            for &obj in ego.visible_indices.iter().filter(|i| other.visible_indices.contains(i)) {
                let quad_ego = scene.footprints_in_agent_frame(0)[obj];
                let quad_other = scene.footprints_in_agent_frame(1)[obj];
                // only objects fully in view of both
                let full = |o: &AgentObservation, q: &QuadBEV| {
                    (0..cfg.grid.len()).all(|i| {
                        let p = cfg.grid.cell_center(cfg.grid.unflat(i));
                        !q.contains(p) || o.visibility.as_slice()[i]
                    }) && q.corners().iter().all(|c| cfg.grid.contains(*c))
                };
                if !full(&ego, &quad_ego) || !full(&other, &quad_other) {
                    continue;
                }
                let a = centroid(&ego, obj, &scene);
                let b = rel.apply(centroid(&other, obj, &scene));
                let d = (a[0] - b[0]).hypot(a[1] - b[1]);
                assert!(d <= cfg.grid.cell_x(), "seed {seed} obj {obj}: {d}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }
}
