//! Planar tabletop pick-and-place simulator.
//!
//! Four colored blocks and three receptacles (plate, bowl, box) sit on a unit
//! table. The gripper moves by clipped deltas, grasps the nearest block within
//! [`GRASP_RADIUS`] when it closes, and drops the held block in place when it
//! opens. Rotation deltas only integrate a yaw field.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::vocab::{ActionVector, TokenId};

pub const TABLE_MAX: [f64; 3] = [1.0, 1.0, 0.5];
pub const POS_CLIP: f64 = 0.08;
pub const ROT_CLIP: f64 = 0.3;
pub const GRASP_RADIUS: f64 = 0.05;
pub const SUCCESS_Z: f64 = 0.1;
pub const MIN_SEPARATION: f64 = 0.15;
pub const HOVER_Z: f64 = 0.15;
pub const PLACE_Z: f64 = 0.05;
pub const REST_Z: f64 = 0.02;
pub const DEFAULT_HORIZON: usize = 60;

pub const N_OBJECTS: usize = 4;
pub const N_TARGETS: usize = 3;
/// One short task per (object, target) pair.
pub const N_TASKS: usize = N_OBJECTS * N_TARGETS;
/// Gripper pose and state, blocks, receptacles, task one-hot.
pub const OBS_DIM: usize = 3 + 1 + N_OBJECTS * 4 + N_TARGETS * 3 + N_TASKS;

pub const COLORS: [&str; N_OBJECTS] = ["red", "green", "blue", "yellow"];

/// Instruction vocabulary; a word's token id is its index here.
pub const WORDS: [&str; 11] = ["<pad>", "put", "red", "green", "blue", "yellow", "on", "in", "plate", "bowl", "box"];
/// Tokens per instruction: verb, color, preposition, receptacle.
pub const PROMPT_LEN: usize = 4;

/// Phase tolerance of the scripted expert: two bin widths of the default
/// tokenizer, so quantized replays of its commands keep the same phases.
const ALIGN_TOL: f64 = 0.01;
const SPAWN_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Plate,
    Bowl,
    Box,
}

impl TargetKind {
    pub const ALL: [TargetKind; N_TARGETS] = [TargetKind::Plate, TargetKind::Bowl, TargetKind::Box];

    pub fn radius(self) -> f64 {
        match self {
            TargetKind::Plate => 0.07,
            TargetKind::Bowl => 0.06,
            TargetKind::Box => 0.08,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Plate => "plate",
            TargetKind::Bowl => "bowl",
            TargetKind::Box => "box",
        }
    }

    pub fn preposition(self) -> &'static str {
        match self {
            TargetKind::Plate => "on",
            TargetKind::Bowl | TargetKind::Box => "in",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub object_id: usize,
    pub color_id: usize,
    pub pos: [f64; 3],
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub target_id: usize,
    pub kind: TargetKind,
    pub pos: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper_pos: [f64; 3],
    pub gripper_yaw: f64,
    pub gripper_open: bool,
    pub objects: Vec<ObjectState>,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub object: usize,
    pub target: usize,
    pub horizon_limit: usize,
}

impl TaskSpec {
    pub fn from_id(task_id: usize, horizon_limit: usize) -> Self {
        assert!(task_id < N_TASKS, "task id {task_id} out of range");
        Self {
            task_id,
            object: task_id / N_TARGETS,
            target: task_id % N_TARGETS,
            horizon_limit,
        }
    }

    pub fn put(object: usize, kind: TargetKind, horizon_limit: usize) -> Self {
        let target = TargetKind::ALL.iter().position(|&k| k == kind).expect("known kind");
        Self::from_id(object * N_TARGETS + target, horizon_limit)
    }

    pub fn target_kind(&self) -> TargetKind {
        TargetKind::ALL[self.target]
    }

    /// "put <color> block <on|in> <target>"
    pub fn instruction(&self) -> String {
        let kind = self.target_kind();
        format!("put {} block {} {}", COLORS[self.object], kind.preposition(), kind.name())
    }

    /// Instruction as base-vocabulary token ids (the filler word "block" is dropped).
    pub fn prompt_tokens(&self) -> [TokenId; PROMPT_LEN] {
        let kind = self.target_kind();
        let word = |w: &str| WORDS.iter().position(|&x| x == w).expect("known word") as TokenId;
        [word("put"), word(COLORS[self.object]), word(kind.preposition()), word(kind.name())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskDistribution {
    /// Uniform over all short pick-and-place tasks.
    Short,
    Fixed(usize),
}

fn clip(x: f64, lim: f64) -> f64 {
    x.clamp(-lim, lim)
}

fn horizontal_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn sample_layout<R: Rng>(rng: &mut R, count: usize) -> Vec<[f64; 2]> {
    'restart: loop {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(count);
        while pts.len() < count {
            let mut placed = false;
            for _ in 0..200 {
                let p = [
                    rng.gen_range(SPAWN_MARGIN..=1.0 - SPAWN_MARGIN),
                    rng.gen_range(SPAWN_MARGIN..=1.0 - SPAWN_MARGIN),
                ];
                if pts
                    .iter()
                    .all(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= MIN_SEPARATION)
                {
                    pts.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return pts;
    }
}

impl WorldState {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let pts = sample_layout(rng, N_OBJECTS + N_TARGETS);
        let objects = (0..N_OBJECTS)
            .map(|i| ObjectState {
                object_id: i,
                color_id: i,
                pos: [pts[i][0], pts[i][1], REST_Z],
                held: false,
            })
            .collect();
        let targets = TargetKind::ALL
            .iter()
            .enumerate()
            .map(|(j, &kind)| {
                let p = pts[N_OBJECTS + j];
                Target {
                    target_id: j,
                    kind,
                    pos: [p[0], p[1], 0.0],
                    radius: kind.radius(),
                }
            })
            .collect();
        let gripper_pos = [
            rng.gen_range(SPAWN_MARGIN..=1.0 - SPAWN_MARGIN),
            rng.gen_range(SPAWN_MARGIN..=1.0 - SPAWN_MARGIN),
            rng.gen_range(0.05..=0.3),
        ];
        WorldState {
            gripper_pos,
            gripper_yaw: 0.0,
            gripper_open: true,
            objects,
            targets,
        }
    }

    pub fn held_object(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }

    /// Applies one clipped delta action.
    pub fn step(&mut self, action: &ActionVector) {
        for (axis, d) in action.dpos.iter().enumerate() {
            let d = if d.is_finite() { clip(*d, POS_CLIP) } else { 0.0 };
            self.gripper_pos[axis] = (self.gripper_pos[axis] + d).clamp(0.0, TABLE_MAX[axis]);
        }
        let dyaw = if action.drot[2].is_finite() { clip(action.drot[2], ROT_CLIP) } else { 0.0 };
        self.gripper_yaw = (self.gripper_yaw + dyaw + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
            - std::f64::consts::PI;

        if let Some(h) = self.held_object() {
            self.objects[h].pos = self.gripper_pos;
        }

        let want_open = action.gripper >= 0.5;
        if self.gripper_open && !want_open {
            self.gripper_open = false;
            let g = self.gripper_pos;
            let nearest = self
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| (i, dist3(&o.pos, &g)))
                .filter(|&(_, d)| d <= GRASP_RADIUS)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((i, _)) = nearest {
                self.objects[i].held = true;
                self.objects[i].pos = g;
            }
        } else if !self.gripper_open && want_open {
            self.gripper_open = true;
            if let Some(h) = self.held_object() {
                self.objects[h].held = false;
            }
        }
    }

    pub fn in_bounds(&self) -> bool {
        let ok = |p: &[f64; 3]| (0..3).all(|a| p[a].is_finite() && p[a] >= 0.0 && p[a] <= TABLE_MAX[a]);
        ok(&self.gripper_pos) && self.objects.iter().all(|o| ok(&o.pos)) && self.gripper_yaw.is_finite()
    }
}

/// Initial world and task for `seed`.
pub fn reset(seed: u64, dist: TaskDistribution, horizon_limit: usize) -> (WorldState, TaskSpec, Vec<f64>) {
    let mut rng = rng::from_seed(seed);
    let task_id = match dist {
        TaskDistribution::Short => rng.gen_range(0..N_TASKS),
        TaskDistribution::Fixed(id) => id,
    };
    let task = TaskSpec::from_id(task_id, horizon_limit);
    let world = WorldState::sample(&mut rng);
    let obs = observe(&world, &task);
    (world, task, obs)
}

/// Initial world for a two-step chain: two distinct blocks, both into the bowl.
pub fn reset_chain(seed: u64, horizon_limit: usize) -> (WorldState, Vec<TaskSpec>) {
    let mut rng = rng::from_seed(seed);
    let a = rng.gen_range(0..N_OBJECTS);
    let b = (a + rng.gen_range(1..N_OBJECTS)) % N_OBJECTS;
    let world = WorldState::sample(&mut rng);
    let chain = vec![
        TaskSpec::put(a, TargetKind::Bowl, horizon_limit),
        TaskSpec::put(b, TargetKind::Bowl, horizon_limit),
    ];
    (world, chain)
}

/// Slot order that puts `first` at slot 0 and moves the previous occupant of
/// slot 0 into `first`'s slot.
fn task_first(n: usize, first: usize) -> impl Iterator<Item = usize> {
    (0..n).map(move |i| if i == 0 { first } else if i == first { 0 } else { i })
}

/// Observation vector. The instructed block and receptacle occupy the first
/// block and receptacle slots; the task one-hot still names the task.
pub fn observe(state: &WorldState, task: &TaskSpec) -> Vec<f64> {
    let mut obs = Vec::with_capacity(OBS_DIM);
    obs.extend_from_slice(&state.gripper_pos);
    obs.push(if state.gripper_open { 1.0 } else { 0.0 });
    for i in task_first(state.objects.len(), task.object) {
        let o = &state.objects[i];
        obs.extend_from_slice(&o.pos);
        obs.push(if o.held { 1.0 } else { 0.0 });
    }
    for i in task_first(state.targets.len(), task.target) {
        obs.extend_from_slice(&state.targets[i].pos);
    }
    obs.extend((0..N_TASKS).map(|i| if i == task.task_id { 1.0 } else { 0.0 }));
    debug_assert_eq!(obs.len(), OBS_DIM);
    obs
}

pub fn success(state: &WorldState, task: &TaskSpec) -> bool {
    let obj = &state.objects[task.object];
    let tgt = &state.targets[task.target];
    horizontal_dist(&obj.pos, &tgt.pos) <= tgt.radius && obj.pos[2] < SUCCESS_Z && !obj.held && state.gripper_open
}

fn move_toward(from: &[f64; 3], to: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| clip(to[a] - from[a], POS_CLIP))
}

fn aligned(a: &[f64; 3], b: &[f64; 3]) -> bool {
    (a[0] - b[0]).abs() <= ALIGN_TOL && (a[1] - b[1]).abs() <= ALIGN_TOL
}

/// Scripted expert: approach above the block, descend, close, carry at hover
/// height to the receptacle, descend, open. The phase is read off the state.
/// Every command servoes toward a set point, never a bare zero move, because
/// zero is not a bin center and a quantized hold would drift.
pub fn scripted_expert(state: &WorldState, task: &TaskSpec) -> ActionVector {
    let g = state.gripper_pos;
    let obj = &state.objects[task.object];
    let act = |dpos: [f64; 3], gripper: f64| ActionVector {
        dpos,
        drot: [0.0; 3],
        gripper,
    };

    if obj.held {
        let tgt = state.targets[task.target].pos;
        if !aligned(&g, &tgt) {
            return act(move_toward(&g, [tgt[0], tgt[1], HOVER_Z]), 0.0);
        }
        let place = move_toward(&g, [tgt[0], tgt[1], PLACE_Z]);
        if g[2] > PLACE_Z + ALIGN_TOL {
            return act(place, 0.0);
        }
        return act(place, 1.0);
    }

    if !state.gripper_open {
        return act(move_toward(&g, [g[0], g[1], HOVER_Z]), 1.0);
    }
    let p = obj.pos;
    if !aligned(&g, &p) {
        return act(move_toward(&g, [p[0], p[1], HOVER_Z]), 1.0);
    }
    if g[2] > p[2] + ALIGN_TOL {
        return act(move_toward(&g, p), 1.0);
    }
    act(move_toward(&g, p), 0.0)
}

/// Uniformly random action within the clip limits.
pub fn random_action<R: Rng + ?Sized>(rng: &mut R) -> ActionVector {
    ActionVector {
        dpos: std::array::from_fn(|_| rng.gen_range(-POS_CLIP..=POS_CLIP)),
        drot: std::array::from_fn(|_| rng.gen_range(-ROT_CLIP..=ROT_CLIP)),
        gripper: rng.gen_range(0.0..=1.0),
    }
}
