"""Deterministic 2-D kinematic tabletop: task sampling, rasterized
observations with oracle instance masks, scripted experts, stage predicates.

Geometry lives in the unit square; the gripper moves by bounded deltas and can
attach one object (or the slider handle) at a time. Pushing is kinematic
overlap resolution for discs under an open gripper. An episode is a pure
function of (task, seed, action sequence).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArgumentError, ExpertError, PlacementError, StateError
from .numerics import RngStream
from .objcentric import InstanceMask

# --- global constants -------------------------------------------------------

IMAGE_HW = 64
DELTA_MAX = 0.05
GRASP_RADIUS = 0.04
GRIP_PUSH_RADIUS = 0.008
ZONE_RADIUS = 0.10
HANDLE_HALF = 0.025
CLEARANCE = 0.08
STEP_CAP = 200
SLIDER_LEN = 0.35
SLIDER_OPEN_AT = 0.9
TRACK_HALF_WIDTH = 0.015

DISC_R = (0.022, 0.028)
SQUARE_HS = (0.024, 0.032)

OBJECT_COLORS = ["red", "green", "blue", "yellow", "orange", "cyan", "purple", "pink"]
PRETRAIN_COLORS = OBJECT_COLORS[:6]
NOVEL_COLORS = OBJECT_COLORS[6:]
SHAPES = ["disc", "square"]
ZONE_COLORS = ["white", "gray", "brown", "navy"]

RGB = {
    "red": (220, 50, 50),
    "green": (60, 200, 60),
    "blue": (70, 90, 235),
    "yellow": (235, 220, 60),
    "orange": (240, 150, 40),
    "cyan": (60, 220, 220),
    "purple": (160, 70, 220),
    "pink": (245, 130, 190),
    "white": (210, 210, 214),
    "gray": (125, 125, 130),
    "brown": (145, 95, 55),
    "navy": (25, 35, 110),
}
BACKGROUNDS = {"dark": (40, 40, 45), "light": (205, 205, 190), "olive": (110, 115, 72)}
TRACK_RGB = (90, 70, 100)
GRIPPER_RGB = (250, 250, 250)

# --- vocabulary -------------------------------------------------------------

TEMPLATE_WORDS = ["put", "the", "in", "zone", "push", "into", "open", "slider", "with", "handle", "then"]
VOCAB = ["<pad>"] + TEMPLATE_WORDS + OBJECT_COLORS + SHAPES + ZONE_COLORS
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
INSTR_LEN = 16
PAD_ID = 0


def tokenize(instruction: str) -> np.ndarray:
    ids = [WORD_TO_ID[w] for w in instruction.split()]
    if len(ids) > INSTR_LEN:
        raise ArgumentError(f"instruction longer than {INSTR_LEN} tokens: {instruction!r}")
    return np.array(ids + [PAD_ID] * (INSTR_LEN - len(ids)), dtype=np.int64)


# --- task specification -----------------------------------------------------


@dataclass(frozen=True)
class Stage:
    kind: str  # place | push | slider
    obj_idx: int = -1
    zone_idx: int = -1


@dataclass(frozen=True)
class TaskSpec:
    name: str
    family: str  # pick_place | push_to_zone | open_slider | long_horizon_sequence
    objects: tuple = ()  # ((color, shape), ...) task-relevant manipulables
    zone_colors: tuple = ()
    handle_color: str = ""
    stages: tuple = ()
    distractors: int = 2
    background: str = "dark"

    @property
    def has_slider(self) -> bool:
        return any(s.kind == "slider" for s in self.stages)

    def instruction(self) -> str:
        clauses = []
        place_chain = [s for s in self.stages if s.kind == "place"]
        for s in self.stages:
            if s.kind == "slider":
                clauses.append(f"open the slider with the {self.handle_color} handle")
            elif s.kind == "push":
                c, sh = self.objects[s.obj_idx]
                clauses.append(f"push the {c} {sh} into the {self.zone_colors[s.zone_idx]} zone")
            elif s.kind == "place" and len(place_chain) > 1:
                pass  # compact chained form handled below
            else:
                c, sh = self.objects[s.obj_idx]
                clauses.append(f"put the {c} {sh} in the {self.zone_colors[s.zone_idx]} zone")
        if len(place_chain) > 1:
            parts = [f"the {self.objects[s.obj_idx][0]} {self.objects[s.obj_idx][1]}" for s in place_chain]
            zone = self.zone_colors[place_chain[0].zone_idx]
            clauses.append("put " + " then ".join(parts) + f" in the {zone} zone")
        return " then ".join(clauses)

    def relevant_entities(self) -> tuple:
        """(kind, index) pairs in instruction-argument order; defines mask ids."""
        ents = []
        for s in self.stages:
            if s.kind == "slider":
                ents.append(("handle", 0))
            else:
                if ("object", s.obj_idx) not in ents:
                    ents.append(("object", s.obj_idx))
        for s in self.stages:
            if s.kind != "slider" and ("zone", s.zone_idx) not in ents:
                ents.append(("zone", s.zone_idx))
        return tuple(ents)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "family": self.family,
            "objects": [list(o) for o in self.objects],
            "zone_colors": list(self.zone_colors),
            "handle_color": self.handle_color,
            "stages": [[s.kind, s.obj_idx, s.zone_idx] for s in self.stages],
            "distractors": self.distractors,
            "background": self.background,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            name=d["name"],
            family=d["family"],
            objects=tuple(tuple(o) for o in d["objects"]),
            zone_colors=tuple(d["zone_colors"]),
            handle_color=d["handle_color"],
            stages=tuple(Stage(*s) for s in d["stages"]),
            distractors=d["distractors"],
            background=d["background"],
        )


# --- named tasks and family samplers ----------------------------------------


def make_task(name: str) -> TaskSpec:
    """Fixed task presets used for evaluation and fine-tuning targets."""
    presets = {
        # in-domain single-stage examples
        "pick_red_disc": TaskSpec(
            name, "pick_place", (("red", "disc"),), ("white",), "", (Stage("place", 0, 0),)
        ),
        "push_green_disc": TaskSpec(
            name, "push_to_zone", (("green", "disc"),), ("gray",), "", (Stage("push", 0, 0),)
        ),
        "open_slider": TaskSpec(
            name, "open_slider", (), (), "orange", (Stage("slider"),), distractors=1
        ),
        # held-out combination for fine-tuning (never emitted by the pretrain sampler)
        "target_pick": TaskSpec(
            name, "pick_place", (("cyan", "square"),), ("navy",), "", (Stage("place", 0, 0),)
        ),
        "target_pick_novel": TaskSpec(
            name, "pick_place", (("purple", "square"),), ("navy",), "", (Stage("place", 0, 0),)
        ),
        "target_pick_novel_bg": TaskSpec(
            name, "pick_place", (("cyan", "square"),), ("navy",), "", (Stage("place", 0, 0),),
            background="light",
        ),
        # the held-out two-stage fine-tuning target: open a slider, then place
        "target_slider_place": TaskSpec(
            name, "long_horizon_sequence", (("cyan", "square"),), ("navy",), "orange",
            (Stage("slider"), Stage("place", 0, 0)), distractors=1,
        ),
        # three-stage long-horizon task
        "longhorizon3": TaskSpec(
            name, "long_horizon_sequence",
            (("cyan", "square"), ("purple", "disc"), ("yellow", "disc")), ("navy",), "",
            (Stage("place", 0, 0), Stage("place", 1, 0), Stage("place", 2, 0)), distractors=0,
        ),
    }
    if name not in presets:
        raise ArgumentError(f"unknown task {name!r}; known: {sorted(presets)}")
    return presets[name]


# combinations reserved for fine-tuning; the pretrain sampler skips these
HELD_OUT_COMBOS = {("cyan", "square", "navy")}


def sample_pretrain_task(stream: RngStream, family: str) -> TaskSpec:
    """Random in-distribution task instance for building the pretrain corpus."""
    if family not in ("pick_place", "push_to_zone"):
        raise ArgumentError(f"pretrain families are pick_place/push_to_zone, got {family}")
    while True:
        color = PRETRAIN_COLORS[int(stream.integers(1, 0, len(PRETRAIN_COLORS))[0])]
        shape = "disc" if family == "push_to_zone" else SHAPES[int(stream.integers(1, 0, 2)[0])]
        zone = ZONE_COLORS[int(stream.integers(1, 0, len(ZONE_COLORS))[0])]
        if (color, shape, zone) not in HELD_OUT_COMBOS:
            break
    kind = "push" if family == "push_to_zone" else "place"
    return TaskSpec(
        f"{family}:{color}_{shape}_{zone}", family, ((color, shape),), (zone,), "",
        (Stage(kind, 0, 0),),
    )


# --- world state -------------------------------------------------------------


@dataclass
class SimObject:
    shape: str
    size: float  # disc radius or square half-side
    color: str
    pos: np.ndarray


@dataclass
class ZoneSpot:
    color: str
    center: np.ndarray
    radius: float = ZONE_RADIUS


@dataclass
class Slider:
    track_a: np.ndarray
    track_b: np.ndarray
    handle_color: str
    pos: float  # [0, 1] along the track


@dataclass
class WorldState:
    gripper: np.ndarray  # [x, y]
    gripper_open: bool
    objects: list  # task objects first (aligned with TaskSpec.objects), then distractors
    zones: list  # target zones first
    slider: Slider | None
    attached: tuple | None  # ("object", idx) or ("handle", 0)

    def copy(self) -> "WorldState":
        return WorldState(
            gripper=self.gripper.copy(),
            gripper_open=self.gripper_open,
            objects=[replace(o, pos=o.pos.copy()) for o in self.objects],
            zones=[replace(z, center=z.center.copy()) for z in self.zones],
            slider=None if self.slider is None else replace(
                self.slider, track_a=self.slider.track_a.copy(), track_b=self.slider.track_b.copy()
            ),
            attached=self.attached,
        )

    def flat(self) -> np.ndarray:
        """State vector for progress detection."""
        parts = [self.gripper, [1.0 if self.gripper_open else 0.0]]
        parts += [o.pos for o in self.objects]
        if self.slider is not None:
            parts.append([self.slider.pos])
        return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])


@dataclass
class Observation:
    image: np.ndarray  # [H, W, 3] uint8
    instruction: np.ndarray  # [INSTR_LEN] int64
    proprio: np.ndarray  # [3] float32: x, y, open fraction


@dataclass
class StepResult:
    obs: Observation
    masks: list
    done: bool
    success: bool
    stage_flags: tuple


def handle_center(slider: Slider) -> np.ndarray:
    return slider.track_a + slider.pos * (slider.track_b - slider.track_a)


# --- stage predicates ---------------------------------------------------------


def _stage_predicate(state: WorldState, task: TaskSpec, stage: Stage) -> bool:
    if stage.kind == "slider":
        return state.slider is not None and state.slider.pos >= SLIDER_OPEN_AT
    obj = state.objects[stage.obj_idx]
    zone = state.zones[stage.zone_idx]
    return float(np.linalg.norm(obj.pos - zone.center)) <= zone.radius


def success_and_stages(state: WorldState, task: TaskSpec):
    """Instantaneous prefix-conjunction stage flags: a stage holds only if all
    earlier stages hold in the same state."""
    flags = []
    ok = True
    for stage in task.stages:
        ok = ok and _stage_predicate(state, task, stage)
        flags.append(ok)
    return all(flags), tuple(flags)


# --- rendering ----------------------------------------------------------------

_ROWS = np.arange(IMAGE_HW, dtype=np.float64)[:, None]
_COLS = np.arange(IMAGE_HW, dtype=np.float64)[None, :]
_PX = IMAGE_HW - 1


def render(state: WorldState, task: TaskSpec):
    """Flat-shaded rasterization; returns (image uint8, masks for the task's
    relevant entities in instruction-argument order)."""
    img = np.empty((IMAGE_HW, IMAGE_HW, 3), dtype=np.uint8)
    img[:] = BACKGROUNDS[task.background]
    idmap = np.zeros((IMAGE_HW, IMAGE_HW), dtype=np.int16)

    def paint(region, rgb, eid):
        img[region] = rgb
        idmap[region] = eid

    for zi, zone in enumerate(state.zones):
        u, v = zone.center[0] * _PX, zone.center[1] * _PX
        paint((_COLS - u) ** 2 + (_ROWS - v) ** 2 <= (zone.radius * _PX) ** 2, RGB[zone.color], 100 + zi)
    if state.slider is not None:
        s = state.slider
        ua, va = s.track_a[0] * _PX, s.track_a[1] * _PX
        ub = s.track_b[0] * _PX
        band = (np.abs(_ROWS - va) <= TRACK_HALF_WIDTH * _PX) & (_COLS >= ua - 1) & (_COLS <= ub + 1)
        paint(band, TRACK_RGB, 200)
        hc = handle_center(s)
        hu, hv = hc[0] * _PX, hc[1] * _PX
        hs = HANDLE_HALF * _PX
        paint((np.abs(_COLS - hu) <= hs) & (np.abs(_ROWS - hv) <= hs), RGB[s.handle_color], 201)
    for oi, obj in enumerate(state.objects):
        u, v = obj.pos[0] * _PX, obj.pos[1] * _PX
        spx = obj.size * _PX
        if obj.shape == "disc":
            region = (_COLS - u) ** 2 + (_ROWS - v) ** 2 <= spx * spx
        else:
            region = (np.abs(_COLS - u) <= spx) & (np.abs(_ROWS - v) <= spx)
        paint(region, RGB[obj.color], 1 + oi)
    gu, gv = state.gripper[0] * _PX, state.gripper[1] * _PX
    if state.gripper_open:
        arm = 0.05 * _PX
        region = ((np.abs(_COLS - gu) <= 0.6) & (np.abs(_ROWS - gv) <= arm)) | (
            (np.abs(_ROWS - gv) <= 0.6) & (np.abs(_COLS - gu) <= arm)
        )
    else:
        # small enough that a carried object stays visible around it
        region = (np.abs(_COLS - gu) <= 0.9) & (np.abs(_ROWS - gv) <= 0.9)
    paint(region, GRIPPER_RGB, 255)

    masks = []
    for mask_id, (kind, idx) in enumerate(task.relevant_entities()):
        eid = {"object": 1 + idx, "zone": 100 + idx, "handle": 201}[kind]
        masks.append(InstanceMask(mask_id, idmap == eid))
    return img, masks


# --- placement ----------------------------------------------------------------


def _seg_point_dist(a, b, p) -> float:
    ab = b - a
    t = float(np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def _rejection(stream: RngStream, low, high, accept, what: str, tries: int = 1000):
    for _ in range(tries):
        p = low + stream.uniform(2) * (np.asarray(high) - np.asarray(low))
        if accept(p):
            return p
    raise PlacementError(f"could not place {what} after {tries} rejection samples")


def _build_scene(task: TaskSpec, stream: RngStream) -> WorldState:
    zones = []
    zone_lo, zone_hi = (0.35, 0.65) if task.family == "long_horizon_sequence" else (0.18, 0.82)
    for zc in task.zone_colors:
        def z_ok(p, placed=list(zones)):
            return all(np.linalg.norm(p - z.center) >= 2 * ZONE_RADIUS + 0.04 for z in placed)

        zones.append(ZoneSpot(zc, _rejection(stream, (zone_lo, zone_lo), (zone_hi, zone_hi), z_ok, "zone")))
    if task.family in ("pick_place", "push_to_zone") and task.zone_colors:
        pool = [c for c in ZONE_COLORS if c not in task.zone_colors]
        dz_color = pool[int(stream.integers(1, 0, len(pool))[0])]

        def dz_ok(p):
            return all(np.linalg.norm(p - z.center) >= 2 * ZONE_RADIUS + 0.04 for z in zones)

        zones.append(ZoneSpot(dz_color, _rejection(stream, (0.15, 0.15), (0.85, 0.85), dz_ok, "distractor zone")))

    slider = None
    if task.has_slider:
        def track_ok(p):
            a, b = p, p + np.array([SLIDER_LEN, 0.0])
            return b[0] <= 0.92 and all(
                _seg_point_dist(a, b, z.center) >= ZONE_RADIUS + 0.06 for z in zones
            )

        a = _rejection(stream, (0.10, 0.18), (0.55, 0.82), track_ok, "slider track")
        slider = Slider(a, a + np.array([SLIDER_LEN, 0.0]), task.handle_color,
                        pos=float(stream.uniform(1)[0] * 0.12))

    objects = []
    taken_combos = set(task.objects)

    def obj_ok(p, size):
        if any(np.linalg.norm(p - o.pos) < CLEARANCE for o in objects):
            return False
        if any(np.linalg.norm(p - z.center) < z.radius + size + 0.02 for z in zones):
            return False
        if slider is not None and _seg_point_dist(slider.track_a, slider.track_b, p) < 0.07:
            return False
        return True

    for color, shape in task.objects:
        lo, hi = DISC_R if shape == "disc" else SQUARE_HS
        size = float(lo + stream.uniform(1)[0] * (hi - lo))
        if task.family == "long_horizon_sequence" and task.stages and task.stages[0].kind != "slider":
            zc = zones[0].center
            lo_b = np.maximum(zc - 0.42, 0.08)
            hi_b = np.minimum(zc + 0.42, 0.92)
        elif task.family == "push_to_zone":
            lo_b, hi_b = (0.15, 0.15), (0.85, 0.85)
        else:
            lo_b, hi_b = (0.08, 0.08), (0.92, 0.92)
        pos = _rejection(stream, lo_b, hi_b, lambda p: obj_ok(p, size), f"object {color} {shape}")
        objects.append(SimObject(shape, size, color, pos))

    for _ in range(task.distractors):
        while True:
            c = PRETRAIN_COLORS[int(stream.integers(1, 0, len(PRETRAIN_COLORS))[0])]
            sh = SHAPES[int(stream.integers(1, 0, 2)[0])]
            if (c, sh) not in taken_combos:
                break
        lo, hi = DISC_R if sh == "disc" else SQUARE_HS
        size = float(lo + stream.uniform(1)[0] * (hi - lo))
        pos = _rejection(stream, (0.08, 0.08), (0.92, 0.92), lambda p: obj_ok(p, size), "distractor")
        objects.append(SimObject(sh, size, c, pos))

    def grip_ok(p):
        if any(np.linalg.norm(p - o.pos) < CLEARANCE for o in objects):
            return False
        if slider is not None and np.linalg.norm(p - handle_center(slider)) < CLEARANCE:
            return False
        return True

    gripper = _rejection(stream, (0.08, 0.08), (0.92, 0.92), grip_ok, "gripper")
    return WorldState(gripper=gripper, gripper_open=True, objects=objects, zones=zones,
                      slider=slider, attached=None)


# --- simulator ----------------------------------------------------------------


class TabletopSim:
    """One episode; construct (or reset) with (task, seed) for determinism."""

    def __init__(self, task: TaskSpec, seed: int):
        self.task = task
        self.seed = seed
        self.reset()

    def reset(self) -> StepResult:
        stream = RngStream(self.seed).derive("reset")
        self.state = _build_scene(self.task, stream)
        self.step_count = 0
        self.latched = [False] * len(self.task.stages)
        self.done = False
        self.success = False
        self._instr_ids = tokenize(self.task.instruction())
        return self._result()

    def _update_stages(self):
        for i, stage in enumerate(self.task.stages):
            if not self.latched[i] and all(self.latched[:i]) and _stage_predicate(self.state, self.task, stage):
                self.latched[i] = True
        self.success = all(self.latched)

    def step(self, action) -> StepResult:
        if self.done:
            raise StateError("step() after episode end")
        dx, dy, g = float(action[0]), float(action[1]), float(action[2])
        dx = float(np.clip(dx, -DELTA_MAX, DELTA_MAX))
        dy = float(np.clip(dy, -DELTA_MAX, DELTA_MAX))
        st = self.state
        st.gripper = np.clip(st.gripper + (dx, dy), 0.0, 1.0)

        if st.attached is not None:
            kind, idx = st.attached
            if kind == "object":
                st.objects[idx].pos = st.gripper.copy()
            else:
                s = st.slider
                ab = s.track_b - s.track_a
                s.pos = float(np.clip(np.dot(st.gripper - s.track_a, ab) / np.dot(ab, ab), 0.0, 1.0))

        if g >= 0.5 and st.gripper_open:
            st.gripper_open = False
            best, best_d = None, GRASP_RADIUS
            for oi, obj in enumerate(st.objects):
                d = float(np.linalg.norm(st.gripper - obj.pos))
                if d < best_d:
                    best, best_d = ("object", oi), d
            if st.slider is not None:
                d = float(np.linalg.norm(st.gripper - handle_center(st.slider)))
                if d < best_d:
                    best, best_d = ("handle", 0), d
            st.attached = best
        elif g < 0.5 and not st.gripper_open:
            st.gripper_open = True
            st.attached = None

        if st.gripper_open:
            for oi, obj in enumerate(st.objects):
                if obj.shape != "disc":
                    continue
                contact = obj.size + GRIP_PUSH_RADIUS
                delta = obj.pos - st.gripper
                d = float(np.linalg.norm(delta))
                if d < contact:
                    direction = delta / d if d > 1e-9 else np.array([1.0, 0.0])
                    obj.pos = np.clip(st.gripper + direction * contact, obj.size, 1.0 - obj.size)

        self.step_count += 1
        self._update_stages()
        self.done = self.success or self.step_count >= STEP_CAP
        return self._result()

    def _result(self) -> StepResult:
        img, masks = render(self.state, self.task)
        obs = Observation(
            image=img,
            instruction=self._instr_ids.copy(),
            proprio=np.array(
                [self.state.gripper[0], self.state.gripper[1], 1.0 if self.state.gripper_open else 0.0],
                dtype=np.float32,
            ),
        )
        return StepResult(obs=obs, masks=masks, done=self.done, success=self.success,
                          stage_flags=tuple(self.latched))


# --- scripted expert ------------------------------------------------------------

_CLOSE_AT = 0.038  # inside GRASP_RADIUS, outside worst-case push contact


def _toward(grip, target, g):
    delta = np.asarray(target) - grip
    d = float(np.linalg.norm(delta))
    if d < 1e-9:
        return (0.0, 0.0, g)
    step = min(DELTA_MAX, d)
    move = delta / d * step
    return (float(move[0]), float(move[1]), g)


def _nearest_attachable(state: WorldState):
    best, best_d = None, GRASP_RADIUS
    for oi, obj in enumerate(state.objects):
        d = float(np.linalg.norm(state.gripper - obj.pos))
        if d < best_d:
            best, best_d = ("object", oi), d
    if state.slider is not None:
        d = float(np.linalg.norm(state.gripper - handle_center(state.slider)))
        if d < best_d:
            best, best_d = ("handle", 0), d
    return best


def expert_action(state: WorldState, task: TaskSpec, flags=None):
    """Waypoint controller; pure function of (state, task, credited stages).

    `flags` are the episode's latched stage credits; when omitted, the
    instantaneous prefix flags are used (identical for single-stage tasks).
    """
    if flags is None:
        _, flags = success_and_stages(state, task)
    grip_cmd_hold = 0.0 if state.gripper_open else 1.0
    if all(flags):
        return (0.0, 0.0, grip_cmd_hold)
    stage = task.stages[list(flags).index(False)]
    grip = state.gripper

    if stage.kind == "slider":
        if state.slider is None:
            raise ExpertError("slider stage without a slider")
        if state.attached == ("handle", 0):
            ab = state.slider.track_b - state.slider.track_a
            direction = ab / np.linalg.norm(ab)
            return (float(direction[0] * DELTA_MAX), float(direction[1] * DELTA_MAX), 1.0)
        if state.attached is not None:
            return (0.0, 0.0, 0.0)  # release whatever else is held
        hc = handle_center(state.slider)
        if float(np.linalg.norm(grip - hc)) <= _CLOSE_AT and _nearest_attachable(state) == ("handle", 0):
            return (0.0, 0.0, 1.0)
        return _toward(grip, hc, 0.0)

    obj = state.objects[stage.obj_idx]
    zone = state.zones[stage.zone_idx]

    if stage.kind == "place":
        if state.attached == ("object", stage.obj_idx):
            return _toward(grip, zone.center, 1.0)
        if state.attached is not None:
            return (0.0, 0.0, 0.0)
        if float(np.linalg.norm(grip - obj.pos)) <= _CLOSE_AT and _nearest_attachable(state) == (
            "object",
            stage.obj_idx,
        ):
            return (0.0, 0.0, 1.0)
        return _toward(grip, obj.pos, 0.0)

    if stage.kind == "push":
        if state.attached is not None:
            return (0.0, 0.0, 0.0)
        away = obj.pos - zone.center
        away = away / max(float(np.linalg.norm(away)), 1e-9)
        contact = obj.size + GRIP_PUSH_RADIUS
        to_obj = obj.pos - grip
        d_obj = float(np.linalg.norm(to_obj))
        aligned = d_obj > 1e-9 and float(np.dot(-to_obj / d_obj, away)) > 0.92
        if aligned and d_obj < 0.09:
            # nudge into the disc by a bounded overlap; stepping all the way to
            # the center would make the resolution direction degenerate
            step = float(np.clip(d_obj - contact + 0.02, 0.0, DELTA_MAX))
            move = to_obj / d_obj * step
            return (float(move[0]), float(move[1]), 0.0)
        behind = np.clip(obj.pos + away * (contact + 0.035), 0.02, 0.98)
        if _seg_point_dist(grip, behind, obj.pos) < contact + 0.012 and d_obj < float(
            np.linalg.norm(behind - grip)
        ):
            perp = np.array([-away[1], away[0]])
            side = 1.0 if float(np.dot(grip - obj.pos, perp)) >= 0 else -1.0
            return _toward(grip, obj.pos + side * perp * 0.09, 0.0)
        return _toward(grip, behind, 0.0)

    raise ExpertError(f"unknown stage kind {stage.kind!r}")
