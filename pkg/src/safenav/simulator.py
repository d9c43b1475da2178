"""Deterministic tube-navigation environment.

Observations are a 4x4 brightness grid rendered by casting one ray per
cell through the camera frustum: brightness = clamp(1 - d / view_depth,
0, 1) where d is the distance to the tube wall (rays leaving through an
end cap contribute 0).  Cell 0 is the upper-left of the image, cell 15
the bottom-right.

Actions: 0 center (no rotation), 1 up, 2 down, 3 right, 4 left; the
capsule then advances one step of ``linear_velocity`` along its forward
axis and slides on the wall surface if it penetrates.  Rewards: +10 on
reaching the end, -beta on wall contact, otherwise -eta * (remaining
centerline distance); the per-step cost is 1 exactly when in contact.

Environment instances are single-threaded; run one per worker.  The
TubeModel they reference is immutable and shareable.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import _kernels
from .geometry import TubeModel
from .ioutil import atomic_write_text
from .validation import check_action, check_positive

RUNNING = _kernels.RUNNING
REACHED_END = _kernels.REACHED_END
HORIZON_EXHAUSTED = _kernels.HORIZON_EXHAUSTED

TERMINAL_NAMES = {RUNNING: "running", REACHED_END: "reached_end",
                  HORIZON_EXHAUSTED: "horizon_exhausted"}

ACTION_NAMES = ("center", "up", "down", "right", "left")


@dataclass(frozen=True)
class EnvConfig:
    """Simulator parameters; distances in mm, angles in rad, one step = 1 s.

    The default angular_step (0.05) is coarser than the 0.017 rad/s of a
    slow-turning scope so bends stay negotiable at desk-scale tube lengths;
    set angular_step=0.017 to match that hardware figure.
    """

    linear_velocity: float = 3.0
    angular_step: float = 0.05
    eta: float = 0.001          # distance penalty per mm remaining
    beta: float = 0.01          # wall contact penalty
    horizon: int = 1000
    goal_threshold: float = 10.0
    camera_fov: float = 1.6
    view_depth: float = 60.0
    capsule_radius: float = 7.0
    reset_lateral: float = 2.0  # max lateral start offset
    reset_angle: float = 0.05   # max start orientation tilt

    def __post_init__(self):
        for name in ("linear_velocity", "angular_step", "eta", "beta",
                     "goal_threshold", "camera_fov", "view_depth", "capsule_radius"):
            check_positive(getattr(self, name), name)
        if int(self.horizon) <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.reset_lateral < 0 or self.reset_angle < 0:
            raise ValueError("reset perturbation bounds must be non-negative")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown environment config fields: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, **kwargs) -> "EnvConfig":
        return replace(self, **kwargs)


@dataclass
class CapsuleState:
    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    right: np.ndarray
    nearest_param: float = 0.0   # arc position of the closest centerline point
    in_contact: bool = False

    def copy(self) -> "CapsuleState":
        return CapsuleState(self.position.copy(), self.forward.copy(),
                            self.up.copy(), self.right.copy(),
                            self.nearest_param, self.in_contact)


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    cost: float
    terminal: int = RUNNING

    @property
    def terminal_name(self) -> str:
        return TERMINAL_NAMES[self.terminal]


def observe(tube: TubeModel, state: CapsuleState, config: EnvConfig) -> np.ndarray:
    """Render the 4x4 brightness grid for an arbitrary pose."""
    cells = np.empty(16)
    j = max(min(int(state.nearest_param / tube.ds), tube.points.shape[0] - 2), 0)
    _kernels.observe_cells(state.position, state.forward, state.up, state.right,
                           j, tube.points, tube.radius, config.camera_fov,
                           config.view_depth, tube.ds, tube.tangents[0],
                           tube.tangents[-1], cells)
    return cells


def make_pose(tube: TubeModel, position, forward, up=None) -> CapsuleState:
    """Build an orthonormal capsule pose from a position and view direction."""
    position = np.asarray(position, dtype=np.float64).copy()
    f = np.asarray(forward, dtype=np.float64).copy()
    u = np.asarray(up, dtype=np.float64).copy() if up is not None \
        else tube.start_up.copy()
    r = np.cross(f, u)
    _kernels.orthonormalize(f, u, r)
    s, _, _ = tube.nearest(position)
    return CapsuleState(position, f, u, r, nearest_param=float(s))


class TubeEnv:
    """Stateful episode runner over one tube.

    Deterministic given (tube, config, seed): resets draw exactly four
    uniforms from the environment generator.
    """

    def __init__(self, tube: TubeModel, config: EnvConfig | None = None,
                 seed: int = 0):
        self.tube = tube
        self.config = config if config is not None else EnvConfig()
        if self.config.capsule_radius >= tube.radius:
            raise ValueError(
                f"capsule radius {self.config.capsule_radius} must be smaller "
                f"than the tube radius {tube.radius}")
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self._pos = np.zeros(3)
        self._fwd = np.zeros(3)
        self._up = np.zeros(3)
        self._right = np.zeros(3)
        self._ints = np.zeros(3, dtype=np.int64)  # [segment, episode step, resets]
        self._contact = False
        self.reset()

    @property
    def wall_clearance(self) -> float:
        return self.tube.radius - self.config.capsule_radius

    @property
    def state(self) -> CapsuleState:
        return CapsuleState(self._pos.copy(), self._fwd.copy(), self._up.copy(),
                            self._right.copy(), nearest_param=self._s,
                            in_contact=self._contact)

    def reset(self) -> CapsuleState:
        noise = self.rng.random(4)
        _kernels.reset_state(self._pos, self._fwd, self._up, self._right,
                             self.tube.points, self.tube.start_up,
                             self.tube.start_right, self.tube.tangents[0],
                             noise, self.config.reset_lateral,
                             self.config.reset_angle)
        self._ints[0] = 0
        self._ints[1] = 0
        self._s = 0.0
        self._contact = False
        return self.state

    def observe(self) -> np.ndarray:
        cells = np.empty(16)
        cfg = self.config
        _kernels.observe_cells(self._pos, self._fwd, self._up, self._right,
                               int(self._ints[0]), self.tube.points,
                               self.tube.radius, cfg.camera_fov, cfg.view_depth,
                               self.tube.ds, self.tube.tangents[0],
                               self.tube.tangents[-1], cells)
        return cells

    def step(self, action) -> tuple[CapsuleState, StepOutcome]:
        action = check_action(action)
        cfg = self.config
        tube = self.tube
        j, s, contact, reward, reached = _kernels.step_state(
            self._pos, self._fwd, self._up, self._right, int(self._ints[0]),
            action, tube.points, tube.ds, tube.total_length,
            self.wall_clearance, cfg.linear_velocity, cfg.angular_step,
            cfg.eta, cfg.beta, cfg.goal_threshold,
            tube.tangents[0], tube.tangents[-1])
        self._ints[0] = j
        self._ints[1] += 1
        self._s = float(s)
        self._contact = bool(contact)

        terminal = RUNNING
        if reached:
            terminal = REACHED_END
        elif self._ints[1] >= cfg.horizon:
            terminal = HORIZON_EXHAUSTED
        outcome = StepOutcome(self.observe(), float(reward),
                              1.0 if contact else 0.0, terminal)
        return self.state, outcome


def distance_traveled(positions, tube: TubeModel) -> float:
    """Total tip path length over the trajectory, normalized by tube length."""
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, 3) trajectory, got {p.shape}")
    if p.shape[0] == 1:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)) / tube.total_length)


def render_observation(cells) -> str:
    """The 4x4 grid as four text lines, row 0 = top of the image."""
    cells = np.asarray(cells, dtype=np.float64).reshape(4, 4)
    return "\n".join(" ".join(f"{v:5.3f}" for v in row) for row in cells)


TRAJECTORY_COLUMNS = ("step", "x", "y", "z", "action", "reward", "cost",
                      "contact", "dist_mm")


def write_trajectory_csv(path, rows):
    """Rows are (step, x, y, z, action, reward, cost, contact, dist_mm)."""
    lines = [",".join(TRAJECTORY_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
