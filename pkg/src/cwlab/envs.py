"""Deterministic simulators with ground-truth state access.

Three environments are registered:

* ``physics-nbody``: 2D gravitational n-body system integrated with explicit
  Euler steps (G=1, unit masses, softened interactions, reflecting arena).
* ``pushing-grid``: K objects on a square grid, each action pushes one object
  one cell unless the target cell is occupied or off-grid.
* ``harmonic-oscillator``: the linear test system f(p, v) = (v, -p).

State vectors are laid out object-major: object ``i`` owns the coordinates
``i * vars_per_object ... (i + 1) * vars_per_object - 1``. An
:class:`InterventionSpec` addresses coordinate ``(i, j)`` in that layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError

# distinct flat sprite colours (RGB in [0, 1])
PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.70, 0.10],
        [0.15, 0.25, 0.95],
        [0.95, 0.80, 0.10],
        [0.80, 0.15, 0.85],
        [0.10, 0.80, 0.85],
        [0.95, 0.50, 0.10],
        [0.55, 0.35, 0.20],
    ]
)
# snap to the uint8 grid so stored and freshly rendered frames agree bitwise
PALETTE = np.round(PALETTE * 255) / 255


@dataclass(frozen=True)
class SimState:
    values: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.time_index < 0:
            raise InputError("time_index must be non-negative")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class Observation:
    mode: str
    pixels: np.ndarray | None = None
    state: np.ndarray | None = None

    def __post_init__(self):
        if self.mode == "pixels":
            if self.pixels is None or self.state is not None:
                raise InputError("pixel observations carry exactly the pixel payload")
        elif self.mode == "state":
            if self.state is None or self.pixels is not None:
                raise InputError("state observations carry exactly the state payload")
        else:
            raise InputError(f"unknown observation mode {self.mode!r}")

    @property
    def array(self) -> np.ndarray:
        return self.pixels if self.mode == "pixels" else self.state


@dataclass(frozen=True)
class Action:
    encoding: np.ndarray
    null_flag: bool = False

    def __post_init__(self):
        enc = np.asarray(self.encoding, dtype=np.float64)
        object.__setattr__(self, "encoding", enc)
        if self.null_flag:
            if np.any(enc != 0):
                raise InputError("null action must have an all-zero encoding")
            return
        nz = np.flatnonzero(enc)
        if nz.size != 1 or enc[nz[0]] != 1.0:
            raise InputError("action encoding must be one-hot")

    @property
    def index(self) -> int | None:
        if self.null_flag:
            return None
        return int(np.flatnonzero(self.encoding)[0])


@dataclass(frozen=True)
class InterventionSpec:
    """Additive do-intervention ``s[(i, j)] += magnitude`` applied at ``t0``."""

    object_index: int
    variable_index: int
    magnitude: float
    t0: int = 0

    def to_dict(self) -> dict:
        return {
            "object_index": int(self.object_index),
            "variable_index": int(self.variable_index),
            "magnitude": float(self.magnitude),
            "t0": int(self.t0),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InterventionSpec":
        return cls(int(d["object_index"]), int(d["variable_index"]), float(d["magnitude"]), int(d.get("t0", 0)))


@dataclass
class JacobianTemplate:
    J: np.ndarray
    A_GT: np.ndarray
    s_star: SimState
    dt: float


def apply_intervention(
    state: SimState,
    spec: InterventionSpec | Sequence[InterventionSpec],
    vars_per_object: int | None = None,
) -> SimState:
    """Return a copy of ``state`` with the addressed coordinate(s) shifted.

    ``vars_per_object`` defaults to the full state length, i.e. a single
    object owning every coordinate.
    """
    specs = [spec] if isinstance(spec, InterventionSpec) else list(spec)
    vpo = state.dim if vars_per_object is None else vars_per_object
    values = state.values.copy()
    for s in specs:
        if not (0 <= s.variable_index < vpo):
            raise InputError(f"variable index {s.variable_index} out of range [0, {vpo})")
        coord = s.object_index * vpo + s.variable_index
        if s.object_index < 0 or coord >= state.dim:
            raise InputError(f"object index {s.object_index} out of range for state of dim {state.dim}")
        values[coord] += s.magnitude
    return SimState(values, state.time_index)


@dataclass
class EnvConfig:
    name: str = "physics-nbody"
    obs_mode: str = "pixels"
    image_size: int = 50
    episode_length: int = 30
    # physics
    n_bodies: int = 3
    dt: float = 0.01
    frame_skip: int = 1
    gravity: float = 1.0
    softening: float = 0.1
    arena: float = 5.0
    init_pos_scale: float = 2.0
    init_vel_scale: float = 0.3
    impulse_actions: bool = False
    impulse: float = 0.5
    # pushing
    grid_size: int = 5
    num_objects: int = 5
    # oscillator
    omega: float = 1.0


class Environment:
    """Common machinery; subclasses provide the dynamics and the sprite layout."""

    name = "base"
    num_objects: int
    vars_per_object: int
    moves_per_object: int
    has_actions: bool = True

    def __init__(self, config: EnvConfig):
        if config.obs_mode not in ("pixels", "state"):
            raise ConfigError(f"unknown obs_mode {config.obs_mode!r}")
        self.config = config
        self.obs_mode = config.obs_mode
        self.image_size = config.image_size

    @property
    def state_dim(self) -> int:
        return self.num_objects * self.vars_per_object

    @property
    def action_dim(self) -> int:
        return self.num_objects * self.moves_per_object

    @property
    def obs_shape(self) -> tuple[int, ...]:
        if self.obs_mode == "pixels":
            return (self.image_size, self.image_size, 3)
        return (self.state_dim,)

    # -- actions -------------------------------------------------------
    def null_action(self) -> Action:
        return Action(np.zeros(self.action_dim), null_flag=True)

    def make_action(self, obj: int, move: int) -> Action:
        enc = np.zeros(self.action_dim)
        enc[obj * self.moves_per_object + move] = 1.0
        return Action(enc)

    def sample_action(self, rng: np.random.Generator) -> Action:
        if not self.has_actions:
            return self.null_action()
        return self.make_action(int(rng.integers(self.num_objects)), int(rng.integers(self.moves_per_object)))

    def _check_action(self, action: Action) -> None:
        if action.encoding.shape != (self.action_dim,):
            raise InputError(f"action encoding must have length {self.action_dim}")
        if not action.null_flag and not self.has_actions:
            raise InputError(f"{self.name} accepts only null actions")

    # -- simulation ----------------------------------------------------
    def initial_values(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def advance(self, values: np.ndarray, action: Action) -> np.ndarray:
        raise NotImplementedError

    def reset(self, seed: int) -> tuple[SimState, Observation]:
        if seed < 0:
            raise InputError("seed must be non-negative")
        rng = np.random.default_rng(seed)
        state = SimState(self.initial_values(rng), 0)
        return state, self.observe(state)

    def step(self, state: SimState, action: Action) -> tuple[SimState, Observation]:
        self._check_action(action)
        values = self.advance(state.values.copy(), action)
        if not np.all(np.isfinite(values)):
            raise NumericError(f"{self.name}: non-finite state after step {state.time_index}")
        nxt = SimState(values, state.time_index + 1)
        return nxt, self.observe(nxt)

    def rollout(self, state: SimState, actions: Sequence[Action]) -> list[tuple[SimState, Observation]]:
        out = []
        for a in actions:
            state, obs = self.step(state, a)
            out.append((state, obs))
        return out

    def apply_intervention(self, state: SimState, spec) -> SimState:
        specs = [spec] if isinstance(spec, InterventionSpec) else list(spec)
        for s in specs:
            if not (0 <= s.object_index < self.num_objects):
                raise InputError(f"object index {s.object_index} out of range [0, {self.num_objects})")
        return apply_intervention(state, specs, self.vars_per_object)

    def resimulate_counterfactual(
        self,
        prefix_state: SimState,
        spec,
        actions: Sequence[Action],
        horizon: int,
    ) -> list[tuple[SimState, Observation]]:
        """Roll the intervened state forward ``horizon`` steps under ``actions``."""
        if horizon < 1:
            raise InputError("horizon must be >= 1")
        if len(actions) < horizon:
            raise InputError(f"need {horizon} actions, got {len(actions)}")
        intervened = self.apply_intervention(prefix_state, spec)
        return self.rollout(intervened, list(actions)[:horizon])

    # -- observations --------------------------------------------------
    def observe(self, state: SimState) -> Observation:
        if self.obs_mode == "state":
            return Observation("state", state=state.values.astype(np.float32))
        return self.render(state)

    def sprite_centers(self, values: np.ndarray) -> np.ndarray:
        """Pixel-space (row, col) centres of each object sprite."""
        raise NotImplementedError

    def render(self, state: SimState) -> Observation:
        size = self.image_size
        img = np.zeros((size, size, 3), dtype=np.float32)
        centers = self.sprite_centers(state.values)
        rows, cols = np.mgrid[0:size, 0:size]
        for k, (r, c) in enumerate(centers):
            if not np.all(np.isfinite((r, c))):
                continue
            mask = self._sprite_mask(rows, cols, r, c)
            img[mask] = PALETTE[k % len(PALETTE)]
        return Observation("pixels", pixels=img)

    def _sprite_mask(self, rows, cols, r, c):
        radius = self.sprite_radius
        return (rows - r) ** 2 + (cols - c) ** 2 <= radius**2

    sprite_radius = 3.0


class ODEEnvironment(Environment):
    """Autonomous ODE ds/dt = f(s) advanced by explicit Euler steps."""

    has_actions = False
    moves_per_object = 0

    @property
    def dt(self) -> float:
        return self.config.dt

    def dynamics(self, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def euler_map(self, values: np.ndarray, dt: float | None = None) -> np.ndarray:
        """F_true(s) = s + dt * f(s), without boundary handling."""
        dt = self.dt if dt is None else dt
        return values + dt * self.dynamics(values)

    def advance(self, values, action):
        for _ in range(self.config.frame_skip):
            values = self.euler_map(values)
            values = self.boundary(values)
        return values

    def boundary(self, values: np.ndarray) -> np.ndarray:
        return values


class NBodyPhysics(ODEEnvironment):
    name = "physics-nbody"
    vars_per_object = 4  # x, y, vx, vy

    def __init__(self, config: EnvConfig):
        super().__init__(config)
        if config.n_bodies < 1:
            raise ConfigError("n_bodies must be >= 1")
        self.num_objects = config.n_bodies
        if config.impulse_actions:
            self.has_actions = True
            self.moves_per_object = 4

    def initial_values(self, rng):
        n = self.num_objects
        pos = rng.uniform(-self.config.init_pos_scale, self.config.init_pos_scale, size=(n, 2))
        vel = rng.normal(0.0, self.config.init_vel_scale, size=(n, 2))
        vel -= vel.mean(axis=0, keepdims=True)
        return np.concatenate([pos, vel], axis=1).reshape(-1)

    def dynamics(self, values):
        s = values.reshape(self.num_objects, 4)
        pos, vel = s[:, :2], s[:, 2:]
        diff = pos[None, :, :] - pos[:, None, :]  # r_j - r_i
        dist2 = (diff**2).sum(-1) + self.config.softening**2
        inv3 = dist2 ** (-1.5)
        np.fill_diagonal(inv3, 0.0)
        acc = self.config.gravity * (diff * inv3[:, :, None]).sum(axis=1)
        return np.concatenate([vel, acc], axis=1).reshape(-1)

    def analytic_jacobian(self, values: np.ndarray, dt: float | None = None) -> np.ndarray:
        """Closed-form dF_true/ds for the Euler map (used as a test oracle)."""
        dt = self.dt if dt is None else dt
        n = self.num_objects
        s = values.reshape(n, 4)
        pos = s[:, :2]
        eps2 = self.config.softening**2
        df = np.zeros((4 * n, 4 * n))
        for i in range(n):
            df[4 * i + 0, 4 * i + 2] = 1.0
            df[4 * i + 1, 4 * i + 3] = 1.0
            for j in range(n):
                if i == j:
                    continue
                r = pos[j] - pos[i]
                d2 = r @ r + eps2
                # d/dr_j of r d2^{-3/2}
                block = self.config.gravity * (np.eye(2) * d2**-1.5 - 3.0 * np.outer(r, r) * d2**-2.5)
                df[4 * i + 2 : 4 * i + 4, 4 * j : 4 * j + 2] += block
                df[4 * i + 2 : 4 * i + 4, 4 * i : 4 * i + 2] -= block
        return np.eye(4 * n) + dt * df

    def boundary(self, values):
        s = values.reshape(self.num_objects, 4).copy()
        lim = self.config.arena
        for axis in range(2):
            hi = s[:, axis] > lim
            lo = s[:, axis] < -lim
            s[hi, axis] = lim
            s[lo, axis] = -lim
            s[hi, axis + 2] = -np.abs(s[hi, axis + 2])
            s[lo, axis + 2] = np.abs(s[lo, axis + 2])
        return s.reshape(-1)

    def advance(self, values, action):
        if not action.null_flag:
            k, move = divmod(action.index, self.moves_per_object)
            kick = np.array([(0, -1), (1, 0), (0, 1), (-1, 0)][move], dtype=np.float64)
            values = values.copy()
            values[4 * k + 2 : 4 * k + 4] += self.config.impulse * kick
        return super().advance(values, action)

    def sprite_centers(self, values):
        s = values.reshape(self.num_objects, 4)
        lim = self.config.arena
        scale = (self.image_size - 1) / (2 * lim)
        cols = (np.clip(s[:, 0], -lim, lim) + lim) * scale
        rows = (lim - np.clip(s[:, 1], -lim, lim)) * scale
        return np.stack([rows, cols], axis=1)


class PushingGrid(Environment):
    name = "pushing-grid"
    vars_per_object = 2  # x (column), y (row)
    moves_per_object = 4
    # up, right, down, left in (dx, dy); y grows downwards
    MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))

    def __init__(self, config: EnvConfig):
        super().__init__(config)
        g = config.grid_size
        if config.num_objects < 1 or config.num_objects > g * g:
            raise ConfigError("num_objects must fit on the grid")
        self.num_objects = config.num_objects
        self.grid_size = g

    @property
    def cell_width(self) -> float:
        return self.image_size / self.grid_size

    def initial_values(self, rng):
        g = self.grid_size
        cells = rng.choice(g * g, size=self.num_objects, replace=False)
        xy = np.stack([cells % g, cells // g], axis=1).astype(np.float64)
        return xy.reshape(-1)

    def advance(self, values, action):
        if action.null_flag:
            return values
        k, move = divmod(action.index, self.moves_per_object)
        pos = values.reshape(self.num_objects, 2)
        dx, dy = self.MOVES[move]
        target = pos[k] + (dx, dy)
        g = self.grid_size
        if not (0 <= target[0] < g and 0 <= target[1] < g):
            return values
        others = np.delete(pos, k, axis=0)
        if np.any(np.all(others == target, axis=1)):
            return values
        out = pos.copy()
        out[k] = target
        return out.reshape(-1)

    def sprite_centers(self, values):
        pos = values.reshape(self.num_objects, 2)
        cw = self.cell_width
        return np.stack([(pos[:, 1] + 0.5) * cw, (pos[:, 0] + 0.5) * cw], axis=1)

    def _sprite_mask(self, rows, cols, r, c):
        half = self.cell_width / 2 - 1
        return (np.abs(rows + 0.5 - r) <= half) & (np.abs(cols + 0.5 - c) <= half)


class LinearSystem(ODEEnvironment):
    """ds/dt = M s for a fixed matrix M; one object owns every coordinate."""

    name = "linear"
    num_objects = 1

    def __init__(self, config: EnvConfig, matrix: np.ndarray):
        super().__init__(config)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.vars_per_object = self.matrix.shape[0]

    def initial_values(self, rng):
        return rng.normal(0.0, 1.0, size=self.vars_per_object)

    def dynamics(self, values):
        return self.matrix @ values

    def analytic_jacobian(self, values, dt=None):
        dt = self.dt if dt is None else dt
        return np.eye(self.vars_per_object) + dt * self.matrix

    def sprite_centers(self, values):
        size = self.image_size
        p = values[0]
        q = values[1] if values.shape[0] > 1 else 0.0
        scale = (size - 1) / 6.0
        return np.array([[np.clip(3.0 - q, 0, 6) * scale, np.clip(p + 3.0, 0, 6) * scale]])


class HarmonicOscillator(LinearSystem):
    name = "harmonic-oscillator"

    def __init__(self, config: EnvConfig):
        w2 = config.omega**2
        super().__init__(config, np.array([[0.0, 1.0], [-w2, 0.0]]))


REGISTRY = {
    "physics-nbody": NBodyPhysics,
    "physics": NBodyPhysics,
    "pushing-grid": PushingGrid,
    "pushing": PushingGrid,
    "harmonic-oscillator": HarmonicOscillator,
    "oscillator": HarmonicOscillator,
}


def make_env(config: EnvConfig | dict | str, **overrides) -> Environment:
    if isinstance(config, str):
        config = EnvConfig(name=config)
    elif isinstance(config, dict):
        config = EnvConfig(**config)
    if overrides:
        config = replace(config, **overrides)
    try:
        cls = REGISTRY[config.name]
    except KeyError:
        raise ConfigError(f"unknown environment {config.name!r}; known: {sorted(REGISTRY)}") from None
    return cls(config)


def reset(env_config, seed: int) -> tuple[SimState, Observation]:
    return make_env(env_config).reset(seed)


def jacobian_template(env: ODEEnvironment, s_star: SimState | np.ndarray, dt: float | None = None) -> JacobianTemplate:
    """Central finite-difference Jacobian of the Euler map and A_GT = |J - I|."""
    if not hasattr(env, "euler_map"):
        raise InputError(f"{env.name} does not expose a differentiable one-step map")
    dt = env.dt if dt is None else dt
    if dt <= 0:
        raise InputError("dt must be positive")
    if not isinstance(s_star, SimState):
        s_star = SimState(np.asarray(s_star, dtype=np.float64))
    x = s_star.values
    if not np.all(np.isfinite(env.euler_map(x, dt))):
        raise NumericError("non-finite dynamics at the reference state")
    n = x.shape[0]
    h = 1e-5 * max(1.0, float(np.max(np.abs(x))))
    J = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        J[:, j] = (env.euler_map(x + e, dt) - env.euler_map(x - e, dt)) / (2 * h)
    if not np.all(np.isfinite(J)):
        raise NumericError("non-finite Jacobian at the reference state")
    return JacobianTemplate(J=J, A_GT=np.abs(J - np.eye(n)), s_star=s_star, dt=dt)


def episode_seed(master_seed: int, episode_index: int) -> int:
    """Per-episode seed; independent of generation order."""
    ss = np.random.SeedSequence([int(master_seed), int(episode_index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class Episode:
    seed: int
    states: np.ndarray  # (T+1, d_s)
    observations: np.ndarray  # (T+1, *obs_shape)
    actions: np.ndarray  # (T, action_dim)
    null_actions: np.ndarray = field(default=None)  # (T,) bool

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    def action(self, t: int) -> Action:
        null = bool(self.null_actions[t]) if self.null_actions is not None else not np.any(self.actions[t])
        return Action(self.actions[t], null_flag=null)


def simulate_episode(env: Environment, seed: int, length: int) -> Episode:
    state, obs = env.reset(seed)
    action_rng = np.random.default_rng([seed, 1])
    states, observations, actions, nulls = [state.values], [obs.array], [], []
    for _ in range(length):
        a = env.sample_action(action_rng)
        state, obs = env.step(state, a)
        states.append(state.values)
        observations.append(obs.array)
        actions.append(a.encoding)
        nulls.append(a.null_flag)
    return Episode(
        seed=seed,
        states=np.stack(states),
        observations=np.stack(observations).astype(np.float32),
        actions=np.stack(actions).reshape(length, env.action_dim).astype(np.float32),
        null_actions=np.array(nulls, dtype=bool),
    )
