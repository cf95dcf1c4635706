"""Counterfactual query groups and the benchmark archive.

All observations a benchmark refers to live in one frame *pool*: the source
dataset's factual frames first, then per-group frames (intervened prefix
observation and the re-simulated counterfactual future).  Candidate lists
are integer indices into that pool.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .envs import Environment, EnvConfig, InterventionSpec, SimState, make_env, simulate_episode
from .errors import ConfigError, FormatError, InputError

SCHEMA_VERSION = 1
MAGNITUDE_LEVELS = {"physics-nbody": (0.5, 1.5, 3.0), "pushing-grid": (1.0, 2.0, 3.0)}


@dataclass
class BenchSpec:
    max_samples: int = 2000
    num_candidates: int = 11
    horizons: tuple[int, ...] = (1, 5, 10)
    targets: tuple[tuple[int, int], ...] = ((0, 0),)  # (object index, variable index) pairs
    delta: float = 3.0
    magnitude_sweep: bool = False
    levels: tuple[float, ...] | None = None
    hard_negative: bool = True
    cf_horizon: int = 1
    t0_min: int = 3
    seed: int = 42

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        self.targets = tuple(tuple(int(v) for v in t) for t in self.targets)
        if self.levels is not None:
            self.levels = tuple(float(v) for v in self.levels)

    def validate(self) -> "BenchSpec":
        if self.num_candidates < 2:
            raise ConfigError("num_candidates must be >= 2")
        if self.max_samples < 1:
            raise ConfigError("max_samples must be >= 1")
        if not self.horizons or min(self.horizons) < 1:
            raise ConfigError("horizons must be positive")
        if not self.targets:
            raise ConfigError("at least one intervention target is required")
        if self.cf_horizon < 1:
            raise ConfigError("cf_horizon must be >= 1")
        return self

    @property
    def h_max(self) -> int:
        return max(max(self.horizons), self.cf_horizon)

    def magnitudes(self, env_name: str) -> tuple[float, ...]:
        if not self.magnitude_sweep:
            return (self.delta,)
        if self.levels:
            return self.levels
        key = "physics-nbody" if "physics" in env_name else "pushing-grid"
        return MAGNITUDE_LEVELS.get(key, (self.delta,))


@dataclass
class QueryGroup:
    episode_id: int
    episode_seed: int
    t0: int
    specs: list[InterventionSpec]
    prefix_obs: np.ndarray
    prefix_state: np.ndarray
    intervened_obs: np.ndarray
    intervened_state: np.ndarray
    actions: np.ndarray
    factual_future: np.ndarray
    cf_future: np.ndarray
    cf_states: np.ndarray
    candidates: dict[int, np.ndarray]
    positives: dict[int, int]
    cf_candidates: np.ndarray
    cf_positive: int

    @property
    def spec(self) -> InterventionSpec:
        return self.specs[0]


@dataclass
class Benchmark:
    env_config: EnvConfig
    spec: BenchSpec
    meta: list[dict]
    pool_obs: np.ndarray
    pool_states: np.ndarray
    prefix_idx: np.ndarray  # (G,)
    do_idx: np.ndarray  # (G,)
    actions: np.ndarray  # (G, H_max, A)
    future_idx: np.ndarray  # (G, H_max) factual o_{t0+1..t0+H}
    cf_idx: np.ndarray  # (G, H_max) counterfactual o^cf_{t0+1..}
    cand_idx: np.ndarray  # (G, n_h, N)
    pos: np.ndarray  # (G, n_h)
    cf_cand_idx: np.ndarray  # (G, N)
    cf_pos: np.ndarray  # (G,)
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.meta)

    @property
    def horizons(self) -> tuple[int, ...]:
        return self.spec.horizons

    def horizon_slot(self, h: int) -> int:
        if h not in self.spec.horizons:
            raise InputError(f"horizon {h} not stored in benchmark (has {self.spec.horizons})")
        return self.spec.horizons.index(h)

    def observations(self, idx) -> np.ndarray:
        o = self.pool_obs[idx]
        return o.astype(np.float32) / 255.0 if o.dtype == np.uint8 else o

    def specs(self, g: int) -> list[InterventionSpec]:
        return [InterventionSpec.from_dict(d) for d in self.meta[g]["specs"]]

    def group(self, g: int) -> QueryGroup:
        m = self.meta[g]
        obs = self.observations
        return QueryGroup(
            episode_id=m["episode_id"],
            episode_seed=m["episode_seed"],
            t0=m["t0"],
            specs=self.specs(g),
            prefix_obs=obs(self.prefix_idx[g]),
            prefix_state=self.pool_states[self.prefix_idx[g]],
            intervened_obs=obs(self.do_idx[g]),
            intervened_state=self.pool_states[self.do_idx[g]],
            actions=self.actions[g],
            factual_future=obs(self.future_idx[g]),
            cf_future=obs(self.cf_idx[g]),
            cf_states=self.pool_states[self.cf_idx[g]],
            candidates={h: obs(self.cand_idx[g, k]) for k, h in enumerate(self.horizons)},
            positives={h: int(self.pos[g, k]) for k, h in enumerate(self.horizons)},
            cf_candidates=obs(self.cf_cand_idx[g]),
            cf_positive=int(self.cf_pos[g]),
        )

    def subset(self, n: int) -> "Benchmark":
        """First ``n`` query groups; the candidate pool is shared."""
        if n >= len(self):
            return self
        sl = slice(0, n)
        return replace(
            self, meta=self.meta[sl], prefix_idx=self.prefix_idx[sl], do_idx=self.do_idx[sl], actions=self.actions[sl],
            future_idx=self.future_idx[sl], cf_idx=self.cf_idx[sl], cand_idx=self.cand_idx[sl], pos=self.pos[sl],
            cf_cand_idx=self.cf_cand_idx[sl], cf_pos=self.cf_pos[sl],
        )

    @property
    def groups(self) -> list[QueryGroup]:
        return [self.group(g) for g in range(len(self))]


# -------------------------------------------------------------- candidates
def sample_candidates(query_episode: int, n_episodes: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Distinct negative episodes (never the query's) and a uniform positive slot.

    Returns ``(episodes, pos)`` where ``episodes`` has length ``n`` and
    ``episodes[pos] == query_episode``.
    """
    others = np.array([e for e in range(n_episodes) if e != query_episode])
    if len(others) < n - 1:
        raise InputError(f"need {n - 1} other episodes for negatives, pool has {len(others)}")
    neg = rng.choice(others, size=n - 1, replace=False)
    pos = int(rng.integers(n))
    return np.insert(neg, pos, query_episode), pos


def _valid_t0(T: int, spec: BenchSpec) -> range:
    return range(spec.t0_min, T - spec.h_max)  # t0 in [t0_min, T - H_max - 1]


def build_benchmark(ds: Dataset, spec: BenchSpec, env: Environment | None = None) -> Benchmark:
    spec.validate()
    env = env or make_env(ds.env_config)
    lengths = [ep.length for ep in ds.episodes]
    too_short = [i for i, T in enumerate(lengths) if len(_valid_t0(T, spec)) == 0]
    if too_short:
        raise InputError(f"episodes too short for H_max={spec.h_max}: {too_short[:20]}{'...' if len(too_short) > 20 else ''}")
    T = min(lengths)
    E = len(ds)
    if E < spec.num_candidates:
        raise InputError(f"need at least {spec.num_candidates} episodes, dataset has {E}")
    rng = np.random.default_rng([spec.seed, 2024])
    pairs = np.array([(e, t) for e in range(E) for t in _valid_t0(T, spec)])
    G = min(spec.max_samples, len(pairs))
    pick = np.sort(rng.choice(len(pairs), size=G, replace=False))
    pairs = pairs[pick]

    pixels = ds.env_config.obs_mode == "pixels"
    base_obs = np.stack([ep.observations[: T + 1] for ep in ds.episodes])
    base_states = np.stack([ep.states[: T + 1] for ep in ds.episodes])
    fid = lambda e, t: e * (T + 1) + t  # noqa: E731
    H = spec.h_max
    mags = spec.magnitudes(ds.env_config.name)
    extra_obs, extra_states = [], []
    next_id = E * (T + 1)
    n_h, N = len(spec.horizons), spec.num_candidates
    out = dict(
        prefix_idx=np.zeros(G, np.int64),
        do_idx=np.zeros(G, np.int64),
        actions=np.zeros((G, H, env.action_dim), np.float32),
        future_idx=np.zeros((G, H), np.int64),
        cf_idx=np.zeros((G, H), np.int64),
        cand_idx=np.zeros((G, n_h, N), np.int64),
        pos=np.zeros((G, n_h), np.int64),
        cf_cand_idx=np.zeros((G, N), np.int64),
        cf_pos=np.zeros(G, np.int64),
    )
    meta = []
    for g, (e, t0) in enumerate(pairs):
        ep = ds.episodes[e]
        delta = mags[g % len(mags)]
        specs = [InterventionSpec(i, j, delta, int(t0)) for i, j in spec.targets]
        state0 = SimState(ep.states[t0], int(t0))
        acts = [ep.action(t) for t in range(t0, t0 + H)]
        do_state = env.apply_intervention(state0, specs)
        cf = env.resimulate_counterfactual(state0, specs, acts, H)
        # per-group pool frames: intervened observation then cf future
        extra_obs.append(env.observe(do_state).array)
        extra_states.append(do_state.values)
        out["do_idx"][g] = next_id
        next_id += 1
        for k, (s, o) in enumerate(cf):
            extra_obs.append(o.array)
            extra_states.append(s.values)
            out["cf_idx"][g, k] = next_id
            next_id += 1
        out["prefix_idx"][g] = fid(e, t0)
        out["actions"][g] = ep.actions[t0 : t0 + H]
        out["future_idx"][g] = [fid(e, t0 + k) for k in range(1, H + 1)]
        grng = np.random.default_rng([spec.seed, int(e), int(t0)])
        for k, h in enumerate(spec.horizons):
            eps_, p = sample_candidates(int(e), E, N, grng)
            out["cand_idx"][g, k] = [fid(x, t0 + h) for x in eps_]
            out["pos"][g, k] = p
        # counterfactual list: factual cf-horizon negatives, positive swapped for the cf frame
        kh = spec.horizons.index(spec.cf_horizon) if spec.cf_horizon in spec.horizons else None
        if kh is None:
            eps_, p = sample_candidates(int(e), E, N, grng)
            cands = np.array([fid(x, t0 + spec.cf_horizon) for x in eps_])
        else:
            cands, p = out["cand_idx"][g, kh].copy(), int(out["pos"][g, kh])
        cands[p] = out["cf_idx"][g, spec.cf_horizon - 1]
        if spec.hard_negative and any(s.magnitude != 0 for s in specs):
            slot = 0 if p != 0 else 1
            cands[slot] = fid(e, t0 + spec.cf_horizon)
        out["cf_cand_idx"][g] = cands
        out["cf_pos"][g] = p
        meta.append({"episode_id": int(e), "episode_seed": int(ep.seed), "t0": int(t0), "specs": [s.to_dict() for s in specs]})

    pool_obs = np.concatenate([base_obs.reshape(-1, *base_obs.shape[2:]), np.stack(extra_obs)])
    pool_states = np.concatenate([base_states.reshape(-1, base_states.shape[-1]), np.stack(extra_states)])
    pool_obs = np.round(pool_obs * 255).astype(np.uint8) if pixels else pool_obs.astype(np.float32)
    return Benchmark(ds.env_config, spec, meta, pool_obs, pool_states.astype(np.float64), **out)


# ---------------------------------------------------------------- archive
ARRAYS = ("pool_obs", "pool_states", "prefix_idx", "do_idx", "actions", "future_idx", "cf_idx", "cand_idx", "pos", "cf_cand_idx", "cf_pos")


def save_benchmark(bench: Benchmark, path: str | Path) -> Path:
    path = Path(path)
    index = {
        "schema_version": SCHEMA_VERSION,
        "env": asdict(bench.env_config),
        "spec": asdict(bench.spec),
        "groups": bench.meta,
        "count": len(bench),
        **bench.extra,
    }
    buf = io.BytesIO()
    np.savez_compressed(buf, __index__=np.frombuffer(json.dumps(index, sort_keys=True).encode(), dtype=np.uint8),
                        **{k: getattr(bench, k) for k in ARRAYS})
    path.write_bytes(buf.getvalue())
    return path


def load_benchmark(path: str | Path) -> Benchmark:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no benchmark at {path}")
    try:
        with np.load(path) as z:
            index = json.loads(bytes(z["__index__"]).decode())
            arrays = {k: z[k] for k in ARRAYS}
    except (zipfile.BadZipFile, EOFError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable benchmark {path}: {exc}") from None
    if index.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"benchmark schema {index.get('schema_version')} != {SCHEMA_VERSION}")
    spec = BenchSpec(**index["spec"])
    extra = {k: v for k, v in index.items() if k not in ("schema_version", "env", "spec", "groups", "count")}
    bench = Benchmark(EnvConfig(**index["env"]), spec, index["groups"], extra=extra, **arrays)
    if len(bench) != index["count"]:
        raise FormatError("group count does not match index")
    return bench


def regenerate_cf(bench: Benchmark, g: int, env: Environment | None = None):
    """Re-simulate group ``g``'s counterfactual future from its episode seed and spec alone."""
    env = env or make_env(bench.env_config)
    m = bench.meta[g]
    T = m["t0"] + bench.spec.h_max
    ep = simulate_episode(env, m["episode_seed"], max(T, bench.env_config.episode_length))
    state0 = SimState(ep.states[m["t0"]], m["t0"])
    acts = [ep.action(t) for t in range(m["t0"], m["t0"] + bench.spec.h_max)]
    return env.resimulate_counterfactual(state0, bench.specs(g), acts, bench.spec.h_max)
