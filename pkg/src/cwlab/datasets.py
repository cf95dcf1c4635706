"""Episode datasets: generation and the on-disk directory layout.

Layout::

    <root>/meta.json                 env config, master seed, counts, shapes
    <root>/episodes/episode_00000.npz   observations, actions, states, null_actions
    <root>/cf_annotations.json       optional counterfactual query records
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .envs import EnvConfig, Episode, episode_seed, make_env, simulate_episode
from .errors import FormatError, InputError

DATASET_VERSION = 1


@dataclass
class Dataset:
    env_config: EnvConfig
    master_seed: int
    episodes: list[Episode]

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def episode_length(self) -> int:
        return min(e.length for e in self.episodes)

    def stacked(self) -> dict[str, np.ndarray]:
        """Arrays of shape (E, T+1, ...) for equal-length episodes."""
        T = self.episode_length
        return {
            "observations": np.stack([e.observations[: T + 1] for e in self.episodes]),
            "states": np.stack([e.states[: T + 1] for e in self.episodes]),
            "actions": np.stack([e.actions[:T] for e in self.episodes]),
        }

    def split(self, fractions=(0.8, 0.1, 0.1)) -> tuple["Dataset", "Dataset", "Dataset"]:
        """Deterministic contiguous train/val/test split by episode index."""
        n = len(self.episodes)
        a = int(round(fractions[0] * n))
        b = a + int(round(fractions[1] * n))
        parts = (self.episodes[:a], self.episodes[a:b], self.episodes[b:])
        return tuple(Dataset(self.env_config, self.master_seed, list(p)) for p in parts)


def _one(args):
    cfg, seed, length = args
    return simulate_episode(make_env(cfg), seed, length)


def generate_dataset(env_config: EnvConfig, n_episodes: int, master_seed: int = 42, workers: int = 1) -> Dataset:
    if n_episodes < 1:
        raise InputError("n_episodes must be >= 1")
    seeds = [episode_seed(master_seed, i) for i in range(n_episodes)]
    jobs = [(env_config, s, env_config.episode_length) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            episodes = list(pool.map(_one, jobs))
    else:
        episodes = [_one(j) for j in jobs]
    return Dataset(env_config, master_seed, episodes)


def save_dataset(ds: Dataset, root: str | Path, force: bool = False) -> Path:
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise InputError(f"output directory {root} is not empty (use --force)")
    ep_dir = root / "episodes"
    ep_dir.mkdir(parents=True, exist_ok=True)
    for old in ep_dir.glob("episode_*.npz"):
        old.unlink()
    pixels = ds.env_config.obs_mode == "pixels"
    for i, ep in enumerate(ds.episodes):
        obs = np.round(ep.observations * 255).astype(np.uint8) if pixels else ep.observations.astype(np.float32)
        np.savez(
            ep_dir / f"episode_{i:05d}.npz",
            observations=obs,
            actions=ep.actions,
            states=ep.states,
            null_actions=ep.null_actions,
        )
    meta = {
        "version": DATASET_VERSION,
        "env": asdict(ds.env_config),
        "master_seed": ds.master_seed,
        "episode_seeds": [int(e.seed) for e in ds.episodes],
        "n_episodes": len(ds.episodes),
        "episode_length": ds.episode_length,
        "obs_shape": list(ds.episodes[0].observations.shape[1:]),
        "obs_dtype": "uint8" if pixels else "float32",
        "state_dim": int(ds.episodes[0].states.shape[1]),
        "action_dim": int(ds.episodes[0].actions.shape[1]),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError:
        raise InputError(f"no dataset at {root}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt meta.json: {exc}") from None
    if meta.get("version") != DATASET_VERSION:
        raise FormatError(f"dataset version {meta.get('version')} != {DATASET_VERSION}")
    cfg = EnvConfig(**meta["env"])
    episodes = []
    for i, seed in enumerate(meta["episode_seeds"]):
        with np.load(root / "episodes" / f"episode_{i:05d}.npz") as z:
            obs = z["observations"]
            if obs.dtype == np.uint8:
                obs = obs.astype(np.float64) / 255.0
            episodes.append(
                Episode(
                    seed=int(seed),
                    states=z["states"],
                    observations=obs.astype(np.float32),
                    actions=z["actions"],
                    null_actions=z["null_actions"],
                )
            )
    return Dataset(cfg, int(meta["master_seed"]), episodes)
