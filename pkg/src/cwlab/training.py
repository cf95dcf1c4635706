"""Three-stage training: backbone pretraining, frozen-backbone causal branch, gated transition refinement.

Every run walks a fixed list of epoch *slots* (``s1`` x S1, ``s2`` x S2,
``s3`` x S3).  Batch order and negative sampling are seeded by
``(seed, slot)`` only, so a baseline run and its causal twin with the same
config see exactly the same sample sequence.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, WorldModel, gaussian_kl, load_checkpoint, param_hashes, save_checkpoint, step_loss
from .causal import COND_LIMIT, CausalBranch, CausalLossWeights, SlotSupervision, dag_weight_at, export_adjacency, stage2_loss
from .datasets import Dataset
from .errors import ConfigError, InputError

ROLLOUT_POLICIES = ("fixed", "curriculum", "mixed", "late-mixed", "single-step")


@dataclass
class StageConfig:
    seed: int = 42
    s1_epochs: int = 20
    s2_epochs: int = 80
    s3_epochs: int = 60
    lr: float = 5e-4
    batch_size: int = 1024
    s3_lr: float = 1e-4
    s2_lr: float | None = None  # None: same as lr
    s3_batch_size: int = 256
    weights: CausalLossWeights = field(default_factory=CausalLossWeights)
    alpha0: float = 1.0
    alpha_final: float = 0.1
    k_alpha: float | None = None  # None: chosen so alpha reaches alpha_final on the last S3 step
    gate_enabled: bool = True
    tau: float | None = None  # None: median delta over the training set at the start of S3
    gamma: float = 5.0
    rollout_policy: str = "late-mixed"
    train_horizon: int = 5
    h_max: int = 10
    use_branch: bool = True
    supervision: bool = True
    joint: bool = False
    normalize: str = "per_dim"  # per_dim | global
    mask_target: str = "state"  # state | increment
    val_every: int = 5
    select_best: bool = True
    stage_split: str | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            w = dict(self.weights)
            w["lambdas"] = tuple(w.get("lambdas", CausalLossWeights().lambdas))
            self.weights = CausalLossWeights(**w)
        if self.stage_split:
            self.s1_epochs, self.s2_epochs = parse_stage_split(self.stage_split)

    def validate(self) -> "StageConfig":
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ConfigError(f"alpha0 must lie in [0, 1], got {self.alpha0}")
        if self.k_alpha is not None and self.k_alpha < 0:
            raise ConfigError("k_alpha must be >= 0")
        if min(self.s1_epochs, self.s2_epochs, self.s3_epochs) < 0:
            raise ConfigError("stage epoch counts must be >= 0")
        if self.h_max < 1 or self.train_horizon < 1:
            raise ConfigError("horizons must be >= 1")
        if self.rollout_policy not in ROLLOUT_POLICIES:
            raise ConfigError(f"rollout_policy must be one of {ROLLOUT_POLICIES}")
        if self.normalize not in ("per_dim", "global") or self.mask_target not in ("state", "increment"):
            raise ConfigError("normalize must be per_dim|global and mask_target state|increment")
        self.weights.validate()
        return self

    @property
    def slots(self) -> list[tuple[str, int]]:
        if self.joint:
            total = self.s1_epochs + self.s2_epochs + self.s3_epochs
            return [("joint", e) for e in range(total)]
        return (
            [("s1", e) for e in range(self.s1_epochs)]
            + [("s2", e) for e in range(self.s2_epochs)]
            + [("s3", e) for e in range(self.s3_epochs)]
        )


def parse_stage_split(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"s1_(\d+)_s2_(\d+)", text.strip())
    if not m:
        raise ConfigError(f"stage split must look like s1_<n>_s2_<m>, got {text!r}")
    return int(m.group(1)), int(m.group(2))


# ------------------------------------------------------------------ fusion
def fusion_alpha(alpha0: float, k_alpha: float, t: int | float) -> float:
    if t < 0:
        raise InputError("t must be >= 0")
    return alpha0 * math.exp(-k_alpha * t)


def fusion_gate_tensor(z, z_tilde, alpha, tau, gamma, gate_enabled=True):
    """Returns (z_gate, alpha_eff) with alpha_eff of shape (B,)."""
    B = z.shape[0]
    alpha = torch.as_tensor(alpha, dtype=z.dtype)
    if gate_enabled:
        delta = (z_tilde - z).flatten(1).norm(dim=1)
        g = torch.sigmoid((torch.as_tensor(tau, dtype=z.dtype) - delta) * torch.as_tensor(gamma, dtype=z.dtype))
        a_eff = g * alpha
    else:
        a_eff = alpha.expand(B)
    shape = (B,) + (1,) * (z.dim() - 1)
    a = a_eff.view(shape)
    return (1 - a) * z + a * z_tilde, a_eff


@dataclass
class FusionSchedule:
    alpha0: float = 1.0
    k_alpha: float = 0.0
    tau: float = 0.0
    gamma: float = 5.0
    gate_enabled: bool = True

    def alpha(self, t: int) -> float:
        return fusion_alpha(self.alpha0, self.k_alpha, t)

    def gate(self, z, z_tilde, t: int):
        return fusion_gate_tensor(z, z_tilde, self.alpha(t), self.tau, self.gamma, self.gate_enabled)


def fusion_gate(z, z_tilde, schedule: FusionSchedule, t: int):
    return schedule.gate(z, z_tilde, t)


def k_alpha_for(alpha0: float, alpha_final: float, total_steps: int) -> float:
    if total_steps <= 0 or alpha0 <= 0:
        return 0.0
    return math.log(alpha0 / alpha_final) / total_steps


def horizon_for(policy: str, epoch: int, n_epochs: int, train_horizon: int, h_max: int, rng: np.random.Generator) -> int:
    """Rollout horizon for one batch of Stage-3 (or joint) training."""
    if policy == "single-step":
        return 1
    if policy == "fixed":
        return train_horizon
    if policy == "curriculum":
        if n_epochs <= 1:
            return h_max
        return 1 + int(round((h_max - 1) * epoch / (n_epochs - 1)))
    if policy == "mixed":
        return int(rng.integers(1, h_max + 1))
    if policy == "late-mixed":
        if epoch >= n_epochs - n_epochs / 3.0:
            return int(rng.integers(1, h_max + 1))
        return train_horizon
    raise ConfigError(f"unknown rollout policy {policy!r}")


# -------------------------------------------------------------------- data
class TensorData:
    """Dense episode tensors; pixel observations stay uint8 until fetched."""

    def __init__(self, ds: Dataset):
        if len(ds) == 0:
            raise InputError("empty dataset")
        arr = ds.stacked()
        obs = arr["observations"]
        self.pixels = obs.ndim == 5
        self.obs = torch.from_numpy(np.round(obs * 255).astype(np.uint8)) if self.pixels else torch.from_numpy(obs.astype(np.float32))
        self.actions = torch.from_numpy(arr["actions"].astype(np.float32))
        self.states = torch.from_numpy(arr["states"].astype(np.float32))
        self.E, self.T1 = self.obs.shape[:2]
        self.T = self.T1 - 1

    @property
    def obs_shape(self):
        return tuple(self.obs.shape[2:])

    @property
    def action_dim(self) -> int:
        return int(self.actions.shape[2])

    def index(self, horizon: int = 1) -> np.ndarray:
        if horizon > self.T:
            raise InputError(f"horizon {horizon} exceeds episode length {self.T}")
        e, t = np.meshgrid(np.arange(self.E), np.arange(self.T - horizon + 1), indexing="ij")
        return np.stack([e.ravel(), t.ravel()], axis=1)

    def observations(self, e, t) -> torch.Tensor:
        o = self.obs[e, t]
        return o.float() / 255.0 if self.pixels else o


@dataclass
class Normalizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray, mode: str) -> "Normalizer":
        flat = states.reshape(-1, states.shape[-1]).astype(np.float64)
        mean = flat.mean(0)
        std = flat.std(0)
        if mode == "global":
            std = np.full_like(std, np.sqrt(((flat - mean) ** 2).mean()))
        return cls(mean, np.where(std > 1e-12, std, 1.0))

    def __call__(self, s: torch.Tensor) -> torch.Tensor:
        return (s - torch.as_tensor(self.mean, dtype=s.dtype)) / torch.as_tensor(self.scale, dtype=s.dtype)

    def increment(self, s0, s1):
        return (s1 - s0) / torch.as_tensor(self.scale, dtype=s0.dtype)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


# --------------------------------------------------------------- utilities
def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _gen(*key: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence(list(key)).generate_state(1, dtype=np.uint64)[0] % (2**63)))
    return g


def slot_batches(seed: int, slot: int, idx: np.ndarray, batch_size: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, slot]).permutation(len(idx))
    return [idx[order[i : i + batch_size]] for i in range(0, len(order), batch_size)]


def module_hashes(modules: dict[str, torch.nn.Module]) -> dict[str, str]:
    out = {}
    for name, m in modules.items():
        for k, v in param_hashes(m).items():
            out[f"{name}.{k}"] = v
    return out


def set_trainable(module: torch.nn.Module | None, flag: bool) -> None:
    if module is not None:
        for p in module.parameters():
            p.requires_grad_(flag)


# ------------------------------------------------------------------- model
def build_model(bcfg: BackboneConfig, obs_shape, action_dim: int, state_dim: int, with_causal: bool, seed: int) -> WorldModel:
    torch.manual_seed(seed)
    branch = None
    if with_causal:
        branch = CausalBranch(bcfg.latent_shape, d_s=state_dim, state_dim=state_dim)
    return WorldModel(bcfg, obs_shape, action_dim, branch)


def backbone_loss(model: WorldModel, data: TensorData, batch: np.ndarray, gen: torch.Generator, fuse=None) -> tuple[torch.Tensor, dict]:
    """One-step baseline objective (NLL route adds reconstruction, VAE adds KL)."""
    cfg = model.cfg
    e, t = batch[:, 0], batch[:, 1]
    o0, o1 = data.observations(e, t), data.observations(e, t + 1)
    a = data.actions[e, t]
    both = torch.cat([o0, o1])
    mean, logvar = model.encode_stats(both)
    z_all = mean
    if logvar is not None:
        z_all = mean + (0.5 * logvar).exp() * torch.randn(mean.shape, generator=gen)
    z0, z1 = z_all.chunk(2)
    zin = fuse(z0) if fuse is not None else z0
    pred = model.step(zin, a).predicted
    perm = torch.randperm(len(batch), generator=gen)
    comps = {"dyn": step_loss(pred, z1, z1[perm], cfg)}
    if cfg.objective == "nll":
        rec = model.decode(z_all)
        comps["rec"] = ((rec - both) ** 2).flatten(1).sum(1).mean()
    if logvar is not None:
        comps["kl"] = cfg.vae_kl_weight * gaussian_kl(mean, logvar).mean()
    return sum(comps.values()), comps


def multistep_loss(model: WorldModel, zin, actions, targets, cfg: BackboneConfig, gen: torch.Generator, H: int):
    """Mean over k=1..H of the one-step objective on recursive predictions."""
    preds = model.rollout(zin, actions, H)
    B = zin.shape[0]
    total = zin.new_zeros(())
    for k in range(H):
        perm = torch.randperm(B, generator=gen)
        total = total + step_loss(preds[:, k], targets[:, k], targets[perm, k], cfg)
    return total / H


@torch.no_grad()
def encode_all(model: WorldModel, data: TensorData, chunk: int = 2048) -> torch.Tensor:
    """Eval-mode latents for every (episode, step); shape (E, T+1, K, d)."""
    was = model.training
    model.eval()
    flat_e, flat_t = np.meshgrid(np.arange(data.E), np.arange(data.T1), indexing="ij")
    flat_e, flat_t = flat_e.ravel(), flat_t.ravel()
    out = []
    for i in range(0, len(flat_e), chunk):
        out.append(model.encode(data.observations(flat_e[i : i + chunk], flat_t[i : i + chunk])))
    model.train(was)
    return torch.cat(out).view(data.E, data.T1, *model.latent_shape)


@torch.no_grad()
def validation_mrr(model: WorldModel, data: TensorData, seed: int, n_queries: int = 500, n_cand: int = 11) -> float:
    """One-step retrieval MRR on a held-out slice with other-episode negatives."""
    if data.E < 2:
        return float("nan")
    was = model.training
    model.eval()
    Z = encode_all(model, data)
    idx = data.index(1)
    rng = np.random.default_rng([seed, 7])
    pick = idx[rng.choice(len(idx), size=min(n_queries, len(idx)), replace=False)]
    e, t = pick[:, 0], pick[:, 1]
    pred = model.step(model.transition_input(Z[e, t]), data.actions[e, t]).predicted.flatten(1)
    rr = []
    for q in range(len(pick)):
        others = np.flatnonzero(np.arange(data.E) != e[q])
        ne = rng.choice(others, size=n_cand - 1, replace=len(others) < n_cand - 1)
        nt = rng.integers(1, data.T1, size=n_cand - 1)
        cands = torch.cat([Z[e[q], t[q] + 1].flatten()[None], Z[ne, nt].flatten(1)])
        d = ((cands - pred[q]) ** 2).sum(1)
        rank = 1 + int((d[1:] < d[0]).sum())
        rr.append(1.0 / rank)
    model.train(was)
    return float(np.mean(rr))


# ----------------------------------------------------------------- trainer
class RunLog:
    def __init__(self, path: Path | None, chash: str):
        self.path, self.chash, self.records = path, chash, []
        if path is not None:
            path.write_text("")

    def add(self, stage: str, epoch: int, losses: dict, batch_hash: str, metrics: dict | None = None, t0: float | None = None):
        rec = {
            "stage": stage,
            "epoch": epoch,
            "losses": {k: float(v) for k, v in sorted(losses.items())},
            "metrics": metrics or {},
            "batch_hash": batch_hash,
            "wall_time": round(time.perf_counter() - t0, 4) if t0 is not None else 0.0,
            "config_hash": self.chash,
        }
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class RunResult:
    model: WorldModel
    records: list[dict]
    hashes: dict[str, dict[str, str]]
    normalizer: Normalizer | None
    run_dir: Path | None
    config_hash: str


class Trainer:
    """Runs the slot schedule for a baseline or a +causal model."""

    def __init__(self, model: WorldModel, data: TensorData, cfg: StageConfig, val: TensorData | None = None,
                 run_dir: str | Path | None = None, header: dict | None = None):
        self.model, self.data, self.cfg, self.val = model, data, cfg.validate(), val
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.header = dict(header or {})
        self.chash = self.header.get("config_hash") or config_hash({"stages": asdict(cfg), "backbone": asdict(model.cfg)})
        self.log = RunLog(self.run_dir / "records.jsonl" if self.run_dir else None, self.chash)
        self.hashes: dict[str, dict[str, str]] = {}
        self.normalizer: Normalizer | None = None
        self._t0 = time.perf_counter()

    # helpers -------------------------------------------------------------
    def _batch_hash(self, batches) -> str:
        h = hashlib.sha256()
        for b in batches:
            h.update(np.ascontiguousarray(b, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    def _save(self, stage: str, epoch: int) -> None:
        if self.run_dir is not None:
            hdr = dict(self.header, stage=stage, epoch=epoch, seed=self.cfg.seed, config_hash=self.chash)
            save_checkpoint(self.run_dir / f"ckpt_{stage}.bin", self.model, hdr)

    def _validate(self, slot_epoch: int, last: bool) -> dict:
        if self.val is None or self.cfg.val_every <= 0:
            return {}
        if (slot_epoch + 1) % self.cfg.val_every and not last:
            return {}
        return {"val_mrr": validation_mrr(self.model, self.val, self.cfg.seed)}

    def _supervision(self, batch, enabled: bool) -> SlotSupervision:
        e, t = batch[:, 0], batch[:, 1]
        s0 = self.data.states[e, t]
        targets = self.normalizer(s0)
        y = None
        if self.cfg.mask_target == "increment":
            y = self.normalizer.increment(s0, self.data.states[e, t + 1])
        return SlotSupervision(targets=targets, mask_targets=y, enabled=enabled)

    # main ----------------------------------------------------------------
    def run(self, with_causal: bool) -> RunResult:
        cfg = self.cfg
        torch.manual_seed(cfg.seed)
        if with_causal and self.model.branch is None:
            raise ConfigError("with_causal requires a model built with a causal branch")
        if with_causal and cfg.supervision:
            self.normalizer = Normalizer.fit(self.data.states.numpy(), cfg.normalize)
            if self.model.branch.d_s == len(self.normalizer.scale):
                self.model.branch.state_scale.copy_(torch.as_tensor(self.normalizer.scale, dtype=torch.float32))
        if cfg.s3_epochs > 0 and self._s3_horizon() > self.data.T:
            raise InputError(f"rollout horizon {self._s3_horizon()} exceeds episode length {self.data.T}")
        if cfg.weights.lambdas[2] > 0 and with_causal and cfg.supervision and self.data.states.shape[-1] == 0:
            raise ConfigError("lambda3 > 0 but the dataset carries no state supervision")
        if not with_causal:
            self._run_baseline()
        elif cfg.joint:
            self._run_joint()
        else:
            self._run_staged()
        return RunResult(self.model, self.log.records, self.hashes, self.normalizer, self.run_dir, self.chash)

    def _best_tracker(self):
        return {"score": -np.inf, "state": None}

    def _track(self, tracker, metrics):
        if self.cfg.select_best and "val_mrr" in metrics and metrics["val_mrr"] > tracker["score"]:
            tracker["score"] = metrics["val_mrr"]
            tracker["state"] = copy.deepcopy(self.model.state_dict())

    def _restore(self, tracker):
        if self.cfg.select_best and tracker["state"] is not None:
            self.model.load_state_dict(tracker["state"])

    def _s3_horizon(self) -> int:
        cfg = self.cfg
        if cfg.rollout_policy == "single-step":
            return 1
        if cfg.rollout_policy == "fixed":
            return cfg.train_horizon
        return max(cfg.h_max, cfg.train_horizon)

    def _slot_index(self, stage: str) -> np.ndarray:
        return self.data.index(self._s3_horizon() if stage == "s3" else 1)

    def _slot_params(self, stage: str) -> tuple[int, float]:
        if stage == "s3":
            return self.cfg.s3_batch_size, self.cfg.s3_lr
        return self.cfg.batch_size, self.cfg.lr

    def _run_baseline(self):
        model, cfg = self.model, self.cfg
        model.use_branch = False
        params = [p for m in model.backbone_modules().values() for p in m.parameters()]
        opt = torch.optim.Adam(params, lr=cfg.lr)
        best = self._best_tracker()
        slots = cfg.slots
        for g, (stage, ep) in enumerate(slots):
            bs, lr = self._slot_params(stage)
            for grp in opt.param_groups:
                grp["lr"] = lr
            batches = slot_batches(cfg.seed, g, self._slot_index(stage), bs)
            model.train()
            sums: dict[str, float] = {}
            for b, batch in enumerate(batches):
                gen = _gen(cfg.seed, g, b)
                loss, comps = backbone_loss(model, self.data, batch, gen)
                opt.zero_grad()
                loss.backward()
                opt.step()
                for k, v in comps.items():
                    sums[k] = sums.get(k, 0.0) + float(v.detach()) / len(batches)
            sums["total"] = sum(v for k, v in sums.items() if k != "total")
            metrics = self._validate(g, g == len(slots) - 1)
            self._track(best, metrics)
            self.log.add(stage, ep, sums, self._batch_hash(batches), metrics, self._t0)
        self._restore(best)
        self._save("baseline", len(slots))

    def _run_staged(self):
        model, cfg = self.model, self.cfg
        slots = cfg.slots
        branch = model.branch
        idx1 = self.data.index(1)
        # ---------------- S1
        model.use_branch = False
        set_trainable(branch, False)
        s1_params = [p for m in model.backbone_modules().values() for p in m.parameters()]
        opt = torch.optim.Adam(s1_params, lr=cfg.lr)
        best = self._best_tracker()
        branch_before = param_hashes(branch)
        s1_slots = [(g, ep) for g, (st, ep) in enumerate(slots) if st == "s1"]
        for g, ep in s1_slots:
            batches = slot_batches(cfg.seed, g, idx1, cfg.batch_size)
            model.train()
            sums: dict[str, float] = {}
            for b, batch in enumerate(batches):
                loss, comps = backbone_loss(model, self.data, batch, _gen(cfg.seed, g, b))
                opt.zero_grad()
                loss.backward()
                opt.step()
                for k, v in comps.items():
                    sums[k] = sums.get(k, 0.0) + float(v.detach()) / len(batches)
            sums["total"] = sum(sums.values())
            metrics = self._validate(g, ep == cfg.s1_epochs - 1)
            self._track(best, metrics)
            self.log.add("s1", ep, sums, self._batch_hash(batches), metrics, self._t0)
        self._restore(best)
        self.hashes["s1_branch"] = {"before": config_hash(branch_before), "after": config_hash(param_hashes(branch))}
        self._save("s1", cfg.s1_epochs)

        # ---------------- S2 (backbone frozen)
        frozen = model.backbone_modules()
        before = module_hashes(frozen)
        set_trainable(model, False)
        set_trainable(branch, True)
        for m in frozen.values():
            m.eval()
        Z = encode_all(model, self.data)
        s2_slots = [g for g, (st, _) in enumerate(slots) if st == "s2"]
        w = cfg.weights if cfg.supervision else _no_align(cfg.weights)

        def supervise(batch):
            return self._supervision(batch, True) if cfg.supervision else SlotSupervision(enabled=False)

        def on_epoch(ep, sums, batches, extra):
            self.log.add("s2", ep, sums, self._batch_hash(batches), extra, self._t0)

        fit_branch(branch, lambda b: Z[b[:, 0], b[:, 1]], idx1, supervise, w, s2_slots, cfg.batch_size,
                   cfg.s2_lr if cfg.s2_lr is not None else cfg.lr, cfg.seed, on_epoch)
        branch.eval()
        self.hashes["s2"] = {"before": config_hash(before), "after": config_hash(module_hashes(frozen))}
        self.hashes["s2_detail"] = {"equal": before == module_hashes(frozen)}
        self._save("s2", cfg.s2_epochs)
        if self.run_dir is not None:
            export_adjacency(branch.adjacency(), self.run_dir, slot_map=branch.slot_map, config_hash=self.chash)

        # ---------------- S3 (encoder + branch frozen, transition trained)
        self._stage3(Z, slots)

    def _stage3(self, Z, slots):
        model, cfg = self.model, self.cfg
        branch = model.branch
        s3_slots = [(g, ep) for g, (st, ep) in enumerate(slots) if st == "s3"]
        frozen = {k: v for k, v in model.backbone_modules().items() if k != "transition"}
        frozen["branch"] = branch
        before = module_hashes(frozen)
        set_trainable(model, False)
        set_trainable(model.transition, True)
        model.use_branch = cfg.use_branch
        idx = self._slot_index("s3")
        # gate threshold and alpha decay
        with torch.no_grad():
            flatZ = Z[idx[:, 0], idx[:, 1]]
            deltas = torch.cat([(branch.refine(flatZ[i : i + 4096]).z_tilde - flatZ[i : i + 4096]).flatten(1).norm(dim=1)
                                for i in range(0, len(flatZ), 4096)])
        tau = float(deltas.median()) if cfg.tau is None else cfg.tau
        n_steps = sum(len(range(0, len(idx), cfg.s3_batch_size)) for _ in s3_slots)
        k_alpha = cfg.k_alpha if cfg.k_alpha is not None else k_alpha_for(cfg.alpha0, cfg.alpha_final, max(n_steps - 1, 1))
        sched = FusionSchedule(cfg.alpha0, k_alpha, tau, cfg.gamma, cfg.gate_enabled)
        model.gate_tau.fill_(tau)
        model.gate_gamma.fill_(cfg.gamma)
        model.gate_enabled = cfg.gate_enabled
        opt = torch.optim.Adam(model.transition.parameters(), lr=cfg.s3_lr)
        best = self._best_tracker()
        step = 0
        offsets = torch.arange(1, cfg.h_max + 1)
        for g, ep in s3_slots:
            batches = slot_batches(cfg.seed, g, idx, cfg.s3_batch_size)
            hrng = np.random.default_rng([cfg.seed, g, 99])
            model.train()
            for m in frozen.values():
                m.eval()
            sums = {"multistep": 0.0}
            hs = []
            for b, batch in enumerate(batches):
                H = horizon_for(cfg.rollout_policy, ep, cfg.s3_epochs, cfg.train_horizon, cfg.h_max, hrng)
                hs.append(H)
                e = torch.as_tensor(batch[:, 0])
                t = torch.as_tensor(batch[:, 1])
                z0 = Z[e, t]
                tt = t[:, None] + offsets[None, :H]
                targets = Z[e[:, None], tt]
                acts = self.data.actions[e[:, None], tt - 1]
                if model.use_branch:
                    with torch.no_grad():
                        zt = branch.refine(z0).z_tilde
                    zin, _ = sched.gate(z0, zt, step)
                else:
                    zin = z0
                loss = multistep_loss(model, zin, acts, targets, model.cfg, _gen(cfg.seed, g, b), H)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums["multistep"] += float(loss.detach()) / len(batches)
                step += 1
            alpha_now = sched.alpha(max(step - 1, 0))
            model.fusion_alpha.fill_(alpha_now if model.use_branch else 0.0)
            metrics = self._validate(g, ep == cfg.s3_epochs - 1)
            metrics.update({"alpha": alpha_now, "mean_horizon": float(np.mean(hs)), "tau": tau})
            self._track(best, metrics)
            self.log.add("s3", ep, sums, self._batch_hash(batches), metrics, self._t0)
        self._restore(best)
        model.eval()
        self.hashes["s3"] = {"before": config_hash(before), "after": config_hash(module_hashes(frozen))}
        self.hashes["s3_detail"] = {"equal": before == module_hashes(frozen)}
        self._save("s3", cfg.s3_epochs)

    def _run_joint(self):
        """All objectives at once, every module trainable, no stage boundaries."""
        model, cfg = self.model, self.cfg
        branch = model.branch
        model.use_branch = cfg.use_branch
        slots = cfg.slots
        idx = self.data.index(1)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        n_steps = sum(len(range(0, len(idx), cfg.batch_size)) for _ in slots)
        k_alpha = cfg.k_alpha if cfg.k_alpha is not None else k_alpha_for(cfg.alpha0, cfg.alpha_final, max(n_steps - 1, 1))
        sched = FusionSchedule(cfg.alpha0, k_alpha, 0.0, cfg.gamma, False)
        best = self._best_tracker()
        step = 0
        for g, (_, ep) in enumerate(slots):
            batches = slot_batches(cfg.seed, g, idx, cfg.batch_size)
            model.train()
            sums: dict[str, float] = {}
            for b, batch in enumerate(batches):
                gen = _gen(cfg.seed, g, b)
                a_t = sched.alpha(step)

                def fuse(z, a_t=a_t):
                    zt = branch.refine(z, generator=gen).z_tilde
                    return (1 - a_t) * z + a_t * zt

                loss1, comps = backbone_loss(model, self.data, batch, gen, fuse if cfg.use_branch else None)
                z = model.encode(self.data.observations(batch[:, 0], batch[:, 1]), generator=gen)
                sup = self._supervision(batch, cfg.supervision) if cfg.supervision else SlotSupervision(enabled=False)
                w = cfg.weights if cfg.supervision else _no_align(cfg.weights)
                out = branch.refine(z, generator=gen)
                dag_w = dag_weight_at(cfg.weights, ep + b / len(batches), len(slots))
                loss2, c2 = stage2_loss(z, out.z_tilde, out.posterior, branch.A, sup, w, branch=branch, dag_weight=dag_w)
                loss = loss1 + loss2
                opt.zero_grad()
                loss.backward()
                opt.step()
                if branch.condition_number() > COND_LIMIT:
                    branch.clip_spectral(0.95)
                for k, v in {**comps, **c2}.items():
                    sums[k] = sums.get(k, 0.0) + float(v.detach()) / len(batches)
                step += 1
            model.fusion_alpha.fill_(sched.alpha(max(step - 1, 0)))
            metrics = self._validate(g, g == len(slots) - 1)
            self._track(best, metrics)
            self.log.add("joint", ep, sums, self._batch_hash(batches), metrics, self._t0)
        self._restore(best)
        model.gate_enabled = False
        model.eval()
        self._save("joint", len(slots))
        if self.run_dir is not None:
            export_adjacency(branch.adjacency(), self.run_dir, slot_map=branch.slot_map, config_hash=self.chash)


def fit_branch(branch: CausalBranch, get_z, idx: np.ndarray, supervise, weights: CausalLossWeights, slot_ids: list[int],
               batch_size: int, lr: float, seed: int, on_epoch=None) -> list[dict]:
    """Stage-2 optimisation of the causal branch alone.

    ``get_z(batch)`` returns frozen latents for a batch of indices and
    ``supervise(batch)`` its :class:`SlotSupervision`.  ``slot_ids`` are the
    global slot numbers that seed the batch order of each epoch.
    """
    opt = torch.optim.Adam(branch.parameters(), lr=lr)
    n_epochs = len(slot_ids)
    history, clipped = [], 0
    for ep, g in enumerate(slot_ids):
        batches = slot_batches(seed, g, idx, batch_size)
        branch.train()
        sums: dict[str, float] = {}
        dag_w = 0.0
        for b, batch in enumerate(batches):
            dag_w = dag_weight_at(weights, ep + b / len(batches), n_epochs)
            if branch.condition_number() > COND_LIMIT:
                clipped += int(branch.clip_spectral(0.95))
            z = get_z(batch)
            out = branch.refine(z, generator=_gen(seed, g, b))
            loss, comps = stage2_loss(z, out.z_tilde, out.posterior, branch.A, supervise(batch), weights, branch=branch, dag_weight=dag_w)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) / len(batches)
            sums["total"] = sums.get("total", 0.0) + float(loss.detach()) / len(batches)
        history.append(sums)
        if on_epoch is not None:
            on_epoch(ep, sums, batches, {"dag_weight": dag_w, "clipped": clipped})
    branch.eval()
    return history


def _no_align(w: CausalLossWeights) -> CausalLossWeights:
    lam = list(w.lambdas)
    lam[2] = 0.0
    return CausalLossWeights(tuple(lam), w.alpha_kl, w.dag_warmup)


# ---------------------------------------------------------------- pipeline
def run_pipeline(
    bcfg: BackboneConfig,
    scfg: StageConfig,
    train: Dataset,
    with_causal: bool,
    val: Dataset | None = None,
    run_dir: str | Path | None = None,
    extra_header: dict | None = None,
) -> RunResult:
    """Build a model and train it: baseline slots, or S1 -> S2 -> S3."""
    data = TensorData(train)
    vdata = TensorData(val) if val is not None and len(val) > 1 else None
    state_dim = int(data.states.shape[-1])
    model = build_model(bcfg, data.obs_shape, data.action_dim, state_dim, with_causal, scfg.seed)
    header = {
        "backbone": asdict(bcfg),
        "stages": asdict(scfg),
        "env": asdict(train.env_config),
        "obs_shape": list(data.obs_shape),
        "action_dim": data.action_dim,
        "state_dim": state_dim,
        "with_causal": with_causal,
        **(extra_header or {}),
    }
    header.setdefault("config_hash", config_hash({k: header[k] for k in ("backbone", "stages", "env")}))
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(header, indent=2, sort_keys=True, default=str))
    trainer = Trainer(model, data, scfg, vdata, run_dir, header)
    res = trainer.run(with_causal)
    if run_dir is not None and res.normalizer is not None:
        (run_dir / "normalizer.json").write_text(json.dumps(res.normalizer.to_dict()))
    return res


def load_run(run_dir: str | Path) -> tuple[WorldModel, dict]:
    """Rebuild the final model of a run directory."""
    run_dir = Path(run_dir)
    for name in ("ckpt_s3.bin", "ckpt_joint.bin", "ckpt_baseline.bin", "ckpt_s2.bin", "ckpt_s1.bin"):
        if (run_dir / name).exists():
            state, header = load_checkpoint(run_dir / name)
            break
    else:
        raise InputError(f"no checkpoint in {run_dir}")
    bcfg = BackboneConfig(**header["backbone"])
    model = build_model(bcfg, tuple(header["obs_shape"]), header["action_dim"], header["state_dim"], header["with_causal"], 0)
    model.load_state_dict(state)
    stages = header.get("stages", {})
    model.use_branch = header["with_causal"] and stages.get("use_branch", True)
    model.gate_enabled = stages.get("gate_enabled", True) and not stages.get("joint", False)
    model.eval()
    return model, header
