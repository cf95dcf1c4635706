"""Encoder-transition world-model backbones (AE, VAE, Modular, GNN).

Latents are ``(B, K, d)`` tensors: ``K`` object slots of ``d`` dims each.
Monolithic families (AE, VAE) use a single slot holding ``K * d`` dims.
All transitions use the residual form ``z_next = z + delta``; the last layer
of every transition network starts at zero so a fresh model predicts
``delta == 0``.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, FormatError, InputError

FAMILIES = ("AE", "VAE", "Modular", "GNN")
OBJECTIVES = ("nll", "contrastive")


@dataclass
class BackboneConfig:
    family: str = "GNN"
    objective: str = "nll"
    num_slots: int = 5
    slot_dim: int = 5
    hidden_dim: int = 512
    encoder: str = "small"
    hinge: float = 1.0
    sigma: float = 0.5
    vae_kl_weight: float = 1.0
    action_mode: str = "condition"  # condition | ignore | copy

    def validate(self) -> "BackboneConfig":
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.hinge <= 0 or self.sigma <= 0:
            raise ConfigError("hinge and sigma must be positive")
        if self.num_slots < 1 or self.slot_dim < 1:
            raise ConfigError("num_slots and slot_dim must be >= 1")
        if self.action_mode not in ("condition", "ignore", "copy"):
            raise ConfigError(f"unknown action_mode {self.action_mode!r}")
        return self

    @property
    def monolithic(self) -> bool:
        return self.family in ("AE", "VAE")

    @property
    def latent_shape(self) -> tuple[int, int]:
        if self.monolithic:
            return 1, self.num_slots * self.slot_dim
        return self.num_slots, self.slot_dim

    @property
    def name(self) -> str:
        return f"{self.family}_{'NLL' if self.objective == 'nll' else 'Contrastive'}"


class TransitionOutput(NamedTuple):
    delta: torch.Tensor
    predicted: torch.Tensor


def uniform_fan_in_(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            bound = 1.0 / math.sqrt(m.weight[0].numel())
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.uniform_(m.bias, -bound, bound)


def zero_(layer: nn.Linear) -> nn.Linear:
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


def mlp(sizes: list[int], act=nn.ReLU) -> nn.Sequential:
    layers: list[nn.Module] = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers += [nn.Linear(a, b), act()]
    return nn.Sequential(*layers[:-1])


# ---------------------------------------------------------------- encoders
class StateEncoder(nn.Module):
    def __init__(self, obs_dim: int, out_dim: int, hidden: int):
        super().__init__()
        self.net = mlp([obs_dim, hidden, hidden, out_dim])

    def forward(self, obs):
        return self.net(obs.flatten(1))


class PixelEncoder(nn.Module):
    """Two strided convolutions followed by an MLP head."""

    def __init__(self, image_size: int, out_dim: int, hidden: int, channels: int = 16):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(3, channels, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 4, stride=2, padding=1),
            nn.ReLU(),
        )
        side = image_size // 2 // 2
        self.head = mlp([channels * side * side, hidden, out_dim])

    def forward(self, obs):
        x = obs.permute(0, 3, 1, 2)
        return self.head(self.conv(x).flatten(1))


class Decoder(nn.Module):
    def __init__(self, latent_dim: int, obs_shape: tuple[int, ...], hidden: int, pixels: bool):
        super().__init__()
        self.obs_shape = tuple(obs_shape)
        self.pixels = pixels
        self.net = mlp([latent_dim, hidden, hidden, int(np.prod(obs_shape))])

    def forward(self, z):
        out = self.net(z.flatten(1))
        if self.pixels:
            out = torch.sigmoid(out)
        return out.view(-1, *self.obs_shape)


# ------------------------------------------------------------- transitions
class _SlotActions(nn.Module):
    """Routes the flat action vector to per-slot action features."""

    def __init__(self, action_dim: int, num_slots: int, mode: str):
        super().__init__()
        self.action_dim, self.num_slots, self.mode = action_dim, num_slots, mode
        self.split = mode == "condition" and action_dim > 0 and action_dim % num_slots == 0
        self.per_slot = action_dim // num_slots if self.split else action_dim

    def forward(self, a):
        B = a.shape[0]
        if self.mode == "ignore":
            a = torch.zeros_like(a)
        if self.split:
            return a.view(B, self.num_slots, self.per_slot)
        return a[:, None, :].expand(B, self.num_slots, self.action_dim)


class MLPTransition(nn.Module):
    """Joint network over the flattened latent and the action (AE / VAE)."""

    def __init__(self, latent_shape, action_dim, hidden, action_mode="condition"):
        super().__init__()
        K, d = latent_shape
        self.action_mode = action_mode
        self.net = mlp([K * d + action_dim, hidden, hidden, K * d])
        uniform_fan_in_(self)
        zero_(self.net[-1])

    def forward(self, z, a):
        if self.action_mode == "ignore":
            a = torch.zeros_like(a)
        return self.net(torch.cat([z.flatten(1), a], dim=1)).view_as(z)


class ModularTransition(nn.Module):
    """One network per slot, each reading every slot plus its own action."""

    def __init__(self, latent_shape, action_dim, hidden, action_mode="condition"):
        super().__init__()
        K, d = latent_shape
        self.actions = _SlotActions(action_dim, K, action_mode)
        self.modules_ = nn.ModuleList(mlp([K * d + self.actions.per_slot, hidden, hidden, d]) for _ in range(K))
        uniform_fan_in_(self)
        for m in self.modules_:
            zero_(m[-1])

    def forward(self, z, a):
        flat = z.flatten(1)
        acts = self.actions(a)
        return torch.stack([m(torch.cat([flat, acts[:, k]], dim=1)) for k, m in enumerate(self.modules_)], dim=1)


class GNNTransition(nn.Module):
    """Pairwise message passing over slots followed by a shared node update.

    Shared edge and node functions make the map permutation-equivariant in
    the slot axis.
    """

    def __init__(self, latent_shape, action_dim, hidden, action_mode="condition"):
        super().__init__()
        K, d = latent_shape
        self.hidden = hidden
        self.actions = _SlotActions(action_dim, K, action_mode)
        self.edge = mlp([2 * d, hidden, hidden])
        self.node = mlp([d + self.actions.per_slot + hidden, hidden, d])
        uniform_fan_in_(self)
        zero_(self.node[-1])

    def forward(self, z, a):
        B, K, d = z.shape
        if K > 1:
            src = z[:, :, None, :].expand(B, K, K, d)
            dst = z[:, None, :, :].expand(B, K, K, d)
            msg = self.edge(torch.cat([src, dst], dim=-1))  # (B, K_i, K_j, h)
            offdiag = 1.0 - torch.eye(K, dtype=z.dtype)
            agg = (msg * offdiag[None, :, :, None]).sum(2)
        else:
            agg = z.new_zeros(B, K, self.hidden)
        return self.node(torch.cat([z, self.actions(a), agg], dim=-1))


TRANSITIONS = {"AE": MLPTransition, "VAE": MLPTransition, "Modular": ModularTransition, "GNN": GNNTransition}


# ------------------------------------------------------------------ losses
def _batched(x: torch.Tensor) -> bool:
    return x.dim() == 3


def loss_nll(pred: torch.Tensor, target: torch.Tensor, sigma: float) -> torch.Tensor:
    """-log N(target; pred, sigma^2 I) without the additive constant."""
    if sigma <= 0:
        raise InputError("sigma must be positive")
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = ((pred - target) ** 2).sum() / (2.0 * sigma**2)
    return sq / pred.shape[0] if _batched(pred) else sq


def loss_contrastive(pred, target, negative, hinge: float) -> torch.Tensor:
    """||pred - target||^2 + max(0, hinge - ||pred - negative||^2)."""
    if hinge <= 0:
        raise InputError("hinge must be positive")
    dims = tuple(range(1, pred.dim())) if _batched(pred) else tuple(range(pred.dim()))
    pos = ((pred - target) ** 2).sum(dims)
    neg = ((pred - negative) ** 2).sum(dims)
    return (pos + F.relu(hinge - neg)).mean()


def step_loss(pred, target, negative, cfg: BackboneConfig) -> torch.Tensor:
    if cfg.objective == "contrastive":
        return loss_contrastive(pred, target, negative, cfg.hinge)
    return loss_nll(pred, target, cfg.sigma)


def gaussian_kl(mean, logvar) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over all non-batch dims."""
    kl = 0.5 * (mean**2 + logvar.exp() - 1.0 - logvar)
    return kl.flatten(1).sum(1)


# ------------------------------------------------------------------- model
class WorldModel(nn.Module):
    """Encoder E, transition F and (NLL route) decoder D; optionally a causal branch."""

    def __init__(self, cfg: BackboneConfig, obs_shape: tuple[int, ...], action_dim: int, branch: nn.Module | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self.latent_shape = cfg.latent_shape
        K, d = self.latent_shape
        out = K * d * (2 if cfg.family == "VAE" else 1)
        pixels = len(self.obs_shape) == 3
        if pixels:
            self.encoder = PixelEncoder(self.obs_shape[0], out, cfg.hidden_dim)
        else:
            self.encoder = StateEncoder(int(np.prod(self.obs_shape)), out, cfg.hidden_dim)
        uniform_fan_in_(self.encoder)
        self.transition = TRANSITIONS[cfg.family](self.latent_shape, action_dim, cfg.hidden_dim, cfg.action_mode)
        self.decoder = None
        if cfg.objective == "nll":
            self.decoder = Decoder(K * d, self.obs_shape, cfg.hidden_dim, pixels)
            uniform_fan_in_(self.decoder)
        self.branch = branch
        # inference-time fusion state, written by the Stage-3 trainer
        self.register_buffer("fusion_alpha", torch.tensor(0.0, dtype=torch.float64))
        self.register_buffer("gate_tau", torch.tensor(0.0, dtype=torch.float64))
        self.register_buffer("gate_gamma", torch.tensor(5.0, dtype=torch.float64))
        self.gate_enabled = True
        self.use_branch = branch is not None

    # encoders ------------------------------------------------------------
    def _check_obs(self, obs):
        if tuple(obs.shape[1:]) != self.obs_shape:
            raise InputError(f"observation shape {tuple(obs.shape[1:])} != expected {self.obs_shape}")

    def encode_stats(self, obs):
        """(mean, logvar) for VAE; (z, None) otherwise."""
        self._check_obs(obs)
        K, d = self.latent_shape
        h = self.encoder(obs)
        if self.cfg.family == "VAE":
            mean, logvar = h.chunk(2, dim=1)
            return mean.view(-1, K, d), logvar.view(-1, K, d)
        return h.view(-1, K, d), None

    def encode(self, obs, generator: torch.Generator | None = None):
        mean, logvar = self.encode_stats(obs)
        if logvar is None or not self.training:
            return mean
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return mean + (0.5 * logvar).exp() * noise

    def decode(self, z):
        if self.decoder is None:
            raise ConfigError("decode() called on a decoder-free (contrastive) model")
        return self.decoder(z)

    # dynamics ------------------------------------------------------------
    def step(self, z, a) -> TransitionOutput:
        delta = self.transition(z, a)
        return TransitionOutput(delta, z + delta)

    def rollout(self, z0, actions, horizon: int) -> torch.Tensor:
        """Recursive predictions; returns (B, H, K, d)."""
        if horizon < 1:
            raise InputError("horizon must be >= 1")
        if actions.shape[1] < horizon:
            raise InputError(f"need {horizon} actions, got {actions.shape[1]}")
        z, out = z0, []
        for k in range(horizon):
            z = self.step(z, actions[:, k]).predicted
            out.append(z)
        return torch.stack(out, dim=1)

    def transition_input(self, z, alpha: float | torch.Tensor | None = None):
        """Latent fed to the transition: z itself, or the gated fusion with the branch output."""
        if self.branch is None or not self.use_branch:
            return z
        from .training import fusion_gate_tensor

        z_tilde = self.branch.refine(z).z_tilde
        alpha = self.fusion_alpha if alpha is None else alpha
        z_gate, _ = fusion_gate_tensor(z, z_tilde, alpha, self.gate_tau, self.gate_gamma, self.gate_enabled)
        return z_gate

    def predict(self, obs, actions, horizon: int) -> torch.Tensor:
        """Encode, fuse (if causal), roll out; returns (B, H, K, d)."""
        z = self.encode(obs)
        return self.rollout(self.transition_input(z), actions, horizon)

    def backbone_modules(self) -> dict[str, nn.Module]:
        mods = {"encoder": self.encoder, "transition": self.transition}
        if self.decoder is not None:
            mods["decoder"] = self.decoder
        return mods


# ------------------------------------------------------------- checkpoints
def param_hashes(module: nn.Module) -> dict[str, str]:
    return {k: hashlib.sha256(v.detach().cpu().numpy().tobytes()).hexdigest() for k, v in module.state_dict().items()}


def save_checkpoint(path: str | Path, module: nn.Module, header: dict) -> Path:
    """Single-file archive: named parameter arrays plus a JSON header."""
    path = Path(path)
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    header = dict(header)
    header["param_names"] = sorted(arrays)
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    try:
        with np.load(Path(path)) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            state = {k: torch.from_numpy(z[k].copy()) for k in header["param_names"]}
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    return state, header


def backbone_header(cfg: BackboneConfig, **extra) -> dict:
    return {"backbone": asdict(cfg), **extra}
