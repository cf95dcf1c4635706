"""Structural causal branch: exogenous posterior, DAG causal layer, mask layer.

Convention: ``A[j, i]`` is the weight of the edge ``j -> i``; the endogenous
variables solve ``x = A^T x + eps``.  Parents of concept ``i`` therefore sit
in column ``i`` of ``A``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .backbone import uniform_fan_in_
from .errors import ConfigError, InputError, NumericError

COND_LIMIT = 1e8
TERMS = ("rec", "kl", "align", "dag", "mask")


@dataclass
class CausalLossWeights:
    lambdas: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 3.0, 1.0)
    alpha_kl: float = 0.3
    dag_warmup: float = 0.1  # fraction of Stage-2 epochs over which lambda4 ramps from 0

    def validate(self) -> "CausalLossWeights":
        if len(self.lambdas) != 5:
            raise ConfigError("exactly five lambda weights are required")
        if any(l < 0 for l in self.lambdas) or self.alpha_kl < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self.lambdas}, alpha_kl={self.alpha_kl}")
        return self

    def as_dict(self) -> dict[str, float]:
        return dict(zip(TERMS, map(float, self.lambdas)))


@dataclass
class SlotSupervision:
    """State targets for the anchored coordinates.

    ``targets`` anchors the endogenous variables and feeds the alignment head.
    ``mask_targets`` is what the mask predictor regresses onto; it defaults to
    ``targets`` and may instead hold one-step state increments.
    """

    targets: torch.Tensor | None = None
    mask_targets: torch.Tensor | None = None
    slot_map: list[tuple[int, int]] = field(default_factory=list)
    enabled: bool = True

    @property
    def active(self) -> bool:
        return self.enabled and self.targets is not None

    @property
    def y(self):
        return self.targets if self.mask_targets is None else self.mask_targets


class CausalPosterior(NamedTuple):
    epsilon_mean: torch.Tensor
    epsilon_logvar: torch.Tensor
    epsilon: torch.Tensor
    endogenous: torch.Tensor
    endogenous_var: torch.Tensor
    masked: torch.Tensor
    masked_mean: torch.Tensor
    masked_var: torch.Tensor


class RefineOutput(NamedTuple):
    z_tilde: torch.Tensor
    posterior: CausalPosterior


# ---------------------------------------------------------------- penalties
def dag_penalty(A: torch.Tensor) -> torch.Tensor:
    """tr(exp(A * A)) - d, evaluated in float64."""
    if A.dim() != 2 or A.shape[0] != A.shape[1]:
        raise InputError(f"adjacency must be square, got {tuple(A.shape)}")
    A64 = A.to(torch.float64)
    E = torch.linalg.matrix_exp(A64 * A64)
    return (torch.diagonal(E).sum() - A.shape[0]).to(A.dtype)


def gaussian_kl_diag(mean, var, prior_mean=None, prior_var=1.0) -> torch.Tensor:
    """KL(N(mean, var) || N(prior_mean, prior_var)) summed over the last dim."""
    pm = torch.zeros_like(mean) if prior_mean is None else prior_mean
    kl = 0.5 * (var / prior_var + (mean - pm) ** 2 / prior_var - 1.0 - torch.log(var / prior_var))
    return kl.sum(-1)


def causal_solve(A: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Endogenous x with (I - A^T) x = eps; rows of ``eps`` are samples."""
    d = A.shape[0]
    M = torch.eye(d, dtype=A.dtype) - A.T
    cond = float(torch.linalg.cond(M.detach()))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericError(f"(I - A^T) is numerically singular: condition number {cond:.3e} > {COND_LIMIT:.0e}")
    return torch.linalg.solve(M, eps.T).T


# ------------------------------------------------------------------ branch
class CausalBranch(nn.Module):
    """C_psi: z -> (eps posterior) -> causal layer -> mask layer -> z_tilde.

    The refined latent is ``z + W_out(masked - W_in z)``.  With ``A = 0`` and
    the mask layer at its pass-through init the eval-mode output equals ``z``
    exactly, so attaching the branch leaves a trained backbone unchanged.
    """

    def __init__(self, latent_shape: tuple[int, int], d_s: int, state_dim: int | None = None, init_logvar: float = -4.0):
        super().__init__()
        K, d = latent_shape
        self.latent_shape = (K, d)
        self.latent_dim = D = K * d
        self.d_s = d_s
        self.state_dim = state_dim if state_dim is not None else d_s
        self.w_in = nn.Linear(D, d_s)
        self.eps_mean = nn.Linear(D, d_s)
        self.eps_logvar = nn.Linear(D, d_s)
        self.w_out = nn.Linear(d_s, D, bias=False)
        self.align = nn.Linear(D, self.state_dim)
        uniform_fan_in_(self)
        with torch.no_grad():
            if D == d_s:
                self.w_in.weight.copy_(torch.eye(d_s))
                self.w_out.weight.copy_(torch.eye(d_s))
            self.w_in.bias.zero_()
            self.eps_mean.weight.copy_(self.w_in.weight)
            self.eps_mean.bias.zero_()
            self.eps_logvar.weight.zero_()
            self.eps_logvar.bias.fill_(init_logvar)
            if D == self.state_dim:
                self.align.weight.copy_(torch.eye(D))
                self.align.bias.zero_()
        self.A_raw = nn.Parameter(torch.zeros(d_s, d_s))
        self.mask_gain = nn.Parameter(torch.ones(d_s))
        self.mask_bias = nn.Parameter(torch.zeros(d_s))
        self.slot_map: list[tuple[int, int]] = []
        self.register_buffer("state_scale", torch.ones(d_s))

    # structure -----------------------------------------------------------
    @property
    def A(self) -> torch.Tensor:
        return self.A_raw * (1.0 - torch.eye(self.d_s, dtype=self.A_raw.dtype))

    def adjacency(self) -> np.ndarray:
        return self.A.detach().cpu().numpy().astype(np.float64)

    def condition_number(self) -> float:
        M = torch.eye(self.d_s, dtype=self.A_raw.dtype) - self.A.detach().T
        return float(torch.linalg.cond(M))

    @torch.no_grad()
    def clip_spectral(self, max_norm: float = 0.95) -> bool:
        """Rescale A so its spectral norm is at most ``max_norm``; True if clipped."""
        s = float(torch.linalg.matrix_norm(self.A, ord=2))
        if s > max_norm:
            self.A_raw.mul_(max_norm / s)
            return True
        return False

    # mask layer ----------------------------------------------------------
    def mask_head(self, x: torch.Tensor, i: int | None = None, A: torch.Tensor | None = None) -> torch.Tensor:
        """g_i(A[:, i] * x) = w_i * sum_j A[j, i] x_j + b_i, for one concept or all."""
        A = self.A if A is None else A
        if i is None:
            return (x @ A) * self.mask_gain + self.mask_bias
        if not 0 <= i < self.d_s:
            raise InputError(f"concept index {i} out of range [0, {self.d_s})")
        return self.mask_gain[i] * (x * A[:, i]).sum(-1) + self.mask_bias[i]

    def align_head(self, z_tilde: torch.Tensor, supervision: SlotSupervision | None = None) -> torch.Tensor:
        if supervision is not None and not supervision.enabled:
            raise ConfigError("align_head requires state supervision")
        return self.align(z_tilde.flatten(1))

    # forward -------------------------------------------------------------
    def posterior(self, z: torch.Tensor, generator: torch.Generator | None = None) -> CausalPosterior:
        flat = z.flatten(1)
        A = self.A
        mu, logvar = self.eps_mean(flat), self.eps_logvar(flat)
        var = logvar.exp()
        if self.training:
            eps = mu + var.sqrt() * torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        else:
            eps = mu
        x = causal_solve(A, eps)
        x_mean = causal_solve(A, mu)
        # covariance propagation through x = M eps and masked = (I + diag(w) A^T M) eps
        M = torch.linalg.solve(torch.eye(self.d_s, dtype=A.dtype) - A.T, torch.eye(self.d_s, dtype=A.dtype))
        P = torch.eye(self.d_s, dtype=A.dtype) + self.mask_gain[:, None] * (A.T @ M)
        x_var = (var[:, None, :] * M[None] ** 2).sum(-1)
        m_var = (var[:, None, :] * P[None] ** 2).sum(-1)
        masked = eps + self.mask_head(x, A=A)
        masked_mean = mu + self.mask_head(x_mean, A=A)
        return CausalPosterior(mu, logvar, eps, x, x_var, masked, masked_mean, m_var)

    def decode(self, z: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        flat = z.flatten(1)
        return (flat + self.w_out(masked - self.w_in(flat))).view_as(z)

    def refine(self, z: torch.Tensor, generator: torch.Generator | None = None) -> RefineOutput:
        if z.flatten(1).shape[1] != self.latent_dim:
            raise InputError(f"latent of size {z.flatten(1).shape[1]} incompatible with branch input {self.latent_dim}")
        post = self.posterior(z, generator)
        return RefineOutput(self.decode(z, post.masked), post)

    forward = refine

    @torch.no_grad()
    def intervene(self, z: torch.Tensor, coord: int, delta: float) -> torch.Tensor:
        """Latent after do(x_c := x_c + delta) with the change propagated to descendants.

        ``delta`` is in raw state units and is converted with ``state_scale``.
        The structural change is carried back into latent space through the
        pseudo-inverse of the anchored projection ``W_in``.
        """
        if not 0 <= coord < self.d_s:
            raise InputError(f"structural coordinate {coord} out of range [0, {self.d_s})")
        A_cut = self.A.clone()
        A_cut[:, coord] = 0.0
        step = torch.zeros(1, self.d_s, dtype=z.dtype)
        step[0, coord] = delta / float(self.state_scale[coord])
        dx = causal_solve(A_cut, step)  # unit push at c plus its downstream effects
        dz = dx @ torch.linalg.pinv(self.w_in.weight).T
        return (z.flatten(1) + dz).view_as(z)


# -------------------------------------------------------------------- loss
def stage2_loss(
    z: torch.Tensor,
    z_tilde: torch.Tensor,
    posterior: CausalPosterior,
    A: torch.Tensor,
    supervision: SlotSupervision | None,
    weights: CausalLossWeights,
    branch: CausalBranch | None = None,
    dag_weight: float | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Five-term structural objective.  ``dag_weight`` overrides lambda4 (warm-up)."""
    weights.validate()
    lam = list(weights.lambdas)
    if dag_weight is not None:
        lam[3] = dag_weight
    sup = supervision is not None and supervision.active
    if lam[2] > 0 and supervision is not None and supervision.enabled and supervision.targets is None:
        raise ConfigError("lambda3 > 0 but no state supervision is available")
    zero = z.new_zeros(())
    rec = ((z_tilde - z) ** 2).flatten(1).sum(1).mean()
    kl = weights.alpha_kl * gaussian_kl_diag(posterior.epsilon_mean, posterior.epsilon_logvar.exp()).mean()
    align = mask = zero
    if sup:
        s = supervision.targets
        kl = kl + gaussian_kl_diag(posterior.endogenous, posterior.endogenous_var, s).mean()
        if branch is not None and lam[2] > 0:
            align = ((branch.align_head(z_tilde) - s) ** 2).sum(1).mean()
        # the mask predictor reads the anchored (label) coordinates, as in the label-mask term of CausalVAE
        pred = branch.mask_head(s, A=A) if branch is not None else s @ A
        mask = gaussian_kl_diag(posterior.masked, posterior.masked_var, s).mean() + ((pred - supervision.y) ** 2).sum(1).mean()
    dag = dag_penalty(A)
    comps = {"rec": rec, "kl": kl, "align": align, "dag": dag, "mask": mask}
    total = sum(l * comps[k] for l, k in zip(lam, TERMS))
    return total, comps


def dag_weight_at(weights: CausalLossWeights, epoch: int, total_epochs: int) -> float:
    """lambda4 ramps linearly from 0 at epoch 0 to its full value at ``dag_warmup`` of the stage."""
    warm = weights.dag_warmup * total_epochs
    if warm <= 0:
        return weights.lambdas[3]
    return weights.lambdas[3] * min(1.0, epoch / warm)


# --------------------------------------------------------------- threshold
def threshold_adjacency(A: np.ndarray, rel: float = 0.3, abs_floor: float = 0.0) -> np.ndarray:
    """Boolean support |A_ij| > max(rel * max|A|, abs_floor), diagonal excluded."""
    A = np.abs(np.asarray(A, dtype=np.float64)).copy()
    np.fill_diagonal(A, 0.0)
    m = A.max() if A.size else 0.0
    cut = max(rel * m, abs_floor)
    if m == 0.0:
        return np.zeros_like(A, dtype=bool)
    return A > cut


def export_adjacency(A: np.ndarray, directory: str | Path, threshold: float = 0.3, slot_map=None, **meta) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = directory / "adjacency.csv", directory / "adjacency.json"
    with csv_path.open("w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in np.asarray(A)])
    info = {"d_s": int(np.asarray(A).shape[0]), "threshold": threshold, "slot_map": [list(p) for p in (slot_map or [])], **meta}
    json_path.write_text(json.dumps(info, indent=2, sort_keys=True))
    return csv_path, json_path


def load_adjacency(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no adjacency file at {path}")
    with path.open() as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    A = np.array(rows, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError(f"adjacency in {path} is not square")
    return A


def weights_dict(w: CausalLossWeights) -> dict:
    return asdict(w)
