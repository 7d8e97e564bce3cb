"""Time-aware patch aggregation.

Turns each channel's irregular observations into ``P`` patch vectors.  Every
patch owns a learned window ``[left, right]``; observations are weighted by a
product of two sigmoids (rise at ``left``, fall at ``right``) whose softness is
a per-channel temperature, and each patch is the normalized weighted average
of the time-augmented observations, projected to ``D`` dimensions.

Nothing in here mixes channels.
"""

from __future__ import annotations

import math

import numpy as np

from . import diff_engine as de
from .diff_engine import ParamStore, Tensor
from .errors import ConfigError, ContractError, ShapeError
from .imts_core import PaddedBatch

AGG_EPS = 1e-8
PREFIX = "tapa."


def init_tapa_params(
    store: ParamStore,
    rng: np.random.Generator,
    n_channels: int,
    n_patches: int,
    hidden_dim: int,
    te_dim: int,
    t_obs: float = 1.0,
) -> None:
    if te_dim < 2:
        raise ConfigError(f"te_dim must be >= 2, got {te_dim}")
    if n_patches < 1 or hidden_dim < 1 or n_channels < 1:
        raise ConfigError("n_patches, hidden_dim and n_channels must be >= 1")
    s_init = t_obs / n_patches
    # softplus(kappa) = s_init / 4
    tau0 = s_init / 4.0
    kappa0 = tau0 + math.log(-math.expm1(-tau0))
    store.add(PREFIX + "delta", np.zeros((n_channels, n_patches)))
    store.add(PREFIX + "lambda", np.full((n_channels, n_patches), math.log(s_init)))
    store.add(PREFIX + "kappa", np.full((n_channels,), kappa0))
    store.add(PREFIX + "te_linear_w", np.zeros(()))
    store.add(PREFIX + "te_linear_b", np.zeros(()))
    store.add(PREFIX + "te_sin_w", rng.uniform(0.0, 2.0 * math.pi * n_patches / t_obs, size=te_dim - 1))
    store.add(PREFIX + "te_sin_b", np.zeros(te_dim - 1))
    bound = 1.0 / math.sqrt(1 + te_dim)
    store.add(PREFIX + "proj_w", rng.uniform(-bound, bound, size=(1 + te_dim, hidden_dim)))
    store.add(PREFIX + "proj_b", np.zeros(hidden_dim))


def fixed_boundaries(n_channels: int, n_patches: int, t_obs: float) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width tiling of ``[0, t_obs]``, shape ``[N, P]`` each."""
    s = t_obs / n_patches
    left = np.arange(n_patches) * s
    right = np.append(left[1:], t_obs)
    return np.tile(left, (n_channels, 1)), np.tile(right, (n_channels, 1))


def compute_boundaries(params: ParamStore, t_obs: float, n_patches: int) -> tuple[Tensor, Tensor]:
    if not t_obs > 0 or n_patches < 1:
        raise ConfigError(f"need t_obs > 0 and P >= 1, got t_obs={t_obs}, P={n_patches}")
    s_init = t_obs / n_patches
    centers = (np.arange(1, n_patches + 1) - 0.5) * s_init
    left = de.add(centers - s_init / 2.0, params[PREFIX + "delta"])
    right = de.add(left, de.exp(params[PREFIX + "lambda"]))
    return left, right


def time_embedding(t, params: ParamStore) -> Tensor:
    """``[..., D_te]``: one linear component followed by ``D_te - 1`` sine components."""
    t = de.expand_dims(de.as_tensor(t), -1)
    linear = de.add(de.mul(t, params[PREFIX + "te_linear_w"]), params[PREFIX + "te_linear_b"])
    periodic = de.sin(de.add(de.mul(t, params[PREFIX + "te_sin_w"]), params[PREFIX + "te_sin_b"]))
    return de.concat_last([linear, periodic])


def augment_observation(v, te) -> Tensor:
    v, te = de.as_tensor(v), de.as_tensor(te)
    if te.ndim == 0 or te.shape[-1] < 1:
        raise ContractError("time embedding must have D_te >= 1")
    if v.shape != te.shape[:-1]:
        raise ShapeError("augment_observation", v.shape, te.shape)
    return de.concat_last([de.expand_dims(v, -1), te])


def temperature(params: ParamStore) -> Tensor:
    return de.softplus(params[PREFIX + "kappa"])


def soft_window_weight(t, left, right, kappa) -> Tensor:
    """``alpha[b, n, i, p]`` for times ``[B, N, L]`` and boundaries ``[N, P]``."""
    t, left, right = de.as_tensor(t), de.as_tensor(left), de.as_tensor(right)
    N, P = left.shape
    tau = de.reshape(de.softplus(kappa), (N, 1, 1))
    t4 = de.expand_dims(t, -1)  # [B, N, L, 1]
    l3 = de.reshape(left, (N, 1, P))
    r3 = de.reshape(right, (N, 1, P))
    fall = de.sigmoid(de.div(de.sub(r3, t4), tau))
    rise = de.sigmoid(de.div(de.sub(t4, l3), tau))
    return de.mul(fall, rise)


def hard_window_weight(t, n_patches: int, t_obs: float) -> Tensor:
    """0/1 membership of each observation in the fixed interval containing it.

    The last interval is closed on the right so ``t == t_obs`` is kept.
    """
    t = np.asarray(de.as_tensor(t).data)
    s = t_obs / n_patches
    idx = np.clip(np.floor(t / s), 0, n_patches - 1).astype(int)
    return Tensor((idx[..., None] == np.arange(n_patches)).astype(np.float64))


def aggregate_patch(aug, alpha, obs_mask, eps: float = AGG_EPS) -> Tensor:
    """Masked normalized weighted average -> ``[B, N, P, 1 + D_te]``."""
    aug, alpha = de.as_tensor(aug), de.as_tensor(alpha)
    mask = de.as_tensor(obs_mask)
    if alpha.shape[:-1] != mask.shape or aug.shape[:-1] != mask.shape:
        raise ShapeError("aggregate_patch", aug.shape, alpha.shape, mask.shape)
    w = de.mul(alpha, de.expand_dims(mask, -1))  # [B, N, L, P]
    num = de.sum_(de.mul(de.expand_dims(w, -1), de.expand_dims(aug, -2)), axis=2)
    den = de.add(de.sum_(w, axis=2), eps)
    return de.div(num, de.expand_dims(den, -1))


def project(h_bar, params: ParamStore) -> Tensor:
    w = params[PREFIX + "proj_w"]
    if h_bar.shape[-1] != w.shape[0]:
        raise ShapeError("project", h_bar.shape, w.shape)
    return de.add(de.matmul(h_bar, w), params[PREFIX + "proj_b"])


def tapa_forward(batch: PaddedBatch, params: ParamStore, n_patches: int, weighting: str = "soft") -> Tensor:
    """``[B, N, P, D]`` patch sequence.

    ``weighting="hard"`` swaps the soft windows for fixed equal-width
    intervals with an unweighted mean (ablation).
    """
    te = time_embedding(batch.times, params)
    aug = augment_observation(batch.values, te)
    if weighting == "soft":
        left, right = compute_boundaries(params, batch.t_obs, n_patches)
        alpha = soft_window_weight(batch.times, left, right, params[PREFIX + "kappa"])
    elif weighting == "hard":
        alpha = hard_window_weight(batch.times, n_patches, batch.t_obs)
    else:
        raise ConfigError(f"unknown weighting {weighting!r}")
    h_bar = aggregate_patch(aug, alpha, batch.obs_mask)
    return project(h_bar, params)
