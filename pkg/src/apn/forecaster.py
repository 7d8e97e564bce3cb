"""Query pooling over patches, the MLP decoder and the masked MSE objective."""

from __future__ import annotations

import math

import numpy as np

from . import diff_engine as de
from . import tapa
from .diff_engine import ParamStore, Tensor
from .errors import ConfigError, ContractError, ShapeError
from .imts_core import PaddedBatch

PREFIX = "forecaster."
POOLINGS = ("query", "mean", "linear")


def positional_encoding(n_patches: int, dim: int) -> np.ndarray:
    if dim % 2:
        raise ConfigError(f"positional encoding needs an even dimension, got {dim}")
    pos = np.arange(n_patches, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.zeros((n_patches, dim))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


def init_forecaster_params(
    store: ParamStore,
    rng: np.random.Generator,
    n_channels: int,
    n_patches: int,
    hidden_dim: int,
    te_dim: int,
    decoder_hidden: int,
    pooling: str = "query",
) -> None:
    if decoder_hidden < 1:
        raise ConfigError(f"decoder_hidden must be >= 1, got {decoder_hidden}")
    D = hidden_dim

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    store.add(PREFIX + "pe", positional_encoding(n_patches, D), trainable=False)
    store.add(PREFIX + "query", uniform(D, (n_channels, D)))
    store.add(PREFIX + "ln_scale", np.ones(D))
    store.add(PREFIX + "ln_shift", np.zeros(D))
    store.add(PREFIX + "dec_w1", uniform(D + te_dim, (D + te_dim, decoder_hidden)))
    store.add(PREFIX + "dec_b1", np.zeros(decoder_hidden))
    store.add(PREFIX + "dec_w2", uniform(decoder_hidden, (decoder_hidden, 1)))
    store.add(PREFIX + "dec_b2", np.zeros(1))
    if pooling == "linear":
        store.add(PREFIX + "pool_w", uniform(n_patches * D, (n_patches * D, D)))
        store.add(PREFIX + "pool_b", np.zeros(D))


def _layer_norm_affine(x: Tensor, params: ParamStore) -> Tensor:
    return de.add(de.mul(de.layer_norm(x), params[PREFIX + "ln_scale"]), params[PREFIX + "ln_shift"])


def attention_scores(h_pe: Tensor, query: Tensor) -> Tensor:
    """``[B, N, P]`` dot-product scores scaled by ``1/sqrt(D)``."""
    N, D = query.shape
    q = de.reshape(query, (N, 1, D))
    return de.div(de.sum_(de.mul(h_pe, q), axis=-1), math.sqrt(D))


def query_aggregate(h: Tensor, params: ParamStore, pooling: str = "query") -> Tensor:
    """Pool ``[B, N, P, D]`` patches into a layer-normalized ``[B, N, D]`` context.

    ``pooling`` is ``"query"`` for the learned-query softmax, or one of the
    ablation replacements: ``"mean"`` (uniform average over patches) and
    ``"linear"`` (flatten patches, one linear layer).
    """
    pe = params[PREFIX + "pe"]
    if h.shape[-2:] != pe.shape:
        raise ShapeError("query_aggregate", h.shape, pe.shape)
    h_pe = de.add(h, pe)
    if pooling == "query":
        beta = de.softmax(attention_scores(h_pe, params[PREFIX + "query"]))
        ctx = de.sum_(de.mul(de.expand_dims(beta, -1), h_pe), axis=2)
    elif pooling == "mean":
        ctx = de.mean(h_pe, axis=2)
    elif pooling == "linear":
        B, N, P, D = h_pe.shape
        flat = de.reshape(h_pe, (B, N, P * D))
        ctx = de.add(de.matmul(flat, params[PREFIX + "pool_w"]), params[PREFIX + "pool_b"])
    else:
        raise ConfigError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
    return _layer_norm_affine(ctx, params)


def decode(h_c: Tensor, query_te: Tensor, params: ParamStore) -> Tensor:
    """Two-layer ReLU MLP on ``concat(context, TE(query time))`` -> ``[B, N, Q]``."""
    B, N, D = h_c.shape
    if query_te.shape[:2] != (B, N):
        raise ShapeError("decode", h_c.shape, query_te.shape)
    Q = query_te.shape[2]
    ctx = de.broadcast_to(de.reshape(h_c, (B, N, 1, D)), (B, N, Q, D))
    x = de.concat_last([ctx, query_te])
    w1 = params[PREFIX + "dec_w1"]
    if x.shape[-1] != w1.shape[0]:
        raise ShapeError("decode", x.shape, w1.shape)
    hidden = de.relu(de.add(de.matmul(x, w1), params[PREFIX + "dec_b1"]))
    out = de.add(de.matmul(hidden, params[PREFIX + "dec_w2"]), params[PREFIX + "dec_b2"])
    return de.reshape(out, (B, N, Q))


def mse_loss(preds, targets, query_mask) -> Tensor:
    """Mean of squared residuals over unmasked query points only."""
    preds = de.as_tensor(preds)
    mask = de.as_tensor(query_mask).data
    count = float(mask.sum())
    if count <= 0:
        raise ContractError("mse_loss needs at least one unmasked query")
    resid = de.mul(de.sub(preds, targets), Tensor(mask))
    return de.div(de.sum_(de.mul(resid, resid)), count)


def model_forward(
    batch: PaddedBatch,
    params: ParamStore,
    n_patches: int,
    weighting: str = "soft",
    pooling: str = "query",
) -> Tensor:
    h = tapa.tapa_forward(batch, params, n_patches, weighting=weighting)
    h_c = query_aggregate(h, params, pooling=pooling)
    query_te = tapa.time_embedding(batch.query_times, params)
    return decode(h_c, query_te, params)
