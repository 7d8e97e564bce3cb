"""Parameter initialization, AdamW, the training loop, evaluation and ablations."""

from __future__ import annotations

import dataclasses
import logging
import math
import re
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import diff_engine as de
from . import forecaster, tapa
from .diff_engine import GradTape, ParamStore
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .imts_core import Dataset, ImtsRecord, batch_records

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_adaptive", "no_weighted", "no_query")
DEFAULT_SEEDS = (2024, 2025, 2026, 2027, 2028)

_NO_DECAY = {"tapa.delta", "tapa.lambda", "tapa.kappa", "forecaster.ln_scale", "forecaster.ln_shift"}
_BIAS = re.compile(r"_b\d*$")


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    patience: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    seed: int = 2024
    n_channels: int = 2
    n_patches: int = 8
    hidden_dim: int = 32
    te_dim: int = 8
    decoder_hidden: int = 0  # 0 -> 2 * hidden_dim
    t_obs: float = 1.0
    variant: str = "full"
    no_query_pooling: str = "mean"

    def __post_init__(self):
        if self.patience < 0 or self.patience > self.max_epochs:
            raise ConfigError(f"need 0 <= patience <= max_epochs, got {self.patience}/{self.max_epochs}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.no_query_pooling not in ("mean", "linear"):
            raise ConfigError(f"no_query_pooling must be 'mean' or 'linear', got {self.no_query_pooling!r}")
        if self.hidden_dim % 2:
            raise ConfigError(f"hidden_dim must be even (positional encoding), got {self.hidden_dim}")
        if self.te_dim < 2:
            raise ConfigError(f"te_dim must be >= 2, got {self.te_dim}")
        if min(self.n_channels, self.n_patches, self.hidden_dim) < 1:
            raise ConfigError("n_channels, n_patches and hidden_dim must be >= 1")
        if not self.t_obs > 0:
            raise ConfigError(f"t_obs must be > 0, got {self.t_obs}")

    @property
    def d_hidden(self) -> int:
        return self.decoder_hidden or 2 * self.hidden_dim

    @property
    def weighting(self) -> str:
        return "hard" if self.variant == "no_weighted" else "soft"

    @property
    def pooling(self) -> str:
        return self.no_query_pooling if self.variant == "no_query" else "query"

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


def _frozen_for(variant: str) -> set[str]:
    if variant == "no_adaptive":
        return {"tapa.delta", "tapa.lambda"}
    if variant == "no_weighted":
        return {"tapa.delta", "tapa.lambda", "tapa.kappa"}
    if variant == "no_query":
        return {"forecaster.query"}
    return set()


def init_params(config: TrainConfig) -> ParamStore:
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    tapa.init_tapa_params(
        store, rng, config.n_channels, config.n_patches, config.hidden_dim, config.te_dim, config.t_obs
    )
    forecaster.init_forecaster_params(
        store,
        rng,
        config.n_channels,
        config.n_patches,
        config.hidden_dim,
        config.te_dim,
        config.d_hidden,
        pooling=config.pooling,
    )
    for name in _frozen_for(config.variant):
        store.set_trainable(name, False)
    log.info("initialized %d trainable parameters (variant=%s)", store.n_trainable(), config.variant)
    return store


def decays(name: str) -> bool:
    return name not in _NO_DECAY and not _BIAS.search(name)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: ParamStore, grads: dict[str, np.ndarray], state: OptimizerState, config: TrainConfig) -> None:
    """In-place AdamW update; decay is applied to the weights before the moment step."""
    b1, b2 = config.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        t = params[name]
        if g.shape != t.shape:
            raise ShapeError("adamw_step", t.shape, g.shape)
        theta = t.data
        if config.weight_decay and decays(name):
            theta = theta - config.lr * config.weight_decay * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta = theta - config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        t.data = theta


# --- reporting --------------------------------------------------------------------


@dataclass
class MetricsReport:
    mse: float
    mae: float
    split: str = "test"
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mse: float | None = None
    epochs_run: int = 0
    n_points: int = 0
    n_trainable: int = 0
    config: dict = field(default_factory=dict)
    seed: int | None = None
    variant: str | None = None
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _forward(batch, params: ParamStore, config: TrainConfig):
    return forecaster.model_forward(
        batch, params, config.n_patches, weighting=config.weighting, pooling=config.pooling
    )


def _batches(records: list[ImtsRecord], size: int):
    for i in range(0, len(records), size):
        yield batch_records(records[i : i + size])


def predict(params: ParamStore, records, config: TrainConfig) -> list[list[np.ndarray]]:
    """Unpadded predictions: one array per channel per record, no gradients."""
    records = list(records)
    out = []
    for start in range(0, len(records), config.batch_size):
        chunk = records[start : start + config.batch_size]
        preds = _forward(batch_records(chunk), params, config).data
        for b, rec in enumerate(chunk):
            out.append([preds[b, n, : len(q)].copy() for n, q in enumerate(rec.queries)])
    return out


def evaluate(params: ParamStore, data: Dataset, config: TrainConfig, split: str = "test") -> MetricsReport:
    """Masked MSE and MAE over every query point of every record."""
    if len(data) == 0:
        raise ContractError("evaluate needs a non-empty dataset")
    sq = ab = 0.0
    count = 0.0
    for batch in _batches(list(data.records), config.batch_size):
        preds = _forward(batch, params, config).data
        mask = batch.query_mask.data
        resid = (preds - batch.target_values.data) * mask
        sq += float(np.sum(resid * resid))
        ab += float(np.sum(np.abs(resid)))
        count += float(mask.sum())
    if count == 0:
        raise ContractError("evaluate: no query points in data")
    return MetricsReport(
        mse=sq / count,
        mae=ab / count,
        split=split,
        n_points=int(count),
        n_trainable=params.n_trainable(),
        config=config.to_dict(),
        seed=config.seed,
        variant=config.variant,
    )


def _check_data(config: TrainConfig, *datasets: Dataset) -> None:
    for d in datasets:
        if d.n_channels != config.n_channels:
            raise ConfigError(f"data has {d.n_channels} channels, config expects {config.n_channels}")
        for r in d.records:
            if r.t_obs != config.t_obs:
                raise ConfigError(f"record t_obs={r.t_obs} differs from config t_obs={config.t_obs}")


def _grad_norms(grads: dict[str, np.ndarray]) -> str:
    return ", ".join(f"{k}={float(np.linalg.norm(v)):.3g}" for k, v in sorted(grads.items()))


def train(train_data: Dataset, val_data: Dataset, config: TrainConfig) -> tuple[ParamStore, MetricsReport]:
    """Minibatch AdamW with early stopping on validation MSE.

    Returns the parameters from the best validation epoch.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ContractError("train needs non-empty train and validation splits")
    _check_data(config, train_data, val_data)
    start = time.perf_counter()
    params = init_params(config)
    state = OptimizerState()
    shuffle_rng = np.random.default_rng([config.seed, 1])
    records = list(train_data.records)

    history: list[dict] = []
    best_val = math.inf
    best_epoch = 0
    best_params = params.copy()
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(records))
        total = weight = 0.0
        for bi, batch in enumerate(_batches([records[i] for i in order], config.batch_size)):
            grads: dict[str, np.ndarray] = {}
            try:
                with GradTape() as tape:
                    loss = forecaster.mse_loss(_forward(batch, params, config), batch.target_values, batch.query_mask)
                grads = de.backward(loss, tape, params)
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise NumericError("non-finite gradient")
                adamw_step(params, grads, state, config)
            except NumericError as exc:
                raise NumericError(
                    f"training aborted at epoch {epoch}, batch {bi}: {exc}; gradient norms: {_grad_norms(grads) or 'n/a'}"
                ) from exc
            n = float(batch.query_mask.data.sum())
            total += loss.item() * n
            weight += n
        val_mse = evaluate(params, val_data, config, split="val").mse
        history.append({"epoch": epoch, "train_loss": total / weight, "val_mse": val_mse})
        log.debug("epoch %d train=%.6f val=%.6f", epoch, total / weight, val_mse)
        if val_mse < best_val:
            best_val, best_epoch, since_best = val_mse, epoch, 0
            best_params = params.copy()
        else:
            since_best += 1
        if since_best >= config.patience:
            break

    final = evaluate(best_params, val_data, config, split="val")
    final.history = history
    final.best_epoch = best_epoch
    final.best_val_mse = best_val
    final.epochs_run = len(history)
    final.wall_time_s = time.perf_counter() - start
    return best_params, final


# --- ablation ----------------------------------------------------------------------


@dataclass
class AblationTable:
    rows: list[dict]
    medians: dict[str, dict]
    config: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        header = f"{'variant':<12} {'seed':>8} {'mse':>12} {'mae':>12} {'epochs':>7}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r['variant']:<12} {r['seed']:>8} {r['mse']:>12.6f} {r['mae']:>12.6f} {r['epochs_run']:>7}")
        lines.append("-" * len(header))
        for v, m in self.medians.items():
            lines.append(f"{v:<12} {'median':>8} {m['mse']:>12.6f} {m['mae']:>12.6f} {'':>7}")
        return "\n".join(lines) + "\n"


def run_ablation(
    train_data: Dataset,
    val_data: Dataset,
    test_data: Dataset,
    config: TrainConfig,
    seeds=DEFAULT_SEEDS,
    variants=VARIANTS,
) -> AblationTable:
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = config.replace(seed=seed, variant=variant)
            params, report = train(train_data, val_data, cfg)
            test = evaluate(params, test_data, cfg)
            rows.append(
                {
                    "variant": variant,
                    "seed": seed,
                    "mse": test.mse,
                    "mae": test.mae,
                    "best_epoch": report.best_epoch,
                    "epochs_run": report.epochs_run,
                    "n_trainable": params.n_trainable(),
                }
            )
            log.info("ablation %s seed=%d test mse=%.6f", variant, seed, test.mse)
    medians = {
        v: {
            "mse": statistics.median(r["mse"] for r in rows if r["variant"] == v),
            "mae": statistics.median(r["mae"] for r in rows if r["variant"] == v),
        }
        for v in variants
    }
    return AblationTable(rows, medians, config.to_dict())


# --- gradient check ---------------------------------------------------------------------

GRADCHECK_CONFIG = TrainConfig(
    n_channels=3, n_patches=4, hidden_dim=8, te_dim=5, decoder_hidden=16, seed=2024, batch_size=2
)


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float]
    worst_param: str
    worst_index: list[int]
    worst_error: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.worst_error < self.tolerance

    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if not v < self.tolerance]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["passed"] = self.passed
        return d


def tiny_instance(config: TrainConfig, max_obs: int = 10, max_queries: int = 4):
    """Random batch plus perturbed parameters for gradient checking."""
    rng = np.random.default_rng([config.seed, 7])
    T = config.t_obs
    records = []
    for _ in range(config.batch_size):
        channels, queries, targets = [], [], []
        for _ in range(config.n_channels):
            L = int(rng.integers(1, max_obs + 1))
            t = np.sort(rng.uniform(0.0, T, size=L))
            channels.append(list(zip(t.tolist(), rng.normal(size=L).tolist())))
            Q = int(rng.integers(1, max_queries + 1))
            queries.append(np.sort(rng.uniform(T, 1.5 * T, size=Q)).tolist())
            targets.append(rng.normal(size=Q).tolist())
        records.append(ImtsRecord.from_lists(channels, queries, targets, T))
    params = init_params(config)
    for name in params.trainable():
        t = params[name]
        params.assign(name, t.data + 0.1 * rng.normal(size=t.shape))
    return batch_records(records), params


def grad_check_model(
    config: TrainConfig | None = None, tolerance: float = 1e-4, h: float = 1e-5
) -> GradCheckReport:
    """Compare reverse-mode gradients of the full loss to central differences."""
    config = config or GRADCHECK_CONFIG
    batch, params = tiny_instance(config)

    def loss_fn(p):
        return forecaster.mse_loss(_forward(batch, p, config), batch.target_values, batch.query_mask)

    with GradTape() as tape:
        loss = loss_fn(params)
    analytic = de.backward(loss, tape, params)
    numeric = de.finite_difference(lambda p: loss_fn(p).item(), params, h=h)
    per_param = {}
    worst = ("", [], -1.0)
    for name in params.trainable():
        err = de.relative_error(analytic[name], numeric[name])
        idx = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        e = float(err.max()) if err.size else 0.0
        per_param[name] = e
        if e > worst[2]:
            worst = (name, [int(i) for i in idx], e)
    return GradCheckReport(
        tolerance=tolerance,
        max_rel_error=per_param,
        worst_param=worst[0],
        worst_index=worst[1],
        worst_error=worst[2],
        n_checked=sum(params[n].size for n in params.trainable()),
    )
