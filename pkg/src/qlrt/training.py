"""Toy training harness: Adam over adapter (or dense) parameters.

Two synthetic tasks are provided.  ``regression`` is a linear teacher-student
problem on a stack of six square layers carrying transformer-flavored labels,
sized so the adapter-placement ablation is expressible: the teacher differs
from the frozen base by a low-rank shift on every layer, so adapters on all
layers can track it while adapters on q/v alone cannot.  ``moons`` is a small
two-class problem (two interleaved half-circles) under a 3-layer tanh MLP
with logistic loss.

Determinism contract: the loop is single-threaded Python over numpy kernels.
For a fixed BLAS thread count, identical seeds and configs produce
bit-identical TrainReports.  All randomness flows from named substreams of
the config seed, so the two optimizer backends (plain and paged) see exactly
the same numbers and differ only in where the Adam moments live.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import TrainingDivergedError
from .codebooks import get_codebook
from .qlora import (
    DenseLinear,
    Layer,
    QLinear,
    ToyModel,
    attach_adapters,
)
from .blockquant import quantize
from .paging import Pager, PagerConfig, Slab, pager_open

TASKS = ("regression", "moons")
OPTIMIZERS = ("plain", "paged")
DTYPES = ("fp32", "nf4", "nf-eq4", "fp4-e2m1", "fp4-e3m0", "int4")

# substreams of the run seed; every consumer owns one stream id
_STREAM_INIT = 0
_STREAM_TEACHER = 1
_STREAM_ADAPTER = 2
_STREAM_EVAL = 3
_STREAM_DATA = 4
_STREAM_DROPOUT = 5


def _stream(seed: int, stream_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stream_id)))


# ---------------------------------------------------------------------------
# config and report


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    steps: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float = 0.3
    lr_schedule: str = "constant"
    seed: int = 0

    def validate(self) -> None:
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive and finite")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        if self.lr_schedule != "constant":
            raise ValueError("only the constant lr schedule is supported")


@dataclass(frozen=True)
class TrainReport:
    task: str
    dtype: str
    placement: str
    optimizer: str
    seed: int
    steps: int
    learning_rate: float
    losses: tuple[float, ...]
    grad_norms: tuple[float, ...]
    initial_eval_loss: float
    final_eval_loss: float
    pager_stats: dict | None = None

    @property
    def final_train_loss(self) -> float:
        return self.losses[-1]

    def summary(self) -> dict:
        out = {
            "record": "summary",
            "task": self.task,
            "dtype": self.dtype,
            "placement": self.placement,
            "optimizer": self.optimizer,
            "seed": self.seed,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "final_train_loss": self.final_train_loss,
            "initial_eval_loss": self.initial_eval_loss,
            "final_eval_loss": self.final_eval_loss,
        }
        if self.pager_stats is not None:
            out["pager"] = dict(self.pager_stats)
        return out

    def to_jsonl(self) -> str:
        """Line-delimited log: one record per step, then a summary record."""
        lines = [
            json.dumps({"record": "step", "step": i + 1, "loss": l, "grad_norm": g})
            for i, (l, g) in enumerate(zip(self.losses, self.grad_norms))
        ]
        lines.append(json.dumps(self.summary()))
        return "\n".join(lines) + "\n"

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


# ---------------------------------------------------------------------------
# tasks


def _mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target.astype(pred.dtype, copy=False)
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = (2.0 / diff.size) * diff
    return loss, grad


def _logistic_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean log(1 + exp(-y z)) with labels y in {-1, +1}."""
    y = target.astype(pred.dtype, copy=False)
    margin = -y * pred
    loss = float(np.mean(np.logaddexp(pred.dtype.type(0), margin), dtype=np.float64))
    grad = (-y * expit(margin)) / pred.dtype.type(pred.size)
    return loss, grad


class RegressionTask:
    """Linear teacher-student regression.

    The student base is a stack of square layers with identity activations;
    the teacher applies the same stack after shifting every layer by a random
    rank-``teacher_rank`` matrix whose entries have std ``teacher_delta_std``.
    Targets carry Gaussian observation noise, so every variant shares the
    same irreducible eval floor of noise_std**2 per output element.
    """

    name = "regression"
    labels = ("q", "k", "v", "o", "ffn_up", "ffn_down")

    def __init__(
        self,
        seed: int = 0,
        width: int = 16,
        teacher_rank: int = 2,
        teacher_delta_std: float = 0.05,
        noise_std: float = 0.02,
        eval_size: int = 1024,
    ):
        self.seed = seed
        self.width = width
        self.noise_std = float(noise_std)
        self.activations = ("identity",) * len(self.labels)
        rng_init = _stream(seed, _STREAM_INIT)
        rng_teacher = _stream(seed, _STREAM_TEACHER)
        rng_eval = _stream(seed, _STREAM_EVAL)
        w = width
        self.base_weights = [
            rng_init.standard_normal((w, w)) / math.sqrt(w) for _ in self.labels
        ]
        self.teacher_weights = []
        for base in self.base_weights:
            a = rng_teacher.standard_normal((w, teacher_rank))
            b = rng_teacher.standard_normal((teacher_rank, w))
            delta = (teacher_delta_std / math.sqrt(teacher_rank)) * (a @ b)
            self.teacher_weights.append(base + delta)
        self.eval_x = rng_eval.standard_normal((eval_size, w))
        self.eval_y = self._teacher(self.eval_x) + self.noise_std * (
            rng_eval.standard_normal((eval_size, w))
        )

    def _teacher(self, x: np.ndarray) -> np.ndarray:
        h = x
        for wt in self.teacher_weights:
            h = h @ wt
        return h

    def sample_batch(self, rng: np.random.Generator, n: int):
        x = rng.standard_normal((n, self.width))
        y = self._teacher(x) + self.noise_std * rng.standard_normal((n, self.width))
        return x.astype(np.float32), y.astype(np.float32)

    def loss_and_grad(self, pred: np.ndarray, target: np.ndarray):
        return _mse_loss(pred, target)

    def eval_loss(self, model: ToyModel) -> float:
        pred, _ = model.forward(self.eval_x)
        diff = pred.astype(np.float64) - self.eval_y
        return float(np.mean(diff * diff))


def _sample_moons(rng: np.random.Generator, n: int, noise: float):
    """Two interleaved half-circles; labels are -1 / +1."""
    cls = rng.integers(0, 2, size=n)
    theta = rng.random(n) * math.pi
    x = np.empty((n, 2))
    pos = cls == 1
    x[pos, 0] = np.cos(theta[pos])
    x[pos, 1] = np.sin(theta[pos])
    x[~pos, 0] = 1.0 - np.cos(theta[~pos])
    x[~pos, 1] = 0.5 - np.sin(theta[~pos])
    x += noise * rng.standard_normal((n, 2))
    x -= np.array([0.5, 0.25])
    y = (2.0 * cls - 1.0).reshape(n, 1)
    return x, y


class MoonsTask:
    """Two-moons classification under a 3-layer tanh MLP with logistic loss."""

    name = "moons"
    labels = ("q", "v", "o")

    def __init__(
        self,
        seed: int = 0,
        hidden: int = 16,
        noise: float = 0.1,
        eval_size: int = 512,
    ):
        self.seed = seed
        self.noise = float(noise)
        self.activations = ("tanh", "tanh", "identity")
        dims = [(2, hidden), (hidden, hidden), (hidden, 1)]
        rng_init = _stream(seed, _STREAM_INIT)
        self.base_weights = [
            rng_init.standard_normal(d) / math.sqrt(d[0]) for d in dims
        ]
        rng_eval = _stream(seed, _STREAM_EVAL)
        self.eval_x, self.eval_y = _sample_moons(rng_eval, eval_size, self.noise)

    def sample_batch(self, rng: np.random.Generator, n: int):
        x, y = _sample_moons(rng, n, self.noise)
        return x.astype(np.float32), y.astype(np.float32)

    def loss_and_grad(self, pred: np.ndarray, target: np.ndarray):
        return _logistic_loss(pred, target)

    def eval_loss(self, model: ToyModel) -> float:
        pred, _ = model.forward(self.eval_x)
        loss, _ = _logistic_loss(
            pred.astype(np.float64), self.eval_y.astype(np.float64)
        )
        return loss


def make_task(name: str, seed: int = 0, **kwargs):
    if name == "regression":
        return RegressionTask(seed=seed, **kwargs)
    if name == "moons":
        return MoonsTask(seed=seed, **kwargs)
    raise ValueError(f"unknown task {name!r}; expected one of {TASKS}")


# ---------------------------------------------------------------------------
# model construction


def build_model(
    task,
    dtype: str = "nf4",
    placement: str = "all_linear",
    rank: int = 4,
    alpha: float = 4.0,
    blocksize: int = 64,
    double_quant: bool = True,
    dropout_p: float = 0.0,
    seed: int = 0,
    precision: str = "low",
) -> ToyModel:
    """Assemble a ToyModel over the task's base weights.

    dtype fp32 with placement none is the dense full-finetune baseline; any
    other dtype freezes a block-quantized base and trains adapters only.
    fp32 with adapters freezes the dense base (the full-precision-adapter
    comparison point).
    """
    if dtype not in DTYPES:
        raise ValueError(f"unknown dtype {dtype!r}; expected one of {DTYPES}")
    if precision not in ("low", "high"):
        raise ValueError("precision must be 'low' or 'high'")
    np_dtype = np.float64 if precision == "high" else np.float32
    layers = []
    for label, activation, w in zip(
        task.labels, task.activations, task.base_weights
    ):
        if dtype == "fp32":
            if placement == "none":
                lin = DenseLinear(w, trainable=True, dtype=np_dtype)
            else:
                lin = QLinear(w.astype(np_dtype), adapters=[], dtype=np_dtype)
        else:
            q = quantize(
                w,
                get_codebook(dtype),
                blocksize=blocksize,
                double_quant=double_quant,
            )
            lin = QLinear(q, adapters=[], dtype=np_dtype)
        layers.append(Layer(label=label, linear=lin, activation=activation))
    model = ToyModel(layers)
    attach_adapters(
        model,
        placement,
        rank,
        alpha,
        _stream(seed, _STREAM_ADAPTER),
        dropout_p=dropout_p,
    )
    model.dtype_label = dtype
    return model


# ---------------------------------------------------------------------------
# optimizer


class PlainMomentStore:
    """Adam moments as ordinary resident arrays."""

    def __init__(self):
        self._state: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def update(self, name: str, param: np.ndarray, fn) -> None:
        state = self._state.get(name)
        if state is None:
            state = (np.zeros_like(param), np.zeros_like(param))
            self._state[name] = state
        fn(*state)

    def close(self) -> None:
        pass


class PagedMomentStore:
    """Adam moments in pager slabs: one slab per parameter holding the first
    then the second moment.  The update runs on array views over the slab
    bytes, so the arithmetic is the exact code path the plain store runs."""

    def __init__(self, pager: Pager):
        self.pager = pager
        self._slabs: dict[str, Slab] = {}

    def update(self, name: str, param: np.ndarray, fn) -> None:
        slab = self._slabs.get(name)
        if slab is None:
            slab = self.pager.alloc(2 * param.nbytes)
            self._slabs[name] = slab

        def run(view: memoryview) -> None:
            flat = np.frombuffer(view, dtype=param.dtype)
            m = flat[: param.size].reshape(param.shape)
            v = flat[param.size :].reshape(param.shape)
            fn(m, v)

        self.pager.with_slab(slab, run)

    def close(self) -> None:
        pass


def clip_global_norm(
    grads: dict[str, np.ndarray], order: list[str], max_norm: float
) -> float:
    """Scale all gradients in place when their joint 2-norm exceeds
    ``max_norm``; returns the pre-clip norm."""
    total = 0.0
    for name in order:
        g = grads[name]
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for name in order:
            g = grads[name]
            g *= g.dtype.type(scale)
    return norm


class AdamOptimizer:
    """Adam with bias correction; moment placement is delegated to the store
    so paged and plain runs share every arithmetic instruction."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig, store):
        self.params = params
        self.cfg = cfg
        self.store = store
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.adam_beta1 ** self.t
        bc2 = 1.0 - cfg.adam_beta2 ** self.t
        for name, param in self.params.items():
            g = grads[name]

            def upd(m, v, g=g, param=param):
                m *= cfg.adam_beta1
                m += (1.0 - cfg.adam_beta1) * g
                v *= cfg.adam_beta2
                v += (1.0 - cfg.adam_beta2) * (g * g)
                step = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
                param -= cfg.learning_rate * step

            self.store.update(name, param, upd)


# ---------------------------------------------------------------------------
# trainer


def train_toy(
    model: ToyModel,
    task,
    cfg: TrainConfig,
    optimizer: str = "plain",
    pager_config: PagerConfig | None = None,
) -> TrainReport:
    """Run Adam with global grad-norm clipping; returns the full trajectory.

    optimizer="paged" keeps the Adam moments in an LRU page cache under
    ``pager_config`` (a default single-MiB budget in a temp file when
    omitted); the resulting values are bit-identical to the plain run.
    Raises TrainingDivergedError the moment a non-finite loss or gradient
    appears.
    """
    cfg.validate()
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
    params = model.trainable_params()
    order = list(params)
    rng_data = _stream(cfg.seed, _STREAM_DATA)
    rng_dropout = _stream(cfg.seed, _STREAM_DROPOUT)
    fingerprint = model.base_fingerprint()

    pager = None
    owned_backing = None
    if optimizer == "paged":
        if pager_config is None:
            fd, owned_backing = tempfile.mkstemp(prefix="qlrt-pager-", suffix=".bin")
            os.close(fd)
            pager_config = PagerConfig(
                budget_bytes=1 << 20, backing_path=owned_backing
            )
        pager = pager_open(pager_config)
        store = PagedMomentStore(pager)
    else:
        store = PlainMomentStore()

    try:
        opt = AdamOptimizer(params, cfg, store)
        initial_eval = task.eval_loss(model)
        losses: list[float] = []
        norms: list[float] = []
        for step in range(1, cfg.steps + 1):
            x, y = task.sample_batch(rng_data, cfg.batch_size)
            pred, caches = model.forward(x, train=True, rng=rng_dropout)
            loss, d_pred = task.loss_and_grad(pred, y)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
            grads = model.backward(d_pred, caches)
            grad_norm = clip_global_norm(grads, order, cfg.max_grad_norm)
            if not math.isfinite(grad_norm):
                raise TrainingDivergedError(
                    f"non-finite gradient norm at step {step}"
                )
            opt.step(grads)
            losses.append(loss)
            norms.append(grad_norm)
        final_eval = task.eval_loss(model)
    finally:
        store.close()
        if pager is not None:
            pager.close()
        if owned_backing is not None:
            os.unlink(owned_backing)

    if model.base_fingerprint() != fingerprint:
        raise RuntimeError("frozen base weights changed during training")

    pager_stats = None
    if pager is not None:
        pager_stats = {
            "budget_bytes": pager.config.budget_bytes,
            "page_bytes": pager.config.page_bytes,
            "faults": pager.faults,
            "evictions": pager.evictions,
            "bytes_read": pager.bytes_read,
            "bytes_written": pager.bytes_written,
            "peak_resident_bytes": pager.peak_resident_bytes,
        }
    return TrainReport(
        task=task.name,
        dtype=getattr(model, "dtype_label", "fp32"),
        placement=model.placement,
        optimizer=optimizer,
        seed=cfg.seed,
        steps=cfg.steps,
        learning_rate=cfg.learning_rate,
        losses=tuple(losses),
        grad_norms=tuple(norms),
        initial_eval_loss=initial_eval,
        final_eval_loss=final_eval,
        pager_stats=pager_stats,
    )


def run_toy_training(
    task_name: str,
    dtype: str,
    placement: str,
    cfg: TrainConfig,
    optimizer: str = "plain",
    pager_config: PagerConfig | None = None,
    rank: int = 4,
    alpha: float = 4.0,
    blocksize: int = 64,
    double_quant: bool = True,
    dropout_p: float = 0.0,
    task_kwargs: dict | None = None,
) -> TrainReport:
    """Build task and model from the config seed, then train."""
    task = make_task(task_name, seed=cfg.seed, **(task_kwargs or {}))
    model = build_model(
        task,
        dtype=dtype,
        placement=placement,
        rank=rank,
        alpha=alpha,
        blocksize=blocksize,
        double_quant=double_quant,
        dropout_p=dropout_p,
        seed=cfg.seed,
    )
    return train_toy(model, task, cfg, optimizer=optimizer, pager_config=pager_config)
