"""Quantized linear layers with low-rank adapters, and toy models built
from them.

A quantized linear layer stores its base weight block-quantized and
dequantizes it on every use (storage precision -> compute precision); the
trainable capacity is a pair of low-rank factors per adapter:

    Y = X W_deq + s (X L1) L2,   s = alpha / rank

The base weight receives no gradient.  Backward (hand-derived, no autodiff):

    dX  = dY W_deq^T + s (dY L2^T) L1^T
    dL2 = s (X L1)^T dY
    dL1 = s X^T (dY L2^T)

Layers carry transformer-flavored labels (q, k, v, o, ffn_up, ffn_down) so
adapter placements can be described in that vocabulary even though the toy
models are plain feed-forward stacks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .blockquant import BlockQuantized, dequantize, quantize
from .codebooks import Codebook

__all__ = [
    "LoraAdapter",
    "lora_init",
    "QLinear",
    "DenseLinear",
    "Layer",
    "ToyModel",
    "PLACEMENTS",
    "attach_adapters",
    "quantize_dense_stack",
]

PLACEMENTS = ("all_linear", "qv_only", "none")

_QV_LABELS = ("q", "v")


@dataclass
class LoraAdapter:
    """Trainable low-rank delta: contributes s * (X @ l1) @ l2."""

    rank: int
    alpha: float
    l1: np.ndarray  # (in_dim, rank)
    l2: np.ndarray  # (rank, out_dim)
    dropout_p: float = 0.0

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def lora_init(
    in_dim: int,
    out_dim: int,
    rank: int,
    alpha: float,
    rng: np.random.Generator,
    dropout_p: float = 0.0,
    dtype: np.dtype = np.float32,
) -> LoraAdapter:
    """l1 ~ N(0, (1/sqrt(rank))^2), l2 = 0: the adapter starts as an exact
    no-op while l1 already spans ``rank`` directions."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError(f"dropout_p must lie in [0, 1), got {dropout_p}")
    l1 = (rng.standard_normal((in_dim, rank)) / np.sqrt(rank)).astype(dtype)
    l2 = np.zeros((rank, out_dim), dtype=dtype)
    return LoraAdapter(rank=rank, alpha=alpha, l1=l1, l2=l2, dropout_p=dropout_p)


class QLinear:
    """Frozen base weight plus trainable adapters.

    The base is normally block-quantized and dequantized on every use; a
    plain ndarray base gives the half/full-precision-adapter variant of the
    same layer (frozen dense base, trainable adapters).
    """

    def __init__(
        self,
        base: BlockQuantized | np.ndarray,
        adapters: list[LoraAdapter] | None = None,
        dtype: np.dtype = np.float32,
    ):
        if len(base.shape) != 2:
            raise ValueError(f"base weight must be 2-d, got shape {base.shape}")
        self.base = base
        self.adapters = adapters if adapters is not None else []
        self.dtype = np.dtype(dtype)
        for ad in self.adapters:
            if ad.l1.shape[0] != base.shape[0] or ad.l2.shape[1] != base.shape[1]:
                raise ValueError(
                    f"adapter ({ad.l1.shape} x {ad.l2.shape}) does not match "
                    f"base shape {base.shape}"
                )

    @property
    def in_dim(self) -> int:
        return int(self.base.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.base.shape[1])

    def dequant_weight(self) -> np.ndarray:
        """Base weight at compute precision; dequantized per use, never cached
        on the layer."""
        if isinstance(self.base, BlockQuantized):
            return dequantize(self.base).astype(self.dtype)
        return self.base.astype(self.dtype, copy=False)

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, dict[str, Any]]:
        x = x.astype(self.dtype, copy=False)
        w = self.dequant_weight()
        y = x @ w
        branches = []
        for ad in self.adapters:
            xa = x
            mask = None
            if train and ad.dropout_p > 0.0:
                if rng is None:
                    raise ValueError("dropout needs an rng in train mode")
                keep = np.float64(1.0 - ad.dropout_p)
                mask = (rng.random(x.shape) >= ad.dropout_p).astype(self.dtype)
                mask /= self.dtype.type(keep)
                xa = x * mask
            t = xa @ ad.l1
            y = y + self.dtype.type(ad.scaling) * (t @ ad.l2)
            branches.append({"xa": xa, "t": t, "mask": mask})
        cache = {"x": x, "w": w, "branches": branches}
        return y, cache

    def backward(
        self, d_y: np.ndarray, cache: dict[str, Any]
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Returns (dX, grads) where grads maps adapter index to (dl1, dl2).
        The base weight is frozen: no gradient is produced for it."""
        d_y = d_y.astype(self.dtype, copy=False)
        d_x = d_y @ cache["w"].T
        grads: dict[str, np.ndarray] = {}
        for i, (ad, br) in enumerate(zip(self.adapters, cache["branches"])):
            s = self.dtype.type(ad.scaling)
            d_t = s * (d_y @ ad.l2.T)
            grads[f"adapter{i}.l2"] = s * (br["t"].T @ d_y)
            grads[f"adapter{i}.l1"] = br["xa"].T @ d_t
            d_xa = d_t @ ad.l1.T
            if br["mask"] is not None:
                d_xa = d_xa * br["mask"]
            d_x = d_x + d_xa
        return d_x, grads

    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        for i, ad in enumerate(self.adapters):
            out[f"adapter{i}.l1"] = ad.l1
            out[f"adapter{i}.l2"] = ad.l2
        return out


class DenseLinear:
    """Full-precision linear layer; trainable unless frozen."""

    def __init__(self, weight: np.ndarray, trainable: bool = True,
                 dtype: np.dtype = np.float32):
        self.dtype = np.dtype(dtype)
        self.w = weight.astype(self.dtype)
        self.trainable_flag = trainable

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, dict[str, Any]]:
        x = x.astype(self.dtype, copy=False)
        return x @ self.w, {"x": x}

    def backward(
        self, d_y: np.ndarray, cache: dict[str, Any]
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        d_y = d_y.astype(self.dtype, copy=False)
        d_x = d_y @ self.w.T
        grads = {"w": cache["x"].T @ d_y} if self.trainable_flag else {}
        return d_x, grads

    def trainable(self) -> dict[str, np.ndarray]:
        return {"w": self.w} if self.trainable_flag else {}


_ACTIVATIONS = ("identity", "tanh", "relu")


@dataclass
class Layer:
    label: str
    linear: QLinear | DenseLinear
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class ToyModel:
    """A stack of labeled linear layers with elementwise nonlinearities."""

    def __init__(self, layers: list[Layer], placement: str = "none"):
        if placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        self.layers = layers
        self.placement = placement

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, list[dict[str, Any]]]:
        caches = []
        h = x
        for layer in self.layers:
            z, lin_cache = layer.linear.forward(h, train=train, rng=rng)
            if layer.activation == "tanh":
                h = np.tanh(z)
            elif layer.activation == "relu":
                h = np.maximum(z, 0)
            else:
                h = z
            caches.append({"lin": lin_cache, "z": z, "h": h})
        return h, caches

    def backward(
        self, d_out: np.ndarray, caches: list[dict[str, Any]]
    ) -> dict[str, np.ndarray]:
        """Walk the stack in reverse; returns grads keyed by
        ``<label>.<param>`` for every trainable parameter."""
        grads: dict[str, np.ndarray] = {}
        d_h = d_out
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            if layer.activation == "tanh":
                d_z = d_h * (1.0 - cache["h"] * cache["h"])
            elif layer.activation == "relu":
                d_z = d_h * (cache["z"] > 0)
            else:
                d_z = d_h
            d_h, lin_grads = layer.linear.backward(d_z, cache["lin"])
            for name, g in lin_grads.items():
                grads[f"{layer.label}.{name}"] = g
        return grads

    def trainable_params(self) -> dict[str, np.ndarray]:
        """Name -> array views of everything the optimizer may update,
        in deterministic (layer, param) order."""
        params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            for name, arr in layer.linear.trainable().items():
                params[f"{layer.label}.{name}"] = arr
        return params

    def base_fingerprint(self) -> bytes:
        """Byte snapshot of every frozen quantized base; training must not
        change it."""
        parts = []
        for layer in self.layers:
            lin = layer.linear
            if not isinstance(lin, QLinear):
                continue
            if isinstance(lin.base, np.ndarray):
                parts.append(lin.base.tobytes())
                continue
            parts.append(lin.base.codes.tobytes())
            if lin.base.constants is not None:
                parts.append(lin.base.constants.tobytes())
            if lin.base.dq is not None:
                parts.append(lin.base.dq.c1.tobytes())
                parts.append(lin.base.dq.codes.tobytes())
                parts.append(np.float32(lin.base.dq.mu).tobytes())
        return b"".join(parts)


def attach_adapters(
    model: ToyModel,
    placement: str,
    rank: int,
    alpha: float,
    rng: np.random.Generator,
    dropout_p: float = 0.0,
) -> None:
    """Create adapters on the layers selected by ``placement``.

    ``all_linear`` covers every quantizable layer, ``qv_only`` the layers
    labeled q or v, ``none`` leaves the model adapter-free.  Adapter init
    draws from ``rng`` in layer order, so a given seed names one model.
    The rank is clamped per layer to min(in_dim, out_dim) so narrow output
    heads still get the widest adapter they can carry.
    """
    if placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}")
    model.placement = placement
    if placement == "none":
        return
    for layer in model.layers:
        if not isinstance(layer.linear, QLinear):
            continue
        if placement == "qv_only" and layer.label.split(".")[-1] not in _QV_LABELS:
            continue
        lin = layer.linear
        layer_rank = min(rank, lin.in_dim, lin.out_dim)
        lin.adapters.append(
            lora_init(
                lin.in_dim,
                lin.out_dim,
                layer_rank,
                alpha,
                rng,
                dropout_p=dropout_p,
                dtype=lin.dtype,
            )
        )


def quantize_dense_stack(
    weights: list[np.ndarray],
    codebook: Codebook,
    blocksize: int = 64,
    double_quant: bool = True,
    dtype: np.dtype = np.float32,
) -> list[QLinear]:
    """Quantize a list of dense weights into adapter-less QLinear layers."""
    return [
        QLinear(
            quantize(w, codebook, blocksize=blocksize, double_quant=double_quant),
            adapters=[],
            dtype=dtype,
        )
        for w in weights
    ]
