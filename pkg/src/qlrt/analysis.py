"""Analysis utilities: normality scanning, quantization error reports, and
memory footprint estimates.

The normality scan asks whether trained weights actually look normal enough
for a normal-matched codebook: each hidden unit (column of an in x out
weight matrix) is one sample vector, tested with Shapiro-Wilk.  Gaussian
inputs should be rejected at roughly the significance level; heavy-tailed
inputs far above it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .blockquant import dequantize, quantize
from .codebooks import get_codebook
from .doublequant import bits_per_param
from .errors import DegenerateSampleError

__all__ = [
    "ShapiroResult",
    "shapiro_wilk",
    "NormalityReport",
    "normality_scan",
    "QuantConfig",
    "QuantErrorRow",
    "quant_error_report",
    "MemoryConfig",
    "MemoryReport",
    "memory_report",
]


# ---------------------------------------------------------------------------
# Shapiro-Wilk
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapiroResult:
    statistic: float
    p_value: float
    n: int


def shapiro_wilk(x: np.ndarray) -> ShapiroResult:
    """Shapiro-Wilk normality test (W statistic and p-value).

    Valid for sample sizes 3 through 5000; constant samples are degenerate
    (W is undefined) and raise :class:`DegenerateSampleError`.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if not 3 <= x.size <= 5000:
        raise ValueError(f"sample size must be in [3, 5000], got {x.size}")
    if np.ptp(x) == 0.0:
        raise DegenerateSampleError("constant sample has no spread to test")
    w, p = stats.shapiro(x)
    return ShapiroResult(statistic=float(w), p_value=float(p), n=int(x.size))


@dataclass(frozen=True)
class NormalityReport:
    alpha: float
    n_units: int
    n_tested: int
    n_degenerate: int
    n_rejected: int
    fraction_rejected: float
    p_values: np.ndarray = field(repr=False)
    statistics: np.ndarray = field(repr=False)


def normality_scan(
    weights: np.ndarray,
    alpha: float = 0.05,
    max_n: int = 5000,
    seed: int = 0,
) -> NormalityReport:
    """Shapiro-Wilk per hidden unit of a 2-d (in x out) weight matrix.

    Each column is one hidden unit and its ``in`` entries are that unit's
    sample; at least 3 rows are required.  Units longer than ``max_n`` are
    subsampled deterministically from ``(seed, unit)``.  Constant units are
    counted as degenerate and excluded from the rejection fraction.  With no
    subsampling the per-unit result moves with its column, so permuting
    columns permutes the results and leaves the fraction unchanged.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"weights must be 2-d (in x out), got ndim={w.ndim}")
    n_samples, n_units = w.shape
    if n_samples < 3:
        raise ValueError(f"need >= 3 samples per unit, got {n_samples}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    max_n = min(max_n, 5000)

    p_values = np.full(n_units, np.nan)
    statistics = np.full(n_units, np.nan)
    n_degenerate = 0
    for i in range(n_units):
        row = w[:, i]
        if n_samples > max_n:
            rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
            row = row[rng.choice(n_samples, size=max_n, replace=False)]
        try:
            res = shapiro_wilk(row)
        except DegenerateSampleError:
            n_degenerate += 1
            continue
        p_values[i] = res.p_value
        statistics[i] = res.statistic

    tested = n_units - n_degenerate
    rejected = int(np.sum(p_values[~np.isnan(p_values)] < alpha))
    return NormalityReport(
        alpha=alpha,
        n_units=n_units,
        n_tested=tested,
        n_degenerate=n_degenerate,
        n_rejected=rejected,
        fraction_rejected=rejected / tested if tested else math.nan,
        p_values=p_values,
        statistics=statistics,
    )


# ---------------------------------------------------------------------------
# quantization error report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantConfig:
    """One quantization configuration to evaluate."""

    codebook: str
    blocksize: int = 64
    double_quant: bool = False
    blocksize2: int = 256

    @property
    def label(self) -> str:
        tag = f"{self.codebook}/b{self.blocksize}"
        return tag + (f"/dq{self.blocksize2}" if self.double_quant else "")


@dataclass(frozen=True)
class QuantErrorRow:
    label: str
    bits_per_param: float
    mse: float
    max_abs_err: float
    entropy_bits: float
    occupancy: tuple[int, ...]


def quant_error_report(
    x: np.ndarray, configs: list[QuantConfig]
) -> list[QuantErrorRow]:
    """Quantize ``x`` under each config and report reconstruction error and
    code usage.

    MSE is exactly ``mean((x - dequantize(quantize(x)))**2)``; entropy is the
    Shannon entropy (bits) of the emitted-code histogram, a measure of how
    evenly the data type's levels are used.
    """
    x = np.asarray(x, dtype=np.float64)
    rows = []
    for cfg in configs:
        cb = get_codebook(cfg.codebook)
        q = quantize(
            x,
            cb,
            blocksize=cfg.blocksize,
            double_quant=cfg.double_quant,
            blocksize2=cfg.blocksize2,
        )
        deq = dequantize(q)
        err = x - deq
        codes = q.unpacked_codes()[: q.numel]
        counts = np.bincount(codes, minlength=cb.n_emitted)
        probs = counts[counts > 0] / codes.size
        entropy = float(-(probs * np.log2(probs)).sum())
        rows.append(
            QuantErrorRow(
                label=cfg.label,
                bits_per_param=bits_per_param(
                    cb.bits,
                    cfg.blocksize,
                    (cfg.blocksize2, 8) if cfg.double_quant else None,
                ),
                mse=float(np.mean(err * err)),
                max_abs_err=float(np.max(np.abs(err))),
                entropy_bits=entropy,
                occupancy=tuple(int(c) for c in counts),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# memory footprint estimate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryConfig:
    """Inputs to the footprint estimate.

    ``adapted_shapes`` lists the (in, out) shapes carrying rank-``rank``
    adapters; alternatively ``adapter_params`` gives the adapter parameter
    count directly (it wins if both are set).  ``checkpoint_segments`` is the
    number of activation-checkpoint boundaries whose input gradients are
    alive at once.
    """

    params: int
    bits: int = 4
    blocksize: int = 64
    double_quant: bool = True
    blocksize2: int = 256
    rank: int = 0
    adapted_shapes: tuple[tuple[int, int], ...] = ()
    adapter_params: int | None = None
    batch_size: int = 1
    seq_len: int = 512
    hidden_size: int = 4096
    checkpoint_segments: int = 1


@dataclass(frozen=True)
class MemoryReport:
    weights_bytes: int
    adapter_bytes: int
    adapter_bytes_16bit: int
    input_gradient_bytes: int
    optimizer_state_bytes: int
    total_bytes: int
    formulas: tuple[tuple[str, str], ...]

    def render(self) -> str:
        def fmt(n: int) -> str:
            return f"{n:,} B ({n / 2**20:.1f} MiB)"

        lines = [
            f"weights            {fmt(self.weights_bytes)}",
            f"adapters (32-bit)  {fmt(self.adapter_bytes)}",
            f"adapters (16-bit)  {fmt(self.adapter_bytes_16bit)}",
            f"input gradients    {fmt(self.input_gradient_bytes)}",
            f"optimizer state    {fmt(self.optimizer_state_bytes)}",
            f"total (32-bit adapters) {fmt(self.total_bytes)}",
            "",
            "formulas:",
        ]
        lines += [f"  {name}: {formula}" for name, formula in self.formulas]
        lines += [
            "",
            "note: covers quantized linear weights, adapters, Adam moments, and",
            "checkpointed input gradients only; a deployed model adds unquantized",
            "embeddings, norms, activations, and framework buffers, so measured",
            "end-to-end footprints run higher than this estimate.",
        ]
        return "\n".join(lines)


def memory_report(cfg: MemoryConfig) -> MemoryReport:
    """Estimate the steady-state training footprint.

    Every number is printed next to the formula that produced it; the totals
    equal the sum of the parts by construction.  Adapter storage is reported
    under both the 32-bit convention (4 bytes per parameter, matching the
    optimizer master copy) and the 16-bit convention (2 bytes, matching
    half-precision adapter weights).
    """
    if cfg.params < 0:
        raise ValueError("params must be nonnegative")
    bpp = bits_per_param(
        cfg.bits,
        cfg.blocksize,
        (cfg.blocksize2, 8) if cfg.double_quant else None,
    )
    weights = math.ceil(cfg.params * bpp / 8.0)

    if cfg.adapter_params is not None:
        adapter_params = cfg.adapter_params
    else:
        adapter_params = sum(cfg.rank * (h + o) for h, o in cfg.adapted_shapes)
    adapter32 = 4 * adapter_params
    adapter16 = 2 * adapter_params
    input_grad = 4 * cfg.batch_size * cfg.seq_len * cfg.hidden_size * cfg.checkpoint_segments
    optimizer = 2 * 4 * adapter_params
    total = weights + adapter32 + input_grad + optimizer

    formulas = (
        ("weights_bytes", f"params * bits_per_param / 8 = {cfg.params} * {bpp} / 8"),
        ("adapter_bytes", f"4 * adapter_params = 4 * {adapter_params}"),
        ("adapter_bytes_16bit", f"2 * adapter_params = 2 * {adapter_params}"),
        (
            "input_gradient_bytes",
            "4 * batch * seq_len * hidden * checkpoint_segments = "
            f"4 * {cfg.batch_size} * {cfg.seq_len} * {cfg.hidden_size} * {cfg.checkpoint_segments}",
        ),
        ("optimizer_state_bytes", f"2 * 4 * adapter_params = 8 * {adapter_params}"),
        ("total_bytes", "weights + adapters(32-bit) + input gradients + optimizer state"),
    )
    return MemoryReport(
        weights_bytes=weights,
        adapter_bytes=adapter32,
        adapter_bytes_16bit=adapter16,
        input_gradient_bytes=input_grad,
        optimizer_state_bytes=optimizer,
        total_bytes=total,
        formulas=formulas,
    )
