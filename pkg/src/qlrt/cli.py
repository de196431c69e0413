"""Command line interface: one entry point, batch subcommands.

Exit codes: 0 success, 1 operational error (bad data, missing file,
divergence), 2 usage error (malformed flags).  The environment variable
QLRT_THREADS caps BLAS-level parallelism; it must be applied before numpy
loads its backend, which is why it is handled at module import time.
"""

from __future__ import annotations

import os
import sys

_THREAD_ENV_ERROR: str | None = None


def _apply_thread_cap() -> None:
    """Propagate QLRT_THREADS to the BLAS runtimes.  Must run before numpy
    is imported; an invalid value is remembered and reported by main()."""
    global _THREAD_ENV_ERROR
    raw = os.environ.get("QLRT_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        _THREAD_ENV_ERROR = f"QLRT_THREADS must be a positive integer, got {raw!r}"
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ[var] = str(n)


_apply_thread_cap()

import json
import math

import click
import numpy as np

from . import analysis, container, elo, training
from .blockquant import dequantize, quantize
from .codebooks import CODEBOOK_NAMES, get_codebook
from .errors import QlrtError
from .paging import PagerConfig

_GEN_TYPES = ("nf4", "fp4-e2m1", "fp4-e3m0", "int4", "nf-eq4")
_PLACEMENT_MAP = {"all": "all_linear", "qv": "qv_only", "none": "none"}
_DTYPE_MAP = {
    "nf4": "nf4",
    "fp4": "fp4-e2m1",
    "fp4-e2m1": "fp4-e2m1",
    "fp4-e3m0": "fp4-e3m0",
    "int4": "int4",
    "nf-eq4": "nf-eq4",
    "fp32": "fp32",
}


def _parse_shape(_ctx, _param, value: str | None) -> tuple[int, ...] | None:
    if value is None:
        return None
    try:
        dims = tuple(int(d) for d in value.split(","))
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")
    if not dims or any(d < 1 for d in dims):
        raise click.BadParameter("all dimensions must be positive")
    return dims


def _read_f32(path: str, shape: tuple[int, ...] | None) -> np.ndarray:
    """Raw little-endian float32 tensor input."""
    data = np.fromfile(path, dtype="<f4")
    if shape is not None:
        expected = math.prod(shape)
        if expected != data.size:
            raise ValueError(
                f"{path}: shape {shape} needs {expected} elements, file holds {data.size}"
            )
        data = data.reshape(shape)
    return data.astype(np.float64)


def _parse_quant_config(token: str) -> analysis.QuantConfig:
    """Config tokens look like their report labels: nf4, nf4/b64, nf4/b64/dq256."""
    parts = token.split("/")
    name = parts[0]
    try:
        get_codebook(name)
    except ValueError as e:
        raise click.BadParameter(str(e))
    blocksize = 64
    double_quant = False
    blocksize2 = 256
    for part in parts[1:]:
        if part.startswith("b") and part[1:].isdigit():
            blocksize = int(part[1:])
        elif part == "dq":
            double_quant = True
        elif part.startswith("dq") and part[2:].isdigit():
            double_quant = True
            blocksize2 = int(part[2:])
        else:
            raise click.BadParameter(
                f"bad config part {part!r} in {token!r}; "
                "use <codebook>[/b<blocksize>][/dq[<blocksize2>]]"
            )
    if blocksize < 1 or blocksize2 < 1:
        raise click.BadParameter(f"block sizes must be positive in {token!r}")
    return analysis.QuantConfig(
        codebook=name,
        blocksize=blocksize,
        double_quant=double_quant,
        blocksize2=blocksize2,
    )


@click.group()
def cli() -> None:
    """Block-quantization, low-rank-adapter, and evaluation toolkit.

    Raw tensor inputs are flat little-endian float32 files; --shape gives
    the logical dimensions.  QLRT_THREADS caps BLAS parallelism.
    """


@cli.command("gen-codebook")
@click.option("--type", "type_", type=click.Choice(_GEN_TYPES), required=True,
              help="Codebook family to generate.")
@click.option("--bits", type=int, default=None,
              help="Bit width; must agree with the k implied by --type.")
def gen_codebook(type_: str, bits: int | None) -> None:
    """Print the codebook's representable values, one per line, ascending.

    Only distinct (emitted) values are listed; families whose table has a
    spare code reuse it for 0.0 and never emit it.
    """
    try:
        cb = get_codebook(type_, bits=bits)
    except ValueError as e:
        raise click.UsageError(str(e))
    for v in cb.emitted_values:
        click.echo(repr(float(v)))


@cli.command("quantize")
@click.option("--in", "in_path", required=True, help="Raw float32 LE tensor file.")
@click.option("--shape", callback=_parse_shape, default=None,
              help="Comma-separated dimensions, e.g. 4096,4096.")
@click.option("--codebook", type=click.Choice(CODEBOOK_NAMES), default="nf4",
              show_default=True, help="Codebook to quantize with.")
@click.option("--blocksize", type=click.IntRange(min=1), default=64,
              show_default=True, help="Elements per quantization block.")
@click.option("--dq/--no-dq", default=False, show_default=True,
              help="Double-quantize the per-block constants.")
@click.option("--blocksize2", type=click.IntRange(min=1), default=256,
              show_default=True, help="Constants per second-level block.")
@click.option("--out", "out_path", required=True, help="Container file to write.")
def quantize_cmd(in_path, shape, codebook, blocksize, dq, blocksize2, out_path):
    """Quantize a raw tensor into a container file."""
    x = _read_f32(in_path, shape)
    q = quantize(
        x,
        get_codebook(codebook),
        blocksize=blocksize,
        double_quant=dq,
        blocksize2=blocksize2,
    )
    n = container.save(q, out_path)
    from .doublequant import bits_per_param

    bpp = bits_per_param(
        q.codebook.bits, blocksize, (blocksize2, 8) if dq else None
    )
    click.echo(f"wrote {out_path}: {n} bytes, {bpp} bits/param")


@cli.command("dequantize")
@click.option("--in", "in_path", required=True, help="Container file to read.")
@click.option("--out", "out_path", required=True,
              help="Raw float32 LE tensor file to write.")
def dequantize_cmd(in_path, out_path):
    """Reconstruct a container back into a raw float32 tensor."""
    q = container.load(in_path)
    deq = dequantize(q).astype("<f4")
    with open(out_path, "wb") as fh:
        fh.write(deq.tobytes())
    click.echo(f"wrote {out_path}: {deq.size} elements, shape {q.shape}")


@cli.command("inspect")
@click.option("--in", "in_path", required=True, help="Container file to read.")
@click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of text.")
def inspect_cmd(in_path, as_json):
    """Dump a container's header without decoding the payload."""
    info = container.inspect_header(in_path)
    if as_json:
        click.echo(json.dumps(info, indent=2))
        return
    for key, value in info.items():
        click.echo(f"{key}: {value}")


@cli.command("quant-report")
@click.option("--in", "in_path", required=True, help="Raw float32 LE tensor file.")
@click.option("--shape", callback=_parse_shape, default=None,
              help="Comma-separated dimensions.")
@click.option("--config", "configs", multiple=True,
              help="Config token <codebook>[/b<blocksize>][/dq[<blocksize2>]]; "
                   "repeatable.  Default compares nf4, fp4 variants, int4, "
                   "and nf4 with DQ at blocksize 64.")
@click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of text.")
def quant_report_cmd(in_path, shape, configs, as_json):
    """Reconstruction error and code-usage report across configurations."""
    x = _read_f32(in_path, shape)
    if configs:
        cfgs = [_parse_quant_config(t) for t in configs]
    else:
        cfgs = [
            analysis.QuantConfig("nf4"),
            analysis.QuantConfig("fp4-e2m1"),
            analysis.QuantConfig("fp4-e3m0"),
            analysis.QuantConfig("int4"),
            analysis.QuantConfig("nf4", double_quant=True),
        ]
    rows = analysis.quant_error_report(x, cfgs)
    if as_json:
        payload = [
            {
                "label": r.label,
                "bits_per_param": r.bits_per_param,
                "mse": r.mse,
                "max_abs_err": r.max_abs_err,
                "entropy_bits": r.entropy_bits,
                "occupancy": list(r.occupancy),
            }
            for r in rows
        ]
        click.echo(json.dumps(payload, indent=2))
        return
    header = ("config", "bits/param", "mse", "max_abs_err", "entropy_bits")
    body = [
        (r.label, f"{r.bits_per_param:.6g}", f"{r.mse:.6e}",
         f"{r.max_abs_err:.6e}", f"{r.entropy_bits:.4f}")
        for r in rows
    ]
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(header)]
    click.echo("  ".join(h.ljust(widths[i]) for i, h in enumerate(header)))
    for row in body:
        click.echo("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))


def _parse_shapes_list(_ctx, _param, value):
    if value is None:
        return ()
    shapes = []
    for token in value.split(","):
        parts = token.lower().split("x")
        if len(parts) != 2 or not all(p.isdigit() and int(p) > 0 for p in parts):
            raise click.BadParameter(
                f"bad shape token {token!r}; expected e.g. 4096x4096,4096x11008"
            )
        shapes.append((int(parts[0]), int(parts[1])))
    return tuple(shapes)


@cli.command("memcalc")
@click.option("--params", type=click.IntRange(min=0), required=True,
              help="Total base parameter count.")
@click.option("--bits", type=click.IntRange(min=1), default=4, show_default=True,
              help="Quantized bit width k.")
@click.option("--blocksize", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--dq/--no-dq", default=True, show_default=True,
              help="Whether constants are double-quantized.")
@click.option("--blocksize2", type=click.IntRange(min=1), default=256, show_default=True)
@click.option("--rank", type=click.IntRange(min=0), default=0, show_default=True,
              help="Adapter rank (with --shapes).")
@click.option("--shapes", callback=_parse_shapes_list, default=None,
              help="Adapted layer shapes, e.g. 4096x4096,4096x11008.")
@click.option("--adapter-params", type=click.IntRange(min=0), default=None,
              help="Adapter parameter count; overrides --rank/--shapes.")
@click.option("--batch", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--seq-len", type=click.IntRange(min=1), default=512, show_default=True)
@click.option("--hidden", type=click.IntRange(min=1), default=4096, show_default=True)
@click.option("--segments", type=click.IntRange(min=1), default=1, show_default=True,
              help="Live activation-checkpoint boundaries.")
@click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of text.")
def memcalc_cmd(params, bits, blocksize, dq, blocksize2, rank, shapes,
                adapter_params, batch, seq_len, hidden, segments, as_json):
    """Estimate the training memory footprint; prints formulas with numbers."""
    cfg = analysis.MemoryConfig(
        params=params,
        bits=bits,
        blocksize=blocksize,
        double_quant=dq,
        blocksize2=blocksize2,
        rank=rank,
        adapted_shapes=shapes,
        adapter_params=adapter_params,
        batch_size=batch,
        seq_len=seq_len,
        hidden_size=hidden,
        checkpoint_segments=segments,
    )
    report = analysis.memory_report(cfg)
    if as_json:
        click.echo(json.dumps({
            "weights_bytes": report.weights_bytes,
            "adapter_bytes": report.adapter_bytes,
            "adapter_bytes_16bit": report.adapter_bytes_16bit,
            "input_gradient_bytes": report.input_gradient_bytes,
            "optimizer_state_bytes": report.optimizer_state_bytes,
            "total_bytes": report.total_bytes,
            "formulas": dict(report.formulas),
        }, indent=2))
        return
    click.echo(report.render())


@cli.command("normality")
@click.option("--in", "in_path", required=True, help="Raw float32 LE tensor file.")
@click.option("--shape", callback=_parse_shape, required=True,
              help="in,out dimensions; each column is one hidden unit.")
@click.option("--alpha", type=click.FloatRange(min=0, max=1, min_open=True,
              max_open=True), default=0.05, show_default=True,
              help="Rejection significance level.")
@click.option("--max-n", type=click.IntRange(min=3, max=5000), default=5000,
              show_default=True, help="Per-unit subsample cap.")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Subsampling seed.")
@click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of text.")
def normality_cmd(in_path, shape, alpha, max_n, seed, as_json):
    """Shapiro-Wilk scan over the hidden units of a weight matrix."""
    if len(shape) != 2:
        raise click.UsageError("--shape must be 2-d: in,out")
    w = _read_f32(in_path, shape)
    report = analysis.normality_scan(w, alpha=alpha, max_n=max_n, seed=seed)
    if as_json:
        click.echo(json.dumps({
            "alpha": report.alpha,
            "n_units": report.n_units,
            "n_tested": report.n_tested,
            "n_degenerate": report.n_degenerate,
            "n_rejected": report.n_rejected,
            "fraction_rejected": report.fraction_rejected,
        }, indent=2))
        return
    click.echo(f"units:     {report.n_units}")
    click.echo(f"tested:    {report.n_tested}")
    click.echo(f"degenerate:{report.n_degenerate:>6}")
    click.echo(f"rejected:  {report.n_rejected} at alpha={report.alpha}")
    click.echo(f"fraction_rejected: {report.fraction_rejected:.6f}")


@cli.command("train-toy")
@click.option("--task", type=click.Choice(training.TASKS), default="regression",
              show_default=True, help="Synthetic task.")
@click.option("--placement", type=click.Choice(tuple(_PLACEMENT_MAP)), default="all",
              show_default=True, help="Adapter placement (all, qv, none).")
@click.option("--dtype", type=click.Choice(tuple(_DTYPE_MAP)), default="nf4",
              show_default=True,
              help="Base weight storage; fp4 is the e2m1 variant, fp32 with "
                   "placement none is the dense full-finetune baseline.")
@click.option("--optimizer", type=click.Choice(training.OPTIMIZERS), default="plain",
              show_default=True, help="Where Adam moments live.")
@click.option("--budget-bytes", type=click.IntRange(min=1), default=None,
              help="Pager memory budget (paged optimizer only).")
@click.option("--backing-path", default=None,
              help="Pager backing file (paged optimizer only; default a temp file).")
@click.option("--steps", type=click.IntRange(min=1), default=500, show_default=True)
@click.option("--lr", type=click.FloatRange(min=0, min_open=True), default=0.01,
              show_default=True, help="Constant learning rate.")
@click.option("--batch-size", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--rank", type=click.IntRange(min=1), default=4, show_default=True,
              help="Adapter rank.")
@click.option("--alpha", type=click.FloatRange(min=0, min_open=True), default=4.0,
              show_default=True, help="Adapter scaling numerator.")
@click.option("--blocksize", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--dq/--no-dq", default=True, show_default=True,
              help="Double-quantize the base constants.")
@click.option("--out", "out_path", default=None,
              help="Write the step-by-step report as JSONL.")
def train_toy_cmd(task, placement, dtype, optimizer, budget_bytes, backing_path,
                  steps, lr, batch_size, seed, rank, alpha, blocksize, dq, out_path):
    """Train a toy model and print the report summary."""
    if optimizer != "paged" and (budget_bytes is not None or backing_path is not None):
        raise click.UsageError(
            "--budget-bytes/--backing-path apply to --optimizer paged only"
        )
    pager_config = None
    owned_backing = None
    if optimizer == "paged" and (budget_bytes is not None or backing_path is not None):
        if backing_path is None:
            import tempfile

            fd, owned_backing = tempfile.mkstemp(prefix="qlrt-pager-", suffix=".bin")
            os.close(fd)
            backing_path = owned_backing
        pager_config = PagerConfig(
            budget_bytes=budget_bytes if budget_bytes is not None else 1 << 20,
            backing_path=backing_path,
        )
    cfg = training.TrainConfig(
        learning_rate=lr, batch_size=batch_size, steps=steps, seed=seed
    )
    try:
        report = training.run_toy_training(
            task,
            _DTYPE_MAP[dtype],
            _PLACEMENT_MAP[placement],
            cfg,
            optimizer=optimizer,
            pager_config=pager_config,
            rank=rank,
            alpha=alpha,
            blocksize=blocksize,
            double_quant=dq,
        )
    finally:
        if owned_backing is not None and os.path.exists(owned_backing):
            os.unlink(owned_backing)
    if out_path is not None:
        report.write_jsonl(out_path)
    click.echo(
        f"task={report.task} dtype={report.dtype} placement={report.placement} "
        f"optimizer={report.optimizer} seed={report.seed} steps={report.steps}"
    )
    click.echo(f"final_train_loss:  {report.final_train_loss:.6e}")
    click.echo(f"initial_eval_loss: {report.initial_eval_loss:.6e}")
    click.echo(f"final_eval_loss:   {report.final_eval_loss:.6e}")
    if report.pager_stats is not None:
        stats = report.pager_stats
        click.echo(
            "pager: "
            f"faults={stats['faults']} evictions={stats['evictions']} "
            f"bytes_read={stats['bytes_read']} bytes_written={stats['bytes_written']} "
            f"peak_resident_bytes={stats['peak_resident_bytes']} "
            f"budget_bytes={stats['budget_bytes']}"
        )
    if out_path is not None:
        click.echo(f"wrote {out_path}")


@cli.command("elo")
@click.option("--input", "in_path", required=True,
              help="Judgment file (csv or jsonl).")
@click.option("--input-format", type=click.Choice(("csv", "jsonl")), default=None,
              help="Override the format inferred from the extension.")
@click.option("--k", type=click.FloatRange(min=0, min_open=True), default=32.0,
              show_default=True, help="Elo K factor.")
@click.option("--init", "init_rating", type=float, default=1000.0, show_default=True,
              help="Initial rating for every model.")
@click.option("--permutations", type=click.IntRange(min=1), default=10000,
              show_default=True, help="Full-shuffle replays to average over.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ci", type=click.FloatRange(min=0, max=1, min_open=True,
              max_open=True), default=0.95, show_default=True,
              help="Confidence level for the percentile interval.")
@click.option("--format", "out_format", type=click.Choice(("table", "json")),
              default="table", show_default=True)
@click.option("--lenient", is_flag=True,
              help="Skip malformed lines (with warnings) instead of aborting.")
def elo_cmd(in_path, input_format, k, init_rating, permutations, seed, ci,
            out_format, lenient):
    """Replay pairwise judgments into mean Elo ratings with CIs."""
    records, warnings = elo.load_judgments(
        in_path, fmt=input_format, strict=not lenient
    )
    for warning in warnings:
        click.echo(f"warning: {warning}", err=True)
    cfg = elo.EloConfig(
        k_factor=k,
        initial_rating=init_rating,
        n_permutations=permutations,
        seed=seed,
        ci_level=ci,
    )
    table = elo.run_tournament(records, cfg)
    click.echo(table.to_json() if out_format == "json" else table.render())


def main(argv: list[str] | None = None) -> int:
    """Entry point returning the process exit code."""
    if _THREAD_ENV_ERROR is not None:
        click.echo(f"error: {_THREAD_ENV_ERROR}", err=True)
        return 2
    try:
        cli.main(args=argv, standalone_mode=False, prog_name="qlrt")
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.UsageError as e:
        e.show()
        return 2
    except click.ClickException as e:
        e.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except (QlrtError, ValueError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
