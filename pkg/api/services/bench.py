"""
Scan-versus-attention efficiency harness.

Times one forward pass of a selective scan and of a causal self-attention layer
of matched width over increasing sequence lengths, and records closed-form FLOP
counts next to the measurements:

    scan       9 * L * n * d         (discretize, input term, recurrence, read-out)
    attention  4 * L^2 * d + 8 * L * d^2   (QK^T and AV, plus the four projections)
"""

import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from ..errors import InvalidParameterError
from ..models.ssm_core import selective_scan

logger = logging.getLogger(__name__)

BENCH_KINDS = ("scan", "attention")
SCAN_FLOPS_PER_ELEMENT = 9
ATTENTION_QUADRATIC = 4
ATTENTION_LINEAR = 8
BYTES_PER_FLOAT = 4


@dataclass
class BenchRecord:
    kind: str
    length: int
    seconds: float
    flops: int
    peak_memory_bytes: int

    def __post_init__(self):
        if self.kind not in BENCH_KINDS:
            raise InvalidParameterError(f"unknown benchmark kind '{self.kind}'")
        if not self.seconds > 0:
            raise InvalidParameterError(f"measured time must be positive, got {self.seconds}")


def scan_flops(length: int, d_state: int, width: int) -> int:
    return SCAN_FLOPS_PER_ELEMENT * length * d_state * width


def attention_flops(length: int, width: int) -> int:
    return ATTENTION_QUADRATIC * length**2 * width + ATTENTION_LINEAR * length * width**2


def scan_memory(length: int, d_state: int, width: int) -> int:
    # a, b, the up-sweep levels (one extra copy in total) and the read-out
    return 4 * length * d_state * width * BYTES_PER_FLOAT


def attention_memory(length: int, width: int) -> int:
    return (length * length + 4 * length * width) * BYTES_PER_FLOAT


def _median_seconds(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def _scan_case(length: int, width: int, d_state: int, generator: torch.Generator, mode: str):
    u = torch.randn(1, length, width, generator=generator)
    delta = F.softplus(torch.randn(1, length, width, generator=generator)) * 0.1
    A = -torch.rand(width, d_state, generator=generator) - 0.5
    B = torch.randn(1, length, d_state, generator=generator)
    C = torch.randn(1, length, d_state, generator=generator)
    return lambda: selective_scan(u, delta, A, B, C, mode=mode)


def _attention_case(length: int, width: int, generator: torch.Generator):
    x = torch.randn(1, length, width, generator=generator)
    w_qkv = torch.randn(3 * width, width, generator=generator) / math.sqrt(width)
    w_out = torch.randn(width, width, generator=generator) / math.sqrt(width)
    mask = torch.triu(torch.ones(length, length, dtype=torch.bool), diagonal=1)

    def run():
        q, k, v = F.linear(x, w_qkv).chunk(3, dim=-1)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(width)
        weights = torch.softmax(scores.masked_fill(mask, float("-inf")), dim=-1)
        return F.linear(weights @ v, w_out)

    return run


def bench_scan_vs_attention(
    lengths: Sequence[int],
    repeats: int = 5,
    width: int = 64,
    d_state: int = 16,
    warmup: int = 3,
    seed: int = 0,
    scan_mode: str = "parallel",
) -> List[BenchRecord]:
    """Median wall time per forward pass for both kinds at every length, single-threaded."""
    lengths = list(lengths)
    if not lengths or lengths != sorted(lengths) or len(set(lengths)) != len(lengths):
        raise InvalidParameterError(f"lengths must be strictly ascending, got {lengths}")
    if repeats < 3:
        raise InvalidParameterError(f"repeats must be >= 3, got {repeats}")

    previous_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    records: List[BenchRecord] = []
    try:
        with torch.inference_mode():
            for length in lengths:
                generator = torch.Generator().manual_seed(seed + length)
                scan_time = _median_seconds(_scan_case(length, width, d_state, generator, scan_mode), repeats, warmup)
                records.append(
                    BenchRecord("scan", length, scan_time, scan_flops(length, d_state, width), scan_memory(length, d_state, width))
                )
                attn_time = _median_seconds(_attention_case(length, width, generator), repeats, warmup)
                records.append(
                    BenchRecord("attention", length, attn_time, attention_flops(length, width), attention_memory(length, width))
                )
                logger.info(f"L={length}: scan {scan_time * 1e3:.2f} ms, attention {attn_time * 1e3:.2f} ms")
    finally:
        torch.set_num_threads(previous_threads)
    return records


def doubling_ratios(records: Sequence[BenchRecord], kind: str) -> List[Tuple[int, int, float]]:
    """(L, L', t(L')/t(L)) for consecutive measured lengths of one kind."""
    rows = sorted((r for r in records if r.kind == kind), key=lambda r: r.length)
    return [(a.length, b.length, b.seconds / a.seconds) for a, b in zip(rows, rows[1:])]


def summary_table(records: Sequence[BenchRecord]) -> str:
    lines = [f"{'kind':<10} {'L':>7} {'median ms':>11} {'GFLOPs':>10} {'mem MiB':>9}"]
    for r in sorted(records, key=lambda r: (r.kind, r.length)):
        lines.append(
            f"{r.kind:<10} {r.length:>7} {r.seconds * 1e3:>11.3f} {r.flops / 1e9:>10.4f} {r.peak_memory_bytes / 2**20:>9.2f}"
        )
    for kind in BENCH_KINDS:
        for a, b, ratio in doubling_ratios(records, kind):
            lines.append(f"{kind} time ratio L={b}/L={a}: {ratio:.2f}")
    return "\n".join(lines)


def plot_bench(records: Sequence[BenchRecord], path: Union[str, Path]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(1, 1, figsize=(6, 4))
    for kind, marker in zip(BENCH_KINDS, ("o", "s")):
        rows = sorted((r for r in records if r.kind == kind), key=lambda r: r.length)
        ax.loglog([r.length for r in rows], [r.seconds for r in rows], marker=marker, label=kind, base=2)
    ax.set_xlabel("sequence length L")
    ax.set_ylabel("median forward time (s)")
    ax.set_title("Selective scan vs causal attention")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    plt.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench(records: Sequence[BenchRecord], out_dir: Union[str, Path], settings: Dict = None, plot: bool = True) -> Path:
    """Write bench.json (metadata + data), bench.txt and optionally bench.png; returns the JSON path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "metadata": {
            "kinds": list(BENCH_KINDS),
            "lengths": sorted({r.length for r in records}),
            "flop_model": {
                "scan": f"{SCAN_FLOPS_PER_ELEMENT}*L*n*d",
                "attention": f"{ATTENTION_QUADRATIC}*L^2*d + {ATTENTION_LINEAR}*L*d^2",
            },
            "settings": settings or {},
        },
        "data": [asdict(r) for r in records],
    }
    json_path = out_dir / "bench.json"
    json_path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    (out_dir / "bench.txt").write_text(summary_table(records) + "\n", encoding="utf-8")
    if plot:
        plot_bench(records, out_dir / "bench.png")
    logger.info(f"Benchmark results written to {out_dir}")
    return json_path
