"""Closed-form FLOP model of the hybrid block and an empirical timing harness.

All analytic counts are exact integer polynomials evaluated with Python
ints (no overflow). The block cost decomposes into a quadratic attention
interaction term 2L^2D and linear terms 8LDN + 18LD^2; their crossover
length is 9D + 4N.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .model import MFAConfig, MFANet
from .tensor import no_grad

__all__ = [
    "CostBreakdown",
    "flops_mamba",
    "flops_ffn",
    "flops_attention",
    "flops_mfa",
    "attention_quadratic_term",
    "linear_terms",
    "critical_length",
    "ProfileRow",
    "profile",
    "write_profile_csv",
]

PROFILE_CSV_HEADER = "length,analytic_flops_mfa,analytic_flops_attn_only,measured_ms_mfa,measured_ms_attn_only"


def _check_positive(**kwargs):
    for name, value in kwargs.items():
        if not isinstance(value, int) or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")


def flops_mamba(length: int, dim: int, state: int) -> int:
    """Per-layer SSM cost 8LDN + 6LD^2 (expansion fixed at E = 2D)."""
    _check_positive(length=length, dim=dim, state=state)
    return 8 * length * dim * state + 6 * length * dim * dim


def flops_ffn(length: int, dim: int) -> int:
    """Feed-forward cost 8LD^2 (two linear maps between D and 4D)."""
    _check_positive(length=length, dim=dim)
    return 8 * length * dim * dim


def flops_attention(length: int, dim: int) -> int:
    """Self-attention cost 2L^2D + 4LD^2 (pairwise interaction + projections)."""
    _check_positive(length=length, dim=dim)
    return 2 * length * length * dim + 4 * length * dim * dim


def attention_quadratic_term(length: int, dim: int) -> int:
    """The pairwise-interaction part of attention alone: 2L^2D."""
    _check_positive(length=length, dim=dim)
    return 2 * length * length * dim


def linear_terms(length: int, dim: int, state: int) -> int:
    """All length-linear block terms, 8LDN + 18LD^2 (single SSM layer count)."""
    _check_positive(length=length, dim=dim, state=state)
    return 8 * length * dim * state + 18 * length * dim * dim


@dataclass(frozen=True)
class CostBreakdown:
    """Exact per-block FLOP counts for one hybrid block.

    ``total`` composes mamba_layers SSM layers + one FFN + one attention
    layer. ``single_mamba_total`` is the closed form 8LDN + 18LD^2 + 2L^2D,
    i.e. the block cost counting exactly one SSM layer; it equals ``total``
    when ``mamba_layers == 1``.
    """

    length: int
    dim: int
    state: int
    mamba_layers: int
    mamba: int
    ffn: int
    attention: int
    total: int
    single_mamba_total: int


def flops_mfa(length: int, dim: int, state: int, mamba_layers: int = 2) -> CostBreakdown:
    _check_positive(length=length, dim=dim, state=state, mamba_layers=mamba_layers)
    mamba = flops_mamba(length, dim, state)
    ffn = flops_ffn(length, dim)
    attn = flops_attention(length, dim)
    return CostBreakdown(
        length=length,
        dim=dim,
        state=state,
        mamba_layers=mamba_layers,
        mamba=mamba,
        ffn=ffn,
        attention=attn,
        total=mamba_layers * mamba + ffn + attn,
        single_mamba_total=linear_terms(length, dim, state) + attention_quadratic_term(length, dim),
    )


def critical_length(dim: int, state: int) -> int:
    """Crossover length 9D + 4N where 2L^2D equals 8LDN + 18LD^2 exactly."""
    _check_positive(dim=dim, state=state)
    lc = 9 * dim + 4 * state
    if attention_quadratic_term(lc, dim) != linear_terms(lc, dim, state):
        raise ArithmeticError("crossover identity violated")  # unreachable: exact integers
    return lc


# ---------------------------------------------------------------------------
# empirical timing


@dataclass
class ProfileRow:
    length: int
    analytic_flops_mfa: int
    analytic_flops_attn_only: int
    measured_ms_mfa: float
    measured_ms_attn_only: float
    flagged: bool = False  # timing spread above 20% of the median


def _pad_length(length: int, kernel: int, stride: int) -> int:
    if length < kernel:
        return kernel
    rem = (length - kernel) % stride
    return length if rem == 0 else length + stride - rem


def _time_forward(model: MFANet, length: int, repeats: int, rng) -> tuple[float, bool]:
    tokens = rng.integers(0, model.config.vocab_size, size=length)
    with no_grad():
        model.predict(tokens, 1)  # warmup, discarded
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            model.predict(tokens, 1)
            times.append((time.perf_counter() - start) * 1e3)
    median = float(np.median(times))
    spread = float(np.max(np.abs(np.array(times) - median)))
    return median, spread > 0.2 * median


def profile(
    config: MFAConfig,
    lengths: list[int],
    repeats: int = 5,
    seed: int = 0,
    dtype=np.float32,
) -> list[ProfileRow]:
    """Analytic and measured cost per input length.

    The analytic hybrid column evaluates the block closed forms at the
    post-downsample length (the stack runs on the compressed sequence),
    times the block count; the attention-only column evaluates the
    attention closed form at the full length. Measurements time one
    forward pass of each model (median of ``repeats`` runs after one
    discarded warmup) single-threadedly; rows whose timing spread exceeds
    20% of the median are flagged, not failed.
    """
    if sorted(lengths) != list(lengths):
        raise ValueError("lengths must be sorted ascending")
    if repeats < 5:
        raise ValueError("need at least 5 timed repeats")
    rng = np.random.default_rng(seed)
    mfa_model = MFANet(config, seed=seed, dtype=dtype)
    attn_config = MFAConfig(
        vocab_size=config.vocab_size,
        model_dim=config.model_dim,
        state_dim=config.state_dim,
        heads=config.heads,
        n_blocks=config.n_blocks,
        n_mamba_per_block=config.n_mamba_per_block,
        downsample_kernel=1,
        downsample_stride=1,
        diffusion_steps=config.diffusion_steps,
        order="SA-only",
    )
    attn_model = MFANet(attn_config, seed=seed, dtype=dtype)

    rows = []
    for length in lengths:
        padded = _pad_length(length, config.downsample_kernel, config.downsample_stride)
        compressed = (padded - config.downsample_kernel) // config.downsample_stride + 1
        analytic_mfa = config.n_blocks * flops_mfa(
            compressed, config.model_dim, config.state_dim, config.n_mamba_per_block
        ).total
        analytic_attn = config.n_blocks * flops_attention(padded, config.model_dim)
        ms_mfa, flag_a = _time_forward(mfa_model, padded, repeats, rng)
        ms_attn, flag_b = _time_forward(attn_model, padded, repeats, rng)
        rows.append(
            ProfileRow(
                length=padded,
                analytic_flops_mfa=analytic_mfa,
                analytic_flops_attn_only=analytic_attn,
                measured_ms_mfa=ms_mfa,
                measured_ms_attn_only=ms_attn,
                flagged=flag_a or flag_b,
            )
        )
    return rows


def write_profile_csv(rows: list[ProfileRow], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROFILE_CSV_HEADER.split(","))
        for row in rows:
            writer.writerow(
                [
                    row.length,
                    row.analytic_flops_mfa,
                    row.analytic_flops_attn_only,
                    f"{row.measured_ms_mfa:.3f}",
                    f"{row.measured_ms_attn_only:.3f}",
                ]
            )
