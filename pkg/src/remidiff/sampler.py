"""Ancestral reverse-diffusion generation from an all-mask sequence.

Denoising runs t = T..1 (optionally over an evenly spaced subset of
steps, always ending at t = 1) and at each transition samples or argmaxes
the closed-form reverse distribution per position. Once a position is
unmasked it never changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, p_reverse

__all__ = ["SamplerConfig", "generate", "batch_generate"]


@dataclass(frozen=True)
class SamplerConfig:
    length: int
    steps: int | None = None  # None: use every schedule step
    temperature: float = 1.0
    seed: int = 0
    decode_policy: str = "sample"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.decode_policy not in ("sample", "greedy"):
            raise ValueError(f"unknown decode policy {self.decode_policy!r}")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")


def retained_steps(total: int, requested: int | None) -> list[int]:
    """Evenly spaced descending step subset; always contains t=1."""
    if requested is None or requested >= total:
        return list(range(total, 0, -1))
    picks = np.unique(np.round(np.linspace(total, 1, requested)).astype(int))[::-1]
    steps = sorted(set(picks.tolist()) | {1}, reverse=True)
    return steps


def generate(model, sched: NoiseSchedule, cfg: SamplerConfig, rng=None):
    """Generate one token sequence; returns (tokens, trace).

    ``trace`` lists (step, masked_count_before_transition) and a final
    (0, 0) row. Sampling is reproducible given the config seed.
    """
    vocab_size = model.config.vocab_size
    mask = vocab_size - 1
    if sched.steps != model.config.diffusion_steps:
        raise ValueError(
            f"schedule has {sched.steps} steps but the model was built for "
            f"{model.config.diffusion_steps}"
        )
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    x = np.full(cfg.length, mask, dtype=np.int64)
    steps = retained_steps(sched.steps, cfg.steps)
    trace = []
    for i, t in enumerate(steps):
        s = steps[i + 1] if i + 1 < len(steps) else 0
        trace.append((t, int(np.sum(x == mask))))
        logits = model.predict(x, t)
        probs = p_reverse(logits, x, t, sched, s=s, temperature=cfg.temperature)
        if cfg.decode_policy == "greedy":
            x = probs.argmax(axis=-1)
        else:
            cdf = probs.cumsum(axis=-1)
            cdf[:, -1] = 1.0  # guard against float rounding below 1
            draws = rng.random((cfg.length, 1))
            x = (draws < cdf).argmax(axis=-1)
    remaining = int(np.sum(x == mask))
    trace.append((0, remaining))
    if remaining:
        raise RuntimeError(f"sampling incomplete: {remaining} mask tokens remain at t=0")
    return x.astype(np.int32), trace


def batch_generate(model, sched: NoiseSchedule, cfg: SamplerConfig, n: int):
    """n independent generations with per-sample seeds derived as seed+i."""
    samples = []
    for i in range(n):
        sample_cfg = SamplerConfig(
            length=cfg.length,
            steps=cfg.steps,
            temperature=cfg.temperature,
            seed=cfg.seed + i,
            decode_policy=cfg.decode_policy,
        )
        tokens, _ = generate(model, sched, sample_cfg)
        samples.append(tokens)
    return samples
