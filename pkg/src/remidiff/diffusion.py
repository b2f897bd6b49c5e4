"""Absorbing-state discrete diffusion over token sequences.

The forward chain keeps a token with probability 1-beta_t per step and
otherwise moves it to the mask index K = V-1, where it stays. Everything
needed for training and sampling has a closed form: the cumulative
marginal, the two-point posterior, the reverse mixture, and the
reweighted variational-bound loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "q_xt_given_x0",
    "q_sample",
    "posterior",
    "p_reverse",
    "vb_loss",
]

SCHEDULE_KINDS = ("uniform-absorption", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption rates and cumulative keep-probabilities.

    ``beta[t-1]`` is the step-t corruption rate; ``alpha_bar[t]`` is the
    probability a token is still unmasked after step t, with
    ``alpha_bar[0] == 1`` and ``alpha_bar[T] <= 1e-6``.
    """

    kind: str
    beta: np.ndarray  # length T
    alpha_bar: np.ndarray  # length T+1, index by t

    @property
    def steps(self) -> int:
        return len(self.beta)

    def validate(self):
        t_count = self.steps
        if len(self.alpha_bar) != t_count + 1:
            raise ValueError("alpha_bar must have length T+1")
        if self.alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(self.beta < 0.0) or np.any(self.beta > 1.0):
            raise ValueError("beta values must lie in [0, 1]")
        if np.any(np.diff(self.alpha_bar) > 0.0):
            raise ValueError("alpha_bar must be non-increasing")
        if self.alpha_bar[-1] > 1e-6:
            raise ValueError(f"alpha_bar[T]={self.alpha_bar[-1]:.3g} exceeds 1e-6")
        recomputed = np.cumprod(1.0 - self.beta)
        if np.max(np.abs(recomputed - self.alpha_bar[1:])) > 1e-12:
            raise ValueError("alpha_bar inconsistent with the product of (1-beta)")

    def dump(self, path):
        """Write the schedule as an auditable text table (t, beta_t, alpha_bar_t)."""
        with open(path, "w") as fh:
            fh.write(f"# kind={self.kind}\n")
            fh.write("t,beta,alpha_bar\n")
            for t in range(1, self.steps + 1):
                fh.write(f"{t},{float(self.beta[t - 1])!r},{float(self.alpha_bar[t])!r}\n")

    @classmethod
    def restore(cls, path) -> "NoiseSchedule":
        kind = "uniform-absorption"
        betas, abars = [], []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("# kind="):
                    kind = line.split("=", 1)[1]
                    continue
                if not line or line.startswith("t,"):
                    continue
                _, b, a = line.split(",")
                betas.append(float(b))
                abars.append(float(a))
        sched = cls(kind=kind, beta=np.array(betas), alpha_bar=np.array([1.0] + abars))
        sched.validate()
        return sched


def make_schedule(steps: int, kind: str = "uniform-absorption") -> NoiseSchedule:
    """Build a corruption schedule over ``steps`` forward steps.

    ``uniform-absorption`` sets beta_t = 1/(T-t+1) so the mask fraction
    grows linearly (alpha_bar_t = 1 - t/T exactly). ``cosine`` follows a
    squared-cosine keep-probability profile renormalized to end at 0.
    """
    if steps < 1:
        raise ValueError("schedule needs at least one step")
    if kind == "uniform-absorption":
        t = np.arange(1, steps + 1, dtype=np.float64)
        beta = 1.0 / (steps - t + 1.0)
        alpha_bar = np.concatenate(([1.0], 1.0 - t / steps))
        # guard against float drift on the product identity
        alpha_bar[1:] = np.cumprod(1.0 - beta)
        alpha_bar[-1] = 0.0
    elif kind == "cosine":
        s = 0.008
        grid = np.arange(0, steps + 1, dtype=np.float64)
        f = np.cos((grid / steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
        alpha_bar = (f - f[-1]) / (f[0] - f[-1])
        alpha_bar[0] = 1.0
        alpha_bar[-1] = 0.0
        beta = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
        beta[-1] = 1.0
        alpha_bar[1:] = np.cumprod(1.0 - beta)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    sched = NoiseSchedule(kind=kind, beta=beta, alpha_bar=alpha_bar)
    sched.validate()
    return sched


def _check_step(sched: NoiseSchedule, t: int):
    if not 1 <= t <= sched.steps:
        raise ValueError(f"step t={t} outside [1, {sched.steps}]")


def q_xt_given_x0(x0_token: int, t: int, sched: NoiseSchedule, vocab_size: int) -> np.ndarray:
    """Closed-form marginal q(x_t | x_0) as a length-V probability row."""
    _check_step(sched, t)
    mask = vocab_size - 1
    if x0_token == mask:
        raise ValueError("clean data may not contain the mask index")
    row = np.zeros(vocab_size)
    keep = sched.alpha_bar[t]
    row[x0_token] = keep
    row[mask] = 1.0 - keep
    return row


def q_sample(
    x0: np.ndarray, t, sched: NoiseSchedule, rng: np.random.Generator, mask_index: int
) -> np.ndarray:
    """Sample x_t from x_0: keep each token with probability alpha_bar_t, else mask.

    ``x0`` is an integer array ``[L]`` or ``[B,L]`` containing no mask
    tokens; ``t`` is a scalar step or one step per batch row.
    """
    x0 = np.asarray(x0)
    if np.any(x0 == mask_index):
        raise ValueError("clean data may not contain the mask index")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        keep = np.full(x0.shape, sched.alpha_bar[int(t_arr)])
        _check_step(sched, int(t_arr))
    else:
        for step in t_arr:
            _check_step(sched, int(step))
        keep = sched.alpha_bar[t_arr.astype(int)][:, None]
        keep = np.broadcast_to(keep, x0.shape)
    kept = rng.random(x0.shape) < keep
    return np.where(kept, x0, mask_index)


def posterior(
    xt_token: int, x0_token: int, t: int, sched: NoiseSchedule, vocab_size: int
) -> np.ndarray:
    """Analytic q(x_{t-1} | x_t, x_0) as a length-V probability row.

    An unmasked token stays itself going backward; a masked one splits
    between x_0 and the mask in ratio (abar_{t-1} - abar_t) : (1 - abar_{t-1}).
    """
    _check_step(sched, t)
    mask = vocab_size - 1
    row = np.zeros(vocab_size)
    if xt_token != mask:
        if xt_token != x0_token:
            raise ValueError(
                f"absorbing-chain violation: x_t={xt_token} is neither x_0={x0_token} nor the mask"
            )
        row[xt_token] = 1.0
        return row
    abar_prev = sched.alpha_bar[t - 1]
    abar_t = sched.alpha_bar[t]
    denom = 1.0 - abar_t
    row[x0_token] = (abar_prev - abar_t) / denom
    row[mask] = (1.0 - abar_prev) / denom
    return row


def p_reverse(
    logits_x0: np.ndarray,
    xt: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    s: int | None = None,
    temperature: float = 1.0,
) -> np.ndarray:
    """Reverse transition p(x_s | x_t) per position, composed in closed form.

    ``logits_x0[L, V-1]`` are clean-token predictions excluding the mask
    class. ``s`` defaults to t-1; passing an earlier retained step applies
    the alpha_bar-ratio rule used by step-subsampled sampling. Unmasked
    positions return a point mass on their current token. Output is
    ``[L, V]`` including the mask column.
    """
    _check_step(sched, t)
    if s is None:
        s = t - 1
    if not 0 <= s < t:
        raise ValueError(f"target step s={s} must satisfy 0 <= s < t={t}")
    logits_x0 = np.asarray(logits_x0, dtype=np.float64)
    xt = np.asarray(xt)
    length, classes = logits_x0.shape
    vocab_size = classes + 1
    mask = vocab_size - 1
    scaled = logits_x0 / temperature
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    p_hat = np.exp(shifted)
    p_hat /= p_hat.sum(axis=-1, keepdims=True)

    abar_s = sched.alpha_bar[s]
    abar_t = sched.alpha_bar[t]
    unmask_p = (abar_s - abar_t) / (1.0 - abar_t)
    stay_p = (1.0 - abar_s) / (1.0 - abar_t)

    probs = np.zeros((length, vocab_size))
    probs[:, :classes] = unmask_p * p_hat
    probs[:, mask] = stay_p
    is_unmasked = xt != mask
    if np.any(is_unmasked):
        probs[is_unmasked] = 0.0
        probs[is_unmasked, xt[is_unmasked]] = 1.0
    return probs


def vb_loss(
    logits_x0,
    x0: np.ndarray,
    xt: np.ndarray,
    t: np.ndarray,
    sched: NoiseSchedule,
    pad_index: int | None = None,
    reduction: str = "mean",
):
    """Reweighted variational-bound loss for a batch, differentiable in logits.

    ``logits_x0`` is a Tensor ``[B,L,V-1]``; ``x0``/``xt`` are integer
    ``[B,L]`` arrays; ``t`` holds one step per batch row. For the absorbing
    chain the per-step KL at a masked position collapses to
    ``coeff * -log p_hat(x0)`` with ``coeff = w_t * (abar_{t-1}-abar_t)/(1-abar_t)``
    and ``w_t = (T-t+1)/T``; at t=1 the coefficient is exactly 1, giving the
    reconstruction cross-entropy. Positions equal to ``pad_index`` are
    excluded. ``reduction='mean'`` averages over masked positions then over
    the batch (the training objective); ``'sum'`` returns the raw bound
    contribution used by the enumeration oracle.

    Returns ``(loss, breakdown)`` where breakdown reports the summed KL and
    reconstruction terms, the prior-KL diagnostic, and masked counts.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    x0 = np.asarray(x0)
    xt = np.asarray(xt)
    t = np.atleast_1d(np.asarray(t, dtype=int))
    batch, length, classes = logits_x0.shape
    vocab_size = classes + 1
    mask = vocab_size - 1
    if x0.shape != (batch, length) or xt.shape != (batch, length):
        raise T.ShapeError(f"vb_loss shape mismatch: logits {logits_x0.shape}, x0 {x0.shape}, xt {xt.shape}")
    for step in t:
        _check_step(sched, int(step))
    if np.any(x0 == mask):
        raise ValueError("clean data may not contain the mask index")
    bad = (xt != x0) & (xt != mask)
    if np.any(bad):
        b, l = np.argwhere(bad)[0]
        raise ValueError(f"absorbing-chain violation at batch {b} position {l}")

    total_steps = sched.steps
    w_t = (total_steps - t + 1) / total_steps
    abar_prev = sched.alpha_bar[t - 1]
    abar_t = sched.alpha_bar[t]
    unmask_p = (abar_prev - abar_t) / (1.0 - abar_t)

    active = xt == mask
    if pad_index is not None:
        active = active & (x0 != pad_index)
    coeff = (w_t * unmask_p)[:, None] * active

    targets = np.where(active, x0, 0)
    logp = T.log_softmax(logits_x0, axis=-1)
    picked = T.gather_last(logp, targets)
    weighted = T.mul(picked, -coeff)
    if not np.all(np.isfinite(weighted.data)):
        b, l = np.argwhere(~np.isfinite(weighted.data))[0]
        raise T.NumericError(f"non-finite loss term at batch {b} position {l}")

    per_term = weighted.data
    recon_rows = t == 1
    kl_sum = float(per_term[~recon_rows].sum()) if batch else 0.0
    recon_sum = float(per_term[recon_rows].sum()) if batch else 0.0
    prior_kl = 0.0 if sched.alpha_bar[-1] == 0.0 else float("inf")
    breakdown = {
        "kl_sum": kl_sum,
        "reconstruction_sum": recon_sum,
        "prior_kl": prior_kl,
        "masked_positions": int(active.sum()),
        "w_t": w_t,
    }

    if reduction == "sum":
        loss = T.sum_(weighted)
    else:
        denom = np.maximum(active.sum(axis=1), 1)
        scale = np.broadcast_to(1.0 / (denom[:, None] * batch), (batch, length))
        loss = T.sum_(T.mul(weighted, scale.astype(per_term.dtype)))
    return loss, breakdown
