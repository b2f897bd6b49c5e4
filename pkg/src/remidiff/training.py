"""Training loop: dataset ingestion, AdamW, LR schedule, checkpointing.

A single seeded generator drives batch selection, step sampling, and
corruption, and its state is serialized into every checkpoint, so
resuming reproduces an uninterrupted run bit for bit (single-threaded).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .diffusion import make_schedule, q_sample, vb_loss
from .midi import parse_midi
from .model import MFAConfig, MFANet, read_blob_container, write_blob_container
from .remi import RemiVocab, encode, load_tokens_binary, load_tokens_text, quantize

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "parse_config",
    "lr_at",
    "AdamW",
    "ingest",
    "train",
    "load_checkpoint",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last good checkpoint is retained."""


@dataclass(frozen=True)
class TrainConfig:
    data_dir: str
    out_dir: str
    steps: int = 5000
    batch_size: int = 8
    lr: float = 5e-4
    warmup_steps: int = 200
    lr_schedule: str = "cosine"
    diffusion_steps: int = 64
    seq_len: int = 256
    seed: int = 0
    checkpoint_every: int = 1000
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    precision: int = 64
    schedule_kind: str = "uniform-absorption"
    model: MFAConfig = field(default_factory=lambda: MFAConfig(vocab_size=RemiVocab().size))

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} must be < steps {self.steps}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        k, s = self.model.downsample_kernel, self.model.downsample_stride
        if self.seq_len < k or (self.seq_len - k) % s != 0:
            raise ValueError(
                f"seq_len {self.seq_len} incompatible with downsample kernel {k} stride {s}"
            )
        if self.model.diffusion_steps != self.diffusion_steps:
            raise ValueError("model.diffusion_steps must equal diffusion_steps")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


# keys accepted in config files; "model.*" keys land in the nested MFAConfig
_MODEL_KEYS = {
    "model.dim": "model_dim",
    "model.state": "state_dim",
    "model.heads": "heads",
    "model.blocks": "n_blocks",
    "model.mamba_per_block": "n_mamba_per_block",
    "model.expand": "expand_dim",
    "model.downsample_kernel": "downsample_kernel",
    "model.downsample_stride": "downsample_stride",
    "model.conv_kernel": "conv_kernel",
    "model.order": "order",
}
_TRAIN_KEYS = {
    "data_dir": str,
    "out_dir": str,
    "steps": int,
    "batch_size": int,
    "lr": float,
    "warmup_steps": int,
    "lr_schedule": str,
    "diffusion_steps": int,
    "seq_len": int,
    "seed": int,
    "checkpoint_every": int,
    "weight_decay": float,
    "grad_clip": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "precision": int,
    "schedule_kind": str,
}


def parse_config(path, overrides: list[str] | None = None) -> TrainConfig:
    """Read a ``key = value`` config file (# comments) plus CLI overrides."""
    pairs: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            pairs[key] = value
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        pairs[key] = value
    return config_from_pairs(pairs)


def config_from_pairs(pairs: dict[str, str]) -> TrainConfig:
    train_kwargs: dict = {}
    model_kwargs: dict = {"vocab_size": RemiVocab().size}
    for key, value in pairs.items():
        if key in _TRAIN_KEYS:
            train_kwargs[key] = _TRAIN_KEYS[key](value)
        elif key in _MODEL_KEYS:
            field_name = _MODEL_KEYS[key]
            model_kwargs[field_name] = value if field_name == "order" else int(value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    steps_t = train_kwargs.get("diffusion_steps", 64)
    model_kwargs["diffusion_steps"] = steps_t
    train_kwargs["model"] = MFAConfig(**model_kwargs)
    missing = {"data_dir", "out_dir"} - set(train_kwargs)
    if missing:
        raise ValueError(f"config missing required keys: {sorted(missing)}")
    return TrainConfig(**train_kwargs)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from zero, then cosine decay to zero (or constant)."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.lr_schedule == "constant":
        return cfg.lr
    progress = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adaptive moments with decoupled weight decay and global-norm clipping."""

    def __init__(self, params: dict[str, T.Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.count = 0

    def clip_global_norm(self, max_norm: float) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = math.sqrt(total)
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self, lr: float):
        self.count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.count
        bias2 = 1.0 - b2**self.count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# dataset ingestion


def ingest(data_dir, vocab: RemiVocab, seq_len: int, manifest_path=None):
    """Tokenize every readable file under ``data_dir`` into training windows.

    MIDI files are parsed, quantized, and encoded; token files are read
    directly. Sequences are split into non-overlapping ``seq_len`` windows,
    the tail padded with PAD. Returns ``windows[n, seq_len]`` int32.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    windows = []
    manifest = []
    for path in sorted(data_dir.iterdir()):
        try:
            if path.suffix.lower() in (".mid", ".midi"):
                score = quantize(parse_midi(path.read_bytes()), vocab.positions_per_bar, vocab)
                tokens = encode(score, vocab)
            elif path.suffix == ".txt":
                tokens = load_tokens_text(path)
            elif path.suffix == ".tokb":
                tokens, _ = load_tokens_binary(path)
            else:
                continue
        except Exception as exc:  # unreadable file: skip, keep going
            log.warning("skipping %s: %s", path.name, exc)
            continue
        if tokens.size and tokens.max() >= vocab.size:
            log.warning("skipping %s: token index out of range", path.name)
            continue
        n_windows = 0
        for start in range(0, len(tokens), seq_len):
            chunk = tokens[start : start + seq_len]
            if len(chunk) < seq_len:
                chunk = np.concatenate(
                    [chunk, np.full(seq_len - len(chunk), vocab.pad_index, dtype=np.int32)]
                )
            windows.append(chunk.astype(np.int32))
            n_windows += 1
        manifest.append((path.name, int(len(tokens)), n_windows))
    if not windows:
        raise ValueError(f"no usable training data found in {data_dir}")
    if manifest_path is not None:
        with open(manifest_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["file", "tokens", "windows"])
            writer.writerows(manifest)
    return np.stack(windows), manifest


# ---------------------------------------------------------------------------
# checkpoints


def _save_checkpoint(path, cfg: TrainConfig, model: MFANet, opt: AdamW, step: int, rng):
    arrays = {f"model/{k}": p.data for k, p in model.params.items()}
    arrays.update({f"opt.m/{k}": v for k, v in opt.m.items()})
    arrays.update({f"opt.v/{k}": v for k, v in opt.v.items()})
    arrays["step"] = np.array([step], dtype=np.int64)
    blobs = {"rng": json.dumps(rng.bit_generator.state).encode()}
    tmp = str(path) + ".tmp"
    write_blob_container(tmp, asdict(cfg), arrays, blobs)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (cfg, model, opt, step, rng) restored from a trainer checkpoint."""
    config, arrays, blobs = read_blob_container(path)
    model_cfg = MFAConfig(**config["model"])
    train_kwargs = {k: v for k, v in config.items() if k != "model"}
    cfg = TrainConfig(model=model_cfg, **train_kwargs)
    model = MFANet(model_cfg, params={})
    model.params = {
        k[len("model/") :]: T.Tensor(v, requires_grad=True)
        for k, v in arrays.items()
        if k.startswith("model/")
    }
    opt = AdamW(
        model.params,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    for k, v in arrays.items():
        if k.startswith("opt.m/"):
            opt.m[k[len("opt.m/") :]] = v.copy()
        elif k.startswith("opt.v/"):
            opt.v[k[len("opt.v/") :]] = v.copy()
    step = int(arrays["step"][0])
    opt.count = step
    rng = np.random.default_rng(cfg.seed)
    rng.bit_generator.state = json.loads(blobs["rng"].decode())
    return cfg, model, opt, step, rng


# ---------------------------------------------------------------------------
# the loop


def train(cfg: TrainConfig, resume=None, deterministic: bool = True):
    """Run (or resume) training; returns (checkpoint_path, history).

    ``history`` is a list of (step, loss, lr) also appended to
    ``out_dir/loss.csv``. Checkpoints are written atomically every
    ``checkpoint_every`` steps and at the end. A non-finite loss aborts
    with the last good checkpoint retained. Execution is single-threaded
    and deterministic by construction; ``deterministic`` is accepted for
    interface compatibility and does not change behaviour.
    """
    if resume is not None:
        cfg, model, opt, start_step, rng = load_checkpoint(resume)
    else:
        model = MFANet(cfg.model, seed=cfg.seed, dtype=cfg.dtype)
        opt = AdamW(
            model.params,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        start_step = 0
        rng = np.random.default_rng(cfg.seed)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = RemiVocab()
    windows, _ = ingest(cfg.data_dir, vocab, cfg.seq_len, manifest_path=out_dir / "manifest.csv")
    sched = make_schedule(cfg.diffusion_steps, cfg.schedule_kind)

    ckpt_path = out_dir / "checkpoint.bin"
    loss_csv = out_dir / "loss.csv"
    mode = "a" if resume is not None and loss_csv.exists() else "w"
    history = []
    with open(loss_csv, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss", "lr"])
        for step in range(start_step, cfg.steps):
            lr = lr_at(step, cfg)
            idx = rng.integers(0, len(windows), size=cfg.batch_size)
            t = rng.integers(1, cfg.diffusion_steps + 1, size=cfg.batch_size)
            x0 = windows[idx]
            xt = q_sample(x0, t, sched, rng, vocab.mask_index)
            try:
                logits = model.forward(xt, t)
                loss, _ = vb_loss(logits, x0, xt, t, sched, pad_index=vocab.pad_index)
                value = loss.item()
                if not math.isfinite(value):
                    raise T.NumericError(f"loss is {value} at step {step}")
                opt.zero_grad()
                loss.backward()
                opt.clip_global_norm(cfg.grad_clip)
                opt.step(lr)
            except T.NumericError as exc:
                raise TrainingDiverged(
                    f"aborting at step {step}: {exc}; last checkpoint: "
                    f"{ckpt_path if ckpt_path.exists() else 'none'}"
                ) from exc
            history.append((step, value, lr))
            writer.writerow([step, f"{value:.6f}", f"{lr:.8f}"])
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                stamped = out_dir / f"checkpoint_{step + 1:06d}.bin"
                _save_checkpoint(stamped, cfg, model, opt, step + 1, rng)
                _save_checkpoint(ckpt_path, cfg, model, opt, step + 1, rng)
    _save_checkpoint(ckpt_path, cfg, model, opt, cfg.steps, rng)
    return ckpt_path, history
