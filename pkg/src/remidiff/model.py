"""Hybrid selective-SSM/attention denoiser predicting clean-token logits.

Pipeline: shared token+step embedding, a strided 1D conv that compresses
the sequence, a stack of blocks (Mamba layers, one feed-forward layer,
one self-attention layer, each with residual + layernorm), a transposed
conv restoring the original resolution, and a linear head over the V-1
non-mask classes. Block-internal order is configurable for ablations.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import tensor as T

__all__ = [
    "MFAConfig",
    "MFANet",
    "CheckpointError",
    "BLOCK_ORDERS",
    "block_layout",
    "selective_scan",
    "selective_scan_reference",
    "mamba_layer",
    "ffn_layer",
    "attention_layer",
    "reorder_variant",
    "write_blob_container",
    "read_blob_container",
]

CHECKPOINT_MAGIC = b"RDCKPT01"
CHECKPOINT_VERSION = 1

# public ablation tags plus the internal attention-only profiling comparator
BLOCK_ORDERS = ("MFA", "AFM", "FMA", "MFA-2SA", "SA-only")
ABLATION_ORDERS = ("MFA", "AFM", "FMA", "MFA-2SA")

FFN_MULT = 4  # hidden width 4D


class CheckpointError(ValueError):
    """Checkpoint file is malformed or disagrees with the expected config."""


@dataclass(frozen=True)
class MFAConfig:
    vocab_size: int
    model_dim: int = 64
    state_dim: int = 8
    heads: int = 8
    n_blocks: int = 2
    n_mamba_per_block: int = 2
    expand_dim: int | None = None
    downsample_kernel: int = 4
    downsample_stride: int = 4
    conv_kernel: int = 4
    diffusion_steps: int = 64
    order: str = "MFA"

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.order not in BLOCK_ORDERS:
            raise ValueError(f"unknown block order {self.order!r}")
        if self.vocab_size < 3:
            raise ValueError("vocabulary must hold at least two classes plus the mask")

    @property
    def expand(self) -> int:
        return self.expand_dim if self.expand_dim is not None else 2 * self.model_dim

    @property
    def mask_index(self) -> int:
        return self.vocab_size - 1


def block_layout(order: str, n_mamba: int) -> tuple[str, ...]:
    if order == "MFA":
        return ("mamba",) * n_mamba + ("ffn", "attn")
    if order == "AFM":
        return ("attn", "ffn") + ("mamba",) * n_mamba
    if order == "FMA":
        return ("ffn",) + ("mamba",) * n_mamba + ("attn",)
    if order == "MFA-2SA":
        return ("mamba",) * n_mamba + ("ffn", "attn", "attn")
    if order == "SA-only":
        return ("attn",)
    raise ValueError(f"unknown block order {order!r}")


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


_SUBLAYER_FIELDS = {
    "mamba": (
        "in_proj",
        "gate_proj",
        "conv.kernel",
        "conv.bias",
        "b_proj",
        "c_proj",
        "dt_proj",
        "dt_bias",
        "a_log",
        "out_proj",
        "ln.gain",
        "ln.bias",
    ),
    "ffn": ("w1", "b1", "w2", "b2", "ln.gain", "ln.bias"),
    "attn": ("wq", "wk", "wv", "wo", "ln.gain", "ln.bias"),
}


def param_names(config: MFAConfig) -> list[str]:
    names = [
        "embed.token",
        "embed.step",
        "down.kernel",
        "down.bias",
        "up.kernel",
        "up.bias",
        "head.weight",
        "head.bias",
    ]
    layout = block_layout(config.order, config.n_mamba_per_block)
    for i in range(config.n_blocks):
        for j, kind in enumerate(layout):
            names += [f"block{i}.{j}.{kind}.{field}" for field in _SUBLAYER_FIELDS[kind]]
    return names


def init_params(config: MFAConfig, seed: int = 0, dtype=np.float64) -> dict[str, T.Tensor]:
    """Deterministic parameter initialization keyed by name."""
    rng = np.random.default_rng(seed)
    d = config.model_dim
    e = config.expand
    n = config.state_dim
    v = config.vocab_size

    def dense(*shape, scale=None):
        if scale is None:
            scale = 1.0 / math.sqrt(shape[0])
        return T.Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return T.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params: dict[str, T.Tensor] = {
        "embed.token": dense(v, d, scale=0.02),
        "embed.step": dense(config.diffusion_steps + 1, d, scale=0.02),
        "down.kernel": dense(config.downsample_kernel, d, d, scale=1.0 / math.sqrt(config.downsample_kernel * d)),
        "down.bias": zeros(d),
        "up.kernel": dense(config.downsample_kernel, d, d, scale=1.0 / math.sqrt(d)),
        "up.bias": zeros(d),
        "head.weight": dense(d, v - 1),
        "head.bias": zeros(v - 1),
    }
    layout = block_layout(config.order, config.n_mamba_per_block)
    for i in range(config.n_blocks):
        for j, kind in enumerate(layout):
            prefix = f"block{i}.{j}.{kind}"
            if kind == "mamba":
                dt_lo, dt_hi = _inv_softplus(0.001), _inv_softplus(0.1)
                params.update(
                    {
                        f"{prefix}.in_proj": dense(d, e),
                        f"{prefix}.gate_proj": dense(d, e),
                        f"{prefix}.conv.kernel": dense(config.conv_kernel, e, scale=1.0 / math.sqrt(config.conv_kernel)),
                        f"{prefix}.conv.bias": zeros(e),
                        f"{prefix}.b_proj": dense(e, n),
                        f"{prefix}.c_proj": dense(e, n),
                        f"{prefix}.dt_proj": dense(e, e),
                        f"{prefix}.dt_bias": T.Tensor(
                            rng.uniform(dt_lo, dt_hi, size=e).astype(dtype), requires_grad=True
                        ),
                        f"{prefix}.a_log": T.Tensor(
                            np.log(np.tile(np.arange(1.0, n + 1.0), (e, 1))).astype(dtype),
                            requires_grad=True,
                        ),
                        f"{prefix}.out_proj": dense(e, d),
                        f"{prefix}.ln.gain": ones(d),
                        f"{prefix}.ln.bias": zeros(d),
                    }
                )
            elif kind == "ffn":
                params.update(
                    {
                        f"{prefix}.w1": dense(d, FFN_MULT * d),
                        f"{prefix}.b1": zeros(FFN_MULT * d),
                        f"{prefix}.w2": dense(FFN_MULT * d, d),
                        f"{prefix}.b2": zeros(d),
                        f"{prefix}.ln.gain": ones(d),
                        f"{prefix}.ln.bias": zeros(d),
                    }
                )
            else:
                params.update(
                    {
                        f"{prefix}.wq": dense(d, d),
                        f"{prefix}.wk": dense(d, d),
                        f"{prefix}.wv": dense(d, d),
                        f"{prefix}.wo": dense(d, d),
                        f"{prefix}.ln.gain": ones(d),
                        f"{prefix}.ln.bias": zeros(d),
                    }
                )
    return params


# ---------------------------------------------------------------------------
# layers


def selective_scan(xp: T.Tensor, params: dict, prefix: str) -> T.Tensor:
    """Input-dependent SSM over positions: projections feed the recurrence.

    B and C rows and the step size delta are linear functions of the
    feature stream; delta passes through softplus so it is strictly
    positive, and the state matrix is parameterized as -exp(a_log) so its
    entries stay strictly negative (discrete stability).
    """
    bmat = T.matmul(xp, params[f"{prefix}.b_proj"])
    cmat = T.matmul(xp, params[f"{prefix}.c_proj"])
    delta = T.softplus(T.add(T.matmul(xp, params[f"{prefix}.dt_proj"]), params[f"{prefix}.dt_bias"]))
    a_diag = T.neg(T.exp(params[f"{prefix}.a_log"]))
    return T.ssm_scan(xp, delta, a_diag, bmat, cmat)


def selective_scan_reference(xp: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Sequential unrolled recurrence used as the correctness oracle.

    Pure numpy on an unbatched ``xp[L,E]``; recomputes every quantity
    per position with the naive formulas, independent of the vectorized
    implementation above.
    """
    w_b, w_c = params["b_proj"], params["c_proj"]
    w_dt, dt_bias = params["dt_proj"], params["dt_bias"]
    a = -np.exp(params["a_log"])  # [E,N]
    length, e_dim = xp.shape
    n_dim = a.shape[1]
    h = np.zeros((e_dim, n_dim))
    out = np.zeros((length, e_dim))
    for t in range(length):
        u_t = xp[t]
        b_t = xp[t] @ w_b
        c_t = xp[t] @ w_c
        delta_t = np.log1p(np.exp(xp[t] @ w_dt + dt_bias))
        da = np.exp(delta_t[:, None] * a)
        db = (np.exp(delta_t[:, None] * a) - 1.0) / a * b_t[None, :]
        h = da * h + db * u_t[:, None]
        out[t] = h @ c_t
    return out


def mamba_layer(x: T.Tensor, params: dict, prefix: str) -> T.Tensor:
    """Project, causal-convolve, gate, scan, project back; residual + LN."""
    u0 = T.matmul(x, params[f"{prefix}.in_proj"])
    uc = T.depthwise_conv1d_causal(u0, params[f"{prefix}.conv.kernel"], params[f"{prefix}.conv.bias"])
    xp = T.silu(uc)
    z = T.silu(T.matmul(x, params[f"{prefix}.gate_proj"]))
    scanned = selective_scan(xp, params, prefix)
    yp = T.matmul(T.mul(scanned, z), params[f"{prefix}.out_proj"])
    return T.layernorm(T.add(yp, x), params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"])


def ffn_layer(x: T.Tensor, params: dict, prefix: str) -> T.Tensor:
    hidden = T.silu(T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    out = T.add(T.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    return T.layernorm(T.add(out, x), params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"])


def attention_layer(x: T.Tensor, params: dict, prefix: str, heads: int) -> T.Tensor:
    """Bidirectional scaled-dot-product multi-head attention; residual + LN."""
    bsz, length, d = x.shape
    dk = d // heads

    def split(t):
        return T.transpose(T.reshape(t, (bsz, length, heads, dk)), (0, 2, 1, 3))

    q = split(T.matmul(x, params[f"{prefix}.wq"]))
    k = split(T.matmul(x, params[f"{prefix}.wk"]))
    v = split(T.matmul(x, params[f"{prefix}.wv"]))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (bsz, length, d))
    out = T.matmul(ctx, params[f"{prefix}.wo"])
    return T.layernorm(T.add(out, x), params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"])


# ---------------------------------------------------------------------------
# the network


class MFANet:
    """Denoiser over token sequences; predicts clean-token logits."""

    def __init__(self, config: MFAConfig, seed: int = 0, dtype=np.float64, params=None):
        self.config = config
        self.layout = tuple(
            block_layout(config.order, config.n_mamba_per_block) for _ in range(config.n_blocks)
        )
        self.params = params if params is not None else init_params(config, seed=seed, dtype=dtype)

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def embed(self, tokens: np.ndarray, t) -> T.Tensor:
        """Token embedding plus a learned step embedding broadcast over positions."""
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        t_arr = np.atleast_1d(np.asarray(t, dtype=int))
        if np.any(t_arr < 0) or np.any(t_arr > self.config.diffusion_steps):
            raise ValueError(f"step {t} outside [0, {self.config.diffusion_steps}]")
        tok = T.embedding(self.params["embed.token"], tokens)
        step = T.embedding(self.params["embed.step"], t_arr)
        out = T.add(tok, T.reshape(step, (len(t_arr), 1, self.config.model_dim)))
        if squeeze:
            out = T.reshape(out, (tokens.shape[1], self.config.model_dim))
        return out

    def forward(self, tokens: np.ndarray, t) -> T.Tensor:
        """Logits over the V-1 non-mask classes, shape [B, L, V-1] (or [L, V-1])."""
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        t_arr = np.atleast_1d(np.asarray(t, dtype=int))
        if len(t_arr) == 1 and tokens.shape[0] > 1:
            t_arr = np.repeat(t_arr, tokens.shape[0])
        cfg = self.config
        length = tokens.shape[1]
        k, s = cfg.downsample_kernel, cfg.downsample_stride
        if length < k:
            raise T.ShapeError(f"sequence length {length} shorter than downsample kernel {k}")
        if (length - k) % s != 0:
            raise T.ShapeError(
                f"length {length} incompatible with downsampling kernel {k} stride {s}; pad first"
            )
        x = self.embed(tokens, t_arr)
        x = T.add(T.conv1d(x, self.params["down.kernel"], stride=s), self.params["down.bias"])
        for i, layers in enumerate(self.layout):
            for j, kind in enumerate(layers):
                prefix = f"block{i}.{j}.{kind}"
                if kind == "mamba":
                    x = mamba_layer(x, self.params, prefix)
                elif kind == "ffn":
                    x = ffn_layer(x, self.params, prefix)
                else:
                    x = attention_layer(x, self.params, prefix, cfg.heads)
        x = T.add(
            T.conv1d_transposed(x, self.params["up.kernel"], stride=s, out_len=length),
            self.params["up.bias"],
        )
        logits = T.add(T.matmul(x, self.params["head.weight"]), self.params["head.bias"])
        if squeeze:
            logits = T.reshape(logits, (length, cfg.vocab_size - 1))
        return logits

    def predict(self, tokens: np.ndarray, t) -> np.ndarray:
        """Forward pass without recording adjoints; returns a numpy array."""
        with T.no_grad():
            return self.forward(tokens, t).data

    # --- persistence -----------------------------------------------------
    def save(self, path):
        arrays = {f"model/{name}": p.data for name, p in self.params.items()}
        write_blob_container(path, {"model": asdict(self.config)}, arrays, {})

    @classmethod
    def load(cls, path, expect: MFAConfig | None = None) -> "MFANet":
        config_all, entries, _ = read_blob_container(path)
        if "model" not in config_all:
            raise CheckpointError("checkpoint carries no model config")
        config_dict = config_all["model"]
        arrays = {
            name[len("model/") :]: arr for name, arr in entries.items() if name.startswith("model/")
        }
        config = MFAConfig(**config_dict)
        if expect is not None and config != expect:
            diffs = [
                f"{key}: checkpoint={getattr(config, key)!r} expected={getattr(expect, key)!r}"
                for key in config_dict
                if getattr(config, key) != getattr(expect, key)
            ]
            raise CheckpointError("checkpoint config mismatch: " + "; ".join(diffs))
        model = cls(config, params={})
        needed = set(param_names(config))
        if set(arrays) != needed:
            raise CheckpointError(
                f"checkpoint parameter names disagree with config (missing {sorted(needed - set(arrays))[:3]}, "
                f"unexpected {sorted(set(arrays) - needed)[:3]})"
            )
        model.params = {name: T.Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
        return model


def reorder_variant(config: MFAConfig, order: str, seed: int = 0, dtype=np.float64) -> MFANet:
    """Build the denoiser with a reordered block interior (ablation harness)."""
    if order not in ABLATION_ORDERS:
        raise ValueError(f"unknown order tag {order!r}; expected one of {ABLATION_ORDERS}")
    return MFANet(replace(config, order=order), seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# binary blob container (checkpoints)

_DTYPE_CODES = {0: "<f8", 1: "<f4", 2: "<i8"}
_CODE_FOR_KIND = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}
_BYTES_CODE = 3


def write_blob_container(path, config: dict, arrays: dict[str, np.ndarray], blobs: dict[str, bytes]):
    """Layout: magic, version, length-prefixed config JSON, then named entries.

    Each entry: u16 name length + UTF-8 name, u8 type code (0 f64 / 1 f32 /
    2 i64 / 3 raw bytes), then u8 ndim + u32 dims + little-endian data for
    arrays, or u64 length + data for raw bytes.
    """
    payload = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(arrays) + len(blobs)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            code = _CODE_FOR_KIND.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"unsupported array dtype {arr.dtype} for {name!r}")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(_DTYPE_CODES[code]).tobytes())
        for name in sorted(blobs):
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", _BYTES_CODE))
            fh.write(struct.pack("<Q", len(blobs[name])))
            fh.write(blobs[name])


def read_blob_container(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(cfg_len).decode())
        (n_entries,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        blobs: dict[str, bytes] = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (code,) = struct.unpack("<B", fh.read(1))
            if code == _BYTES_CODE:
                (blen,) = struct.unpack("<Q", fh.read(8))
                blobs[name] = fh.read(blen)
                continue
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = np.dtype(_DTYPE_CODES[code])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype)
            if data.size != count:
                raise CheckpointError(f"truncated array data for {name!r}")
            arrays[name] = data.reshape(shape).copy()
    return config, arrays, blobs
