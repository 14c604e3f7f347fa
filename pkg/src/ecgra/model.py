"""Residual convolutional network with attention pooling, and its checkpoints.

Layer stack::

    conv1d(12 -> base, k) ->
    [BN -> ReLU -> dropout -> conv -> BN -> ReLU -> dropout -> conv, + shortcut, maxpool/2] x M ->
    attention pooling over time -> dense(C -> classes) -> sigmoid
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import CheckpointError

FORMAT_VERSION = 1
MAGIC = b"ECGRA-CHECKPOINT"


@dataclass(frozen=True)
class ModelConfig:
    input_leads: int = 12
    input_length: int = 15000
    kernel_size: int = 16
    base_channels: int = 16
    channel_growth: int = 16
    num_residual_modules: int = 7
    dropout_rate: float = 0.2
    attention_hidden: int = 64
    num_classes: int = 9
    seed: int = 0

    def __post_init__(self):
        for name in ("input_leads", "input_length", "kernel_size", "base_channels",
                     "attention_hidden", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.channel_growth < 0 or self.num_residual_modules < 0:
            raise ValueError("channel_growth and num_residual_modules must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.input_length >> self.num_residual_modules < 1:
            raise ValueError("input too short for the number of pooling stages")

    def module_channels(self) -> list[tuple[int, int]]:
        """(in, out) channels of each residual module; width grows every two modules."""
        chans, c_in = [], self.base_channels
        for m in range(self.num_residual_modules):
            c_out = self.base_channels + self.channel_growth * (m // 2)
            chans.append((c_in, c_out))
            c_in = c_out
        return chans

    @property
    def feature_channels(self) -> int:
        mods = self.module_channels()
        return mods[-1][1] if mods else self.base_channels

    def length_chain(self) -> list[int]:
        lengths, t = [], self.input_length
        for _ in range(self.num_residual_modules):
            t //= 2
            lengths.append(t)
        return lengths

    @property
    def local_length(self) -> int:
        chain = self.length_chain()
        return chain[-1] if chain else self.input_length

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Trainable tensors in canonical order."""
    k = cfg.kernel_size
    shapes = {
        "stem.weight": (cfg.base_channels, cfg.input_leads, k),
        "stem.bias": (cfg.base_channels,),
    }
    for m, (c_in, c_out) in enumerate(cfg.module_channels()):
        p = f"res{m}."
        shapes.update({
            p + "bn1.gamma": (c_in,), p + "bn1.beta": (c_in,),
            p + "conv1.weight": (c_out, c_in, k), p + "conv1.bias": (c_out,),
            p + "bn2.gamma": (c_out,), p + "bn2.beta": (c_out,),
            p + "conv2.weight": (c_out, c_out, k), p + "conv2.bias": (c_out,),
        })
        if c_in != c_out:
            shapes[p + "shortcut.weight"] = (c_out, c_in, 1)
            shapes[p + "shortcut.bias"] = (c_out,)
    c, a = cfg.feature_channels, cfg.attention_hidden
    shapes.update({
        "attn.weight": (c, a), "attn.bias": (a,), "attn.context": (a,),
        "fc.weight": (c, cfg.num_classes), "fc.bias": (cfg.num_classes,),
    })
    return shapes


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for m, (c_in, c_out) in enumerate(cfg.module_channels()):
        for bn, c in (("bn1", c_in), ("bn2", c_out)):
            shapes[f"res{m}.{bn}.running_mean"] = (c,)
            shapes[f"res{m}.{bn}.running_var"] = (c,)
    return shapes


def init_parameters(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, np.float32)
        elif name.endswith(".beta"):
            params[name] = np.zeros(shape, np.float32)
        elif name == "attn.context":
            params[name] = _uniform(rng, shape, shape[0])
        elif name in ("attn.weight", "fc.weight"):
            params[name] = _uniform(rng, shape, shape[0])
        elif name.endswith(".weight"):
            params[name] = _uniform(rng, shape, shape[1] * shape[2])
        else:
            # biases share the fan-in of the weight they belong to
            w = parameter_shapes(cfg)[name.rsplit(".", 1)[0] + ".weight"]
            fan_in = w[0] if len(w) == 2 else w[1] * w[2]
            params[name] = _uniform(rng, shape, fan_in)
    return params


def init_buffers(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {name: (np.zeros if name.endswith("mean") else np.ones)(shape, np.float32)
            for name, shape in buffer_shapes(cfg).items()}


def residual_forward(x, p: dict, bufs: dict, prefix: str, train: bool, rate: float, rng):
    """One residual module (without the trailing pool). Returns (out, cache)."""
    def state(bn):
        return {"running_mean": bufs[f"{prefix}{bn}.running_mean"],
                "running_var": bufs[f"{prefix}{bn}.running_var"]}

    h, c_bn1 = L.batchnorm_forward(x, p[prefix + "bn1.gamma"], p[prefix + "bn1.beta"], state("bn1"), train)
    h, c_r1 = L.relu_forward(h)
    h, c_d1 = L.dropout_forward(h, rate, train, rng)
    h, c_cv1 = L.conv1d_forward(h, p[prefix + "conv1.weight"], p[prefix + "conv1.bias"])
    h, c_bn2 = L.batchnorm_forward(h, p[prefix + "bn2.gamma"], p[prefix + "bn2.beta"], state("bn2"), train)
    h, c_r2 = L.relu_forward(h)
    h, c_d2 = L.dropout_forward(h, rate, train, rng)
    h, c_cv2 = L.conv1d_forward(h, p[prefix + "conv2.weight"], p[prefix + "conv2.bias"])
    if prefix + "shortcut.weight" in p:
        s, c_sc = L.conv1d_forward(x, p[prefix + "shortcut.weight"], p[prefix + "shortcut.bias"])
    else:
        s, c_sc = x, None
    return h + s, (c_bn1, c_r1, c_d1, c_cv1, c_bn2, c_r2, c_d2, c_cv2, c_sc)


def residual_backward(dout, cache, prefix: str) -> tuple[np.ndarray, dict]:
    c_bn1, c_r1, c_d1, c_cv1, c_bn2, c_r2, c_d2, c_cv2, c_sc = cache
    g = {}
    if c_sc is not None:
        dx, g[prefix + "shortcut.weight"], g[prefix + "shortcut.bias"] = L.conv1d_backward(dout, c_sc)
    else:
        dx = dout
    dh, g[prefix + "conv2.weight"], g[prefix + "conv2.bias"] = L.conv1d_backward(dout, c_cv2)
    dh = L.dropout_backward(dh, c_d2)
    dh = L.relu_backward(dh, c_r2)
    dh, g[prefix + "bn2.gamma"], g[prefix + "bn2.beta"] = L.batchnorm_backward(dh, c_bn2)
    dh, g[prefix + "conv1.weight"], g[prefix + "conv1.bias"] = L.conv1d_backward(dh, c_cv1)
    dh = L.dropout_backward(dh, c_d1)
    dh = L.relu_backward(dh, c_r1)
    dh, g[prefix + "bn1.gamma"], g[prefix + "bn1.beta"] = L.batchnorm_backward(dh, c_bn1)
    return dx + dh, g


class Model:
    def __init__(self, cfg: ModelConfig, params: dict | None = None, buffers: dict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg)
        self.buffers = buffers if buffers is not None else init_buffers(cfg)
        self._check_shapes()

    def _check_shapes(self):
        for kind, have, want in (("parameter", self.params, parameter_shapes(self.cfg)),
                                 ("buffer", self.buffers, buffer_shapes(self.cfg))):
            if set(have) != set(want):
                missing, extra = sorted(set(want) - set(have)), sorted(set(have) - set(want))
                raise CheckpointError(f"{kind} names disagree with config: missing {missing}, extra {extra}")
            for name, shape in want.items():
                if tuple(have[name].shape) != tuple(shape):
                    raise CheckpointError(f"{kind} {name}: shape {have[name].shape}, config expects {shape}")

    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.buffers.items()})

    def forward(self, x, train: bool = False, rng=None, keep_cache: bool = False):
        """Return (logits, attention) and, with ``keep_cache``, the backward cache."""
        cfg, p = self.cfg, self.params
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[1:] != (cfg.input_leads, cfg.input_length):
            raise ValueError(f"expected input (B, {cfg.input_leads}, {cfg.input_length}), got {x.shape}")
        if train and cfg.dropout_rate > 0 and rng is None:
            raise ValueError("train mode with dropout needs an rng")
        if x.dtype != np.float64:
            x = x.astype(np.float32, copy=False)
        h, c_stem = L.conv1d_forward(x, p["stem.weight"].astype(x.dtype, copy=False),
                                     p["stem.bias"].astype(x.dtype, copy=False))
        caches = []
        pv = p if x.dtype == np.float32 else {k: v.astype(x.dtype) for k, v in p.items()}
        for m in range(cfg.num_residual_modules):
            h, c_res = residual_forward(h, pv, self.buffers, f"res{m}.", train, cfg.dropout_rate, rng)
            h, c_pool = L.maxpool_forward(h)
            caches.append((c_res, c_pool))
        locals_ = h.transpose(0, 2, 1)
        (v, alpha), c_attn = L.attention_forward(locals_, pv["attn.weight"], pv["attn.bias"], pv["attn.context"])
        logits, c_fc = L.dense_forward(v, pv["fc.weight"], pv["fc.bias"])
        if keep_cache:
            return logits, alpha, (c_stem, caches, c_attn, c_fc)
        return logits, alpha

    def backward(self, dlogits, cache) -> dict[str, np.ndarray]:
        c_stem, caches, c_attn, c_fc = cache
        g = {}
        dv, g["fc.weight"], g["fc.bias"] = L.dense_backward(dlogits, c_fc)
        dl, g["attn.weight"], g["attn.bias"], g["attn.context"] = L.attention_backward(dv, c_attn)
        dh = dl.transpose(0, 2, 1)
        for m in reversed(range(self.cfg.num_residual_modules)):
            c_res, c_pool = caches[m]
            dh = L.maxpool_backward(dh, c_pool)
            dh, gm = residual_backward(dh, c_res, f"res{m}.")
            g.update(gm)
        _, g["stem.weight"], g["stem.bias"] = L.conv1d_backward(dh, c_stem)
        return g

    def predict_proba(self, x, batch_size: int = 16):
        """Eval-mode sigmoid outputs and attention weights, batched."""
        probs, attn = [], []
        for i in range(0, len(x), batch_size):
            logits, alpha = self.forward(x[i:i + batch_size], train=False)
            probs.append(L.sigmoid(logits.astype(np.float64)))
            attn.append(alpha)
        if not probs:
            return np.zeros((0, self.cfg.num_classes)), np.zeros((0, self.cfg.local_length))
        return np.concatenate(probs), np.concatenate(attn)


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def forward(model: Model, batch, train: bool = False, rng=None):
    """Probabilities (B, classes) and attention weights (B, local_length)."""
    logits, alpha = model.forward(batch, train=train, rng=rng)
    return L.sigmoid(logits.astype(np.float64)), alpha


# Checkpoint layout:
#   MAGIC\n  "version <int>\n"  "config <json>\n"  "tensors <n>\n"
#   n lines "<name> <rank> <d1> ... <dr>\n"  "end\n"
#   then float32 little-endian payload, tensors in header order.

def save_checkpoint(model: Model, path) -> None:
    tensors = list(model.params.items()) + list(model.buffers.items())
    lines = [MAGIC.decode(), f"version {FORMAT_VERSION}",
             "config " + json.dumps(model.cfg.to_dict(), sort_keys=True), f"tensors {len(tensors)}"]
    for name, arr in tensors:
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
    lines.append("end")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path, expect: ModelConfig | None = None) -> Model:
    data = Path(path).read_bytes()
    pos = 0

    def line() -> str:
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header")
        out, pos = data[pos:end], end + 1
        return out.decode("utf-8", errors="replace")

    if line().encode() != MAGIC:
        raise CheckpointError(f"{path}: not an ecgra checkpoint (bad magic)")
    head = line().split()
    if len(head) != 2 or head[0] != "version" or not head[1].isdigit():
        raise CheckpointError(f"{path}: unreadable version line")
    if int(head[1]) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {head[1]}, this build reads {FORMAT_VERSION}")
    cfg_line = line()
    if not cfg_line.startswith("config "):
        raise CheckpointError(f"{path}: missing config line")
    try:
        cfg = ModelConfig.from_dict(json.loads(cfg_line[len("config "):]))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config ({exc})") from None
    if expect is not None and cfg != expect:
        raise CheckpointError(f"{path}: checkpoint config {cfg} differs from expected {expect}")
    count = line().split()
    if len(count) != 2 or count[0] != "tensors":
        raise CheckpointError(f"{path}: missing tensor count")
    specs = []
    for _ in range(int(count[1])):
        parts = line().split()
        rank = int(parts[1])
        specs.append((parts[0], tuple(int(d) for d in parts[2:2 + rank])))
    if line() != "end":
        raise CheckpointError(f"{path}: header not terminated")
    want_p, want_b = parameter_shapes(cfg), buffer_shapes(cfg)
    params, bufs = {}, {}
    for name, shape in specs:
        want = want_p.get(name, want_b.get(name))
        if want is None:
            raise CheckpointError(f"{path}: unexpected tensor {name}")
        if tuple(want) != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, config expects {tuple(want)}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload at tensor {name}")
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
        pos += nbytes
        (params if name in want_p else bufs)[name] = arr.astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return Model(cfg, params, bufs)


def checkpoint_digest(model: Model) -> bytes:
    """Byte string identifying the exact parameter values (for bit-equality checks)."""
    parts = []
    for name in sorted(model.params) + sorted(model.buffers):
        arr = model.params.get(name, model.buffers.get(name))
        parts.append(name.encode() + struct.pack("<I", arr.size) + np.ascontiguousarray(arr, "<f4").tobytes())
    return b"".join(parts)


def receptive_fields(cfg: ModelConfig) -> np.ndarray:
    """Input-sample span ``[start, end]`` (inclusive, unclipped) seen by each local feature.

    Follows the main path, which is at least as wide as any shortcut.
    """
    t = cfg.local_length
    lo = np.arange(t)
    hi = np.arange(t)
    lengths = [cfg.input_length] + cfg.length_chain()
    k = cfg.kernel_size
    for m in reversed(range(cfg.num_residual_modules)):
        lo, hi = 2 * lo, 2 * hi + 1
        left = L._same_padding(lengths[m], k, 1)[1]
        for _ in range(2):
            lo, hi = lo - left, hi - left + k - 1
    left = L._same_padding(cfg.input_length, k, 1)[1]
    lo, hi = lo - left, hi - left + k - 1
    return np.stack([lo, hi], axis=1)
