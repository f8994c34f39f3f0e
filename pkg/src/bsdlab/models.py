"""Small differentiable classifiers with hand-derived backward passes.

Two architectures: a plain MLP over feature vectors and a tiny convolutional
net for image-grid inputs (one 3x3 conv with 8 channels, relu, 2x2 average
pool, then an MLP head). The softmax head is shared. Gradients are derived
per layer; there is no autodiff. Dropout applies to fully-connected hidden
activations in train mode only, with masks drawn from an explicit rng stream
so every forward is reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .numerics import softmax

CONV_CHANNELS = 8
CHECKPOINT_MAGIC = "BSDLAB-CKPT v1"

__all__ = [
    "ModelSpec",
    "Model",
    "init_model",
    "param_count",
    "forward",
    "backward",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class ModelSpec:
    input_dim: int
    classes: int
    hidden: tuple = ()
    activation: str = "relu"  # "relu" | "tanh"
    architecture: str = "mlp"  # "mlp" | "tiny-conv"
    dropout: float = 0.0
    seed: int = 0
    grid_shape: tuple | None = None  # (h, w, ch), required for tiny-conv

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.grid_shape is not None:
            self.grid_shape = tuple(int(g) for g in self.grid_shape)
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer sizes must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.architecture not in ("mlp", "tiny-conv"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "tiny-conv":
            if self.grid_shape is None or len(self.grid_shape) != 3:
                raise ValueError("tiny-conv requires grid_shape=(h, w, ch)")
            h, w, ch = self.grid_shape
            if h < 4 or w < 4:
                raise ValueError("tiny-conv needs grids of at least 4x4")
            if h * w * ch != self.input_dim:
                raise ValueError("grid_shape does not match input_dim")

    def head_input_dim(self):
        """Width of the first fully-connected layer's input."""
        if self.architecture == "mlp":
            return self.input_dim
        h, w, _ = self.grid_shape
        return ((h - 2) // 2) * ((w - 2) // 2) * CONV_CHANNELS


@dataclass
class Model:
    spec: ModelSpec
    params: dict
    mode: str = "train"  # "train" | "eval"

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def block_names(self):
        return list(self.params)

    def copy(self):
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, self.mode)


def _init_limit(activation, fan_in, fan_out):
    # He-uniform for relu, Xavier-uniform for tanh.
    if activation == "relu":
        return np.sqrt(6.0 / fan_in)
    return np.sqrt(6.0 / (fan_in + fan_out))


def init_model(spec: ModelSpec) -> Model:
    """Allocate and initialize parameter blocks, deterministic in spec.seed."""
    rng = np.random.default_rng(spec.seed)
    params = {}
    if spec.architecture == "tiny-conv":
        _, _, ch = spec.grid_shape
        fan_in = 9 * ch
        lim = _init_limit("relu", fan_in, CONV_CHANNELS)
        params["conv_w"] = rng.uniform(-lim, lim, size=(fan_in, CONV_CHANNELS))
        params["conv_b"] = np.zeros(CONV_CHANNELS)
    widths = [spec.head_input_dim(), *spec.hidden, spec.classes]
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        lim = _init_limit(spec.activation, fan_in, fan_out)
        params[f"w{i}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return Model(spec=spec, params=params, mode="train")


def param_count(spec: ModelSpec) -> int:
    widths = [spec.head_input_dim(), *spec.hidden, spec.classes]
    n = sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1))
    if spec.architecture == "tiny-conv":
        n += 9 * spec.grid_shape[2] * CONV_CHANNELS + CONV_CHANNELS
    return n


def _activate(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _activate_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _conv_forward(model, batch):
    """3x3 valid convolution via im2col, relu, 2x2 average pool, flatten."""
    h, w, ch = model.spec.grid_shape
    n = batch.shape[0]
    if batch.shape[1:] != (h, w, ch):
        raise ValueError(f"expected grid batch of shape (n, {h}, {w}, {ch}), got {batch.shape}")
    win = np.lib.stride_tricks.sliding_window_view(batch, (3, 3), axis=(1, 2))
    oh, ow = h - 2, w - 2
    # (n, oh, ow, ch, 3, 3) -> (n*oh*ow, 3*3*ch), window dims ordered (ky, kx, ch)
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, 9 * ch)
    z = patches @ model.params["conv_w"] + model.params["conv_b"]
    a = np.maximum(z, 0.0).reshape(n, oh, ow, CONV_CHANNELS)
    ph, pw = oh // 2, ow // 2
    pooled = a[:, : 2 * ph, : 2 * pw, :].reshape(n, ph, 2, pw, 2, CONV_CHANNELS).mean(axis=(2, 4))
    flat = pooled.reshape(n, ph * pw * CONV_CHANNELS)
    cache = {"patches": patches, "conv_z": z, "oh": oh, "ow": ow, "ph": ph, "pw": pw, "n": n}
    return flat, cache


def _conv_backward(model, cache, dflat, grads):
    n, oh, ow = cache["n"], cache["oh"], cache["ow"]
    ph, pw = cache["ph"], cache["pw"]
    dpooled = dflat.reshape(n, ph, pw, CONV_CHANNELS)
    da = np.zeros((n, oh, ow, CONV_CHANNELS))
    # Each pooled cell spreads its gradient evenly over its 2x2 source block;
    # rows/cols truncated by the pool get zero gradient.
    spread = np.repeat(np.repeat(dpooled, 2, axis=1), 2, axis=2) / 4.0
    da[:, : 2 * ph, : 2 * pw, :] = spread
    dz = (da.reshape(n * oh * ow, CONV_CHANNELS)) * (cache["conv_z"] > 0.0)
    grads["conv_w"] = cache["patches"].T @ dz
    grads["conv_b"] = dz.sum(axis=0)


def forward(model: Model, batch, rng=None):
    """Run the network on a batch; returns (probs, cache).

    ``batch`` is (n, d) for mlp or (n, h, w, ch) for tiny-conv. In train mode
    with dropout enabled, ``rng`` must be provided; eval mode is a pure
    function of (parameters, input).
    """
    batch = np.asarray(batch, dtype=np.float64)
    spec = model.spec
    train = model.mode == "train"
    use_dropout = train and spec.dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("train-mode forward with dropout requires an rng stream")

    cache = {"layers": [], "conv": None}
    if spec.architecture == "tiny-conv":
        a, conv_cache = _conv_forward(model, batch)
        cache["conv"] = conv_cache
    else:
        if batch.ndim != 2 or batch.shape[1] != spec.input_dim:
            raise ValueError(f"expected batch of shape (n, {spec.input_dim}), got {batch.shape}")
        a = batch
    cache["head_input"] = a

    n_hidden = len(spec.hidden)
    for i in range(n_hidden):
        z = a @ model.params[f"w{i}"] + model.params[f"b{i}"]
        act = _activate(spec.activation, z)
        if use_dropout:
            mask = (rng.uniform(size=act.shape) >= spec.dropout) / (1.0 - spec.dropout)
            out = act * mask
        else:
            mask = None
            out = act
        cache["layers"].append({"input": a, "z": z, "act": act, "mask": mask})
        a = out
    logits = a @ model.params[f"w{n_hidden}"] + model.params[f"b{n_hidden}"]
    cache["logits_input"] = a
    probs = softmax(logits)
    cache["probs"] = probs
    return probs, cache


def backward(model: Model, cache, dlogits):
    """Backpropagate a gradient w.r.t. the logits; returns gradient blocks.

    For cross-entropy-through-softmax callers pass (probs - target) scaled by
    the loss normalization directly; the fused form avoids differentiating
    through the probabilities.
    """
    if "logits_input" not in cache:
        raise ValueError("stale or incomplete forward cache")
    spec = model.spec
    n_hidden = len(spec.hidden)
    grads = {}
    a = cache["logits_input"]
    grads[f"w{n_hidden}"] = a.T @ dlogits
    grads[f"b{n_hidden}"] = dlogits.sum(axis=0)
    da = dlogits @ model.params[f"w{n_hidden}"].T
    for i in range(n_hidden - 1, -1, -1):
        layer = cache["layers"][i]
        if layer["mask"] is not None:
            da = da * layer["mask"]
        dz = da * _activate_grad(spec.activation, layer["z"], layer["act"])
        grads[f"w{i}"] = layer["input"].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        da = dz @ model.params[f"w{i}"].T
    if spec.architecture == "tiny-conv":
        _conv_backward(model, cache["conv"], da, grads)
    return grads


def save_checkpoint(model: Model, path):
    """Write a checkpoint: readable JSON header, then little-endian f64 blobs.

    Blobs follow the header's block manifest order; round-trips are bit-exact.
    """
    names = model.block_names()
    header = {
        "format_version": 1,
        "spec": asdict(model.spec),
        "seed": model.spec.seed,
        "blocks": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC.encode("ascii") + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n").decode("ascii", errors="replace")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        header = json.loads(fh.readline().decode("ascii"))
        if header.get("format_version") != 1:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        spec_dict = dict(header["spec"])
        if spec_dict.get("grid_shape") is not None:
            spec_dict["grid_shape"] = tuple(spec_dict["grid_shape"])
        spec_dict["hidden"] = tuple(spec_dict["hidden"])
        spec = ModelSpec(**spec_dict)
        params = {}
        for block in header["blocks"]:
            shape = tuple(block["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"truncated checkpoint: block {block['name']!r}")
            params[block["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return Model(spec=spec, params=params, mode="eval")
