"""Sequential CNN description, parameters, and the activation/gradient capture.

A capture at conv layer ``i`` reads the output of that conv's whole block,
meaning the last layer before the next conv2d or the head. For SmallCamNet
that point is the max-pool output, so the last-conv capture is exactly the
tensor fed to global average pooling.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import ArgumentError, ShapeError
from .rng import SplitMix64

LAYER_KINDS = ("conv2d", "relu", "max_pool2d", "global_avg_pool", "dense", "flatten")
HEAD_KINDS = ("gap_linear", "mlp")


@dataclass(frozen=True)
class Layer:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    k: int = 0
    stride: int = 1
    pad: int = 0
    in_dim: int = 0
    out_dim: int = 0

    def to_dict(self) -> dict:
        keys = {
            "conv2d": ("in_ch", "out_ch", "k", "stride", "pad"),
            "max_pool2d": ("k", "stride"),
            "dense": ("in_dim", "out_dim"),
        }.get(self.kind, ())
        return {"kind": self.kind, **{key: getattr(self, key) for key in keys}}

    @classmethod
    def from_dict(cls, d: dict) -> "Layer":
        return cls(**d)


def conv2d(in_ch, out_ch, k=3, stride=1, pad=1):
    return Layer("conv2d", in_ch=in_ch, out_ch=out_ch, k=k, stride=stride, pad=pad)


def relu():
    return Layer("relu")


def max_pool2d(k=2, stride=2):
    return Layer("max_pool2d", k=k, stride=stride)


def global_avg_pool():
    return Layer("global_avg_pool")


def dense(in_dim, out_dim):
    return Layer("dense", in_dim=in_dim, out_dim=out_dim)


def flatten():
    return Layer("flatten")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    head_kind: str = "gap_linear"
    input_shape: tuple = (3, 96, 96)
    input_norm: tuple | None = None
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.input_norm is not None:
            mean, std = (tuple(float(v) for v in part) for part in self.input_norm)
            if len(mean) != self.input_shape[0] or len(std) != self.input_shape[0] or min(std) <= 0:
                raise ArgumentError(f"input_norm needs one mean and one positive std per channel, got {self.input_norm}")
            object.__setattr__(self, "input_norm", (mean, std))
        object.__setattr__(self, "shapes", tuple(self._propagate()))
        self._check_head()

    def _propagate(self):
        shape = self.input_shape
        if len(shape) != 3 or min(shape) < 1:
            raise ShapeError(f"input_shape must be C x H x W, got {shape}")
        out = []
        for i, layer in enumerate(self.layers):
            kind = layer.kind
            if kind not in LAYER_KINDS:
                raise ArgumentError(f"layer {i}: unknown kind {kind!r}")
            if kind == "conv2d":
                if len(shape) != 3 or shape[0] != layer.in_ch:
                    raise ShapeError(f"layer {i}: conv2d expects {layer.in_ch} input channels, got {shape}")
                shape = (layer.out_ch,
                         L.conv_out_extent(shape[1], layer.k, layer.stride, layer.pad),
                         L.conv_out_extent(shape[2], layer.k, layer.stride, layer.pad))
            elif kind == "max_pool2d":
                if len(shape) != 3 or shape[1] % layer.k or shape[2] % layer.k or layer.k != layer.stride:
                    raise ShapeError(f"layer {i}: max_pool2d(k={layer.k}) cannot pool {shape}")
                shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
            elif kind == "global_avg_pool":
                if len(shape) != 3:
                    raise ShapeError(f"layer {i}: global_avg_pool needs a feature map, got {shape}")
                shape = (shape[0],)
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if shape != (layer.in_dim,):
                    raise ShapeError(f"layer {i}: dense expects ({layer.in_dim},), got {shape}")
                shape = (layer.out_dim,)
            out.append(shape)
        return out

    def _check_head(self):
        if self.head_kind not in HEAD_KINDS:
            raise ArgumentError(f"unknown head_kind {self.head_kind!r}")
        kinds = [layer.kind for layer in self.layers]
        if "conv2d" not in kinds:
            raise ArgumentError("model needs at least one conv2d layer")
        if not self.shapes or self.shapes[-1] != (2,):
            raise ShapeError("model must end in 2 logits")
        head = self.head_start
        if any(k == "conv2d" for k in kinds[head:]):
            raise ArgumentError("conv2d layers must precede the head")
        if self.head_kind == "gap_linear" and kinds[head:] != ["global_avg_pool", "dense"]:
            raise ArgumentError("gap_linear head must be exactly global_avg_pool -> dense(., 2)")

    @property
    def head_start(self) -> int:
        for i, layer in enumerate(self.layers):
            if layer.kind in ("global_avg_pool", "flatten", "dense"):
                return i
        return len(self.layers)

    @property
    def conv_ids(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv2d"]

    @property
    def last_conv(self) -> int:
        return self.conv_ids[-1]

    def capture_index(self, layer_id: int) -> int:
        """Index of the layer whose output is read when capturing at ``layer_id``."""
        if not (0 <= layer_id < len(self.layers)) or self.layers[layer_id].kind != "conv2d":
            raise ArgumentError(f"layer_id {layer_id} is not a conv2d layer")
        j = layer_id
        while j + 1 < self.head_start and self.layers[j + 1].kind != "conv2d":
            j += 1
        return j

    def param_prefix(self, i: int) -> str | None:
        kind = self.layers[i].kind
        if kind not in ("conv2d", "dense"):
            return None
        tag = "conv" if kind == "conv2d" else "dense"
        return f"{tag}{sum(1 for l in self.layers[:i] if l.kind == kind)}"

    def param_shapes(self) -> list[tuple[str, tuple]]:
        out = []
        for i, layer in enumerate(self.layers):
            p = self.param_prefix(i)
            if layer.kind == "conv2d":
                out.append((f"{p}.weight", (layer.out_ch, layer.in_ch, layer.k, layer.k)))
                out.append((f"{p}.bias", (layer.out_ch,)))
            elif layer.kind == "dense":
                out.append((f"{p}.weight", (layer.out_dim, layer.in_dim)))
                out.append((f"{p}.bias", (layer.out_dim,)))
        return out

    def head_param_names(self) -> list[str]:
        return [name for i in range(self.head_start, len(self.layers))
                if (p := self.param_prefix(i)) for name in (f"{p}.weight", f"{p}.bias")]

    def to_dict(self) -> dict:
        d = {"layers": [l.to_dict() for l in self.layers], "head_kind": self.head_kind,
             "input_shape": list(self.input_shape)}
        if self.input_norm is not None:
            d["input_norm"] = {"mean": list(self.input_norm[0]), "std": list(self.input_norm[1])}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        norm = d.get("input_norm")
        return cls(layers=tuple(Layer.from_dict(l) for l in d["layers"]), head_kind=d["head_kind"],
                   input_shape=tuple(d["input_shape"]),
                   input_norm=None if norm is None else (tuple(norm["mean"]), tuple(norm["std"])))

    def with_input_norm(self, mean, std) -> "ModelSpec":
        return ModelSpec(self.layers, self.head_kind, self.input_shape, (tuple(mean), tuple(std)))


def small_cam_net(input_shape=(3, 96, 96), head_kind="gap_linear", channels=(16, 32, 64),
                  input_norm=None) -> ModelSpec:
    """Three conv3x3-relu-maxpool blocks followed by a GAP+linear (or MLP) head."""
    layers = []
    c_in = input_shape[0]
    for c in channels:
        layers += [conv2d(c_in, c), relu(), max_pool2d()]
        c_in = c
    if head_kind == "gap_linear":
        layers += [global_avg_pool(), dense(c_in, 2)]
    else:
        h = input_shape[1] >> len(channels)
        w = input_shape[2] >> len(channels)
        layers += [flatten(), dense(c_in * h * w, 64), relu(), dense(64, 2)]
    return ModelSpec(tuple(layers), head_kind, input_shape, input_norm)


class Parameters:
    """Ordered named tensors with a per-tensor trainable flag."""

    def __init__(self, tensors: dict, trainable: dict | None = None):
        self.tensors = dict(tensors)
        self.trainable = {n: True for n in self.tensors} if trainable is None else dict(trainable)
        if set(self.trainable) != set(self.tensors):
            raise ArgumentError("trainable flags must cover exactly the parameter names")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "Parameters":
        return Parameters({n: t.copy() for n, t in self.tensors.items()}, self.trainable)

    def astype(self, dtype) -> "Parameters":
        return Parameters({n: t.astype(dtype) for n, t in self.tensors.items()}, self.trainable)

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if self.trainable[n]]

    def check(self, spec: ModelSpec):
        expected = spec.param_shapes()
        if [n for n, _ in expected] != list(self.tensors):
            raise ShapeError(f"parameter names {list(self.tensors)} do not match the model")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.tensors[name].shape} != {shape}")


def fan_in(spec: ModelSpec, name: str) -> int:
    shape = dict(spec.param_shapes())[name.rsplit(".", 1)[0] + ".weight"]
    return int(np.prod(shape[1:]))


def init_params(spec: ModelSpec, seed: int) -> Parameters:
    """Uniform(-b, b) weights with b = sqrt(6 / fan_in), zero biases, fixed draw order."""
    rng = SplitMix64(seed)
    tensors = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            b = math.sqrt(6.0 / fan_in(spec, name))
            tensors[name] = rng.uniform_array(-b, b, shape).astype(np.float32)
    return Parameters(tensors)


@dataclass
class Saved:
    """Everything the reverse pass needs, plus the captured activations."""

    spec: ModelSpec
    params: Parameters
    caches: list
    outputs: dict
    logits: np.ndarray
    capture_at: int | None = None
    layer_id: int | None = None


def forward(spec: ModelSpec, params: Parameters, x: np.ndarray, start: int = 0,
            capture_at: int | None = None, keep: bool = True):
    """Run layers ``start..end`` on an N-leading batch.

    The fixed input normalization, if any, is applied when ``start`` is 0.

    Returns ``(logits, caches, outputs)``; ``outputs`` holds the output of
    layer ``capture_at`` when requested. With ``keep=False`` nothing but the
    logits is retained.
    """
    caches = []
    outputs = {}
    if start == 0 and spec.input_norm is not None:
        mean, std = (np.asarray(v, dtype=x.dtype)[None, :, None, None] for v in spec.input_norm)
        x = (x - mean) / std
    for i in range(start, len(spec.layers)):
        layer = spec.layers[i]
        kind = layer.kind
        p = spec.param_prefix(i)
        if kind == "conv2d":
            x, cache = L.conv2d_forward(x, params[f"{p}.weight"], params[f"{p}.bias"], layer.stride, layer.pad)
        elif kind == "relu":
            x, cache = L.relu_forward(x)
        elif kind == "max_pool2d":
            x, cache = L.max_pool2d_forward(x, layer.k, layer.stride)
        elif kind == "global_avg_pool":
            x, cache = L.global_avg_pool_forward(x)
        elif kind == "dense":
            x, cache = L.dense_forward(x, params[f"{p}.weight"], params[f"{p}.bias"])
        else:
            x, cache = L.flatten_forward(x)
        caches.append(cache if keep else None)
        if i == capture_at:
            outputs[i] = x
    return x, caches, outputs


def backward(saved: Saved, dlogits: np.ndarray, want: list[str] | None = None):
    """Reverse pass from ``dlogits``; returns ``(param_grads, capture_grad)``.

    ``want`` lists the parameter names to differentiate (default: the
    trainable ones). The pass stops as soon as nothing below is needed.
    """
    spec = saved.spec
    want = set(saved.params.trainable_names() if want is None else want)
    lowest_param = len(spec.layers)
    for i in range(len(spec.layers)):
        p = spec.param_prefix(i)
        if p and (f"{p}.weight" in want or f"{p}.bias" in want):
            lowest_param = i
            break
    floor = lowest_param
    if saved.capture_at is not None:
        floor = min(floor, saved.capture_at + 1)
    grads = {}
    capture_grad = None
    g = dlogits
    for i in range(len(spec.layers) - 1, floor - 1, -1):
        if i == saved.capture_at:
            capture_grad = g
        layer, cache = spec.layers[i], saved.caches[i]
        kind = layer.kind
        need_input = i > lowest_param or (saved.capture_at is not None and i > saved.capture_at)
        if kind in ("conv2d", "dense"):
            p = spec.param_prefix(i)
            fn = L.conv2d_backward if kind == "conv2d" else L.dense_backward
            g, dw, db = fn(g, cache, need_input=need_input)
            if f"{p}.weight" in want:
                grads[f"{p}.weight"] = dw
            if f"{p}.bias" in want:
                grads[f"{p}.bias"] = db
        elif not need_input:
            break
        elif kind == "relu":
            g = L.relu_backward(g, cache)
        elif kind == "max_pool2d":
            g = L.max_pool2d_backward(g, cache)
        elif kind == "global_avg_pool":
            g = L.global_avg_pool_backward(g, cache)
        else:
            g = L.flatten_backward(g, cache)
    if saved.capture_at is not None and capture_grad is None:
        capture_grad = g
    return grads, capture_grad


@dataclass
class Capture:
    layer_id: int
    activations: np.ndarray
    gradients: np.ndarray
    class_index: int


def _check_image(spec: ModelSpec, image: np.ndarray):
    if tuple(image.shape) != spec.input_shape:
        raise ShapeError(f"image shape {tuple(image.shape)} does not match model input {spec.input_shape}")


def forward_with_capture(spec: ModelSpec, params: Parameters, image: np.ndarray, layer_id: int | None = None):
    """Single-image forward keeping the caches and the activations at ``layer_id``."""
    layer_id = spec.last_conv if layer_id is None else layer_id
    cap = spec.capture_index(layer_id)
    _check_image(spec, image)
    logits, caches, outputs = forward(spec, params, image[None], capture_at=cap)
    saved = Saved(spec, params, caches, outputs, logits[0], cap, layer_id)
    return logits[0], saved


def backward_from_logit(saved: Saved, class_index: int, want: list[str] | None = None):
    """Differentiate the pre-softmax logit ``class_index``.

    Returns the Capture at the hooked layer and gradients for every trainable
    parameter (or for ``want``).
    """
    if class_index not in (0, 1):
        raise ArgumentError(f"class_index must be 0 or 1, got {class_index}")
    seed = np.zeros((1, 2), dtype=saved.logits.dtype)
    seed[0, class_index] = 1
    grads, cg = backward(saved, seed, want)
    act = saved.outputs[saved.capture_at][0]
    return Capture(saved.layer_id, act, cg[0], class_index), grads


def predict_logits(spec: ModelSpec, params: Parameters, images: np.ndarray, batch_size: int = 64,
                   workers: int = 1) -> np.ndarray:
    """Batched inference; ``workers`` > 1 fans batches out to threads (same batches, same results)."""
    starts = range(0, len(images), batch_size)

    def run(s):
        return forward(spec, params, images[s:s + batch_size], keep=False)[0]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(run, starts))
    else:
        out = [run(s) for s in starts]
    return np.concatenate(out, axis=0)


def grad_check(spec: ModelSpec, params: Parameters, image: np.ndarray, eps: float = 1e-2,
               class_index: int = 0, per_tensor: int = 6, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The objective is the logit ``class_index``. ``eps`` is relative: each
    tensor is perturbed by ``eps * scale`` where scale is the layer's init
    bound sqrt(6 / fan_in). Both routes run in float64 on ``per_tensor``
    sampled entries of every tensor.
    """
    if not eps > 0:
        raise ArgumentError(f"eps must be > 0, got {eps}")
    _check_image(spec, image)
    p64 = params.astype(np.float64)
    x = image.astype(np.float64)[None]
    names = list(p64)
    logits, caches, _ = forward(spec, p64, x)
    saved = Saved(spec, p64, caches, {}, logits[0])
    seed_grad = np.zeros((1, 2))
    seed_grad[0, class_index] = 1.0
    grads, _ = backward(saved, seed_grad, want=names)

    rng = SplitMix64(seed)
    worst = 0.0
    for name in names:
        t = p64[name]
        h = eps * math.sqrt(6.0 / fan_in(spec, name))
        flat = t.reshape(-1)
        picks = sorted({rng.randint(0, flat.size - 1) for _ in range(per_tensor)})
        for j in picks:
            keep = flat[j]
            flat[j] = keep + h
            up = forward(spec, p64, x, keep=False)[0][0, class_index]
            flat[j] = keep - h
            down = forward(spec, p64, x, keep=False)[0][0, class_index]
            flat[j] = keep
            fd = (up - down) / (2 * h)
            an = grads[name].reshape(-1)[j]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    return float(worst)
