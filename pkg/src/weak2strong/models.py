"""Small numpy models with hand-written reverse-mode gradients.

Three families are supported:

* ``mlp``: dense layers with ReLU between them.
* ``tiny_conv``: one 3x3 same-padded convolution, ReLU, global average pool,
  then a dense head (optionally with hidden dense layers).
* ``tiny_denoiser``: an MLP over ``[x_t, sinusoidal(t)]`` predicting noise.

Parameters live in :class:`ModelParams`, an ordered mapping of names to 1-D
or 2-D arrays. Convolution kernels are stored flattened as
``(filters, channels * 9)`` so every weight is a matrix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DivergenceError, FormatError

FAMILIES = ("mlp", "tiny_conv", "tiny_denoiser")
CHECKPOINT_VERSION = 1


class ModelParams(Mapping[str, np.ndarray]):
    """Ordered, name-addressed parameter arrays.

    Behaves like a read-only mapping; arithmetic helpers return new objects.
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | list[tuple[str, np.ndarray]]):
        items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
        names = [k for k, _ in items]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self._entries: dict[str, np.ndarray] = {}
        for name, arr in items:
            arr = np.asarray(arr)
            if arr.ndim not in (1, 2):
                raise ValueError(f"parameter {name!r} must be 1-D or 2-D, got shape {arr.shape}")
            self._entries[name] = arr

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._entries.items())
        return f"ModelParams({shapes})"

    def kind(self, name: str) -> str:
        return "matrix" if self._entries[name].ndim == 2 else "vector"

    def copy(self) -> "ModelParams":
        return ModelParams([(k, v.copy()) for k, v in self._entries.items()])

    def map(self, fn) -> "ModelParams":
        return ModelParams([(k, fn(v)) for k, v in self._entries.items()])

    def zip_map(self, other: "ModelParams", fn) -> "ModelParams":
        self.check_compatible(other)
        return ModelParams([(k, fn(v, other[k])) for k, v in self._entries.items()])

    def check_compatible(self, other: Mapping[str, np.ndarray]) -> None:
        if list(other) != list(self._entries):
            raise ValueError("parameter names differ")
        for k, v in self._entries.items():
            if np.shape(other[k]) != v.shape:
                raise ValueError(f"shape mismatch for {k!r}: {np.shape(other[k])} vs {v.shape}")

    def __add__(self, other):
        return self.zip_map(other, np.add)

    def scale(self, c: float) -> "ModelParams":
        return self.map(lambda v: c * v)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(v, dtype=np.float64)))
                                 for v in self._entries.values())))

    def ravel(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def unravel(self, flat: np.ndarray) -> "ModelParams":
        out, i = [], 0
        for k, v in self._entries.items():
            out.append((k, np.asarray(flat[i:i + v.size], dtype=v.dtype).reshape(v.shape)))
            i += v.size
        return ModelParams(out)

    def astype(self, dtype) -> "ModelParams":
        return self.map(lambda v: v.astype(dtype))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in self._entries.items():
            h.update(k.encode())
            h.update(str(v.dtype).encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def equal(self, other: "ModelParams") -> bool:
        """Bitwise equality."""
        return list(self) == list(other) and all(
            self[k].dtype == other[k].dtype and self[k].tobytes() == other[k].tobytes() for k in self)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; ``(spec, seed)`` determines the initial weights.

    ``input_dim`` is an int for ``mlp``/``tiny_denoiser`` (data dimension) and
    a ``(channels, height, width)`` tuple for ``tiny_conv``.
    """

    family: str = "mlp"
    widths: tuple[int, ...] = (64, 64)
    input_dim: int | tuple[int, ...] = 2
    output_dim: int = 10
    seed: int = 0
    embed_dim: int = 16

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.family == "tiny_conv":
            dims = tuple(int(d) for d in np.atleast_1d(self.input_dim))
            if len(dims) != 3 or not self.widths:
                raise ValueError("tiny_conv needs input_dim=(C, H, W) and at least one width")
            object.__setattr__(self, "input_dim", dims)
        else:
            object.__setattr__(self, "input_dim", int(self.input_dim))
        if self.family == "tiny_denoiser" and self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if self.output_dim <= 0:
            raise ValueError("output_dim must be positive")

    def with_seed(self, seed: int) -> "ModelSpec":
        return ModelSpec(self.family, self.widths, self.input_dim, self.output_dim, seed, self.embed_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        if isinstance(self.input_dim, tuple):
            d["input_dim"] = list(self.input_dim)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        if isinstance(d.get("input_dim"), list):
            d["input_dim"] = tuple(d["input_dim"])
        d["widths"] = tuple(d.get("widths", ()))
        return cls(**d)


def _dense_dims(spec: ModelSpec) -> list[int]:
    if spec.family == "mlp":
        first = spec.input_dim
        hidden = list(spec.widths)
    elif spec.family == "tiny_denoiser":
        first = spec.input_dim + spec.embed_dim
        hidden = list(spec.widths)
    else:
        first = spec.widths[0]
        hidden = list(spec.widths[1:])
    return [first, *hidden, spec.output_dim]


def init_params(spec: ModelSpec, dtype=np.float64) -> ModelParams:
    """Uniform fan-in initialisation, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    rng = np.random.default_rng(spec.seed)
    entries = []
    if spec.family == "tiny_conv":
        c = spec.input_dim[0]
        fan_in = c * 9
        bound = 1.0 / np.sqrt(fan_in)
        entries.append(("conv.weight", rng.uniform(-bound, bound, (spec.widths[0], fan_in))))
        entries.append(("conv.bias", rng.uniform(-bound, bound, spec.widths[0])))
    dims = _dense_dims(spec)
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(a)
        entries.append((f"dense{i}.weight", rng.uniform(-bound, bound, (a, b))))
        entries.append((f"dense{i}.bias", rng.uniform(-bound, bound, b)))
    return ModelParams([(k, v.astype(dtype)) for k, v in entries])


def timestep_embedding(t: np.ndarray, dim: int, t_scale: float = 100.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(t_scale) * np.arange(half) / max(half - 1, 1))
    angles = t * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _im2col(x: np.ndarray) -> np.ndarray:
    # (n, C, H, W) -> (n*H*W, C*9) patches of a 3x3 same-padded convolution.
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(padded, (3, 3), axis=(2, 3))  # n, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _dense_input(spec: ModelSpec, inputs, dtype):
    if spec.family == "mlp":
        x = np.asarray(inputs)
        if x.ndim != 2 or x.shape[1] != spec.input_dim:
            raise ValueError(f"expected inputs of shape (n, {spec.input_dim}), got {x.shape}")
        return x, {}
    if spec.family == "tiny_denoiser":
        try:
            x, t = inputs
        except (TypeError, ValueError):
            raise ValueError("tiny_denoiser expects inputs=(x_t, timesteps)") from None
        x = np.asarray(x)
        t = np.asarray(t)
        if x.ndim != 2 or x.shape[1] != spec.input_dim or t.shape != (x.shape[0],):
            raise ValueError(f"expected x_t (n, {spec.input_dim}) and t (n,), got {x.shape}, {t.shape}")
        emb = timestep_embedding(t, spec.embed_dim).astype(dtype, copy=False)
        return np.concatenate([x.astype(dtype, copy=False), emb], axis=1), {}
    return None, {}


def forward(params: ModelParams, spec: ModelSpec, inputs, return_cache: bool = False):
    """Run the model; returns outputs, or ``(outputs, cache)`` for :func:`backward`."""
    dtype = params[next(iter(params))].dtype
    cache: dict = {"acts": [], "pre": []}
    if spec.family == "tiny_conv":
        x = np.asarray(inputs)
        if x.ndim != 4 or x.shape[1:] != spec.input_dim:
            raise ValueError(f"expected inputs of shape (n, {spec.input_dim}), got {x.shape}")
        n, _, hgt, wid = x.shape
        cols = _im2col(x.astype(dtype, copy=False))
        z = cols @ params["conv.weight"].T + params["conv.bias"]
        a = np.maximum(z, 0)
        h = a.reshape(n, hgt * wid, -1).mean(axis=1)
        cache.update(cols=cols, conv_pre=z, spatial=hgt * wid, n=n)
    else:
        h, _ = _dense_input(spec, inputs, dtype)
    n_layers = len(_dense_dims(spec)) - 1
    for i in range(n_layers):
        cache["acts"].append(h)
        z = h @ params[f"dense{i}.weight"] + params[f"dense{i}.bias"]
        if i < n_layers - 1:
            cache["pre"].append(z)
            h = np.maximum(z, 0)
        else:
            h = z
    if not np.all(np.isfinite(h)):
        raise DivergenceError("non-finite model outputs")
    return (h, cache) if return_cache else h


def features(params: ModelParams, spec: ModelSpec, inputs) -> np.ndarray:
    """Penultimate-layer activations (input to the final dense layer)."""
    _, cache = forward(params, spec, inputs, return_cache=True)
    return cache["acts"][-1]


def backward(params: ModelParams, spec: ModelSpec, inputs, upstream, cache=None) -> ModelParams:
    """Gradient of ``sum(outputs * upstream)`` with respect to every parameter."""
    if cache is None:
        _, cache = forward(params, spec, inputs, return_cache=True)
    upstream = np.asarray(upstream)
    n_layers = len(_dense_dims(spec)) - 1
    expected = (cache["acts"][0].shape[0], spec.output_dim)
    if upstream.shape != expected:
        raise ValueError(f"upstream gradient shape {upstream.shape} != {expected}")
    grads: dict[str, np.ndarray] = {}
    d = upstream.astype(params["dense0.weight"].dtype, copy=False)
    for i in reversed(range(n_layers)):
        a = cache["acts"][i]
        grads[f"dense{i}.weight"] = a.T @ d
        grads[f"dense{i}.bias"] = d.sum(axis=0)
        if i > 0 or spec.family == "tiny_conv":
            d = d @ params[f"dense{i}.weight"].T
            if i > 0:
                d = d * (cache["pre"][i - 1] > 0)
    if spec.family == "tiny_conv":
        n, spatial = cache["n"], cache["spatial"]
        dz = np.repeat(d[:, None, :] / spatial, spatial, axis=1).reshape(n * spatial, -1)
        dz = dz * (cache["conv_pre"] > 0)
        grads["conv.weight"] = dz.T @ cache["cols"]
        grads["conv.bias"] = dz.sum(axis=0)
    return ModelParams([(k, grads[k]) for k in params])


def _freeze(params: ModelParams) -> ModelParams:
    frozen = params.copy()
    for v in frozen.values():
        v.setflags(write=False)
    return frozen


@dataclass(frozen=True)
class FrozenTeacher:
    """A trained model whose parameters are read-only."""

    params: ModelParams
    spec: ModelSpec
    reference_metric: float = float("nan")
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "params", _freeze(self.params))

    def forward(self, inputs) -> np.ndarray:
        return forward(self.params, self.spec, inputs)

    def features(self, inputs) -> np.ndarray:
        return features(self.params, self.spec, inputs)

    def fingerprint(self) -> str:
        return self.params.fingerprint()

    def with_reference(self, metric: float) -> "FrozenTeacher":
        return FrozenTeacher(self.params, self.spec, float(metric), dict(self.meta))

    def save(self, path) -> Path:
        return save_checkpoint(path, self.spec, self.params, self.reference_metric, self.meta)

    @classmethod
    def load(cls, path) -> "FrozenTeacher":
        spec, params, metric, meta = load_checkpoint(path)
        return cls(params, spec, metric, meta)


def save_checkpoint(path, spec: ModelSpec, params: ModelParams, reference_metric: float,
                    meta: dict | None = None) -> Path:
    """Write a versioned ``.npz`` checkpoint with a JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "weak2strong-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "reference_metric": float(reference_metric),
        "param_names": list(params),
        "meta": meta or {},
    }
    arrays = {f"param_{i}": np.ascontiguousarray(v) for i, v in enumerate(params.values())}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)
    return path


def load_checkpoint(path):
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            header = json.loads(bytes(data["header"]).decode())
            if header.get("format") != "weak2strong-checkpoint":
                raise FormatError(f"{path}: not a weak2strong checkpoint")
            if header.get("version") != CHECKPOINT_VERSION:
                raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
            names = header["param_names"]
            params = ModelParams([(name, data[f"param_{i}"].copy()) for i, name in enumerate(names)])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed checkpoint ({exc})") from exc
    spec = ModelSpec.from_dict(header["spec"])
    return spec, params, header["reference_metric"], header.get("meta", {})
