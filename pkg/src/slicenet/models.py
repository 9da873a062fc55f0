"""Slice-set network, 2D-slice LSTM baseline, 3D-CNN baseline, and checkpoints.

All three families share the same conv block (3x3 conv, instance norm, ReLU,
2x2 max-pool). Slice models run it in 2D on every slice of a scan at once;
the 3D baseline runs the same block structure in 3D on the whole volume.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aggregation
from .aggregation import AttentionParams
from .autodiff import (
    Tensor,
    conv_nd,
    instance_norm,
    linear,
    lstm_step,
    max_pool_nd,
    no_grad,
    stack,
)
from .data import SliceSet, Volume
from .errors import ConfigurationError, DataError, EmptySetError, FormatError

FAMILIES = ("slice_mean", "slice_max", "slice_attention", "slice_rnn", "cnn3d")
SLICE_SET_FAMILIES = ("slice_mean", "slice_max", "slice_attention")


@dataclass
class ModelSpec:
    family: str = "slice_mean"
    d: int = 32
    d_key: int | None = None
    d_value: int | None = None
    heads: int = 1
    encoder_widths: tuple = (32, 64, 128, 256, 256)
    head_hidden: int = 64
    rnn_hidden: int = 128
    rnn_feature: int = 2
    axis: str = "sagittal"
    input_dims: tuple | None = None
    head_combine: str = "concat"
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown model family {self.family!r}; choose from {FAMILIES}")
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.input_dims is not None:
            self.input_dims = tuple(int(n) for n in self.input_dims)
        if self.d_key is None:
            self.d_key = self.d
        if self.d_value is None:
            self.d_value = self.d
        if self.head_combine != "concat":
            raise ConfigurationError("only head_combine='concat' is implemented")
        if min((self.d, self.d_key, self.d_value, self.heads, self.head_hidden,
                self.rnn_hidden, self.rnn_feature) + self.encoder_widths) < 1:
            raise ConfigurationError("all widths must be positive")
        if self.family == "cnn3d" and self.input_dims is None:
            raise ConfigurationError("cnn3d needs input_dims to size its final convolution")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = (s.strip() for s in line.partition("="))
            if key not in kinds:
                raise FormatError(f"unknown model spec key {key!r}")
            kw[key] = _parse_field(key, raw)
        return cls(**kw)


_INT_FIELDS = {"d", "d_key", "d_value", "heads", "head_hidden", "rnn_hidden", "rnn_feature", "seed"}
_TUPLE_FIELDS = {"encoder_widths", "input_dims"}


def _parse_field(key: str, raw: str):
    if raw == "":
        return None
    if key in _INT_FIELDS:
        return int(raw)
    if key in _TUPLE_FIELDS:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


# -- building blocks ---------------------------------------------------------------------

class _Init:
    def __init__(self, seed: int, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def he(self, shape, fan_in):
        bound = math.sqrt(6.0 / fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape).astype(self.dtype), requires_grad=True)

    def uniform(self, shape, bound):
        return Tensor(self.rng.uniform(-bound, bound, size=shape).astype(self.dtype), requires_grad=True)

    def const(self, shape, value=0.0):
        return Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True)


def _conv_stack_params(init: _Init, widths, nd: int, c_in: int = 1) -> dict:
    params = {}
    k = (3,) * nd
    for i, w in enumerate(widths):
        params[f"conv{i}.weight"] = init.he((w, c_in) + k, c_in * 3 ** nd)
        params[f"conv{i}.bias"] = init.const(w)
        params[f"norm{i}.gain"] = init.const(w, 1.0)
        params[f"norm{i}.shift"] = init.const(w)
        c_in = w
    return params


def _conv_stack(params: dict, x: Tensor, n_blocks: int, nd: int) -> Tensor:
    for i in range(n_blocks):
        x = conv_nd(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=1, padding=1)
        x = instance_norm(x, params[f"norm{i}.gain"], params[f"norm{i}.shift"])
        x = x.relu()
        window = tuple(min(2, s) for s in x.shape[2:])
        x = max_pool_nd(x, nd, window)
    return x


def pooled_extent(dims: Sequence[int], n_blocks: int) -> tuple:
    dims = tuple(dims)
    for _ in range(n_blocks):
        dims = tuple((s - min(2, s)) // min(2, s) + 1 for s in dims)
    return dims


def _head_params(init: _Init, n_in: int, hidden: int) -> dict:
    return {"head.fc1.weight": init.he((hidden, n_in), n_in),
            "head.fc1.bias": init.const(hidden),
            # zero output weights: the first prediction is exactly the output bias
            "head.fc2.weight": init.const((1, hidden)),
            "head.fc2.bias": init.const(1)}


def _head(params: dict, z: Tensor) -> Tensor:
    h = linear(z, params["head.fc1.weight"], params["head.fc1.bias"]).relu()
    out = linear(h, params["head.fc2.weight"], params["head.fc2.bias"])
    return out.reshape(out.shape[0])


# -- models -----------------------------------------------------------------------------

class Model:
    """Named parameters plus a batched forward pass returning one age per scan."""

    output_weight = "head.fc2.weight"
    output_bias = "head.fc2.bias"

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def set_output_bias(self, value: float) -> None:
        self.params[self.output_bias].data[...] = value

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise FormatError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise FormatError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = v.astype(self.dtype, copy=True)

    def forward(self, scans: Sequence) -> Tensor:
        raise NotImplementedError

    def prepare(self, volume: Volume | np.ndarray):
        """Model input for a full volume (complete slice set or raw voxels)."""
        raise NotImplementedError

    def predict(self, scans: Sequence, batch_size: int = 8) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(scans), batch_size):
                out.append(self.forward(scans[i:i + batch_size]).data.astype(np.float64))
        return np.concatenate(out) if out else np.zeros(0)


def _planes(scan) -> np.ndarray:
    planes = scan.planes if isinstance(scan, SliceSet) else np.asarray(scan)
    if planes.ndim != 3:
        raise DataError(f"a slice scan must be [p, H, W], got shape {planes.shape}")
    if planes.shape[0] == 0:
        raise EmptySetError("scan has no slices")
    return planes


class _SliceModel(Model):
    def _encoder_params(self, init: _Init, d_out: int) -> dict:
        params = _conv_stack_params(init, self.spec.encoder_widths, nd=2)
        c_last = self.spec.encoder_widths[-1]
        params["proj.weight"] = init.he((d_out, c_last, 1, 1), c_last)
        params["proj.bias"] = init.const(d_out)
        return params

    def encode(self, planes: np.ndarray) -> Tensor:
        """Shared 2D encoder on a stack of slices ``[P, H, W]`` -> ``[P, d]``."""
        x = Tensor(planes[:, None].astype(self.dtype, copy=False))
        x = _conv_stack(self.params, x, len(self.spec.encoder_widths), nd=2)
        x = conv_nd(x, self.params["proj.weight"], self.params["proj.bias"])
        return x.mean(axis=(2, 3))

    def prepare(self, volume):
        from .data import slice_volume
        return slice_volume(volume, self.spec.axis)

    def _stacked(self, scans):
        planes = [_planes(s) for s in scans]
        shapes = {p.shape[1:] for p in planes}
        if len(shapes) > 1:
            raise DataError(f"slices in one batch have different shapes: {sorted(shapes)}")
        return planes


class SliceSetModel(_SliceModel):
    """2D encoder per slice, permutation-invariant pooling, feed-forward head."""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        if spec.family not in SLICE_SET_FAMILIES:
            raise ConfigurationError(f"{spec.family} is not a slice-set family")
        init = _Init(spec.seed, dtype)
        self.spec = spec
        params = self._encoder_params(init, spec.d)
        if spec.family == "slice_attention":
            att = AttentionParams.init(spec.d, spec.d_key, spec.d_value, spec.heads, init.rng, dtype)
            params.update({f"attention.{k}": v for k, v in att.tensors().items()})
            agg_out = spec.heads * spec.d_value
        else:
            agg_out = spec.d
        params.update(_head_params(init, agg_out, spec.head_hidden))
        super().__init__(spec, params)

    @property
    def attention(self) -> AttentionParams | None:
        if self.spec.family != "slice_attention":
            return None
        p = self.params
        return AttentionParams(p["attention.query"], p["attention.key.weight"], p["attention.key.bias"],
                               p["attention.value.weight"], p["attention.value.bias"])

    def aggregate(self, encodings: Tensor) -> Tensor:
        family = self.spec.family
        if family == "slice_mean":
            return aggregation.aggregate_mean(encodings)
        if family == "slice_max":
            return aggregation.aggregate_max(encodings)
        return aggregation.aggregate_attention(encodings, self.attention)

    def forward(self, scans):
        planes = self._stacked(scans)
        enc = self.encode(np.concatenate(planes))
        pooled, start = [], 0
        for p in planes:
            pooled.append(self.aggregate(enc[start:start + len(p)]))
            start += len(p)
        return _head(self.params, stack(pooled))


class SliceRNNModel(_SliceModel):
    """2D encoder per slice feeding an LSTM over slices in ascending index order."""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        if spec.family != "slice_rnn":
            raise ConfigurationError("SliceRNNModel needs family 'slice_rnn'")
        init = _Init(spec.seed, dtype)
        self.spec = spec
        params = self._encoder_params(init, spec.rnn_feature)
        h, f = spec.rnn_hidden, spec.rnn_feature
        bound = 1.0 / math.sqrt(h)
        params["lstm.w_ih"] = init.uniform((4 * h, f), bound)
        params["lstm.w_hh"] = init.uniform((4 * h, h), bound)
        params["lstm.bias"] = init.const(4 * h)
        params.update(_head_params(init, h, spec.head_hidden))
        super().__init__(spec, params)

    def _run(self, seq: Tensor) -> Tensor:
        """LSTM over ``[B, p, F]``; returns the final hidden state ``[B, H]``."""
        b, p = seq.shape[:2]
        hdim = self.spec.rnn_hidden
        h = Tensor(np.zeros((b, hdim), dtype=self.dtype))
        c = Tensor(np.zeros((b, hdim), dtype=self.dtype))
        for t in range(p):
            h, c = lstm_step(seq[:, t, :], h, c, self.params["lstm.w_ih"], self.params["lstm.w_hh"],
                             self.params["lstm.bias"])
        return h

    def forward(self, scans):
        planes = self._stacked(scans)
        lengths = {len(p) for p in planes}
        enc = self.encode(np.concatenate(planes))
        if len(lengths) == 1:
            seq = enc.reshape(len(planes), lengths.pop(), self.spec.rnn_feature)
            return _head(self.params, self._run(seq))
        finals, start = [], 0
        for p in planes:
            seq = enc[start:start + len(p)].reshape(1, len(p), self.spec.rnn_feature)
            finals.append(self._run(seq).reshape(self.spec.rnn_hidden))
            start += len(p)
        return _head(self.params, stack(finals))


class CNN3DModel(Model):
    """3D version of the slice encoder; a final full-extent conv gives one output."""

    output_weight = "final.weight"
    output_bias = "final.bias"

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        if spec.family != "cnn3d":
            raise ConfigurationError("CNN3DModel needs family 'cnn3d'")
        init = _Init(spec.seed, dtype)
        params = _conv_stack_params(init, spec.encoder_widths, nd=3)
        kernel = pooled_extent(spec.input_dims, len(spec.encoder_widths))
        params["final.weight"] = init.const((1, spec.encoder_widths[-1]) + kernel)
        params["final.bias"] = init.const(1)
        super().__init__(spec, params)

    def prepare(self, volume):
        return volume.voxels if isinstance(volume, Volume) else np.asarray(volume)

    def forward(self, scans):
        vols = [s.voxels if isinstance(s, Volume) else np.asarray(s) for s in scans]
        for v in vols:
            if v.shape != self.spec.input_dims:
                raise DataError(f"volume dims {v.shape} do not match model input {self.spec.input_dims}")
        x = Tensor(np.stack(vols)[:, None].astype(self.dtype, copy=False))
        x = _conv_stack(self.params, x, len(self.spec.encoder_widths), nd=3)
        out = conv_nd(x, self.params["final.weight"], self.params["final.bias"])
        return out.reshape(out.shape[0])


def build_model(spec: ModelSpec, dtype=np.float32) -> Model:
    if spec.family in SLICE_SET_FAMILIES:
        return SliceSetModel(spec, dtype)
    if spec.family == "slice_rnn":
        return SliceRNNModel(spec, dtype)
    return CNN3DModel(spec, dtype)


def param_count(model: Model) -> int:
    return model.param_count()


def encode_slices(slices: SliceSet | np.ndarray, model: _SliceModel) -> Tensor:
    """Per-slice encodings ``[p, d]`` in input order."""
    return model.encode(_planes(slices))


def slice_set_forward(scan: SliceSet | np.ndarray, model: SliceSetModel) -> float:
    with no_grad():
        return float(model.forward([scan]).data[0])


def slice_rnn_forward(scan: SliceSet | np.ndarray, model: SliceRNNModel) -> float:
    with no_grad():
        return float(model.forward([scan]).data[0])


def cnn3d_forward(volume: Volume | np.ndarray, model: CNN3DModel) -> float:
    with no_grad():
        return float(model.forward([volume]).data[0])


# -- checkpoints -----------------------------------------------------------------------------
#
# b"SNCK" | version u16 | spec length u32 | spec text (utf-8 "key = value" lines)
# | param count u32 | per param: name length u16, name, ndim u8, dims u32 x ndim,
#   float32 LE payload

CKPT_MAGIC = b"SNCK"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    spec = model.spec.to_text().encode()
    chunks = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(spec)), spec,
              struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{p.ndim}I", p.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    try:
        if raw[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        version, spec_len = struct.unpack_from("<HI", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        spec = ModelSpec.from_text(raw[pos:pos + spec_len].decode())
        pos += spec_len
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        state = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            ndim = raw[pos]
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            nbytes = 4 * math.prod(shape)
            if pos + nbytes > len(raw):
                raise FormatError(f"{path}: truncated parameter {name!r}")
            state[name] = np.frombuffer(raw, dtype="<f4", count=math.prod(shape), offset=pos).reshape(shape)
            pos += nbytes
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    model = build_model(spec)
    model.load_state_dict(state)
    return model
