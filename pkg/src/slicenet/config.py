"""Flat ``key = value`` run configuration with dotted namespaces.

A config file looks like::

    # comments and blank lines are ignored
    data.dir = runs/data
    model.family = slice_attention
    model.encoder_widths = 8,16,32
    train.lr = 1e-3

Every key has a default, so an empty file is a valid config. Unknown keys
are rejected rather than silently ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .models import ModelSpec
from .training import TrainConfig

DEFAULTS: dict[str, str] = {
    "data.dir": "data",
    "out.dir": "runs/train",
    "model.family": "slice_mean",
    "model.d": "32",
    "model.d_key": "",
    "model.d_value": "",
    "model.heads": "1",
    "model.encoder_widths": "32,64,128,256,256",
    "model.head_hidden": "64",
    "model.rnn_hidden": "128",
    "model.rnn_feature": "2",
    "model.axis": "sagittal",
    "model.head_combine": "concat",
    "model.seed": "0",
    "train.epochs": "100",
    "train.lr": "1e-4",
    "train.weight_decay": "1e-4",
    "train.batch_size": "8",
    "train.grad_clip": "auto",
    "train.seed": "0",
    "train.subsample_n": "",
    "ablate.models": "slice_mean,slice_max,slice_attention,slice_rnn,cnn3d",
    "ablate.kth": "1,2,4,5,10",
    "ablate.rand": "1.0,0.5,0.25,0.2,0.1",
    "ablate.fractions": "0.125,0.25,0.5",
    "ablate.axes": "sagittal,coronal,axial",
    "ablate.eval_seed": "0",
}

FILENAME = "config.txt"


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def parse_override(item: str) -> tuple[str, str]:
    key, sep, value = item.partition("=")
    if not sep:
        raise ConfigurationError(f"override {item!r} must look like key=value")
    return key.strip(), value.strip()


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


@dataclass
class RunConfig:
    """Resolved configuration: defaults, then a config file, then overrides."""

    values: dict[str, str] = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            path = Path(path)
            try:
                text = path.read_text()
            except OSError as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
            cfg.update(parse_text(text, str(path)))
        cfg.update(overrides or {})
        return cfg

    def update(self, items: dict[str, str]) -> None:
        unknown = sorted(set(items) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
        self.values.update({k: str(v) for k, v in items.items()})

    def __getitem__(self, key: str) -> str:
        return self.values[key]

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.values.items()))

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / FILENAME).write_text(self.to_text())
        return out / FILENAME

    # -- typed views ---------------------------------------------------------------

    def _typed(self, key: str, kind):
        raw = self.values[key]
        try:
            return kind(raw)
        except ValueError:
            raise ConfigurationError(f"{key} = {raw!r} is not a valid {kind.__name__}") from None

    def _optional(self, key: str, kind):
        return None if self.values[key] in ("", "none") else self._typed(key, kind)

    def model_spec(self, input_dims=None) -> ModelSpec:
        try:
            widths = _ints(self["model.encoder_widths"])
        except ValueError:
            raise ConfigurationError("model.encoder_widths must be a comma list of integers") from None
        return ModelSpec(
            family=self["model.family"],
            d=self._typed("model.d", int),
            d_key=self._optional("model.d_key", int),
            d_value=self._optional("model.d_value", int),
            heads=self._typed("model.heads", int),
            encoder_widths=widths,
            head_hidden=self._typed("model.head_hidden", int),
            rnn_hidden=self._typed("model.rnn_hidden", int),
            rnn_feature=self._typed("model.rnn_feature", int),
            axis=self["model.axis"],
            input_dims=input_dims,
            head_combine=self["model.head_combine"],
            seed=self._typed("model.seed", int),
        )

    def train_config(self, family: str | None = None) -> TrainConfig:
        family = family or self["model.family"]
        kw = dict(
            epochs=self._typed("train.epochs", int),
            learning_rate=self._typed("train.lr", float),
            weight_decay=self._typed("train.weight_decay", float),
            batch_size=self._typed("train.batch_size", int),
            seed=self._typed("train.seed", int),
        )
        if self["train.grad_clip"] != "auto":
            kw["grad_clip"] = self._optional("train.grad_clip", float)
        return TrainConfig.for_family(family, **kw)

    @property
    def subsample_n(self) -> int | None:
        return self._optional("train.subsample_n", int)

    def grid(self, name: str) -> tuple:
        raw = self[f"ablate.{name}"]
        try:
            if name in ("kth",):
                return _ints(raw)
            if name in ("rand", "fractions"):
                return tuple(float(x) for x in _words(raw))
        except ValueError:
            raise ConfigurationError(f"ablate.{name} = {raw!r} is not a numeric list") from None
        return _words(raw)
