"""Run configuration: a flat key = value config file plus CLI overrides.

The file format is one `key = value` pair per line, `#` comments, blank
lines ignored.  Keys match RunConfig field names; values are coerced to
the field's type (ints, floats, booleans true/false, comma-separated ints
for hidden widths).  Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from fishergen.errors import ConfigError
from fishergen.model import VARIANTS


@dataclass
class RunConfig:
    variant: str = "fisher"
    latent_dim: int = 2
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-4
    lr_decay: float = 1.0        # per-epoch multiplicative decay, 1 = constant
    seed: int = 0
    cg_tol: float = 1e-6
    cg_max_iter: int = 0          # 0 means the default 5 * latent_dim
    hidden: tuple[int, ...] = (448, 448, 448)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    # data source: IDX paths, or the synthetic generator when synthetic=true
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    synthetic: bool = False
    synthetic_latent_dim: int = 3
    synthetic_data_dim: int = 16
    synthetic_noise: float = 0.05
    synthetic_train_count: int = 1024
    synthetic_test_count: int = 256
    synthetic_seed: int = 12345

    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, "
                              f"got {self.variant!r}")
        positive = ("latent_dim", "epochs", "batch_size", "learning_rate",
                    "cg_tol", "adam_beta1", "adam_beta2", "adam_eps")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.seed < 0 or self.synthetic_seed < 0:
            raise ConfigError("seeds must be non-negative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.cg_max_iter < 0:
            raise ConfigError("cg_max_iter must be >= 0")
        if not self.hidden or any(h <= 0 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if self.synthetic:
            if self.synthetic_latent_dim < 1 or self.synthetic_data_dim < 1:
                raise ConfigError("synthetic dimensions must be positive")
            if self.synthetic_noise < 0:
                raise ConfigError("synthetic_noise must be >= 0")
        return self

    def effective_cg_max_iter(self) -> int:
        return self.cg_max_iter if self.cg_max_iter > 0 else 5 * self.latent_dim

    def data_dim(self) -> int:
        return self.synthetic_data_dim if self.synthetic else 784

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(int(h) for h in d["hidden"])
        return cls(**d).validate()


def _coerce(name: str, text: str, target_type) -> object:
    text = text.strip()
    try:
        if target_type is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError("expected true/false")
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is str:
            return text
        # tuple[int, ...] (hidden widths)
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r} ({exc})") from None


def parse_config_file(path) -> dict:
    """Read `key = value` lines into a raw string dict."""
    raw: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = stripped.split("=", 1)
            raw[key.strip()] = value.strip()
    return raw


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values: dict[str, object] = {}
    if path is not None:
        for key, text in parse_config_file(path).items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            ftype = fields[key].type
            target = {"str": str, "int": int, "float": float,
                      "bool": bool}.get(str(ftype), tuple)
            values[key] = _coerce(key, text, target)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = val
    if "hidden" in values:
        values["hidden"] = tuple(int(h) for h in values["hidden"])
    return RunConfig(**values).validate()
