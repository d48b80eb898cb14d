"""Training configuration and its flat ``key = value`` file format.

Keys are either top-level (``epochs = 800``) or dotted into a section
(``model.embed_dim = 768``, ``loss.focal_gamma = 2``, ``augment.pipeline = MR,RT``).
Lines starting with ``#`` are comments. Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from .augment import CODES, AugmentSpec
from .errors import ConfigError
from .metrics import LossConfig
from .unetr import UnetrConfig


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    epochs: int = 800
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    checkpoint_every: int = 1
    seed: int = 0
    center_pattern: str = ""
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    model: UnetrConfig = field(default_factory=UnetrConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ConfigError("epochs and checkpoint_every must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("optimizer settings out of range")

    def to_dict(self) -> dict:
        return {
            **{f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("augment", "loss", "model")},
            "augment": _augment_dict(self.augment),
            "loss": asdict(self.loss),
            "model": self.model.to_dict(),
        }


DOCS = {
    "batch_size": "cases per optimizer step; the last partial batch is kept",
    "learning_rate": "AdamW step size (constant, no schedule)",
    "epochs": "passes over the training cases",
    "beta1": "AdamW first-moment decay",
    "beta2": "AdamW second-moment decay",
    "eps": "AdamW denominator guard",
    "weight_decay": "decoupled decay; skipped for norm parameters and position embeddings",
    "checkpoint_every": "write a resumable checkpoint every N epochs (0 = never)",
    "seed": "keys initialization, shuffling and augmentation streams",
    "center_pattern": "regex whose first group is the center id (empty = leading letters)",
    "augment.pipeline": "NA or comma-separated subset of MR,RT,ZM,GC,ED",
    "augment.probability": "firing probability applied to every augmentation",
    "augment.rotation_range": "axial rotation range in degrees",
    "augment.zoom_factor": "zoom factor (crop edge = grid / factor)",
    "augment.gamma_range": "PET gamma range",
    "augment.elastic_grid": "control lattice points per axis",
    "augment.elastic_sigma_mm": "control displacement standard deviation in mm",
}


def _augment_dict(spec: AugmentSpec) -> dict:
    return {
        "pipeline": spec.label,
        "probability": dict(spec.probability),
        "rotation_range": list(spec.rotation_range),
        "zoom_factor": spec.zoom_factor,
        "gamma_range": list(spec.gamma_range),
        "elastic_grid": spec.elastic_grid,
        "elastic_sigma_mm": spec.elastic_sigma_mm,
    }


def _coerce(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            inner = like[0] if like else 0
            return tuple(_coerce(p, inner, key) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def _set(values: dict, key: str, raw: str) -> None:
    top = TrainConfig()
    section, _, name = key.partition(".")
    if not name:
        own = {f.name for f in fields(TrainConfig)} - {"augment", "loss", "model"}
        if key not in own:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(raw, getattr(top, key), key)
    elif section == "model":
        if name not in {f.name for f in fields(UnetrConfig)}:
            raise ConfigError(f"unknown config key {key!r}")
        like = (0,) if name == "skip_layers" else getattr(top.model, name)
        values.setdefault("model", {})[name] = _coerce(raw, like, key)
    elif section == "loss":
        if name not in {f.name for f in fields(LossConfig)}:
            raise ConfigError(f"unknown config key {key!r}")
        values.setdefault("loss", {})[name] = _coerce(raw, getattr(top.loss, name), key)
    elif section == "augment":
        aug = values.setdefault("augment", {})
        if name == "pipeline":
            aug["pipeline"] = raw.strip()
        elif name == "probability":
            aug["probability"] = {c: _coerce(raw, 0.0, key) for c in CODES}
        elif name.startswith("probability.") and name.split(".", 1)[1] in CODES:
            aug.setdefault("probability", {})[name.split(".", 1)[1]] = _coerce(raw, 0.0, key)
        elif name in ("rotation_range", "gamma_range"):
            aug[name] = _coerce(raw, (0.0,), key)
        elif name in ("zoom_factor", "elastic_sigma_mm"):
            aug[name] = _coerce(raw, 0.0, key)
        elif name == "elastic_grid":
            aug[name] = _coerce(raw, 0, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    else:
        raise ConfigError(f"unknown config key {key!r}")


def _build(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    try:
        model = base.model
        if "model" in values:
            d = {**base.model.to_dict(), **values["model"]}
            if "num_layers" in values["model"] and "skip_layers" not in values["model"]:
                d.pop("skip_layers")  # re-derive the default taps for the new depth
            model = UnetrConfig.from_dict(d)
        loss = replace(base.loss, **values.get("loss", {}))
        aug = base.augment
        if "augment" in values:
            a = dict(values["augment"])
            pipeline = a.pop("pipeline", aug.label)
            current = _augment_dict(aug)
            current.pop("pipeline")
            probs = {**current.pop("probability"), **a.pop("probability", {})}
            merged = {**current, **a}
            aug = AugmentSpec.from_name(
                pipeline, probability=probs,
                rotation_range=tuple(merged["rotation_range"]), zoom_factor=merged["zoom_factor"],
                gamma_range=tuple(merged["gamma_range"]), elastic_grid=merged["elastic_grid"],
                elastic_sigma_mm=merged["elastic_sigma_mm"],
            )
        top = {k: v for k, v in values.items() if k not in ("model", "loss", "augment")}
        return replace(base, **top, model=model, loss=loss, augment=aug)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        _set(values, key.strip(), raw)
    return _build(values, base)


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    """Apply ``KEY=VALUE`` strings on top of an existing config."""
    values: dict = {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        _set(values, key.strip(), raw)
    return _build(values, cfg) if values else cfg


def format_config(cfg: TrainConfig) -> str:
    """Render a config as a documented key = value file that parses back to the same config."""
    lines = ["# training configuration (key = value)"]

    def emit(key, value):
        if isinstance(value, (tuple, list)):
            value = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        doc = DOCS.get(key)
        if doc:
            lines.append(f"# {doc}")
        lines.append(f"{key} = {value}")

    d = cfg.to_dict()
    for k, v in d.items():
        if k not in ("augment", "loss", "model"):
            emit(k, v)
    aug = d["augment"]
    emit("augment.pipeline", aug["pipeline"])
    for code, p in aug["probability"].items():
        emit(f"augment.probability.{code}", p)
    for k in ("rotation_range", "zoom_factor", "gamma_range", "elastic_grid", "elastic_sigma_mm"):
        emit(f"augment.{k}", aug[k])
    for k, v in d["loss"].items():
        emit(f"loss.{k}", v)
    for k, v in d["model"].items():
        emit(f"model.{k}", v)
    return "\n".join(lines) + "\n"
