"""Model geometry and the flat ``key=value`` run-configuration format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

VARIANTS = ("b-rgb", "b-t", "dm", "dm-cam", "dm-mam", "dm-cam-com", "full")


@dataclass
class ModelConfig:
    search_size: int = 32
    template_size: int = 16
    patch: int = 4
    dim: int = 32
    depth: int = 3
    heads: int = 4
    mlp_ratio: int = 4
    freeze: int = 1
    mam_depth: int = 6
    channels: int = 3
    variant: str = "full"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("search_size", "template_size", "patch", "dim", "depth", "heads",
                     "mlp_ratio", "mam_depth", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("search_size", "template_size"):
            if getattr(self, name) % self.patch:
                raise ValueError(f"model.{name}={getattr(self, name)} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"model.dim={self.dim} not divisible by heads={self.heads}")
        if not 0 <= self.freeze <= self.depth:
            raise ValueError(f"model.freeze={self.freeze} outside [0, depth={self.depth}]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.dim % 16:
            raise ValueError(f"model.dim={self.dim} must be divisible by 16 (corner head halving)")

    @property
    def n_template(self):
        return (self.template_size // self.patch) ** 2

    @property
    def n_search(self):
        return (self.search_size // self.patch) ** 2

    @property
    def grid(self):
        return self.search_size // self.patch

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def paper_scale_config(**kw):
    """ViT-B/16 geometry: 224/112 inputs, P=16, D=768, 12 layers, 8 frozen, K=6."""
    base = dict(search_size=224, template_size=112, patch=16, dim=768, depth=12,
                heads=12, freeze=8, mam_depth=6)
    base.update(kw)
    return ModelConfig(**base)


def tiny_config(**kw):
    base = dict(depth=2, mam_depth=2, freeze=0)
    base.update(kw)
    return ModelConfig(**base)


@dataclass
class StageConfig:
    stage: int
    epochs: int = 2
    samples_per_epoch: int = 512
    batch_size: int = 16
    lr_backbone: float = 5e-4
    lr_rest: float = 1e-3
    weight_decay: float = 1e-4
    giou_weight: float = 2.0
    l1_weight: float = 5.0
    kl_weight: float = 800.0
    train_embeddings: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 0 or self.samples_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs/samples_per_epoch/batch_size out of range")
        if self.lr_backbone <= 0 or self.lr_rest <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.giou_weight, self.l1_weight, self.kl_weight) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class SampleConfig:
    search_factor: float = 4.0
    template_factor: float = 2.0
    center_jitter: float = 0.25
    scale_min: float = 0.8
    scale_max: float = 1.25


# ---------------------------------------------------------------------------
# flat key=value run configuration

def _schema():
    """Ordered key -> (type, default). Defaults mirror the dataclasses above."""
    m = ModelConfig()
    s = StageConfig(stage=1)
    c = SampleConfig()
    out = {}
    for f in fields(ModelConfig):
        out[f"model.{f.name}"] = (type(getattr(m, f.name)), getattr(m, f.name))
    for st in (1, 2, 3):
        out[f"train.stage{st}.epochs"] = (int, s.epochs)
    for key in ("samples_per_epoch", "batch_size", "lr_backbone", "lr_rest",
                "weight_decay", "train_embeddings"):
        out[f"train.{key}"] = (type(getattr(s, key)), getattr(s, key))
    out["loss.giou"] = (float, s.giou_weight)
    out["loss.l1"] = (float, s.l1_weight)
    out["loss.kl"] = (float, s.kl_weight)
    for f in fields(SampleConfig):
        out[f"sample.{f.name}"] = (float, getattr(c, f.name))
    out.update({
        "synth.sequences": (int, 64),
        "synth.frames": (int, 30),
        "synth.canvas": (int, 96),
        "synth.target_min": (float, 10.0),
        "synth.target_max": (float, 18.0),
        "synth.amplitude": (float, 20.0),
        "synth.size_drift": (float, 0.2),
        "synth.corrupt": (str, "none"),
        "synth.test_sequences": (int, 16),
        "seed": (int, 0),
    })
    return out


SCHEMA = _schema()


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key, typ, raw):
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


@dataclass
class RunConfig:
    """All run settings as a flat ordered mapping of dotted keys.

    Unknown keys are rejected. ``dumps`` emits every key in schema order, so
    ``loads(dumps(c)).dumps() == c.dumps()`` byte for byte.
    """

    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __post_init__(self):
        self.model_config()

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, raw):
        if key not in SCHEMA:
            raise KeyError(f"unknown config key {key!r}")
        typ, _ = SCHEMA[key]
        value = raw if isinstance(raw, typ) and not isinstance(raw, str) else _parse_value(key, typ, str(raw))
        self.values[key] = value

    @classmethod
    def loads(cls, text, overrides=()):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(key, raw)
            except KeyError as exc:
                raise ValueError(f"config line {lineno}: {exc.args[0]}") from None
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"--set expects key=value, got {item!r}")
            key, raw = (s.strip() for s in item.split("=", 1))
            try:
                cfg.set(key, raw)
            except KeyError as exc:
                raise ValueError(exc.args[0]) from None
        cfg.model_config()
        return cfg

    @classmethod
    def load(cls, path, overrides=()):
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read(), overrides)

    def dumps(self):
        lines = ["# macft run configuration v1"]
        lines += [f"{k}={_fmt(self.values[k])}" for k in SCHEMA]
        return "\n".join(lines) + "\n"

    def model_config(self):
        kw = {f.name: self.values[f"model.{f.name}"] for f in fields(ModelConfig)}
        return ModelConfig(**kw)

    def stage_config(self, stage):
        v = self.values
        return StageConfig(
            stage=stage, epochs=v[f"train.stage{stage}.epochs"],
            samples_per_epoch=v["train.samples_per_epoch"], batch_size=v["train.batch_size"],
            lr_backbone=v["train.lr_backbone"], lr_rest=v["train.lr_rest"],
            weight_decay=v["train.weight_decay"], giou_weight=v["loss.giou"],
            l1_weight=v["loss.l1"], kl_weight=v["loss.kl"],
            train_embeddings=v["train.train_embeddings"])

    def sample_config(self):
        return SampleConfig(**{f.name: self.values[f"sample.{f.name}"] for f in fields(SampleConfig)})
