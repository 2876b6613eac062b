"""Run configuration: dataclasses, JSON loading with preset inheritance, hashing."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(Exception):
    pass


@dataclass
class GeneratorPreset:
    """Geometry and sampling rules for the procedural scene generator."""

    name: str
    kind: str  # "tetromino" | "sprite"
    height: int
    width: int
    count_range: tuple[int, int]
    allow_overlap: bool
    background: str  # "black" | "gray"
    cell_size: int = 4                      # tetromino kind
    scale_range: tuple[float, float] = (0.2, 0.35)  # sprite kind
    palette: list[tuple[float, float, float]] | None = None
    max_place_attempts: int = 500

    def __post_init__(self):
        self.count_range = tuple(self.count_range)
        self.scale_range = tuple(self.scale_range)
        if self.palette is not None:
            self.palette = [tuple(c) for c in self.palette]
        if self.kind not in ("tetromino", "sprite"):
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if self.background not in ("black", "gray"):
            raise ConfigError(f"unknown background {self.background!r}")
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad count_range {self.count_range}")

    @property
    def max_objects(self) -> int:
        return self.count_range[1]

    def factor_kinds(self) -> list[tuple[str, str]]:
        """Names and kinds (discrete/continuous) of the per-object factor columns."""
        angle = "discrete" if self.kind == "tetromino" else "continuous"
        return [
            ("shape", "discrete"),
            ("color_r", "continuous"),
            ("color_g", "continuous"),
            ("color_b", "continuous"),
            ("scale", "continuous"),
            ("pos_x", "continuous"),
            ("pos_y", "continuous"),
            ("angle", angle),
        ]


@dataclass
class ModelConfig:
    num_slots: int
    latent_dim: int
    image_height: int
    image_width: int
    sigma_lik: float
    num_layers: int = 3
    likelihood: str = "gaussian"  # "gaussian" | "mog"
    prior_variant: str = "reversed_pp"  # "bottom_up" | "reversed" | "reversed_pp"
    decoder: str = "standard"  # "standard" | "light"
    enc_channels: int = 64
    dec_channels: int = 64

    def __post_init__(self):
        if self.likelihood not in ("gaussian", "mog"):
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")
        if self.prior_variant not in ("bottom_up", "reversed", "reversed_pp"):
            raise ConfigError(f"unknown prior variant {self.prior_variant!r}")
        if self.decoder not in ("standard", "light"):
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.prior_variant == "reversed_pp" and self.num_layers < 2:
            raise ConfigError("the reversed_pp prior needs num_layers >= 2")
        if self.sigma_lik <= 0:
            raise ConfigError("sigma_lik must be positive")


@dataclass
class LrSchedule:
    base: float = 4e-4
    warmup_steps: int = 1000
    half_life: int = 10000


@dataclass
class GecoConfig:
    enabled: bool = False
    nll_threshold: float = 0.0
    zeta_init: float = 0.55
    zeta_min: float = 0.55
    ema_alpha: float = 0.99
    update_rate: float = 1e-6


@dataclass
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 30000
    lr: LrSchedule = field(default_factory=LrSchedule)
    grad_clip: float = 5.0
    curriculum: list[tuple[int, int]] = field(default_factory=lambda: [(0, 3)])
    geco: GecoConfig = field(default_factory=GecoConfig)
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 2000

    def __post_init__(self):
        self.curriculum = [tuple(e) for e in self.curriculum]
        if not self.curriculum or self.curriculum[0][0] != 0:
            raise ConfigError("curriculum must start with an entry at step 0")
        steps = [s for s, _ in self.curriculum]
        iters = [i for _, i in self.curriculum]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("curriculum steps must be strictly increasing")
        if any(b > a for a, b in zip(iters, iters[1:])):
            raise ConfigError("curriculum refinement steps must be non-increasing")
        if any(i < 0 for i in iters):
            raise ConfigError("refinement steps must be >= 0")


@dataclass
class DataConfig:
    path: str = "data/scenes.bin"
    n_scenes: int = 2500
    n_train: int = 2000
    n_test: int = 320
    seed: int = 1
    generator: GeneratorPreset = field(
        default_factory=lambda: GeneratorPreset(**PRESET_GENERATORS["tetromino"])
    )


@dataclass
class EvalConfig:
    steps: int = 1
    num_slots: int | None = None  # override of model.num_slots at eval time
    n_scenes: int = 320
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 0  # 0 = no eval during training
    dataset: str | None = None  # defaults to data.path's test split


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"


def _build(cls, value, where):
    """Recursively build a dataclass from a dict, rejecting unknown keys."""
    if dataclasses.is_dataclass(cls) and isinstance(value, dict):
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(value) - set(names)
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
        kwargs = {}
        for k, v in value.items():
            f = names[k]
            sub = f.type if dataclasses.is_dataclass(f.type) else _DATACLASS_FIELDS.get((cls, k))
            if sub is not None:
                kwargs[k] = _build(sub, v, f"{where}.{k}")
            else:
                kwargs[k] = v
        return cls(**kwargs)
    return value


_DATACLASS_FIELDS = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "eval"): EvalConfig,
    (TrainConfig, "lr"): LrSchedule,
    (TrainConfig, "geco"): GecoConfig,
    (DataConfig, "generator"): GeneratorPreset,
}


def run_config_from_dict(d: dict) -> RunConfig:
    if "model" not in d:
        raise ConfigError("config requires a 'model' section")
    return _build(RunConfig, d, "config")


def run_config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    """Identity of a run: the model and train sections, canonical JSON, sha256/12."""
    d = run_config_to_dict(cfg)
    payload = json.dumps({"model": d["model"], "train": d["train"]}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Presets

PRESET_GENERATORS: dict[str, dict] = {
    "tetromino": dict(
        name="tetromino",
        kind="tetromino",
        height=32,
        width=32,
        count_range=(3, 3),
        allow_overlap=False,
        background="black",
        cell_size=4,
        palette=[
            (1.0, 0.0, 0.0),
            (0.0, 1.0, 0.0),
            (0.0, 0.0, 1.0),
            (1.0, 1.0, 0.0),
            (1.0, 0.0, 1.0),
            (0.0, 1.0, 1.0),
        ],
    ),
    "sprites": dict(
        name="sprites",
        kind="sprite",
        height=48,
        width=48,
        count_range=(2, 4),
        allow_overlap=True,
        background="gray",
        scale_range=(0.22, 0.38),
    ),
    "tetromino_mini": dict(
        name="tetromino_mini",
        kind="tetromino",
        height=20,
        width=20,
        count_range=(2, 3),
        allow_overlap=False,
        background="black",
        cell_size=3,
        palette=[
            (1.0, 0.0, 0.0),
            (0.0, 1.0, 0.0),
            (0.0, 0.0, 1.0),
            (1.0, 1.0, 0.0),
            (1.0, 0.0, 1.0),
            (0.0, 1.0, 1.0),
        ],
    ),
}

# 2.2 nats per channel value, scaled from the reference constraint level
_NATS_PER_VALUE = 2.2


def _geco_threshold(h: int, w: int) -> float:
    return _NATS_PER_VALUE * 3 * h * w


PRESETS: dict[str, dict] = {
    "tetromino": {
        "model": dict(
            num_slots=4, latent_dim=32, image_height=32, image_width=32,
            sigma_lik=0.3, num_layers=3, likelihood="gaussian",
            prior_variant="reversed_pp", decoder="light", enc_channels=64,
            dec_channels=32,
        ),
        "train": dict(
            batch_size=32, total_steps=30000,
            lr=dict(base=4e-4, warmup_steps=1000, half_life=10000),
            grad_clip=5.0, curriculum=[[0, 3]],
            geco=dict(enabled=True, nll_threshold=_geco_threshold(32, 32)),
            seed=0,
        ),
        "data": dict(
            path="data/tetromino.bin", n_scenes=2500, n_train=2000, n_test=320,
            seed=1, generator=PRESET_GENERATORS["tetromino"],
        ),
        "eval": dict(steps=3, n_scenes=320, batch_size=16),
        "out_dir": "runs/tetromino",
    },
    "sprites": {
        "model": dict(
            num_slots=5, latent_dim=64, image_height=48, image_width=48,
            sigma_lik=0.1, num_layers=3, likelihood="gaussian",
            prior_variant="reversed_pp", decoder="standard", enc_channels=64,
            dec_channels=64,
        ),
        "train": dict(
            batch_size=32, total_steps=50000,
            lr=dict(base=4e-4, warmup_steps=1600, half_life=16000),
            grad_clip=5.0, curriculum=[[0, 3], [15000, 1]],
            geco=dict(enabled=False, nll_threshold=_geco_threshold(48, 48)),
            seed=0,
        ),
        "data": dict(
            path="data/sprites.bin", n_scenes=2500, n_train=2000, n_test=320,
            seed=1, generator=PRESET_GENERATORS["sprites"],
        ),
        "eval": dict(steps=1, n_scenes=320, batch_size=16),
        "out_dir": "runs/sprites",
    },
    "tetromino_mini": {
        "model": dict(
            num_slots=4, latent_dim=32, image_height=20, image_width=20,
            sigma_lik=0.3, num_layers=3, likelihood="gaussian",
            prior_variant="reversed_pp", decoder="light", enc_channels=32,
            dec_channels=20,
        ),
        "train": dict(
            batch_size=16, total_steps=20000,
            lr=dict(base=4e-4, warmup_steps=500, half_life=20000),
            grad_clip=5.0, curriculum=[[0, 3]],
            geco=dict(enabled=True, nll_threshold=_geco_threshold(20, 20)),
            seed=0, log_every=50, checkpoint_every=2000,
        ),
        "data": dict(
            path="data/tetromino_mini.bin", n_scenes=1200, n_train=1000,
            n_test=160, seed=1, generator=PRESET_GENERATORS["tetromino_mini"],
        ),
        "eval": dict(steps=3, n_scenes=160, batch_size=16),
        "out_dir": "runs/tetromino_mini",
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_set_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(d: dict, sets: list[str]) -> dict:
    """Apply --set dotted.key=value overrides (values parsed as JSON, else strings)."""
    out = copy.deepcopy(d)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-section value")
        node[parts[-1]] = _parse_set_value(raw)
    return out


def load_config(path: str | Path, sets: list[str] | None = None) -> RunConfig:
    """Read a JSON config file, expand its "preset" key, apply --set overrides."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}")
    return resolve_config(raw, sets)


def resolve_config(raw: dict, sets: list[str] | None = None) -> RunConfig:
    raw = copy.deepcopy(raw)
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; available: {sorted(PRESETS)}"
            )
        raw = _deep_merge(PRESETS[preset], raw)
    if sets:
        raw = apply_overrides(raw, sets)
    return run_config_from_dict(raw)


def preset_config(name: str) -> RunConfig:
    return resolve_config({"preset": name})
