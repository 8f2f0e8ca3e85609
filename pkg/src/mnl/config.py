"""JSON run configuration: one document per run, validated before any work."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from mnl.datagen import NOISE_KINDS, SynthConfig
from mnl.trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    kinds: tuple[str, ...] = ("gaussian",)
    eps: tuple[float, ...] = (0.0, 5.0, 10.0)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    modalities: tuple[int, ...] | None = None

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.eps = tuple(float(e) for e in self.eps)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.modalities is not None:
            self.modalities = tuple(int(m) for m in self.modalities)
        bad = [k for k in self.kinds if k not in NOISE_KINDS]
        if bad:
            raise ValueError(f"unknown noise kinds {bad}")
        if not self.eps or any(e < 0 for e in self.eps):
            raise ValueError("eps list must be nonempty and >= 0")
        if not self.seeds:
            raise ValueError("need at least one eval seed")


@dataclass
class CertifyConfig:
    tau: str = "sampled"
    K: int = 32
    r: float = 0.5
    lipschitz_samples: int = 256
    claim: str = "empirical"
    attack: bool = False
    trials: int = 100
    split: str = "test"
    limit: int | None = None

    def __post_init__(self):
        if self.tau not in ("exact", "sampled"):
            raise ValueError("tau must be 'exact' or 'sampled'")
        if self.claim not in ("certified", "empirical"):
            raise ValueError("claim must be 'certified' or 'empirical'")
        if self.split not in ("train", "val", "test"):
            raise ValueError("split must be train, val or test")
        if self.K < 1 or self.r <= 0 or self.trials < 0:
            raise ValueError("need K >= 1, r > 0, trials >= 0")


@dataclass
class OverheadConfig:
    iters: int = 200

    def __post_init__(self):
        if self.iters < 100:
            raise ValueError("overhead needs >= 100 iterations")


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    seed: int = 0
    benchmark_seeds: tuple[int, ...] = (0,)
    data: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    certify: CertifyConfig = field(default_factory=CertifyConfig)
    overhead: OverheadConfig = field(default_factory=OverheadConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed, data=dataclasses.replace(self.data, seed=seed),
                                   train=dataclasses.replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {"data": SynthConfig, "train": TrainConfig, "eval": EvalConfig,
             "certify": CertifyConfig, "overhead": OverheadConfig}
# seeds are derived from the master seed
_DERIVED = {"data": {"seed"}, "train": {"seed"}}


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(where, set())
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kwargs = {}
    for k, v in doc.items():
        if k in _SECTIONS:
            kwargs[k] = _build(_SECTIONS[k], v, k)
        elif k == "seed":
            if not isinstance(v, int) or v < 0:
                raise ConfigError("seed must be a nonnegative integer")
            kwargs[k] = v
        elif k == "benchmark_seeds":
            if not isinstance(v, list) or not v or not all(isinstance(s, int) and s >= 0 for s in v):
                raise ConfigError("benchmark_seeds must be a nonempty list of nonnegative integers")
            kwargs[k] = tuple(v)
        elif k == "output_dir":
            if not isinstance(v, str):
                raise ConfigError("output_dir must be a string")
            kwargs[k] = v
    cfg = RunConfig(**kwargs)
    return cfg.with_seed(cfg.seed)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    return config_from_dict(doc)
