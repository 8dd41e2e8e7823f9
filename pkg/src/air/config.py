"""Experiment and sweep descriptions (JSON) plus the model/dataset builders."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from .data import Dataset, load_idx, load_idx_dataset, synthetic_dataset
from .evaluation import SviConfig
from .nn import ArchParseError, build_decoder, build_encoder, parse_arch
from .objectives import ModelPair, ObjectiveConfig
from .training import TrainConfig

SWEEP_AXES = ("sigma_sqrt_d", "ten_over_H")


class ConfigError(ValueError):
    pass


def schema() -> dict:
    return json.loads(resources.files("air").joinpath("config.schema.json").read_text())


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _validate(raw: dict, where: str) -> None:
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {loc}: {exc.message}") from None


@dataclass
class ExperimentConfig:
    dataset: dict[str, Any]
    encoder: str
    decoder: str
    objective: ObjectiveConfig
    train: TrainConfig
    svi: SviConfig
    eval_k: int = 1
    eval_split: str = "test"
    out: str | None = None
    sigma_sqrt_d: float | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None, where: str = "config") -> "ExperimentConfig":
        _validate(raw, where)
        base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        ds = dict(raw["dataset"])
        if ("path" in ds) == ("synthetic" in ds):
            raise ConfigError(f"{where}: dataset needs exactly one of 'path' or 'synthetic'")
        for key in ("path", "test_path"):
            if key in ds:
                p = Path(ds[key])
                if not p.is_absolute():
                    p = base_dir / p
                if not p.exists():
                    raise ConfigError(f"{where}: dataset {key} {p} does not exist")
                ds[key] = str(p)
        for key in ("encoder", "decoder"):
            try:
                parse_arch(raw[key])
            except ArchParseError as exc:
                raise ConfigError(f"{where}: {key}: {exc}") from None
        obj = dict(raw.get("objective", {}))
        sigma_sqrt_d = obj.pop("sigma_sqrt_d", None)
        ev = raw.get("eval", {})
        try:
            cfg = cls(
                dataset=ds,
                encoder=raw["encoder"],
                decoder=raw["decoder"],
                objective=ObjectiveConfig(),
                train=TrainConfig.from_dict(raw.get("train", {})),
                svi=SviConfig.from_dict(raw.get("svi", {})),
                eval_k=ev.get("k", 1),
                eval_split=ev.get("split", "test"),
                out=raw.get("out"),
                sigma_sqrt_d=sigma_sqrt_d,
                base_dir=base_dir,
            )
            if sigma_sqrt_d is not None:
                sigma = sigma_sqrt_d / math.sqrt(cfg.input_dim)
                # resolved configs carry both; they must agree
                if "sigma" in obj and not math.isclose(obj["sigma"], sigma, rel_tol=1e-12, abs_tol=1e-15):
                    raise ConfigError(f"{where}: sigma and sigma_sqrt_d disagree")
                obj["sigma"] = sigma
            cfg.objective = ObjectiveConfig.from_dict(obj)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{where}: {exc}") from None
        dec = parse_arch(cfg.decoder)
        if dec.head_width != cfg.input_dim:
            raise ConfigError(f"{where}: decoder emits {dec.head_width} pixels but inputs have d={cfg.input_dim}")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(raw, path.parent, str(path))

    @cached_property
    def input_dim(self) -> int:
        if "synthetic" in self.dataset:
            return int(self.dataset["synthetic"]["d"])
        return int(load_idx(self.dataset["path"]).shape[1])

    def to_dict(self) -> dict:
        obj = self.objective.to_dict()
        obj["sigma_sqrt_d"] = self.objective.sigma * math.sqrt(self.input_dim)
        out = {
            "dataset": copy.deepcopy(self.dataset),
            "encoder": self.encoder,
            "decoder": self.decoder,
            "objective": obj,
            "train": self.train.to_dict(),
            "svi": self.svi.to_dict(),
            "eval": {"k": self.eval_k, "split": self.eval_split},
        }
        if self.out is not None:
            out["out"] = self.out
        return out

    def resolved(self) -> dict:
        """Fully explicit form recorded next to every run."""
        d = self.to_dict()
        d["input_dim"] = self.input_dim
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def build_dataset(self) -> Dataset:
        ds = self.dataset
        if "synthetic" in ds:
            s = ds["synthetic"]
            return synthetic_dataset(s["n"], s["d"], s["clusters"], s.get("seed", 0), s.get("flip", 0.05))
        return load_idx_dataset(
            ds["path"],
            ds.get("test_path"),
            n_train=ds.get("n_train"),
            n_val=ds.get("n_val", 0),
            split_seed=ds.get("split_seed", 0),
            binarize_seed=ds.get("binarize_seed", 0),
            n_test=ds.get("n_test"),
        )

    def build_model(self) -> ModelPair:
        seed = self.train.seed
        H = self.objective.weight_norm_H
        enc = build_encoder(self.encoder, self.input_dim, weight_normalized=H is not None, H=H, seed=seed)
        dec = build_decoder(self.decoder, enc.latent_dim, seed=seed + 1)
        return ModelPair(enc, dec)


def sweep_point(base: ExperimentConfig, axis: str, value: float, k: int, seed: int) -> ExperimentConfig:
    """Config for one (axis value, k, seed) cell of a sweep.

    The objective kind follows the cell: denoising iff sigma > 0, importance
    weighted iff k > 1. The reported amortized bound uses the cell's own k.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if value < 0:
        raise ConfigError("sweep values must be non-negative")
    cfg = copy.deepcopy(base)
    obj = cfg.objective.to_dict()
    if axis == "sigma_sqrt_d":
        obj["sigma"] = value / math.sqrt(cfg.input_dim)
        cfg.sigma_sqrt_d = value
    else:
        obj["weight_norm_H"] = None if value == 0 else 10.0 / value
    obj["k"] = k
    obj["kind"] = ("d" if obj["sigma"] > 0 else "") + ("iwae" if k > 1 else "vae")
    cfg.objective = ObjectiveConfig.from_dict(obj)
    cfg.eval_k = k
    cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
    return cfg


@dataclass
class SweepSpec:
    base: ExperimentConfig
    axis: str
    values: list[float]
    ks: list[int]
    seeds: list[int]

    @classmethod
    def load(cls, path) -> "SweepSpec":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"sweep file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(raw, path.parent, str(path))

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None, where: str = "sweep") -> "SweepSpec":
        allowed = {"base", "axis", "values", "ks", "seeds"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"{where}: unknown sweep keys {sorted(unknown)}")
        for key in ("base", "axis", "values"):
            if key not in raw:
                raise ConfigError(f"{where}: missing sweep key {key!r}")
        base_raw = raw["base"]
        if isinstance(base_raw, str):
            p = Path(base_raw)
            if not p.is_absolute() and base_dir is not None:
                p = Path(base_dir) / p
            base = ExperimentConfig.load(p)
        else:
            base = ExperimentConfig.from_dict(base_raw, base_dir, f"{where}: base")
        axis = raw["axis"]
        if axis not in SWEEP_AXES:
            raise ConfigError(f"{where}: axis must be one of {SWEEP_AXES}")
        values = [float(v) for v in raw["values"]]
        if not values or any(v < 0 or not math.isfinite(v) for v in values):
            raise ConfigError(f"{where}: values must be a non-empty list of finite numbers >= 0")
        ks = [int(k) for k in raw.get("ks", [base.objective.k])]
        if not ks or any(k < 1 for k in ks):
            raise ConfigError(f"{where}: ks must be positive integers")
        seeds = [int(s) for s in raw.get("seeds", [base.train.seed])]
        return cls(base, axis, values, ks, seeds)

    def cells(self) -> list[tuple[float, int, int]]:
        return [(v, k, s) for v in sorted(self.values) for k in sorted(self.ks) for s in self.seeds]
