"""Run configuration: one JSON document for every command."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .sequence import ConfigError, EmitterDetectorModel, SequenceConfig
from .spectral import EmissionLine, FilterSpec
from .temporal import DetectionWindow

DEFAULT_WINDOW_START_NS = 2.5


def window_sweep(start_ns: float = DEFAULT_WINDOW_START_NS, lengths=range(6, 31, 2)) -> list[list[float]]:
    return [[start_ns, start_ns + float(n)] for n in lengths]


@dataclass
class InferenceSettings:
    grid: int = 201
    draws: int = 1000
    realizations: int = 1000
    t_M: float = 0.0
    t_E: float | None = None


@dataclass
class RunConfig:
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    model: EmitterDetectorModel = field(default_factory=EmitterDetectorModel)
    eta: float = 0.9
    blocks: int = 1000
    seed: int = 0
    windows_ns: list = field(default_factory=lambda: [[DEFAULT_WINDOW_START_NS, DEFAULT_WINDOW_START_NS + 20.0]])
    filters: list = field(default_factory=lambda: [FilterSpec()])
    emission: EmissionLine = field(default_factory=EmissionLine)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    rate_source: str = "auto"

    def windows(self) -> list[DetectionWindow]:
        return [DetectionWindow(float(a), float(b), self.model.tau_ns) for a, b in self.windows_ns]

    def to_dict(self) -> dict:
        return {
            "sequence": self.sequence.to_dict(),
            "model": self.model.to_dict(),
            "eta": self.eta,
            "blocks": self.blocks,
            "seed": self.seed,
            "windows_ns": [[float(a), float(b)] for a, b in self.windows_ns],
            "filters": [f.to_dict() for f in self.filters],
            "emission": {"f_nv_mhz": self.emission.f_nv, "gamma_nv_mhz": self.emission.gamma_nv},
            "inference": dict(self.inference.__dict__),
            "rate_source": self.rate_source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {"sequence", "model", "eta", "blocks", "seed", "windows_ns", "filters", "emission",
                 "inference", "rate_source"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(
                sequence=SequenceConfig.from_dict(d.get("sequence", {})),
                model=EmitterDetectorModel.from_dict(d.get("model", {})),
                eta=float(d.get("eta", 0.9)),
                blocks=int(d.get("blocks", 1000)),
                seed=int(d.get("seed", 0)),
                windows_ns=d.get("windows_ns", [[DEFAULT_WINDOW_START_NS, DEFAULT_WINDOW_START_NS + 20.0]]),
                filters=[FilterSpec.from_dict(f) for f in d.get("filters", [{}])],
                emission=EmissionLine(float(d.get("emission", {}).get("f_nv_mhz", 0.0)),
                                      float(d.get("emission", {}).get("gamma_nv_mhz", EmissionLine().gamma_nv))),
                inference=InferenceSettings(**d.get("inference", {})),
                rate_source=d.get("rate_source", "auto"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self):
        if not 0 <= self.eta <= 1:
            raise ConfigError("eta must lie in [0, 1]")
        if self.blocks < 0:
            raise ConfigError("blocks must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit value")
        if self.rate_source not in ("auto", "estimate", "truth"):
            raise ConfigError("rate_source must be auto, estimate or truth")
        try:
            ws = self.windows()
        except ValueError as exc:
            raise ConfigError(f"bad analysis window: {exc}") from exc
        for w in ws:
            if w.T_end > self.sequence.pulse_spacing_ns:
                raise ConfigError(f"window end {w.T_end} ns exceeds the detection bin")

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(d)


def provenance(cfg_hash: str, seed: int | None) -> dict:
    return {"config_hash": cfg_hash, "seed": seed, "version": __version__}

