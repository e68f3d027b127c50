"""Experiment configuration files.

INI-style text with fixed sections. Every key is optional; unknown
sections or keys are rejected with the offending line number. See
README.md for the full schema.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .protocols import PROTOCOLS


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # [experiment]
    protocols: tuple[str, ...] = ("cwfl", "cotaf", "local")
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "out"
    # [data]
    source: str = "synthetic"
    path: Optional[str] = None
    K: int = 25
    per_client_size: int = 50
    m: int = 5
    heterogeneity: float = 0.5
    classes_per_client: int = 4
    test_fraction: float = 0.1
    data_seed: Optional[int] = None
    # [model]
    kind: str = "ridge-quadratic"
    hidden: int = 0
    l2_coeff: float = 0.1
    batch_size: int = 64
    # [schedule]
    T: int = 150
    E: int = 3
    lr: str = "constant"
    eta: float = 0.001
    # [channel]
    P1: float = 1.0
    P2: float = 1.0
    snr_db: Optional[float] = None
    server_snr_db: Optional[float] = None
    sigma2: Optional[tuple[float, ...]] = None
    precode_mode: str = "genie"
    decode_mode: str = "normalized"
    noise_injection: str = "direct"
    G_safety: float = 1.5
    # [topology]
    C: int = 4
    mixing: str = "complete"
    cluster_seed: Optional[int] = None
    # [prox]
    lambda_p: float = 0.0
    # [metrics]
    track_loss: bool = False

    def validate(self) -> None:
        bad = [p for p in self.protocols if p not in PROTOCOLS]
        if bad:
            raise ConfigError(f"unknown protocols {bad}; choose from {PROTOCOLS}")
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        if self.source not in ("synthetic", "idx", "text"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source in ("idx", "text"):
            p = self.path or (os.environ.get("OTAFL_DATA_DIR") if self.source == "idx" else None)
            if not p or not Path(p).exists():
                raise ConfigError(f"data path {p!r} does not exist")
        if self.lr not in ("constant", "theorem"):
            raise ConfigError(f"unknown learning-rate schedule {self.lr!r}")
        if self.mixing not in ("complete", "ring"):
            raise ConfigError(f"unknown mixing {self.mixing!r}")
        if not 1 <= self.C <= self.K:
            raise ConfigError(f"need 1 <= C <= K, got C={self.C}, K={self.K}")
        if self.lambda_p < 0 or (self.lambda_p == 0 and any(p.endswith("prox") for p in self.protocols)):
            raise ConfigError(f"prox protocols need lambda_p > 0, got {self.lambda_p}")
        if self.T < self.E or self.E < 1:
            raise ConfigError(f"need T >= E >= 1, got T={self.T}, E={self.E}")

    def digest(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:16]


SECTIONS = {
    "experiment": ("protocols", "seeds", "output_dir"),
    "data": ("source", "path", "K", "per_client_size", "m", "heterogeneity",
             "classes_per_client", "test_fraction", "data_seed"),
    "model": ("kind", "hidden", "l2_coeff", "batch_size"),
    "schedule": ("T", "E", "lr", "eta"),
    "channel": ("P1", "P2", "snr_db", "server_snr_db", "sigma2", "precode_mode",
                "decode_mode", "noise_injection", "G_safety"),
    "topology": ("C", "mixing", "cluster_seed"),
    "prox": ("lambda_p",),
    "metrics": ("track_loss",),
}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(name: str, raw: str):
    kind = _TYPES[name]
    raw = raw.strip()
    if "Optional" in kind and raw.lower() in ("", "none"):
        return None
    if "tuple[str" in kind:
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if "tuple[int" in kind:
        return tuple(int(s) for s in raw.split(",") if s.strip())
    if "tuple[float" in kind:
        return tuple(float(s) for s in raw.split(",") if s.strip())
    if "bool" in kind:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in kind:
        return int(raw)
    if "float" in kind:
        return float(raw)
    return raw


def _locate(lines: list[str], section: str, key: Optional[str] = None) -> int:
    current = None
    for i, line in enumerate(lines, 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return i
        elif current == section and key is not None:
            if s.split("=", 1)[0].split(":", 1)[0].strip() == key:
                return i
    return 0


def parse_config(text: str, source: str = "<config>", check_paths: bool = True) -> ExperimentConfig:
    lines = text.splitlines()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{_locate(lines, section)}: unknown section [{section}]")
        for key, raw in parser.items(section):
            line = _locate(lines, section, key)
            if key not in SECTIONS[section]:
                raise ConfigError(f"{source}:{line}: unknown key {key!r} in [{section}]")
            try:
                values[key] = _convert(key, raw)
            except ValueError as exc:
                raise ConfigError(f"{source}:{line}: bad value for {key}: {exc}") from None
    cfg = ExperimentConfig(**values)
    if cfg.path and not os.path.isabs(cfg.path) and source != "<config>":
        cfg.path = str(Path(source).parent / cfg.path)
    try:
        if check_paths:
            cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    d = asdict(cfg)
    out = []
    for section, keys in SECTIONS.items():
        out.append(f"[{section}]")
        for k in keys:
            v = d[k]
            if v is None:
                continue
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            out.append(f"{k} = {v}")
        out.append("")
    return "\n".join(out)
