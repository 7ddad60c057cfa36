"""INI run configuration with a closed schema: every key typed, defaulted and checked."""
from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

OUTPUT_ROOT_ENV = "IDP_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return parse


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0 or not math.isfinite(v):
        raise ValueError("must be a positive finite number")
    return v


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise ValueError("must be in [0, 1)")
    return v


def _domains(text: str) -> tuple[str, ...]:
    out = tuple(d.strip() for d in text.split(",") if d.strip())
    if not out:
        raise ValueError("empty domain list")
    return out


SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str]]] = {
    "run": {
        "seed": (int, "42"),
        "outdir": (str, "runs/default"),
    },
    "data": {
        # empty interactions -> use the corpus written by the synth command
        "interactions": (str, ""),
        "vectors_dir": (str, ""),
        "pretrain_domains": (_domains, "A"),
        "target_domain": (str, "B"),
        "min_interactions": (_nonneg_int, "0"),
    },
    "synth": {
        "num_clusters": (_positive_int, "8"),
        "items_per_domain": (_positive_int, "500"),
        "users_per_domain": (_positive_int, "2000"),
        "seq_len": (_positive_int, "20"),
        "concentration": (float, "2.0"),
        "noise_scale": (float, "1.0"),
        "vector_dim": (_positive_int, "128"),
        "popularity_exponent": (float, "0.8"),
        "domains": (_domains, "A,B"),
    },
    "seqmodel": {
        "dim": (_positive_int, "64"),
        "num_layers": (_positive_int, "2"),
        "num_heads": (_positive_int, "2"),
        "max_len": (_positive_int, "50"),
        "dropout": (_unit_float, "0.2"),
        "backend": (_choice("causal-attention", "gated-recurrent"), "causal-attention"),
        "batch_size": (_positive_int, "256"),
        "lr": (_positive_float, "0.001"),
        "epochs": (_nonneg_int, "200"),
        "patience": (_positive_int, "20"),
    },
    "cdim": {
        "out_dim": (_positive_int, "64"),
        "dropout": (_unit_float, "0.1"),
        "tau": (_positive_float, "0.05"),
        "k": (_positive_int, "10"),
        "lr": (_positive_float, "0.001"),
        "batch_size": (_positive_int, "64"),
        "epochs": (_nonneg_int, "100"),
        "patience": (_positive_int, "20"),
        "holdout": (_unit_float, "0.1"),
        "similarity": (_choice("cosine", "dot"), "cosine"),
    },
    "matcher": {
        "m": (_positive_int, "10"),
        "method": (_choice("auto", "exact", "ann"), "auto"),
        "max_degree": (_positive_int, "16"),
        "ef_construction": (_positive_int, "200"),
        "ef_search": (_positive_int, "200"),
    },
    "transfer": {
        "mode": (_choice("zero-shot", "finetune-all", "retrain-encoder"), "zero-shot"),
        "use_text": (_bool, "false"),
        "text_projection": (_choice("pca", "learned"), "pca"),
        "backend": (_choice("causal-attention", "gated-recurrent"), "causal-attention"),
        "lr": (_positive_float, "0.001"),
        "batch_size": (_positive_int, "256"),
        "epochs": (_nonneg_int, "200"),
        "patience": (_positive_int, "20"),
    },
    "eval": {
        "format": (_choice("tsv", "structured-text"), "tsv"),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    raw: dict[str, dict[str, str]]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def get(self, dotted: str) -> Any:
        section, _, key = dotted.partition(".")
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def outdir(self) -> Path:
        out = Path(self.values["run"]["outdir"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def digest_view(self, sections: Iterable[str]) -> dict[str, dict[str, str]]:
        """Raw strings of the given sections, for recording in the manifest."""
        return {s: dict(sorted(self.raw[s].items())) for s in sections}


def _parse_value(section: str, key: str, text: str) -> Any:
    try:
        return SCHEMA[section][key][0](text)
    except ValueError as exc:
        raise ConfigError(f"invalid value for {section}.{key}: {exc}") from None


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), seed: int | None = None
                ) -> RunConfig:
    """Defaults, then the INI file, then ``section.key=value`` overrides, then ``seed``."""
    raw = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                raw[section][key] = value
    for item in overrides:
        dotted, eq, value = item.partition("=")
        section, dot, key = dotted.strip().partition(".")
        if not eq or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        raw[section][key] = value.strip()
    if seed is not None:
        raw["run"]["seed"] = str(seed)
    values = {s: {k: _parse_value(s, k, v) for k, v in keys.items()} for s, keys in raw.items()}
    return RunConfig(values, raw)
