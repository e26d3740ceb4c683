"""Canonical-text config files: `key = value` lines, `#` comments.

One file carries up to four dotted-prefix sections (network., adam.,
augment., synth.).  Unknown keys are rejected so typos fail loudly;
omitted keys keep their defaults.  serialize(parse(text)) is canonical.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .autodiff import AdamConfig
from .data import AugmentConfig, SynthConfig
from .network import ConfigError, NetworkConfig, format_value


@dataclass
class RunConfig:
    network: NetworkConfig
    adam: AdamConfig
    augment: AugmentConfig
    synth: SynthConfig

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(NetworkConfig(), AdamConfig(), AugmentConfig(), SynthConfig())


_PAIR_SUFFIXES = ("_min", "_max")


def _flatten(prefix: str, cfg) -> list[tuple[str, object]]:
    out = []
    for f in fields(cfg):
        if f.name == "step_count":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            out.append((f"{prefix}.{f.name}_min", v[0]))
            out.append((f"{prefix}.{f.name}_max", v[1]))
        else:
            out.append((f"{prefix}.{f.name}", v))
    return out


def serialize(cfg: RunConfig) -> str:
    lines = []
    for prefix, section in (
        ("network", cfg.network),
        ("adam", cfg.adam),
        ("augment", cfg.augment),
        ("synth", cfg.synth),
    ):
        lines += [f"{k} = {format_value(v)}" for k, v in _flatten(prefix, section)]
    return "\n".join(lines) + "\n"


def _parse_scalar(text: str, like) -> object:
    text = text.strip()
    if isinstance(like, bool):
        if text not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text == "true"
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _apply_section(cfg, prefix: str, entries: dict[str, str]):
    updates = {}
    pair_updates: dict[str, dict[str, object]] = {}
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for key, raw in entries.items():
        if key in known and not isinstance(known[key], tuple):
            updates[key] = _parse_scalar(raw, known[key])
            continue
        matched = False
        for suffix in _PAIR_SUFFIXES:
            base = key[: -len(suffix)] if key.endswith(suffix) else None
            if base and base in known and isinstance(known[base], tuple):
                pair_updates.setdefault(base, {})[suffix] = _parse_scalar(raw, known[base][0])
                matched = True
                break
        if not matched:
            raise ConfigError(f"unknown config key: {prefix}.{key}")
    for base, parts in pair_updates.items():
        lo, hi = known[base]
        updates[base] = (parts.get("_min", lo), parts.get("_max", hi))
    return replace(cfg, **updates)


def parse(text: str) -> RunConfig:
    sections: dict[str, dict[str, str]] = {"network": {}, "adam": {}, "augment": {}, "synth": {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"line {lineno}: key must be <section>.<name>, got {key!r}")
        prefix, _, name = key.partition(".")
        if prefix not in sections:
            raise ConfigError(f"line {lineno}: unknown section {prefix!r}")
        sections[prefix][name] = val

    cfg = RunConfig.default()
    cfg.network = _apply_section(cfg.network, "network", sections["network"])
    cfg.adam = _apply_section(cfg.adam, "adam", sections["adam"])
    cfg.augment = _apply_section(cfg.augment, "augment", sections["augment"])
    cfg.synth = _apply_section(cfg.synth, "synth", sections["synth"])
    return cfg


def load(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse(fh.read())


def save(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(cfg))
