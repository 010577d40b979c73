"""Flat key=value configuration shared by every pipeline stage."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError


def _topk(value: str) -> int | None:
    if str(value).lower() == "all":
        return None
    k = int(value)
    if k <= 0:
        raise ValueError("top_k must be positive or 'all'")
    return k


def _choice(*options):
    def parse(value: str) -> str:
        if value not in options:
            raise ValueError(f"expected one of {options}")
        return value
    return parse


# key -> (parser, default, help)
SCHEMA: dict[str, tuple[Any, Any, str]] = {
    "seed": (int, 13, "global seed; every random draw derives from it"),
    "data.dir": (str, "", "dataset directory (default <out>/data)"),
    "data.manifest": (str, "", "manifest path (default <data.dir>/manifest.json)"),
    "data.pairing": (_choice("per_caption", "sample"), "per_caption",
                     "one training example per caption, or one sampled caption per video per epoch"),
    "synth.videos": (int, 20, "synthetic: number of videos"),
    "synth.frames": (int, 8, "synthetic: frames per video (L)"),
    "synth.objects": (int, 4, "synthetic: objects per frame (N)"),
    "synth.d_a": (int, 32, "synthetic: appearance width"),
    "synth.d_m": (int, 32, "synthetic: motion width"),
    "synth.d_o": (int, 32, "synthetic: object width"),
    "synth.noise": (float, 0.1, "synthetic: additive noise std"),
    "vocab.min_count": (int, 2, "minimum corpus count for a vocabulary word"),
    "vocab.max_len": (int, 24, "captions are truncated to this many words"),
    "stats.top_n": (int, 50, "head size for corpus statistics"),
    "org.mode": (_choice("p_org", "c_org"), "c_org", "relational graph type"),
    "org.top_k": (_topk, 5, "neighbours kept per node in C-ORG (int or 'all')"),
    "org.dim": (int, 512, "object feature width inside the graph"),
    "decoder.hidden": (int, 512, "LSTM hidden width"),
    "decoder.word_dim": (int, 300, "word embedding width"),
    "decoder.att_dim": (int, 512, "attention state width"),
    "decoder.beam": (int, 5, "beam size at inference"),
    "decoder.max_len": (int, 24, "maximum generated content words"),
    "elm.order": (int, 3, "n-gram order of the reference ELM"),
    "elm.alpha": (float, 0.01, "add-alpha smoothing constant"),
    "trl.k": (int, 50, "soft targets per step"),
    "trl.temperature": (float, 1.5, "ELM temperature T_e"),
    "trl.lambda": (float, 0.3, "weight of the soft-target loss"),
    "train.objective": (_choice("trl", "tel"), "trl",
                        "'tel' trains on cross-entropy alone and never reads soft targets"),
    "train.lr": (float, 3e-4, "Adam learning rate"),
    "train.batch": (int, 8, "batch size"),
    "train.epochs": (int, 50, "maximum epochs"),
    "train.beta1": (float, 0.9, "Adam beta1"),
    "train.beta2": (float, 0.999, "Adam beta2"),
    "train.eps": (float, 1e-8, "Adam epsilon"),
    "train.clip": (float, 5.0, "global gradient-norm clip"),
    "train.explode": (float, 1e4, "abort when the gradient norm exceeds this"),
    "train.patience": (int, 10, "early-stopping patience in epochs (needs train.val_manifest)"),
    "train.val_manifest": (str, "", "validation manifest for CIDEr early stopping"),
    "train.resume": (str, "", "checkpoint directory to resume from"),
    "eval.manifest": (str, "", "manifest to caption/evaluate (default data.manifest)"),
    "eval.checkpoint": (str, "", "checkpoint to load (default latest)"),
    "gradcheck.eps": (float, 2e-4, "central-difference step"),
    "gradcheck.dim": (int, 16, "model width of the toy gradient-check problem"),
    "gradcheck.sample": (int, 20, "coordinates sampled per parameter"),
}

_RANGES = {
    "vocab.min_count": lambda v: v >= 1,
    "vocab.max_len": lambda v: v >= 1,
    "synth.noise": lambda v: v >= 0,
    "trl.k": lambda v: v >= 1,
    "trl.temperature": lambda v: v > 0,
    "trl.lambda": lambda v: 0.0 <= v <= 1.0,
    "elm.order": lambda v: v >= 1,
    "elm.alpha": lambda v: v > 0,
    "train.lr": lambda v: v > 0,
    "train.batch": lambda v: v >= 1,
    "train.epochs": lambda v: v >= 0,
    "train.clip": lambda v: v > 0,
    "decoder.beam": lambda v: v >= 1,
    "decoder.max_len": lambda v: v >= 1,
    "gradcheck.eps": lambda v: v > 0,
    "gradcheck.dim": lambda v: v >= 1,
}


class Config(dict):
    """Typed flat mapping; unknown keys are rejected."""

    def set(self, key: str, raw) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            value = parser("all" if raw is None else str(raw))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
        check = _RANGES.get(key)
        if check is not None and value is not None and not check(value):
            raise ConfigError(f"{key}={value!r} out of range")
        self[key] = value

    def to_text(self) -> str:
        lines = []
        for key in SCHEMA:
            v = self[key]
            lines.append(f"{key}={'all' if key == 'org.top_k' and v is None else v}")
        return "\n".join(lines) + "\n"


def defaults() -> Config:
    cfg = Config()
    for key, (_, default, _) in SCHEMA.items():
        cfg[key] = default
    return cfg


def parse_lines(lines: Iterable[str]) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), **values) -> Config:
    """Defaults, then the file, then KEY=VALUE overrides, then keyword values
    (keyword names use '__' for '.')."""
    cfg = defaults()
    if path:
        for k, v in parse_lines(Path(path).read_text().splitlines()):
            cfg.set(k, v)
    for k, v in parse_lines(overrides):
        cfg.set(k, v)
    for k, v in values.items():
        cfg.set(k.replace("__", "."), v)
    return cfg


def describe_keys() -> str:
    width = max(map(len, SCHEMA))
    return "\n".join(f"  {k:<{width}}  {d!s:<12} {h}" for k, (_, d, h) in SCHEMA.items())
