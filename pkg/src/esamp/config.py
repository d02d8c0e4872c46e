"""Run configuration: flat ``key = value`` text or JSON, with typed fields.

Documented keys (defaults in parentheses)::

    backbone        tiny | synthetic                        (tiny)
    checkpoint      tiny-transformer weights file           (none: seeded init)
    vocab_size      tiny transformer vocabulary             (64)
    d_model         tiny transformer width                  (64)
    n_layers        tiny transformer depth                  (4)
    n_heads         tiny transformer heads                  (2)
    max_context     context window                          (512)
    model_seed      backbone weights seed                   (0)
    modes           synthetic model branch modes            (4)
    tokens_per_mode synthetic continuation tokens per mode  (2)
    prompts         number of prompts P                     (1)
    prompt_len      tokens per generated prompt             (4)
    k               samples per prompt K                    (4)
    max_new_tokens  decode budget T per sequence            (32)
    beta            exploration strength                    (0.25)
    temperature     sampling temperature                    (1.0)
    filter          none | top-k:N | top-p:P | min-p:P      (none)
    placement       latent-mix | post-filter                (latent-mix)
    form            proposed | subtraction                  (proposed)
    ablation        off | matched-noise                     (off)
    esamp           run the distiller at all                (true)
    scope           shared | per-prompt                     (shared)
    pipeline        sync | async                            (sync)
    seed            master seed                             (0)
    distiller_width distiller hidden width                  (384)
    stop_token      token that ends a sequence              (none)
    prefill_mode    bulk | stepwise                         (bulk)
    trace_vectors   log logits and latent error per step    (false)

Text files hold one ``key = value`` per line; ``#`` starts a comment.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from .backbone import Backbone, BackboneSpec, build_tiny_transformer
from .errors import ConfigError
from .sampler import FilterPolicy, FusionConfig
from .synthetic import build_synthetic_branch_model

BACKBONES = ("tiny", "synthetic")


@dataclass
class RunConfig:
    backbone: str = "tiny"
    checkpoint: str | None = None
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 2
    max_context: int = 512
    model_seed: int = 0
    modes: int = 4
    tokens_per_mode: int = 2
    prompts: int = 1
    prompt_len: int = 4
    k: int = 4
    max_new_tokens: int = 32
    beta: float = 0.25
    temperature: float = 1.0
    filter: str = "none"
    placement: str = "latent-mix"
    form: str = "proposed"
    ablation: str = "off"
    esamp: bool = True
    scope: str = "shared"
    pipeline: str = "sync"
    seed: int = 0
    distiller_width: int = 384
    stop_token: int | None = None
    prefill_mode: str = "bulk"
    trace_vectors: bool = False

    def validate(self) -> "RunConfig":
        """Raise ConfigError listing every invalid field."""
        problems = []
        if self.backbone not in BACKBONES:
            problems.append(f"backbone: must be one of {BACKBONES}, got {self.backbone!r}")
        for name in ("prompts", "k", "prompt_len", "distiller_width", "vocab_size", "d_model", "max_context"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.max_new_tokens < 0:
            problems.append("max_new_tokens: must be >= 0")
        try:
            self.fusion()
        except ConfigError as exc:
            problems.append(f"fusion: {exc}")
        if self.scope not in ("shared", "per-prompt"):
            problems.append(f"scope: must be shared or per-prompt, got {self.scope!r}")
        if self.pipeline not in ("sync", "async"):
            problems.append(f"pipeline: must be sync or async, got {self.pipeline!r}")
        if self.prefill_mode not in ("bulk", "stepwise"):
            problems.append(f"prefill_mode: must be bulk or stepwise, got {self.prefill_mode!r}")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        return self

    def fusion(self) -> FusionConfig:
        return FusionConfig(beta=self.beta, temperature=self.temperature, filter=FilterPolicy.parse(self.filter),
                            placement=self.placement, ablation=self.ablation, form=self.form)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def build_backbone(self) -> Backbone:
        if self.backbone == "synthetic":
            return build_synthetic_branch_model(self.modes, self.tokens_per_mode, seed=self.model_seed,
                                                max_context=self.max_context)
        if self.checkpoint:
            return build_tiny_transformer(checkpoint=self.checkpoint)
        spec = BackboneSpec(vocab_size=self.vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                            n_heads=self.n_heads, max_context=self.max_context, seed=self.model_seed)
        return build_tiny_transformer(spec)

    def build_prompts(self, backbone: Backbone) -> list[list[int]]:
        """Deterministic prompts: BOS for the synthetic model, seeded tokens otherwise."""
        if self.backbone == "synthetic":
            return [[backbone.bos_token] for _ in range(self.prompts)]
        out = []
        for p in range(self.prompts):
            rng = np.random.default_rng([self.seed, p])
            out.append([int(t) for t in rng.integers(0, backbone.vocab_size, self.prompt_len)])
        return out


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = _TYPES[key]
    is_str = kind == "str"
    # "none" is a real value for string keys such as filter
    if value is None or (isinstance(value, str) and value.strip().lower() in ("none", "null", "")
                         and not (is_str and value.strip())):
        if "None" in kind:
            return None
        raise ConfigError(f"{key}: a value is required")
    if isinstance(value, str):
        value = value.strip()
    try:
        if kind.startswith("bool"):
            if isinstance(value, bool):
                return value
            low = str(value).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind.startswith("float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {kind}") from None


def config_from_mapping(values: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig(**(base.to_dict() if base else {}))
    unknown = sorted(set(values) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    for key, value in values.items():
        setattr(cfg, key, _coerce(key, value))
    return cfg


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Config file (JSON if it parses as an object, else key = value) plus overrides, validated."""
    values: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        stripped = text.lstrip()
        if stripped.startswith("{"):
            try:
                values = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        else:
            values = parse_text(text)
    cfg = config_from_mapping(values)
    if overrides:
        cfg = config_from_mapping(overrides, cfg)
    return cfg.validate()
