"""Run configuration and its plain-text ``key = value`` file format.

One assignment per line; ``#`` starts a comment; tuple values are comma
separated; booleans are ``true``/``false``. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .decoder import DecoderConfig, stage_name
from .encoder import ConfigError, EncoderConfig
from .losses import LossWeights


@dataclass
class RunConfig:
    seed: int = 0
    size: int = 32
    spacing: tuple = (1.0, 1.0, 1.0)
    # encoder
    patch_size: int = 2
    embed_dim: int = 16
    depths: tuple = (2, 2, 2, 2)
    window_size: int = 4
    head_dim: int = 8
    moa: bool = True
    moa_experts: int = 12
    moa_k: int = 4
    mha_heads: int = 4
    # decoder
    shmoe_levels: tuple = ("1", "1/2")
    shmoe_kernel_sizes: tuple = (1, 3, 5)
    shmoe_k: int = 1
    stem_channels: int = 8
    active_stages: int = 0  # 0 = all stages
    diffeomorphic: bool = False
    int_steps: int = 7
    # objective and optimiser
    quantile: float = 0.5
    reg_weight: float = 0.01
    rc_weight: float = 0.001
    lr: float = 1e-4
    iterations: int = 300
    # synthetic data
    max_disp: float = 4.0
    smoothness: float = 4.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(f.default, tuple) and isinstance(v, list):
                setattr(self, f.name, tuple(v))
        if not 0.0 < self.quantile < 1.0:
            raise ConfigError(f"quantile must lie in (0, 1), got {self.quantile}")
        if not 1 <= self.moa_k <= self.moa_experts:
            raise ConfigError(f"moa_k must be in 1..moa_experts, got {self.moa_k}/{self.moa_experts}")
        if not 1 <= self.shmoe_k <= len(self.shmoe_kernel_sizes):
            raise ConfigError(f"shmoe_k must be in 1..{len(self.shmoe_kernel_sizes)}, got {self.shmoe_k}")
        if len(set(self.shmoe_kernel_sizes)) != len(self.shmoe_kernel_sizes):
            raise ConfigError(f"SHMoE kernel sizes must be distinct, got {self.shmoe_kernel_sizes}")
        valid = {stage_name(s) for s in range(len(self.depths) + 1)}
        bad = [lv for lv in self.shmoe_levels if lv not in valid]
        if bad:
            raise ConfigError(f"unknown SHMoE level(s) {bad}; valid: {sorted(valid)}")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            in_channels=1, patch_size=self.patch_size, embed_dim=self.embed_dim, depths=tuple(self.depths),
            window_size=self.window_size, head_dim=self.head_dim, moa_experts=self.moa_experts,
            moa_k=self.moa_k, use_moa=self.moa, mha_heads=self.mha_heads,
        )

    def decoder_config(self) -> DecoderConfig:
        n = len(self.depths) + 1
        heads = tuple("shmoe" if stage_name(s) in self.shmoe_levels else "conv" for s in range(n))
        return DecoderConfig(
            heads=heads, active_stages=self.active_stages or None, stem_channels=self.stem_channels,
            shmoe_kernel_sizes=tuple(self.shmoe_kernel_sizes), shmoe_k=self.shmoe_k,
            diffeomorphic=self.diffeomorphic, int_steps=self.int_steps,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(reg=self.reg_weight, rc=self.rc_weight)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kw[key] = _parse(val, known[key].default, key)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(val: str, default, key):
    try:
        if isinstance(default, bool):
            if val.lower() not in ("true", "false"):
                raise ValueError(val)
            return val.lower() == "true"
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        if isinstance(default, tuple):
            items = [s.strip() for s in val.split(",") if s.strip()]
            if default and isinstance(default[0], str) or key == "shmoe_levels":
                return tuple(items)
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(int(s) for s in items)
    except ValueError:
        raise ConfigError(f"bad value {val!r} for {key}") from None
    return val


# ablation grid: (MoA in the encoder, decoder resolutions using SHMoE)
ABLATION_GRID = (
    (False, ()),
    (False, ("1", "1/2")),
    (True, ()),
    (True, ("1",)),
    (True, ("1", "1/2")),
    (True, ("1", "1/2", "1/4")),
    (True, ("1", "1/2", "1/4", "1/8")),
)


def ablation_configs(base: RunConfig):
    for moa, levels in ABLATION_GRID:
        yield base.replace(moa=moa, shmoe_levels=levels)
