"""Plain-text ``key=value`` configuration files.

Blank lines and ``#`` comments are ignored.  A key may repeat; readers that
accept repeats (scene primitives) get every value in order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .sfc import CurveKind


def parse_kv(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip().lower().replace("-", "_"), value.strip()))
    return pairs


def read_kv(path) -> list[tuple[str, str]]:
    return parse_kv(Path(path).read_text())


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


@dataclass
class ModelConfig:
    """Hyper-parameters of the toy encoder/decoder and its trainer."""

    curve: CurveKind = CurveKind.HILBERT
    group_size: int = 32
    k_shifts: int = 4
    heads: int = 2
    channels: int = 16
    tau_init: float = 1.0
    tau_min: float = 0.1
    alpha: float = 0.01
    lr: float = 0.005
    momentum: float = 0.9
    n_blocks: int = 2
    ffn_expansion: int = 4
    cmln_hidden: int = 16
    crpe_hidden: int = 16
    use_asa: bool = True
    use_crpe: bool = True
    use_cmln: bool = True
    shift_mode: str = "annealed"
    full_k: bool = True
    center_mode: str = "occupied"
    crpe_encoding: str = "relative"

    def __post_init__(self):
        self.curve = CurveKind.parse(self.curve)
        if self.channels % self.heads:
            raise ConfigError(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.group_size % self.k_shifts:
            raise ConfigError(f"group_size={self.group_size} not divisible by k_shifts={self.k_shifts}")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.shift_mode not in ("annealed", "gumbel", "vanilla", "fixed"):
            raise ConfigError(f"unknown shift_mode {self.shift_mode!r}")
        if self.center_mode not in ("occupied", "grid"):
            raise ConfigError(f"unknown center_mode {self.center_mode!r}")
        if self.crpe_encoding not in ("relative", "absolute"):
            raise ConfigError(f"unknown crpe_encoding {self.crpe_encoding!r}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_pairs(cls, pairs) -> "ModelConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in pairs:
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            default = fields[key].default
            try:
                if isinstance(default, bool):
                    kwargs[key] = _parse_bool(value)
                elif isinstance(default, int):
                    kwargs[key] = int(value)
                elif isinstance(default, float):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = value
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_pairs(read_kv(path))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, CurveKind):
                v = v.value
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


# Ablation presets mirroring the component, shift and CRPE studies.
ABLATIONS = {
    "baseline": dict(use_asa=False, use_crpe=False, use_cmln=False),
    "+asa": dict(use_crpe=False, use_cmln=False),
    "+crpe": dict(use_cmln=False),
    "+cmln": dict(),
    "vanilla_shift": dict(use_crpe=False, use_cmln=False, shift_mode="vanilla"),
    "gumbel_shift": dict(use_crpe=False, use_cmln=False, shift_mode="gumbel"),
    "annealed_shift": dict(use_crpe=False, use_cmln=False, shift_mode="annealed"),
    "w/o_crpe": dict(use_crpe=False),
    "w/o_pvm": dict(center_mode="grid"),
    "w/o_ryp": dict(crpe_encoding="absolute"),
    "with_crpe": dict(),
}

ABLATION_SUITES = {
    "components": ["baseline", "+asa", "+crpe", "+cmln"],
    "shift": ["baseline", "vanilla_shift", "gumbel_shift", "annealed_shift"],
    "crpe": ["w/o_crpe", "w/o_pvm", "w/o_ryp", "with_crpe"],
}
