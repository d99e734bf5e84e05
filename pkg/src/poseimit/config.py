"""Flat key = value run configuration: parse, validate, render.

Unknown keys are rejected; every run writes its fully-resolved configuration
next to its outputs so results are reproducible from the artifacts alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .imitation import BcConfig, GailConfig
from .mdp import EpisodeConfig

__all__ = ["RunConfig", "ConfigError", "parse_config_file"]


class ConfigError(Exception):
    pass


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str):
    return tuple(int(x.strip()) for x in str(s).split(",") if x.strip())


_PARSERS = {int: int, float: float, bool: _parse_bool, str: str, tuple: _parse_int_list}


@dataclass
class RunConfig:
    t: int = 50
    l: int = 25
    m: int = 5
    policy_hidden: int = 1024
    critic_hidden: int = 1024
    critic_mlp_widths: tuple = (512, 256, 128, 64, 32, 16, 1)
    leaky_slope: float = 0.2
    residual_output: bool = False
    decoder_feed: str = "autoregressive"
    bc_iters: int = 2000
    bc_batch: int = 16
    bc_lr: float = 1e-3
    gail_iters: int = 2000
    d_batch: int = 16
    g_batch: int = 16
    penalty_k: float = 2.0
    penalty_p: float = 6.0
    d_lr: float = 1e-4
    g_lr: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0
    precision: str = "test"
    checkpoint_interval: int = 0
    eval_windows: int = 128
    horizons: tuple = (80, 160, 320, 400, 560, 1000)

    _TYPES = None  # filled in below

    @classmethod
    def key_types(cls):
        if cls._TYPES is None:
            cls._TYPES = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)
                          if not f.name.startswith("_")}
        return cls._TYPES

    @classmethod
    def from_values(cls, values: dict) -> "RunConfig":
        """Build from a mapping of key -> string-or-typed value; unknown keys
        and malformed values are rejected."""
        types = cls.key_types()
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown configuration key {key!r}")
            want = types[key]
            try:
                if isinstance(raw, str):
                    kwargs[key] = _PARSERS[want](raw)
                elif want is tuple:
                    kwargs[key] = tuple(int(v) for v in raw)
                elif want is bool and not isinstance(raw, bool):
                    raise ValueError("expected a boolean")
                else:
                    kwargs[key] = want(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.episode()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.precision not in ("test", "train"):
            raise ConfigError(f"precision must be 'test' or 'train', got {self.precision!r}")
        if self.decoder_feed not in ("autoregressive", "ground_truth_during_bc"):
            raise ConfigError(f"unknown decoder_feed {self.decoder_feed!r}")
        if self.policy_hidden < 1 or self.critic_hidden < 1:
            raise ConfigError("hidden sizes must be positive")
        if not self.critic_mlp_widths or self.critic_mlp_widths[-1] != 1:
            raise ConfigError("critic_mlp_widths must end in 1")
        if min(self.bc_iters, self.gail_iters, self.checkpoint_interval) < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if min(self.bc_batch, self.d_batch, self.g_batch) < 1:
            raise ConfigError("batch sizes must be positive")
        if self.penalty_k < 0 or self.penalty_p <= 1:
            raise ConfigError("penalty needs k >= 0 and p > 1")
        if self.eval_windows < 0:
            raise ConfigError("eval_windows must be nonnegative")
        if not self.horizons or min(self.horizons) < 1:
            raise ConfigError("horizons must be positive")

    # -- derived views -------------------------------------------------------

    def episode(self) -> EpisodeConfig:
        return EpisodeConfig(t=self.t, l=self.l, m=self.m)

    @property
    def dtype(self):
        return np.float64 if self.precision == "test" else np.float32

    def seeds(self) -> dict:
        """Named sub-seeds derived from the run seed."""
        state = np.random.SeedSequence(self.seed).generate_state(4)
        return {
            "policy_init": int(state[0]),
            "critic_init": int(state[1]),
            "bc": int(state[2]),
            "gail": int(state[3]),
        }

    def bc_config(self) -> BcConfig:
        return BcConfig(
            iters=self.bc_iters,
            batch_size=self.bc_batch,
            lr=self.bc_lr,
            beta1=self.adam_beta1,
            beta2=self.adam_beta2,
            eps=self.adam_eps,
            decoder_feed=self.decoder_feed,
            grad_clip=self.grad_clip,
            seed=self.seeds()["bc"],
        )

    def gail_config(self) -> GailConfig:
        return GailConfig(
            iters=self.gail_iters,
            d_batch=self.d_batch,
            g_batch=self.g_batch,
            penalty_k=self.penalty_k,
            penalty_p=self.penalty_p,
            d_lr=self.d_lr,
            g_lr=self.g_lr,
            beta1=self.adam_beta1,
            beta2=self.adam_beta2,
            eps=self.adam_eps,
            grad_clip=self.grad_clip,
            seed=self.seeds()["gail"],
        )

    def render(self) -> str:
        lines = []
        for name in self.key_types():
            value = getattr(self, name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = f"{value:.17g}"
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.render())


def parse_config_file(path) -> dict:
    """Read flat `key = value` text with # comments into a string mapping."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not key or not value:
                raise ConfigError(f"{path}:{lineno}: empty key or value")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = value
    return values
