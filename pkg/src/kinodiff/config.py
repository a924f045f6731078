"""Run configuration: a small INI file mapping onto the module configs.

Sections: [schedule] (T, beta1, betaT), [sampler] (eta, stride, t_star),
[loss] (gamma1..3, w1..4), [model] (denoiser fields), [data] (input length,
normalization, neighbor query), [train] (steps, batch size, learning rate),
[run] (seed). Serialization is canonical, so a parsed config re-serializes
byte-identically.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .denoiser import DenoiserConfig
from .diffusion import LossWeights, SamplerConfig


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "schedule": {"T": int, "beta1": float, "betaT": float},
    "sampler": {"eta": float, "stride": int, "t_star": int},
    "loss": {"gamma1": float, "gamma2": float, "gamma3": float,
             "w1": float, "w2": float, "w3": float, "w4": float},
    "model": {"width": int, "heads": int, "sampling_blocks": int,
              "resnet_blocks": int, "kernel_size": int, "max_context": int,
              "context_gain": float},
    "data": {"input_len": int, "normalize_mode": str, "neighbors": int,
             "radius_m": float},
    "train": {"steps": int, "batch_size": int, "lr": float, "lr_final": float,
              "trim_frac": float, "checkpoint_every": int},
    "run": {"seed": int, "score_draws": int},
}

_DEFAULTS = {
    "schedule": {"T": 1000, "beta1": 1e-4, "betaT": 0.02},
    "sampler": {"eta": 0.0, "stride": 4, "t_star": 250},
    "loss": {"gamma1": 1.0, "gamma2": 1.0, "gamma3": 0.1,
             "w1": 1.0, "w2": 1.0, "w3": 1.0, "w4": 1.0},
    "model": {"width": 32, "heads": 4, "sampling_blocks": 3,
              "resnet_blocks": 3, "kernel_size": 5, "max_context": 4,
              "context_gain": 1.0},
    "data": {"input_len": 180, "normalize_mode": "minmax", "neighbors": 4,
             "radius_m": 5000.0},
    "train": {"steps": 2000, "batch_size": 16, "lr": 1e-3, "lr_final": 0.0,
              "trim_frac": 0.0, "checkpoint_every": 500},
    "run": {"seed": 0, "score_draws": 4},
}

# settings sized for minutes-scale runs on one CPU core
DESK_OVERRIDES = {
    "schedule": {"T": 50, "beta1": 0.002, "betaT": 0.4},
    "sampler": {"stride": 1, "t_star": 6},
    "loss": {"gamma2": 0.1, "gamma3": 2e-5},
    "model": {"width": 24, "sampling_blocks": 2, "resnet_blocks": 2,
              "kernel_size": 17, "max_context": 2},
    "data": {"input_len": 96, "neighbors": 2, "radius_m": 4000.0},
    "train": {"steps": 2500, "batch_size": 12, "lr": 3e-3, "lr_final": 3e-4,
              "trim_frac": 0.15},
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {s: dict(v) for s, v in _DEFAULTS.items()}
        for sec, kv in self.values.items():
            if sec not in _SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, val in kv.items():
                if key not in _SCHEMA[sec]:
                    raise ConfigError(f"unknown key {key!r} in section [{sec}]")
                merged[sec][key] = _SCHEMA[sec][key](val)
        self.values = merged

    def __getitem__(self, sec):
        return self.values[sec]

    def get(self, sec, key):
        return self.values[sec][key]

    def set(self, sec, key, val):
        if sec not in _SCHEMA or key not in _SCHEMA[sec]:
            raise ConfigError(f"unknown config entry [{sec}] {key}")
        self.values[sec][key] = _SCHEMA[sec][key](val)

    # -- module config views -------------------------------------------

    def denoiser_config(self, no_context=False):
        m = self.values["model"]
        return DenoiserConfig(
            width=m["width"], heads=m["heads"],
            sampling_blocks=m["sampling_blocks"],
            resnet_blocks=m["resnet_blocks"], kernel_size=m["kernel_size"],
            max_context=m["max_context"],
            context_gain=0.0 if no_context else m["context_gain"])

    def loss_weights(self, no_kbm=False):
        ls = self.values["loss"]
        return LossWeights(
            gamma1=ls["gamma1"], gamma2=ls["gamma2"],
            gamma3=0.0 if no_kbm else ls["gamma3"],
            w1=ls["w1"], w2=ls["w2"], w3=ls["w3"], w4=ls["w4"])

    def sampler_config(self, **overrides):
        s = dict(self.values["sampler"])
        s.update({k: v for k, v in overrides.items() if v is not None})
        return SamplerConfig(eta=s["eta"], stride=s["stride"], t_star=s["t_star"])

    def schedule(self):
        from .diffusion import linear_schedule
        s = self.values["schedule"]
        return linear_schedule(s["T"], s["beta1"], s["betaT"])

    # -- serialization ---------------------------------------------------

    def to_text(self):
        """Canonical INI form: fixed section and key order, repr floats."""
        out = io.StringIO()
        for sec in _SCHEMA:
            out.write(f"[{sec}]\n")
            for key in _SCHEMA[sec]:
                val = self.values[sec][key]
                out.write(f"{key} = {val!r}\n" if isinstance(val, float)
                          else f"{key} = {val}\n")
            out.write("\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive ("T")
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"bad config syntax: {err}") from None
        values = {}
        for sec in parser.sections():
            values[sec] = dict(parser.items(sec))
        try:
            return cls(values=values)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from None

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    @classmethod
    def desk(cls):
        """The fast profile used by tests and small experiments."""
        return cls(values={s: dict(v) for s, v in DESK_OVERRIDES.items()})
