"""Flat ``key = value`` run configuration.

One setting per line; ``#`` starts a comment; blank lines are ignored.
Keys are namespaced ``model.*``, ``diffusion.*``, ``train.*`` and
``data.*``.  Unknown or repeated keys are errors.  The raw text is kept so
it can be echoed verbatim into checkpoints.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from typing import Any, Callable

from ..networks import PRESETS, DiscriminatorSpec, GeneratorSpec, discriminator_spec_for


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    s = s.strip().strip("()[]")
    return tuple(int(p) for p in s.split(",") if p.strip())


# key -> (parser, default, description)
KEYS: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    "model.preset": (str, "desk", "named architecture; other model.* keys override its fields"),
    "model.image_channels": (int, None, "1 (grayscale) or 3 (RGB)"),
    "model.resolution": (int, None, "image side length in pixels"),
    "model.wavelet_input": (_bool, None, "operate on packed Haar subbands"),
    "model.base_channels": (int, None, "width of the first level"),
    "model.channel_multipliers": (_ints, None, "per-level width multipliers, comma separated"),
    "model.resblocks_per_scale": (int, None, "residual blocks per encoder level"),
    "model.attention_resolutions": (_ints, None, "network-input resolutions with self-attention"),
    "model.latent_dim": (int, None, "dimension of z"),
    "model.latent_mapping_layers": (int, None, "dense layers in the z mapping network"),
    "model.latent_embed_dim": (int, None, "width of the z embedding"),
    "model.freq_updown": (_bool, None, "Haar down/up blocks instead of pooling/nearest"),
    "model.freq_bottleneck": (_bool, None, "bottleneck acts on the ll subband only"),
    "model.freq_residual": (_bool, None, "wavelet-downsampled input shortcuts"),
    "model.attention_heads": (int, None, "heads per attention block"),
    "model.disc_base_channels": (int, 0, "discriminator base width (0: same as generator)"),
    "diffusion.T": (int, 0, "number of diffusion steps (0: preset default)"),
    "diffusion.schedule": (str, "geometric-alpha-bar", "geometric-alpha-bar | linear-beta | vp"),
    "diffusion.beta_min": (float, 0.1, "geometric: 1 - alpha_bar[1]"),
    "diffusion.alpha_bar_T": (float, 1e-3, "geometric: alpha_bar[T]"),
    "diffusion.beta_start": (float, 0.1, "linear-beta: beta[1]"),
    "diffusion.beta_end": (float, 0.9, "linear-beta: beta[T]"),
    "diffusion.vp_beta_min": (float, 0.1, "vp: beta(0)"),
    "diffusion.vp_beta_max": (float, 20.0, "vp: beta(1)"),
    "diffusion.vp_eps": (float, 1e-3, "vp: smallest continuous time"),
    "train.lr_G": (float, 1.6e-4, "generator Adam learning rate"),
    "train.lr_D": (float, 1.25e-4, "discriminator Adam learning rate"),
    "train.beta1": (float, 0.5, "Adam beta1"),
    "train.beta2": (float, 0.9, "Adam beta2"),
    "train.batch": (int, 16, "batch size"),
    "train.epochs": (int, 200, "passes over the dataset"),
    "train.max_steps": (int, 0, "stop after this many steps (0: no limit)"),
    "train.lambda_rec": (float, 1.0, "weight of the wavelet-space L1 term"),
    "train.ema_decay": (float, 0.999, "generator EMA decay"),
    "train.r1_gamma": (float, 0.05, "R1 penalty weight"),
    "train.r1_every": (int, 4, "apply R1 on every k-th discriminator step"),
    "train.reuse_draws": (_bool, True, "G step reuses the D step's (t, y_t)"),
    "train.seed": (int, 0, "master seed (overridden by WAVEDIFF_SEED, then --seed)"),
    "train.ckpt_every": (int, 0, "checkpoint period in steps (0: end of run only)"),
    "train.eval_every": (int, 0, "evaluation period in steps (0: end of run only)"),
    "train.eval_samples": (int, 64, "EMA samples drawn per evaluation"),
    "train.sample_ema": (_bool, True, "evaluate and sample with EMA weights"),
    "data.source": (str, "synthetic", "'synthetic' or a directory of PGM/PPM files"),
    "data.kind": (str, "two-mode-gaussian-images", "synthetic kind"),
    "data.count": (int, 1024, "synthetic image count"),
    "data.resolution": (int, 32, "image side length"),
    "data.channels": (int, 3, "image channels"),
    "data.seed": (int, 0, "synthetic corpus seed"),
    "data.noise": (float, 0.01, "synthetic per-pixel noise std"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        try:
            values[key] = KEYS[key][0](raw)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
    return values


@dataclass
class RunConfig:
    values: dict[str, Any]
    text: str = ""

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls(parse_config_text(text, source), text)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_text(text, path)

    def __getitem__(self, key: str):
        if key not in KEYS:
            raise KeyError(key)
        return self.values.get(key, KEYS[key][1])

    def seed(self, cli_seed: int | None = None) -> int:
        if cli_seed is not None:
            return int(cli_seed)
        env = os.environ.get("WAVEDIFF_SEED")
        if env is not None and env.strip():
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"WAVEDIFF_SEED is not an integer: {env!r}") from None
        return int(self["train.seed"])

    def generator_spec(self) -> GeneratorSpec:
        preset = self["model.preset"]
        if preset not in PRESETS:
            raise ConfigError(f"unknown model.preset {preset!r}; choose from {sorted(PRESETS)}")
        over = {}
        for f in fields(GeneratorSpec):
            v = self.values.get("model." + f.name)
            if v is not None:
                over[f.name] = v
        try:
            return replace(PRESETS[preset].spec, **over)
        except ValueError as e:
            raise ConfigError(f"invalid model: {e}") from None

    def discriminator_spec(self) -> DiscriminatorSpec:
        return discriminator_spec_for(self.generator_spec(), self["model.disc_base_channels"] or None)

    def steps(self) -> int:
        return self["diffusion.T"] or PRESETS[self["model.preset"]].steps

    def schedule_params(self) -> dict[str, float]:
        names = ("beta_min", "alpha_bar_T", "beta_start", "beta_end", "vp_beta_min", "vp_beta_max", "vp_eps")
        return {n: self["diffusion." + n] for n in names}

    def schedule(self):
        from ..diffusion import make_schedule
        try:
            return make_schedule(self.steps(), self["diffusion.schedule"], self.schedule_params())
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def validate(self) -> None:
        if not 0.0 <= self["train.ema_decay"] < 1.0:
            raise ConfigError("train.ema_decay must lie in [0, 1)")
        for k in ("train.batch", "train.epochs", "train.r1_every", "data.count"):
            if self[k] < 1:
                raise ConfigError(f"{k} must be positive")
        if self["train.r1_gamma"] < 0 or self["train.lambda_rec"] < 0:
            raise ConfigError("train.r1_gamma and train.lambda_rec must be non-negative")
        spec = self.generator_spec()
        if self["data.source"] == "synthetic":
            if self["data.resolution"] != spec.resolution or self["data.channels"] != spec.image_channels:
                raise ConfigError(
                    f"data is {self['data.channels']}x{self['data.resolution']}^2 but the model expects "
                    f"{spec.image_channels}x{spec.resolution}^2")
        self.schedule()


def describe_keys() -> str:
    return "\n".join(f"{k} = {d!r}  # {h}" for k, (_, d, h) in KEYS.items())
