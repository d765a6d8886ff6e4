"""Plain-text experiment configuration: sections of key = value lines.

The serialization uses shortest round-trip float formatting, so
parse -> serialize -> parse is the identity and reruns from a saved
snapshot see bit-identical settings. Unknown sections or keys are
rejected by name instead of being ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .operators import (LinearOp, cartesian_mask, make_downsample,
                        make_identity, make_masked_fourier, make_radon)
from .regularizer import TdvArch
from .training import LossFn, TrainConfig

TASKS = ("denoise_gray", "denoise_color", "sisr", "ct", "mri")


@dataclass
class ExperimentConfig:
    # task
    kind: str = "denoise_gray"
    sigma: float = 25.0 / 255.0
    gamma: int = 2              # sisr downsampling factor
    angles: int = 16            # ct projection angles
    detectors: int = 47         # ct detector bins
    accel: int = 2              # mri cartesian acceleration
    image_size: int = 32        # evaluation/analysis extent
    # arch
    scales: int = 2
    blocks: int = 1
    features: int = 8
    potential: str = "identity"
    padding: str = "replicate"
    # train
    batch_size: int = 8
    iterations: int = 2000
    lr: float = 1e-3
    lr_halving_period: int = 700
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    patch_size: int = 25
    steps: int = 10
    T_init: float = 0.1
    theta_box: float | None = None
    checkpoint_every: int = 0
    loss: str = "squared_l2"
    loss_eps: float = 0.01
    # analysis
    n_samples: int = 200
    n_trials: int = 200
    deltas: tuple = (0.5, 0.05)
    eps_ball: float = 0.05
    attack_eps: tuple = (25.0 / 255.0, 50.0 / 255.0)
    q_levels: tuple = (0.1, 0.5, 1.0)
    sweep_factors: tuple = (0.5, 1.0, 1.5, 2.0)
    eigen_steps: int = 500
    attack_steps: int = 300
    solver_steps: int = 250
    barrier_weight: float = 1e3
    # run
    seed: int = 0
    # paths
    data_dir: str = ""
    checkpoint: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ConfigError(f"unknown task kind '{self.kind}'")
        if self.loss not in ("squared_l2", "charbonnier"):
            raise ConfigError(f"unknown loss '{self.loss}'")

    @property
    def channels(self) -> int:
        return 3 if self.kind == "denoise_color" else 1

    def arch(self) -> TdvArch:
        return TdvArch(scales=self.scales, blocks=self.blocks,
                       features=self.features, channels=self.channels,
                       potential=self.potential, padding=self.padding)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, iterations=self.iterations,
            lr=self.lr, lr_halving_period=self.lr_halving_period,
            beta1=self.beta1, beta2=self.beta2, eps_adam=self.eps_adam,
            patch_size=self.patch_size, steps=self.steps, sigma=self.sigma,
            seed=self.seed, T_init=self.T_init, theta_box=self.theta_box,
            checkpoint_every=self.checkpoint_every, arch=self.arch())

    def loss_fn(self) -> LossFn:
        return LossFn(self.loss, eps=self.loss_eps)

    def operator(self, height: int, width: int) -> LinearOp:
        if self.kind in ("denoise_gray", "denoise_color"):
            return make_identity(self.channels, height, width)
        if self.kind == "sisr":
            return make_downsample(self.gamma, self.channels, height, width)
        if self.kind == "ct":
            return make_radon(self.angles, self.detectors, height, width)
        return make_masked_fourier(cartesian_mask(height, width, self.accel))


# section layout; every dataclass field appears exactly once
_SECTIONS = (
    ("task", ("kind", "sigma", "gamma", "angles", "detectors", "accel",
              "image_size")),
    ("arch", ("scales", "blocks", "features", "potential", "padding")),
    ("train", ("batch_size", "iterations", "lr", "lr_halving_period",
               "beta1", "beta2", "eps_adam", "patch_size", "steps",
               "T_init", "theta_box", "checkpoint_every", "loss",
               "loss_eps")),
    ("analysis", ("n_samples", "n_trials", "deltas", "eps_ball",
                  "attack_eps", "q_levels", "sweep_factors", "eigen_steps",
                  "attack_steps", "solver_steps", "barrier_weight")),
    ("run", ("seed",)),
    ("paths", ("data_dir", "checkpoint", "out_dir")),
)

_KEY_SECTION = {key: sec for sec, keys in _SECTIONS for key in keys}
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float | None":
            return None if raw == "none" else float(raw)
        if kind == "tuple":
            return tuple(float(part) for part in raw.split(","))
    except ValueError as err:
        raise ConfigError(f"bad value for '{key}': {raw!r}") from err
    return raw  # str fields, possibly empty


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in _SECTIONS:
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(getattr(cfg, key))}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in dict(_SECTIONS):
                raise ConfigError(f"unknown config section '[{section}]'")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if section is None:
            raise ConfigError(f"key '{key}' appears before any section")
        if _KEY_SECTION.get(key) != section:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        if key in values:
            raise ConfigError(f"duplicate config key '{key}'")
        values[key] = _parse_value(key, raw)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="ascii") as f:
        return parse_config(f.read())


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(serialize_config(cfg))
