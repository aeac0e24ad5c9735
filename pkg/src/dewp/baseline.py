"""Two-layer fully connected baseline over the flattened lookback window."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .model import _uniform


@dataclass(frozen=True)
class LinearConfig:
    d: int
    L: int
    H: int
    hidden: int = 64

    def __post_init__(self):
        for name in ("d", "L", "H", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"linear.{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)


def init_linear_params(cfg: LinearConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    n_in = cfg.d * cfg.L
    arrays = {
        "fc1.weight": _uniform(rng, (n_in, cfg.hidden), n_in),
        "fc1.bias": np.zeros(cfg.hidden),
        "fc2.weight": _uniform(rng, (cfg.hidden, cfg.H), cfg.hidden),
        "fc2.bias": np.zeros(cfg.H),
    }
    return {name: Tensor(a, grad_enabled=True) for name, a in arrays.items()}


class LinearBaseline:
    """dense -> ReLU -> dense from ``d*L`` inputs to ``H`` outputs.

    The calendar argument is accepted for interface parity with DEWP and
    ignored.
    """

    kind = "linear"

    def __init__(self, config: LinearConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = init_linear_params(config, seed) if params is None else params

    @property
    def lookback(self) -> int:
        return self.config.L

    @property
    def horizon(self) -> int:
        return self.config.H

    def forward(self, features, calendar=None) -> Tensor:
        x = np.asarray(features, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.shape[1:] != (self.config.d, self.config.L):
            raise DimensionError(f"expected (B, {self.config.d}, {self.config.L}) features, got {x.shape}")
        flat = Tensor(x.reshape(x.shape[0], -1))
        h = ad.relu(ad.add_bias(ad.matmul(flat, self.params["fc1.weight"]), self.params["fc1.bias"], axis=-1))
        y = ad.add_bias(ad.matmul(h, self.params["fc2.weight"]), self.params["fc2.bias"], axis=-1)
        return ad.reshape(y, (self.config.H,)) if single else y

    def predict(self, features, calendar=None) -> np.ndarray:
        return self.forward(features, calendar).data
