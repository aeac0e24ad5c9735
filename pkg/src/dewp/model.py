"""The forecasting network: stacks of convolutional variable expansion and
Fourier time expansion, per-stack attention inference, doubly residual wiring.

Tensors inside the network are batched as ``(B, channels, time)``.  The
public block functions also accept a single unbatched sample.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

N_CONV_LAYERS = 4


@dataclass(frozen=True)
class ModelConfig:
    d: int
    L: int
    H: int
    d_v: int = 512
    M: int = 5
    conv_channels: int = 128
    kernel_size: int = 3
    heads: int = 8
    embed_dim_month: int = 4
    embed_dim_weekday: int = 4
    embed_dim_hour: int = 4
    # width of the raw-feature projection; None means conv_channels
    input_channels: int | None = None
    # hidden width of the time-expansion dense layers; None means d_v
    te_hidden: int | None = None
    # ablation switches
    variable_expansion: bool = True
    attention: bool = True
    residual: bool = True

    def __post_init__(self):
        for name in ("d", "L", "H", "d_v", "M", "conv_channels", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"model.kernel_size must be odd, got {self.kernel_size}")
        if self.d_v % self.heads:
            raise ConfigError(f"model.d_v={self.d_v} is not divisible by model.heads={self.heads}")
        for name in ("embed_dim_month", "embed_dim_weekday", "embed_dim_hour"):
            if getattr(self, name) < 0:
                raise ConfigError(f"model.{name} must be >= 0")

    @property
    def c_in(self) -> int:
        return self.input_channels or self.conv_channels

    @property
    def hidden(self) -> int:
        return self.te_hidden or self.d_v

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BasisMatrices:
    backcast_basis: np.ndarray  # (L, L): row = time step, column = coefficient
    forecast_basis: np.ndarray  # (H, H)


@dataclass
class StackParams:
    ve: dict[str, Tensor]
    te: dict[str, Tensor]
    inf: dict[str, Tensor]


@dataclass
class Diagnostics:
    inputs: list[np.ndarray] = field(default_factory=list)  # X^(1) ... X^(M+1)
    backcasts: list[np.ndarray] = field(default_factory=list)
    forecasts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)  # per-stack inference results


# ----------------------------------------------------------------------
# basis


def fourier_basis(times: np.ndarray) -> np.ndarray:
    """Square matrix of cos/sin harmonics evaluated on ``times``.

    Columns ``0 .. n//2 - 1`` are ``cos(2 pi i t)``, the next ``n//2`` are
    ``sin(2 pi i t)`` for the same ``i``; odd ``n`` appends the cosine of
    harmonic ``n//2``.
    """
    n = len(times)
    half = n // 2
    i = np.arange(half)
    phase = 2.0 * np.pi * np.outer(times, i)
    cols = [np.cos(phase), np.sin(phase)]
    if n % 2:
        cols.append(np.cos(2.0 * np.pi * half * times)[:, None])
    return np.hstack(cols)


def build_basis(L: int, H: int) -> BasisMatrices:
    if L < 1 or H < 1:
        raise ConfigError(f"basis needs L, H >= 1 (got {L}, {H})")
    t_b = np.arange(-L, 0) / (L + H)
    t_f = np.arange(0, H) / (L + H)
    return BasisMatrices(fourier_basis(t_b), fourier_basis(t_f))


# ----------------------------------------------------------------------
# parameters


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fan-in uniform weights, zero biases, small uniform embeddings."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    e_total = cfg.embed_dim_month + cfg.embed_dim_weekday + cfg.embed_dim_hour
    for name, rows, width in (
        ("month", 12, cfg.embed_dim_month),
        ("weekday", 7, cfg.embed_dim_weekday),
        ("hour", 24, cfg.embed_dim_hour),
    ):
        if width:
            arrays[f"embed.{name}"] = rng.uniform(-0.05, 0.05, size=(rows, width))
    arrays["input.weight"] = _uniform(rng, (cfg.c_in, cfg.d), cfg.d)
    arrays["input.bias"] = np.zeros(cfg.c_in)
    arrays["proj.weight"] = _uniform(rng, (cfg.d_v, cfg.c_in + e_total), cfg.c_in + e_total)
    arrays["proj.bias"] = np.zeros(cfg.d_v)

    k = cfg.kernel_size
    widths = [cfg.d_v] + [cfg.conv_channels] * (N_CONV_LAYERS - 1) + [cfg.d_v]
    for s in range(cfg.M):
        p = f"stack{s}"
        if cfg.variable_expansion:
            for j in range(N_CONV_LAYERS):
                c_in, c_out = widths[j], widths[j + 1]
                arrays[f"{p}.ve.conv{j}.weight"] = _uniform(rng, (c_out, c_in, k), c_in * k)
                arrays[f"{p}.ve.conv{j}.bias"] = np.zeros(c_out)
        arrays[f"{p}.te.wz"] = _uniform(rng, (cfg.L, cfg.hidden), cfg.L)
        arrays[f"{p}.te.bz"] = np.zeros(cfg.hidden)
        arrays[f"{p}.te.wrho"] = _uniform(rng, (cfg.hidden, cfg.L + cfg.H), cfg.hidden)
        arrays[f"{p}.te.brho"] = np.zeros(cfg.L + cfg.H)
        if cfg.attention:
            for q in "qkv":
                arrays[f"{p}.inf.w{q}"] = _uniform(rng, (cfg.H, cfg.d_v), cfg.H)
                arrays[f"{p}.inf.b{q}"] = np.zeros(cfg.d_v)
            arrays[f"{p}.inf.wo"] = _uniform(rng, (cfg.d_v * cfg.d_v, cfg.H), cfg.d_v * cfg.d_v)
        else:
            arrays[f"{p}.inf.wo"] = _uniform(rng, (cfg.d_v * cfg.H, cfg.H), cfg.d_v * cfg.H)
        arrays[f"{p}.inf.bo"] = np.zeros(cfg.H)
    return {name: Tensor(a, grad_enabled=True) for name, a in arrays.items()}


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: t.shape for name, t in init_params(cfg, 0).items()}


# ----------------------------------------------------------------------
# blocks


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return ad.reshape(x, x.shape[1:]) if squeeze else x


def input_embed(
    features: np.ndarray, calendar: np.ndarray, params: Mapping[str, Tensor]
) -> Tensor:
    """Project raw features per time step, append calendar embeddings, project to ``d_v``.

    ``features`` is ``(B, d, L)`` (or ``(d, L)``) and ``calendar`` holds the
    matching ``(B, L, 3)`` month/weekday/hour indices.
    """
    features = np.asarray(features, dtype=np.float64)
    calendar = np.asarray(calendar)
    single = features.ndim == 2
    if single:
        features, calendar = features[None], calendar[None]
    if calendar.shape != (features.shape[0], features.shape[2], 3):
        raise DimensionError(f"calendar {calendar.shape} does not match features {features.shape}")

    h = ad.matmul(params["input.weight"], Tensor(features))
    parts = [ad.add_bias(h, params["input.bias"], axis=-2)]
    for col, name in enumerate(("month", "weekday", "hour")):
        table = params.get(f"embed.{name}")
        if table is not None:
            looked_up = ad.embedding(table, calendar[..., col])
            parts.append(ad.transpose(looked_up, (0, 2, 1)))
    h = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    x0 = ad.add_bias(ad.matmul(params["proj.weight"], h), params["proj.bias"], axis=-2)
    return _unbatch(x0, single)


def variable_expansion_forward(x: Tensor, ve: Mapping[str, Tensor]) -> Tensor:
    """Four same-padded convolutions, ReLU after the first three."""
    h = x
    for j in range(N_CONV_LAYERS):
        h = ad.conv1d(h, ve[f"conv{j}.weight"], ve[f"conv{j}.bias"])
        if j < N_CONV_LAYERS - 1:
            h = ad.relu(h)
    return h


def expansion_coefficients(z: Tensor, te: Mapping[str, Tensor]) -> Tensor:
    """Two ReLU dense layers over the time axis: ``(.., d_v, L) -> (.., d_v, L + H)``."""
    h = ad.relu(ad.add_bias(ad.matmul(z, te["wz"]), te["bz"], axis=-1))
    return ad.relu(ad.add_bias(ad.matmul(h, te["wrho"]), te["brho"], axis=-1))


def time_expansion_forward(
    z: Tensor, te: Mapping[str, Tensor], basis: BasisMatrices
) -> tuple[Tensor, Tensor]:
    """Backcast ``(.., d_v, L)`` and forecast ``(.., d_v, H)`` from Fourier coefficients."""
    L = basis.backcast_basis.shape[0]
    rho = expansion_coefficients(z, te)
    width = rho.shape[-1]
    backcast = ad.matmul(ad.take(rho, -1, 0, L), Tensor(basis.backcast_basis.T))
    forecast = ad.matmul(ad.take(rho, -1, L, width), Tensor(basis.forecast_basis.T))
    return backcast, forecast


def attention_weights(q: Tensor, k: Tensor, heads: int) -> Tensor:
    """Row-stochastic ``softmax(Q K^T / sqrt(d_k))`` per head: ``(B, heads, T, T)``."""
    B, T, width = q.shape
    dk = width // heads
    qh = ad.transpose(ad.reshape(q, (B, T, heads, dk)), (0, 2, 1, 3))
    kh = ad.transpose(ad.reshape(k, (B, T, heads, dk)), (0, 2, 3, 1))
    return ad.softmax_rows(ad.scale(ad.matmul(qh, kh), 1.0 / math.sqrt(dk)))


def inference_forward(
    forecast: Tensor, inf: Mapping[str, Tensor], heads: int, return_attention: bool = False
):
    """Map a stack's forecast block ``(B, d_v, H)`` to ``(B, H)`` power values.

    Rows of the forecast block (the expanded channels) are the attention
    tokens.  Without ``wq`` in ``inf`` the block is the single dense layer
    of the attention-free ablation.
    """
    xf, single = _batched(forecast)
    B, d_v, H = xf.shape
    attn = None
    if "wq" in inf:
        if d_v % heads:
            raise ConfigError(f"d_v={d_v} is not divisible by heads={heads}")
        dk = d_v // heads
        q, k, v = (ad.add_bias(ad.matmul(xf, inf[f"w{c}"]), inf[f"b{c}"], axis=-1) for c in "qkv")
        attn = attention_weights(q, k, heads)
        vh = ad.transpose(ad.reshape(v, (B, d_v, heads, dk)), (0, 2, 1, 3))
        mixed = ad.transpose(ad.matmul(attn, vh), (0, 2, 1, 3))
        feats = ad.transpose(ad.reshape(mixed, (B, d_v, d_v)), (0, 2, 1))
    else:
        feats = xf
    flat = ad.reshape(feats, (B, -1))
    y = ad.add_bias(ad.matmul(flat, inf["wo"]), inf["bo"], axis=-1)
    if single:
        y = ad.reshape(y, (y.shape[-1],))
    return (y, attn) if return_attention else y


def dewp_forward(
    x0: Tensor,
    stacks: list[StackParams],
    basis: BasisMatrices,
    heads: int,
    residual: bool = True,
) -> tuple[Tensor, Diagnostics]:
    """Run the stacks; returns the summed forecast and per-stack diagnostics.

    With ``residual`` each stack receives its predecessor's input minus that
    predecessor's backcast and the inference outputs are summed.  Without
    it, stacks are chained on backcasts and only the last output is used.
    """
    if not stacks:
        raise ConfigError("at least one stack is required")
    x, single = _batched(x0)
    diag = Diagnostics(inputs=[x.data])
    total = None
    for sp in stacks:
        z = variable_expansion_forward(x, sp.ve) if sp.ve else x
        backcast, forecast = time_expansion_forward(z, sp.te, basis)
        y = inference_forward(forecast, sp.inf, heads)
        if residual:
            x = ad.sub(x, backcast)
            total = y if total is None else ad.add(total, y)
        else:
            x = backcast
            total = y
        diag.inputs.append(x.data)
        diag.backcasts.append(backcast.data)
        diag.forecasts.append(forecast.data)
        diag.outputs.append(y.data)
    if single:
        total = ad.reshape(total, total.shape[1:])
    return total, diag


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over batch and horizon of the squared error."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = ad.sub(target, pred)
    return ad.mean_all(ad.mul(diff, diff))


# ----------------------------------------------------------------------
# model object


class DEWP:
    kind = "dewp"

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        self.basis = build_basis(config.L, config.H)

    @property
    def lookback(self) -> int:
        return self.config.L

    @property
    def horizon(self) -> int:
        return self.config.H

    @property
    def stacks(self) -> list[StackParams]:
        out = []
        for s in range(self.config.M):
            p = f"stack{s}."
            groups: dict[str, dict[str, Tensor]] = {"ve": {}, "te": {}, "inf": {}}
            for name, t in self.params.items():
                if name.startswith(p):
                    group, _, rest = name[len(p) :].partition(".")
                    groups[group][rest] = t
            out.append(StackParams(groups["ve"], groups["te"], groups["inf"]))
        return out

    def forward_with_diagnostics(self, features, calendar) -> tuple[Tensor, Diagnostics]:
        x0 = input_embed(features, calendar, self.params)
        return dewp_forward(x0, self.stacks, self.basis, self.config.heads, self.config.residual)

    def forward(self, features, calendar) -> Tensor:
        return self.forward_with_diagnostics(features, calendar)[0]

    def predict(self, features, calendar) -> np.ndarray:
        return self.forward(features, calendar).data
