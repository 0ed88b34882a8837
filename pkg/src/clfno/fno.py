"""Fourier Neural Operator backbone on periodic 2-D grids."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor_core import ParamStore, fft2, ifft2


@dataclass
class FnoConfig:
    in_channels: int = 7
    out_channels: int = 1
    hidden_channels: int = 64
    num_layers: int = 4
    modes: int = 16
    lifting_ratio: int = 2
    projection_ratio: int = 2
    activation: str = "gelu"

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "hidden_channels", "num_layers",
                     "modes", "lifting_ratio", "projection_ratio"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FnoConfig":
        return cls(**d)


_ACTIVATIONS = {
    "gelu": F.gelu,
    "relu": F.relu,
    "tanh": torch.tanh,
    "identity": lambda z: z,
}


def retained_indices(n: int, modes: int) -> torch.Tensor:
    """FFT indices of the signed frequencies ``-modes < k < modes`` on an axis of length ``n``.

    The set is closed under negation, so a real field filtered to it stays
    real and its spectrum stays inside the set. ``modes = (n + 1) // 2`` on an
    odd axis keeps the whole spectrum.
    """
    if 2 * modes - 1 > n:
        raise ValueError(f"{modes} modes need at least {2 * modes - 1} grid points, axis has {n}")
    return torch.tensor(list(range(modes)) + list(range(n - modes + 1, n)), dtype=torch.long)


def num_retained(modes: int) -> int:
    return 2 * modes - 1


class Pointwise(nn.Module):
    """Channel-mixing linear map applied independently at every grid point."""

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels))
        self.bias = nn.Parameter(torch.empty(out_channels)) if bias else None
        self.reset(generator or torch.Generator().manual_seed(0))

    def reset(self, gen: torch.Generator) -> None:
        bound = 1.0 / math.sqrt(self.weight.shape[1])
        with torch.no_grad():
            self.weight.copy_(torch.empty_like(self.weight).uniform_(-bound, bound, generator=gen))
            if self.bias is not None:
                self.bias.copy_(torch.empty_like(self.bias).uniform_(-bound, bound, generator=gen))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # z: (B, C, H, W)
        b, c, h, w = z.shape
        out = torch.matmul(self.weight, z.reshape(b, c, h * w))
        if self.bias is not None:
            out = out + self.bias[:, None]
        return out.reshape(b, -1, h, w)


class PointwiseMLP(nn.Module):
    """Two pointwise maps with an activation in between (lifting / projection)."""

    def __init__(self, in_channels: int, mid_channels: int, out_channels: int, activation: str = "gelu"):
        super().__init__()
        self.fc1 = Pointwise(in_channels, mid_channels)
        self.fc2 = Pointwise(mid_channels, out_channels)
        self.activation = activation

    def reset(self, gen: torch.Generator) -> None:
        self.fc1.reset(gen)
        self.fc2.reset(gen)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(_ACTIVATIONS[self.activation](self.fc1(z)))


def spectral_conv(z: torch.Tensor, weight: torch.Tensor, modes: int) -> torch.Tensor:
    """Real part of ifft2(R * truncate(fft2(z))).

    ``weight`` has shape (n, n, C_in, C_out, 2) holding real and imaginary
    parts for the ``n = 2*modes - 1`` retained frequencies per axis.
    """
    b, c, h, w = z.shape
    idx_h = retained_indices(h, modes)
    idx_w = retained_indices(w, modes)
    n = idx_h.numel()
    if weight.shape[:3] != (n, n, c):
        raise ValueError(f"spectral weight shape {tuple(weight.shape)} does not fit {c} channels and {modes} modes")
    cout = weight.shape[3]
    spec = fft2(z)
    kept = spec.index_select(2, idx_h).index_select(3, idx_w)
    kept = kept.reshape(b, c, n * n).permute(2, 0, 1)  # (n*n, B, C_in)
    r = torch.view_as_complex(weight.contiguous()).reshape(n * n, c, cout)
    mixed = torch.bmm(kept, r).permute(1, 2, 0).reshape(b, cout, n, n)
    full = torch.zeros(b, cout, h, w, dtype=spec.dtype)
    full[:, :, idx_h[:, None], idx_w[None, :]] = mixed
    return ifft2(full).real


class FourierLayer(nn.Module):
    """One operator block: spectral branch plus pointwise residual branch."""

    def __init__(self, in_channels: int, out_channels: int, modes: int, generator: torch.Generator | None = None):
        super().__init__()
        n = num_retained(modes)
        self.modes = modes
        self.spectral = nn.Parameter(torch.empty(n, n, in_channels, out_channels, 2))
        self.pointwise = Pointwise(in_channels, out_channels)
        self.reset(generator or torch.Generator().manual_seed(0))

    def reset(self, gen: torch.Generator) -> None:
        cin, cout = self.spectral.shape[2], self.spectral.shape[3]
        scale = 1.0 / (cin * cout)
        shape = self.spectral.shape[:-1]
        mag = scale * torch.rand(shape, generator=gen)
        phase = 2 * math.pi * torch.rand(shape, generator=gen)
        with torch.no_grad():
            self.spectral.copy_(torch.stack([mag * torch.cos(phase), mag * torch.sin(phase)], dim=-1))
        self.pointwise.reset(gen)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return spectral_conv(z, self.spectral, self.modes) + self.pointwise(z)


class FNO(nn.Module):
    """Lifting -> stack of Fourier layers -> projection.

    ``lift``, ``body`` and ``project`` are exposed separately because the
    single-layer extension taps the lifted field and adds a correction before
    the projection.
    """

    def __init__(self, config: FnoConfig, seed: int = 0):
        super().__init__()
        self.config = config
        c = config.hidden_channels
        self.lift = PointwiseMLP(config.in_channels, c * config.lifting_ratio, c, config.activation)
        self.layers = nn.ModuleList(FourierLayer(c, c, config.modes) for _ in range(config.num_layers))
        self.proj = PointwiseMLP(c, c * config.projection_ratio, config.out_channels, config.activation)
        self.reset(torch.Generator().manual_seed(seed))

    def reset(self, gen: torch.Generator) -> None:
        self.lift.reset(gen)
        for layer in self.layers:
            layer.reset(gen)
        self.proj.reset(gen)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4:
            raise ValueError(f"expected a (batch, channels, H, W) tensor, got shape {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        need = num_retained(self.config.modes)
        if x.shape[2] < need or x.shape[3] < need:
            raise ValueError(f"grid {tuple(x.shape[2:])} too small for {self.config.modes} modes")

    def body(self, z0: torch.Tensor) -> torch.Tensor:
        act = _ACTIVATIONS[self.config.activation]
        z = z0
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if i < last:
                z = act(z)
        return z

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.proj(self.body(self.lift(x)))

    def param_store(self) -> ParamStore:
        return ParamStore(self.named_parameters())


def parameter_count(config: FnoConfig) -> int:
    """Closed-form parameter count of :class:`FNO` for ``config``."""
    c = config.hidden_channels
    lift_mid = c * config.lifting_ratio
    proj_mid = c * config.projection_ratio
    lift = config.in_channels * lift_mid + lift_mid + lift_mid * c + c
    layer = spectral_layer_count(c, c, config.modes)
    proj = c * proj_mid + proj_mid + proj_mid * config.out_channels + config.out_channels
    return lift + config.num_layers * layer + proj


def spectral_layer_count(cin: int, cout: int, modes: int) -> int:
    n = num_retained(modes)
    return 2 * cin * cout * n * n + cin * cout + cout


def set_trainable(model: nn.Module, selector, flag: bool) -> int:
    """Set ``requires_grad`` on parameters whose name matches; warns when nothing matches."""
    count = ParamStore(model.named_parameters()).set_trainable(selector, flag)
    if count == 0:
        warnings.warn(f"selector {selector!r} matched no parameters", RuntimeWarning, stacklevel=2)
    return count
