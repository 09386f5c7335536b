"""pix2pix networks: a depth-adaptive U-Net generator and a PatchGAN discriminator.

Both networks expose their trainable weights as a :class:`ParameterSet`, the
value that is shipped between federation clients and the server.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn

INIT_STD = 0.02


class ParameterMismatchError(ValueError):
    """Raised when a ParameterSet does not line up with a model or another set."""


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    input_channels: int = 1
    output_channels: int = 1
    resolution: int = 256
    base_channels: int = 64
    channel_cap: int = 512
    dropout_rate: float = 0.5
    init_std: float = INIT_STD

    def __post_init__(self):
        r = self.resolution
        if not isinstance(r, int) or r < 16:
            raise ValueError(f"resolution must be an integer >= 16, got {r!r}")
        if r & (r - 1):
            raise ValueError(f"resolution must be a power of two, got {r}")
        if min(self.input_channels, self.output_channels, self.base_channels) < 1:
            raise ValueError("channel counts must be positive")
        if self.channel_cap < self.base_channels:
            raise ValueError("channel_cap must be >= base_channels")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1], got {self.dropout_rate}")

    @classmethod
    def micro(cls, resolution: int, **kw) -> "GeneratorConfig":
        """Config for toy models below the 16-pixel floor (smoke and gradient tests)."""
        if resolution < 2 or resolution & (resolution - 1):
            raise ValueError(f"resolution must be a power of two >= 2, got {resolution}")
        cfg = cls(resolution=16, **kw)
        object.__setattr__(cfg, "resolution", resolution)
        return cfg

    @property
    def depth(self) -> int:
        return int(math.log2(self.resolution))

    def encoder_channels(self) -> list[int]:
        return [min(self.base_channels * 2**i, self.channel_cap) for i in range(self.depth)]


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_channels: int = 2
    base_channels: int = 64
    num_strided_layers: int = 3
    kernel: int = 4
    leaky_slope: float = 0.2
    channel_cap: int = 512
    norm: str = "instance"
    init_std: float = INIT_STD

    def __post_init__(self):
        if self.input_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.num_strided_layers < 1:
            raise ValueError("num_strided_layers must be >= 1")
        if self.kernel < 2:
            raise ValueError("kernel must be >= 2")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"norm must be 'instance' or 'none', got {self.norm!r}")

    def layer_specs(self) -> list[tuple[int, int, int, int, int]]:
        """(c_in, c_out, kernel, stride, padding) for every convolution, in order."""
        specs = []
        c_in = self.input_channels
        for i in range(self.num_strided_layers):
            c_out = min(self.base_channels * 2**i, self.channel_cap)
            specs.append((c_in, c_out, self.kernel, 2, 1))
            c_in = c_out
        c_out = min(self.base_channels * 2**self.num_strided_layers, self.channel_cap)
        specs.append((c_in, c_out, self.kernel, 1, 1))
        specs.append((c_out, 1, self.kernel, 1, 1))
        return specs


def config_to_dict(config) -> dict:
    return {"kind": type(config).__name__, **asdict(config)}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    cls = {"GeneratorConfig": GeneratorConfig, "DiscriminatorConfig": DiscriminatorConfig}[kind]
    return cls(**d)


# ---------------------------------------------------------------------------
# ParameterSet
# ---------------------------------------------------------------------------


class ParameterSet:
    """Ordered, immutable mapping of parameter name -> float32 array."""

    __slots__ = ("_names", "_arrays")

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]]):
        names, arrays = [], []
        seen = set()
        for name, values in entries:
            if name in seen:
                raise ParameterMismatchError(f"duplicate parameter name {name!r}")
            seen.add(name)
            arr = np.array(values, dtype=np.float32, copy=True)
            if not np.all(np.isfinite(arr)):
                raise ParameterMismatchError(f"non-finite values in entry {name!r}")
            arr.setflags(write=False)
            names.append(name)
            arrays.append(arr)
        self._names = tuple(names)
        self._arrays = tuple(arrays)

    @classmethod
    def _trusted(cls, names: Sequence[str], arrays: Sequence[np.ndarray]) -> "ParameterSet":
        # skips copy/validation; callers guarantee float32, finite, read-only
        obj = cls.__new__(cls)
        obj._names = tuple(names)
        obj._arrays = tuple(arrays)
        return obj

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        return self._arrays

    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(a.shape for a in self._arrays)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return zip(self._names, self._arrays)

    def __len__(self) -> int:
        return len(self._names)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def num_values(self) -> int:
        return int(sum(a.size for a in self._arrays))

    def check_compatible(self, other: "ParameterSet") -> None:
        if len(self) != len(other):
            raise ParameterMismatchError(
                f"entry count differs: {len(self)} vs {len(other)}"
            )
        for (n1, a1), (n2, a2) in zip(self.items(), other.items()):
            if n1 != n2:
                raise ParameterMismatchError(f"entry name mismatch: {n1!r} vs {n2!r}")
            if a1.shape != a2.shape:
                raise ParameterMismatchError(
                    f"shape mismatch for {n1!r}: {a1.shape} vs {a2.shape}"
                )

    def equals(self, other: "ParameterSet") -> bool:
        """Bit-identical comparison (names, shapes and raw bytes)."""
        if self._names != other._names:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._arrays, other._arrays)
        )

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, arr in self.items():
            h.update(name.encode())
            h.update(repr(arr.shape).encode())
            h.update(arr.astype("<f4", copy=False).tobytes())
        return h.hexdigest()

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet((n, np.zeros_like(a)) for n, a in self.items())

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} entries, {self.num_values()} values)"


def export_parameters(model: nn.Module) -> ParameterSet:
    names, arrays = [], []
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype(np.float32, copy=True)
        if not np.all(np.isfinite(arr)):
            raise ParameterMismatchError(f"non-finite values in entry {name!r}")
        arr.setflags(write=False)
        names.append(name)
        arrays.append(arr)
    return ParameterSet._trusted(names, arrays)


def import_parameters(model: nn.Module, params: ParameterSet) -> None:
    own = list(model.named_parameters())
    if len(own) != len(params):
        raise ParameterMismatchError(
            f"model has {len(own)} entries, parameter set has {len(params)}"
        )
    for (name, p), (pname, arr) in zip(own, params.items()):
        if name != pname:
            raise ParameterMismatchError(f"entry name mismatch: model {name!r}, set {pname!r}")
        if tuple(p.shape) != arr.shape:
            raise ParameterMismatchError(
                f"shape mismatch for {name!r}: model {tuple(p.shape)}, set {arr.shape}"
            )
    with torch.no_grad():
        for (_, p), arr in zip(own, params.arrays):
            p.copy_(torch.from_numpy(np.array(arr)))


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


class _Down(nn.Module):
    def __init__(self, c_in, c_out, normalize, activate):
        super().__init__()
        self.act = nn.LeakyReLU(0.2) if activate else nn.Identity()
        self.conv = nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)
        self.norm = nn.InstanceNorm2d(c_out) if normalize else nn.Identity()

    def forward(self, x):
        return self.norm(self.conv(self.act(x)))


class _Up(nn.Module):
    def __init__(self, c_in, c_out, normalize, dropout):
        super().__init__()
        self.act = nn.ReLU()
        self.conv = nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1)
        self.norm = nn.InstanceNorm2d(c_out) if normalize else nn.Identity()
        self.drop = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x):
        return self.drop(self.norm(self.conv(self.act(x))))


class UNetGenerator(nn.Module):
    """U-Net whose depth is log2(resolution), so the bottleneck is 1x1.

    Block layout follows pix2pix: encoder blocks are (LeakyReLU ->) conv ->
    norm, decoder blocks ReLU -> transposed conv -> norm (-> dropout), and
    the last decoder block ends in tanh.  The first and the innermost encoder
    blocks are not normalized (per-sample normalization of a 1x1 map is
    identically zero).
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        chans = config.encoder_channels()
        d = config.depth

        self.encoder = nn.ModuleList()
        c_in = config.input_channels
        for i, c in enumerate(chans):
            self.encoder.append(
                _Down(c_in, c, normalize=0 < i < d - 1, activate=i > 0)
            )
            c_in = c

        # decoder block j mirrors encoder block d-1-j
        self.decoder = nn.ModuleList()
        for j in range(d - 1):
            c_in = chans[d - 1] if j == 0 else 2 * chans[d - 1 - j]
            c_out = chans[d - 2 - j]
            drop = config.dropout_rate if j < 3 else 0.0
            self.decoder.append(_Up(c_in, c_out, normalize=True, dropout=drop))
        self.decoder.append(
            _Up(2 * chans[0], config.output_channels, normalize=False, dropout=0.0)
        )
        self.out_act = nn.Tanh()

    def forward(self, x):
        r = self.config.resolution
        if x.dim() != 4 or x.shape[1] != self.config.input_channels or x.shape[-2:] != (r, r):
            raise ValueError(
                f"expected input (N, {self.config.input_channels}, {r}, {r}), got {tuple(x.shape)}"
            )
        skips = []
        h = x
        for block in self.encoder:
            h = block(h)
            skips.append(h)
        h = self.decoder[0](skips[-1])
        for j, block in enumerate(self.decoder[1:], start=1):
            h = block(torch.cat([h, skips[-1 - j]], dim=1))
        return self.out_act(h)


def _gaussian_init(module: nn.Module, std: float, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def build_generator(config: GeneratorConfig, seed: int) -> UNetGenerator:
    # torch's default init draws from the global RNG before we overwrite it
    with torch.random.fork_rng(devices=[]):
        model = UNetGenerator(config)
    _gaussian_init(model, config.init_std, seed)
    return model


def generator_forward(model: UNetGenerator, source: torch.Tensor) -> torch.Tensor:
    return model(source)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN emitting raw logits, one per receptive-field patch."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        specs = config.layer_specs()
        layers: list[nn.Module] = []
        for i, (c_in, c_out, k, s, p) in enumerate(specs):
            layers.append(nn.Conv2d(c_in, c_out, k, stride=s, padding=p))
            if i == len(specs) - 1:
                break
            if i > 0 and config.norm == "instance":
                layers.append(nn.InstanceNorm2d(c_out))
            layers.append(nn.LeakyReLU(config.leaky_slope))
        self.net = nn.Sequential(*layers)

    def forward(self, source, target):
        if source.shape[0] != target.shape[0] or source.shape[-2:] != target.shape[-2:]:
            raise ValueError(
                f"source {tuple(source.shape)} and target {tuple(target.shape)} do not match"
            )
        x = torch.cat([source, target], dim=1)
        if x.shape[1] != self.config.input_channels:
            raise ValueError(
                f"discriminator expects {self.config.input_channels} input channels, got {x.shape[1]}"
            )
        return self.net(x)


def build_discriminator(config: DiscriminatorConfig, seed: int) -> PatchDiscriminator:
    with torch.random.fork_rng(devices=[]):
        model = PatchDiscriminator(config)
    _gaussian_init(model, config.init_std, seed)
    return model


def discriminator_forward(model: PatchDiscriminator, source, target) -> torch.Tensor:
    return model(source, target)


# ---------------------------------------------------------------------------
# closed-form architecture arithmetic
# ---------------------------------------------------------------------------


def conv_output_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def patch_map_size(config: DiscriminatorConfig, n: int) -> int:
    for _, _, k, s, p in config.layer_specs():
        n = conv_output_size(n, k, s, p)
    return n


def receptive_field(config: DiscriminatorConfig) -> int:
    r, jump = 1, 1
    for _, _, k, s, _ in config.layer_specs():
        r += (k - 1) * jump
        jump *= s
    return r
