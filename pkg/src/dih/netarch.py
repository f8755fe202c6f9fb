"""Residual fully-connected networks with mount positions at block boundaries."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dih import container
from dih.autodiff import ACTIVATIONS, Tensor, activate, add, add_bias, as_tensor, matmul
from dih.errors import ContractError, DimensionError, MalformedHeaderError


@dataclass
class Block:
    weight: Tensor
    bias: Tensor
    activation: str = "relu"
    residual: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.weight.values.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(f"block weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if self.residual and self.d_in != self.d_out:
            raise ContractError(f"residual block needs d_in == d_out, got {self.d_in} -> {self.d_out}")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        out = activate(add_bias(matmul(x, self.weight), self.bias), self.activation)
        return add(out, x) if self.residual else out


@dataclass
class Network:
    """Backbone blocks followed by a linear classifier producing logits."""

    blocks: list[Block]
    classifier_weight: Tensor
    classifier_bias: Tensor
    mount_positions: tuple[int, ...] = ()
    num_classes: int = field(init=False)

    def __post_init__(self):
        self.mount_positions = tuple(int(m) for m in self.mount_positions)
        w, b = self.classifier_weight, self.classifier_bias
        if w.values.ndim != 2 or b.shape != (w.shape[1],):
            raise DimensionError(f"classifier weight {w.shape} and bias {b.shape} disagree")
        self.num_classes = w.shape[1]
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if prev.d_out != nxt.d_in:
                raise DimensionError(f"block dims do not chain: {prev.d_out} -> {nxt.d_in}")
        if self.blocks and self.blocks[-1].d_out != w.shape[0]:
            raise DimensionError(f"classifier expects {w.shape[0]} inputs, last block gives {self.blocks[-1].d_out}")
        mounts = self.mount_positions
        if list(mounts) != sorted(set(mounts)) or any(m < 0 or m >= len(self.blocks) for m in mounts):
            raise ContractError(f"mount positions {mounts} must be unique, sorted block indices < {len(self.blocks)}")

    @property
    def input_dim(self) -> int:
        return self.blocks[0].d_in if self.blocks else self.classifier_weight.shape[0]

    def mount_width(self, j: int) -> int:
        return self.blocks[self.mount_positions[j]].d_out

    def parameters(self) -> list[Tensor]:
        """All trainable tensors in a fixed order: block weights/biases, then classifier."""
        params = []
        for blk in self.blocks:
            params += [blk.weight, blk.bias]
        return params + [self.classifier_weight, self.classifier_bias]

    def copy(self) -> Network:
        blocks = [Block(b.weight.copy(), b.bias.copy(), b.activation, b.residual) for b in self.blocks]
        return Network(blocks, self.classifier_weight.copy(), self.classifier_bias.copy(), self.mount_positions)

    def with_mounts(self, mount_positions: Sequence[int]) -> Network:
        net = self.copy()
        net.mount_positions = tuple(mount_positions)
        net.__post_init__()
        return net


def build_network(input_dim: int, widths: Sequence[int], num_classes: int,
                  mount_positions: Sequence[int] = (), activation: str = "relu",
                  residual: bool = True, seed: int = 0) -> Network:
    """Chain of blocks with the given output widths.

    A block is residual whenever ``residual`` is set and its input and
    output widths agree, so the first (projection) block of a typical
    ``[32, 32, 32]`` stack is plain and the rest are residual.
    """
    if num_classes < 2:
        raise ContractError("num_classes must be at least 2")
    blocks = []
    d = input_dim
    for width in widths:
        blocks.append(Block(Tensor(np.zeros((d, width)), True), Tensor(np.zeros(width), True),
                            activation, residual and d == width))
        d = width
    net = Network(blocks, Tensor(np.zeros((d, num_classes)), True), Tensor(np.zeros(num_classes), True),
                  tuple(mount_positions))
    return init_params(net, seed)


def uniform_fan_in(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def init_params(net: Network, seed: int) -> Network:
    """Fresh copy with fan-in uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    out = net.copy()
    for blk in out.blocks:
        blk.weight = Tensor(uniform_fan_in(rng, blk.d_in, blk.d_out), True)
        blk.bias = Tensor(np.zeros(blk.d_out), True)
    w = out.classifier_weight
    out.classifier_weight = Tensor(uniform_fan_in(rng, w.shape[0], w.shape[1]), True)
    out.classifier_bias = Tensor(np.zeros(w.shape[1]), True)
    return out


def _check_input(net: Network, x: Tensor) -> None:
    if x.values.ndim != 2 or x.shape[1] != net.input_dim:
        raise DimensionError(f"network expects m x {net.input_dim} input, got {x.shape}")


def forward_with_activations(net: Network, x) -> tuple[Tensor, list[Tensor]]:
    """Logits plus the output of every mounted block, from a single pass."""
    h = as_tensor(x)
    _check_input(net, h)
    mounts = []
    wanted = set(net.mount_positions)
    for i, blk in enumerate(net.blocks):
        h = blk(h)
        if i in wanted:
            mounts.append(h)
    logits = add_bias(matmul(h, net.classifier_weight), net.classifier_bias)
    return logits, mounts


def forward(net: Network, x) -> Tensor:
    return forward_with_activations(net, x)[0]


@dataclass(frozen=True)
class ParamCount:
    per_block: tuple[int, ...]
    classifier: int

    @property
    def total(self) -> int:
        return sum(self.per_block) + self.classifier


def param_count(net: Network) -> ParamCount:
    per_block = tuple(b.weight.size + b.bias.size for b in net.blocks)
    return ParamCount(per_block, net.classifier_weight.size + net.classifier_bias.size)


# -- checkpoints ----------------------------------------------------------------


def network_header(net: Network) -> dict:
    return {
        "kind": "network",
        "input_dim": net.input_dim,
        "num_classes": net.num_classes,
        "mount_positions": list(net.mount_positions),
        "blocks": [{"d_in": b.d_in, "d_out": b.d_out, "activation": b.activation, "residual": b.residual}
                   for b in net.blocks],
    }


def network_arrays(net: Network, prefix: str = "") -> list[tuple[str, np.ndarray]]:
    arrays = []
    for i, blk in enumerate(net.blocks):
        arrays += [(f"{prefix}block{i}.weight", blk.weight.values), (f"{prefix}block{i}.bias", blk.bias.values)]
    arrays += [(f"{prefix}classifier.weight", net.classifier_weight.values),
               (f"{prefix}classifier.bias", net.classifier_bias.values)]
    return arrays


def network_to_bytes(net: Network) -> bytes:
    return container.pack(network_header(net), network_arrays(net))


def network_from_parts(header: dict, arrays: dict[str, np.ndarray], prefix: str = "") -> Network:
    try:
        blocks = [Block(Tensor(arrays[f"{prefix}block{i}.weight"], True), Tensor(arrays[f"{prefix}block{i}.bias"], True),
                        spec["activation"], bool(spec["residual"]))
                  for i, spec in enumerate(header["blocks"])]
        return Network(blocks, Tensor(arrays[f"{prefix}classifier.weight"], True),
                       Tensor(arrays[f"{prefix}classifier.bias"], True), tuple(header["mount_positions"]))
    except KeyError as exc:
        raise MalformedHeaderError(f"checkpoint lacks entry {exc}") from exc


def network_from_bytes(blob: bytes) -> Network:
    header, arrays = container.unpack(blob)
    if header.get("kind") != "network":
        raise MalformedHeaderError(f"expected a network checkpoint, found kind={header.get('kind')!r}")
    return network_from_parts(header, arrays)


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(network_to_bytes(net))


def load_network(path) -> Network:
    return network_from_bytes(container.read_bytes(path))
