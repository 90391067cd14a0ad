"""Residual classifiers whose blocks can be switched off per input.

A network is a stem, ``K`` shape-preserving residual blocks split into
segments, non-droppable transition layers between segments, and a head. A
kept block computes ``y + F(y)``; a dropped block passes ``y`` through and
does no work at all for that input.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import tensor as T
from .flops import FlopsReport
from .nn import Affine, Conv2d, Linear, Module
from .optim import Adam
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# blocks ------------------------------------------------------------------------


# Initial scale of the last affine in each residual branch. Small branches
# keep the trained network tolerant to removing individual blocks.
BRANCH_INIT = 0.2


class ConvBlock(Module):
    """Pre-activation block: affine(conv(relu(affine(conv(relu(y))))))."""

    def __init__(self, channels: int, rng, dtype=np.float32):
        self.conv1 = Conv2d(channels, channels, 3, 1, rng, dtype)
        self.aff1 = Affine(channels, dtype)
        self.conv2 = Conv2d(channels, channels, 3, 1, rng, dtype)
        self.aff2 = Affine(channels, dtype)
        self.aff2.scale.data[:] = BRANCH_INIT

    def __call__(self, y: Tensor) -> Tensor:
        h = T.relu(self.aff1(self.conv1(T.relu(y))))
        return self.aff2(self.conv2(h))

    def flops(self, hw) -> int:
        return self.conv1.flops(hw) + self.conv2.flops(hw)


class MLPBlock(Module):
    def __init__(self, width: int, rng, dtype=np.float32):
        self.fc1 = Linear(width, width, rng, dtype)
        self.fc2 = Linear(width, width, rng, dtype)
        # start near the identity map so deep stacks train stably
        self.fc2.weight.data *= 0.5

    def __call__(self, y: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(T.relu(y))))

    def flops(self, hw=None) -> int:
        return self.fc1.flops() + self.fc2.flops()


class IdentityBlock(Module):
    """Stand-in for a removed block: a zero residual branch, so ``y + F(y) = y``."""

    def __call__(self, y: Tensor) -> Tensor:
        return Tensor(np.zeros_like(y.data))

    def flops(self, hw=None) -> int:
        return 0


class ConvStem(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng, dtype=np.float32):
        self.conv = Conv2d(c_in, c_out, 3, stride, rng, dtype)
        self.aff = Affine(c_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.aff(self.conv(x))


class ConvTransition(Module):
    """Stride-2 conv that doubles channels; never dropped."""

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float32):
        self.conv = Conv2d(c_in, c_out, 3, 2, rng, dtype)
        self.aff = Affine(c_out, dtype)

    def __call__(self, y: Tensor) -> Tensor:
        return self.aff(self.conv(T.relu(y)))


class ConvHead(Module):
    def __init__(self, channels: int, outputs: int, rng, dtype=np.float32):
        self.fc = Linear(channels, outputs, rng, dtype)

    def __call__(self, y: Tensor) -> Tensor:
        return self.fc(T.global_avg_pool(T.relu(y)))


class MLPStem(Module):
    """Flatten (after optional ``stride x stride`` average pooling) and project."""

    def __init__(self, d_in: int, width: int, rng, dtype=np.float32, stride: int = 1):
        self.fc = Linear(d_in, width, rng, dtype)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim > 2:
            if self.stride > 1:
                x = T.avg_pool(x, self.stride)
            x = T.flatten(x)
        return self.fc(x)


class MLPTransition(Module):
    def __init__(self, width: int, rng, dtype=np.float32):
        self.fc = Linear(width, width, rng, dtype)

    def __call__(self, y: Tensor) -> Tensor:
        return self.fc(T.relu(y))


class MLPHead(Module):
    def __init__(self, width: int, outputs: int, rng, dtype=np.float32):
        self.fc = Linear(width, outputs, rng, dtype)

    def __call__(self, y: Tensor) -> Tensor:
        return self.fc(T.relu(y))


# network ---------------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    """Serializable description from which a network is rebuilt."""

    family: str  # "conv" or "mlp"
    in_shape: tuple[int, int, int]
    segments: tuple[int, ...]
    width: int
    outputs: int
    stem_stride: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "in_shape": list(self.in_shape),
            "segments": list(self.segments),
            "width": self.width,
            "outputs": self.outputs,
            "stem_stride": self.stem_stride,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Architecture":
        return cls(
            family=d["family"],
            in_shape=tuple(d["in_shape"]),
            segments=tuple(d["segments"]),
            width=int(d["width"]),
            outputs=int(d["outputs"]),
            stem_stride=int(d.get("stem_stride", 1)),
        )


class GatedBackbone(Module):
    def __init__(self, arch: Architecture, rng: np.random.Generator, dtype=np.float32):
        if arch.family not in ("conv", "mlp"):
            raise ValueError(f"unknown family {arch.family!r}")
        if not arch.segments or min(arch.segments) < 0 or sum(arch.segments) < 1:
            raise ValueError("need at least one residual block")
        self.arch = arch
        c_in, h, w = arch.in_shape
        width = arch.width
        self.transitions: list[Module] = []
        self.segments: list[list[Module]] = []
        if arch.family == "conv":
            self.stem = ConvStem(c_in, width, arch.stem_stride, rng, dtype)
            for s, n in enumerate(arch.segments):
                ch = width * 2**s
                if s > 0:
                    self.transitions.append(ConvTransition(ch // 2, ch, rng, dtype))
                self.segments.append([ConvBlock(ch, rng, dtype) for _ in range(n)])
            self.head = ConvHead(width * 2 ** (len(arch.segments) - 1), arch.outputs, rng, dtype)
        else:
            st = arch.stem_stride
            if h % st or w % st:
                raise ValueError(f"input {h}x{w} is not divisible by stem stride {st}")
            self.stem = MLPStem(c_in * (h // st) * (w // st), width, rng, dtype, stride=st)
            for s, n in enumerate(arch.segments):
                if s > 0:
                    self.transitions.append(MLPTransition(width, rng, dtype))
                self.segments.append([MLPBlock(width, rng, dtype) for _ in range(n)])
            self.head = MLPHead(width, arch.outputs, rng, dtype)
        self.name_parameters()

    @property
    def K(self) -> int:
        return sum(len(seg) for seg in self.segments)

    @property
    def segment_sizes(self) -> list[int]:
        return [len(seg) for seg in self.segments]

    @property
    def blocks(self) -> list[Module]:
        return [b for seg in self.segments for b in seg]

    def block_params(self, i: int):
        return self.blocks[i].parameters()

    def _check_input(self, x: Tensor) -> None:
        want = tuple(self.arch.in_shape)
        got = x.shape[1:]
        flat = self.arch.family == "mlp" and self.arch.stem_stride == 1 and got == (int(np.prod(want)),)
        if got != want and not flat:
            raise ValueError(f"input shape {x.shape} does not match {want}")

    def features(self, x: Tensor, u: np.ndarray | None = None) -> Tensor:
        """Run stem, blocks and transitions up to (not including) the head."""
        y = self.stem(x)
        k = 0
        for s, seg in enumerate(self.segments):
            if s > 0:
                y = self.transitions[s - 1](y)
            for blk in seg:
                keep = None if u is None else u[:, k]
                y = apply_block(blk, y, keep)
                k += 1
        return y

    def __call__(self, x: Tensor, u: np.ndarray | None = None) -> Tensor:
        return forward_gated(self, x, u) if u is not None else forward_full(self, x)

    def flops_report(self) -> FlopsReport:
        layers: dict[str, int] = {}
        if self.arch.family == "conv":
            hw = tuple(self.arch.in_shape[1:])
            layers["stem"] = self.stem.conv.flops(hw)
            hw = self.stem.conv.out_hw(hw)
            blocks, trans = [], []
            for s, seg in enumerate(self.segments):
                if s > 0:
                    t = self.transitions[s - 1]
                    trans.append(t.conv.flops(hw))
                    layers[f"transitions.{s - 1}"] = trans[-1]
                    hw = t.conv.out_hw(hw)
                for blk in seg:
                    blocks.append(blk.flops(hw))
                    layers[f"blocks.{len(blocks) - 1}"] = blocks[-1]
            layers["head"] = self.head.fc.flops()
        else:
            layers["stem"] = self.stem.fc.flops()
            trans = [t.fc.flops() for t in self.transitions]
            blocks = [b.flops() for b in self.blocks]
            layers.update({f"transitions.{i}": f for i, f in enumerate(trans)})
            layers.update({f"blocks.{i}": f for i, f in enumerate(blocks)})
            layers["head"] = self.head.fc.flops()
        return FlopsReport(
            stem=layers["stem"], blocks=blocks, transitions=trans, head=layers["head"], layers=layers
        )

    def block_shapes(self) -> list[tuple[int, ...]]:
        """Per-block activation shape (without batch), i.e. the input of each block."""
        c, h, w = self.arch.in_shape
        if self.arch.family == "mlp":
            return [(self.arch.width,)] * self.K
        hw = self.stem.conv.out_hw((h, w))
        shapes = []
        for s, seg in enumerate(self.segments):
            if s > 0:
                hw = self.transitions[s - 1].conv.out_hw(hw)
            shapes += [(self.arch.width * 2**s, *hw)] * len(seg)
        return shapes

    def copy(self) -> "GatedBackbone":
        return copy.deepcopy(self)

    def with_identity(self, dropped) -> "GatedBackbone":
        """Copy of this network with the listed blocks replaced by the identity."""
        net = self.copy()
        dropped = set(int(j) for j in dropped)
        k = 0
        for seg in net.segments:
            for i in range(len(seg)):
                if k in dropped:
                    seg[i] = IdentityBlock()
                k += 1
        return net


def apply_block(blk: Module, y: Tensor, keep: np.ndarray | None) -> Tensor:
    """``y + F(y)`` on rows where ``keep`` is set, ``y`` elsewhere."""
    if keep is None:
        return y + blk(y)
    keep = np.asarray(keep).astype(bool)
    if keep.all():
        return y + blk(y)
    if not keep.any():
        return y
    idx = np.flatnonzero(keep)
    return T.index_add(y, idx, blk(T.take_rows(y, idx)))


def _as_actions(net: GatedBackbone, x: Tensor, u) -> np.ndarray:
    u = np.asarray(u)
    if u.ndim == 1:
        u = np.broadcast_to(u, (x.shape[0], u.shape[0]))
    if u.ndim != 2 or u.shape[1] != net.K or u.shape[0] != x.shape[0]:
        raise ValueError(f"action shape {u.shape} does not fit batch {x.shape[0]} and K={net.K}")
    if not np.isin(u, (0, 1)).all():
        raise ValueError("actions must be binary")
    return u.astype(np.int8)


def forward_gated(net: GatedBackbone, x: Tensor, u) -> Tensor:
    """Logits when block ``i`` runs only for inputs with ``u[:, i] == 1``."""
    net._check_input(x)
    return net.head(net.features(x, _as_actions(net, x, u)))


def forward_full(net: GatedBackbone, x: Tensor) -> Tensor:
    net._check_input(x)
    return forward_gated(net, x, np.ones((x.shape[0], net.K), dtype=np.int8))


def block_count(net: GatedBackbone) -> int:
    return net.K


def predict(net: GatedBackbone, x: np.ndarray, u=None, batch_size: int = 512) -> np.ndarray:
    """Argmax class per row, evaluated without recording gradients."""
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            xb = Tensor(x[i : i + batch_size])
            ub = None if u is None else np.asarray(u)[i : i + batch_size] if np.ndim(u) == 2 else u
            logits = forward_full(net, xb) if ub is None else forward_gated(net, xb, ub)
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net: GatedBackbone, x: np.ndarray, y: np.ndarray, u=None) -> float:
    if len(y) == 0:
        return float("nan")
    return float((predict(net, x, u) == y).mean())


def train_backbone(
    net: GatedBackbone,
    train,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    rng: np.random.Generator | None = None,
    val=None,
    on_epoch=None,
) -> list[dict[str, float]]:
    """Cross-entropy training with Adam; returns one history row per epoch.

    ``train`` and ``val`` are :class:`blockdrop.data.Dataset` instances;
    ``on_epoch`` is called with each history row.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if train.labels.max() >= net.arch.outputs:
        raise ValueError("labels exceed head width")
    rng = rng if rng is not None else np.random.default_rng(0)
    history: list[dict[str, float]] = []
    if epochs <= 0:
        return history
    opt = Adam(net.parameters(), lr=lr)
    for epoch in range(1, epochs + 1):
        losses = []
        for xb, yb, _ in train.batches(batch_size, rng):
            loss = T.softmax_cross_entropy(forward_full(net, Tensor(xb)), yb)
            if not np.isfinite(loss.data):
                raise TrainingError(f"backbone loss diverged at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_acc": accuracy(net, train.images, train.labels),
        }
        if val is not None:
            row["val_acc"] = accuracy(net, val.images, val.labels)
        history.append(row)
        log.info("backbone epoch %d loss %.4f acc %.4f", epoch, row["loss"], row["train_acc"])
        if on_epoch is not None:
            on_epoch(row)
    return history
