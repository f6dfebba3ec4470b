"""Tiny VGG-style teacher/student networks with layer-module taps.

A network is a stack of conv blocks followed by a dense classifier. A tap
senses two points: the FFM is the tensor entering the first conv of
``ffm_block`` and the BFM is the activation leaving the last conv of
``bfm_block`` (before any pooling).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import ops
from .autograd.checkpoint import load_checkpoint, save_checkpoint
from .autograd.tensor import DTYPE, ShapeError, Tensor
from .distill import LayerModuleTap

DOWNSAMPLE = ("pool", "stride", "none")


@dataclass
class BlockSpec:
    channels: int
    repeat: int = 1
    downsample: str = "pool"


@dataclass
class TapSpec:
    ffm_block: int
    bfm_block: int
    group: int


@dataclass
class ModelSpec:
    name: str
    blocks: List[BlockSpec]
    taps: List[TapSpec]
    hidden: Tuple[int, ...] = (64,)
    classes: int = 10
    input_shape: Tuple[int, int, int] = (32, 32, 3)
    kernel: int = 3

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks]
        self.taps = [t if isinstance(t, TapSpec) else TapSpec(**t) for t in self.taps]
        self.hidden = tuple(self.hidden)
        self.input_shape = tuple(self.input_shape)

    def validate(self) -> None:
        if not self.blocks:
            raise ValueError(f"{self.name}: at least one block required")
        for i, b in enumerate(self.blocks):
            if b.channels < 1 or b.repeat < 1:
                raise ValueError(f"{self.name}: block {i} needs channels >= 1 and repeat >= 1")
            if b.downsample not in DOWNSAMPLE:
                raise ValueError(f"{self.name}: block {i} downsample must be one of {DOWNSAMPLE}")
        prev_end = -1
        for g, t in enumerate(self.taps, start=1):
            if t.group != g:
                raise ValueError(f"{self.name}: tap groups must be numbered 1..G in order, got {t.group} at {g}")
            if not (0 <= t.ffm_block <= t.bfm_block < len(self.blocks)):
                raise ValueError(f"{self.name}: tap g={g} points ({t.ffm_block}, {t.bfm_block}) "
                                 f"are not valid block boundaries")
            if t.ffm_block <= prev_end:
                raise ValueError(f"{self.name}: tap g={g} overlaps the previous layer module")
            prev_end = t.bfm_block
        if self.classes < 2:
            raise ValueError(f"{self.name}: classes must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def _tiny_vgg(name: str, repeat: int, downsample: str, classes: int) -> ModelSpec:
    blocks = [BlockSpec(16, 1, "none")]
    blocks += [BlockSpec(c, repeat, downsample) for c in (16, 32, 64)]
    taps = [TapSpec(i, i, i) for i in (1, 2, 3)]
    return ModelSpec(name, blocks, taps, hidden=(64,), classes=classes)


PRESETS = {
    "tiny-vgg-T": lambda classes: _tiny_vgg("tiny-vgg-T", 2, "pool", classes),
    "tiny-vgg-S": lambda classes: _tiny_vgg("tiny-vgg-S", 1, "pool", classes),
    "tiny-vgg-S-stride": lambda classes: _tiny_vgg("tiny-vgg-S-stride", 1, "stride", classes),
}


def preset(name: str, classes: int = 10) -> ModelSpec:
    try:
        return PRESETS[name](classes)
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; known: {sorted(PRESETS)}") from None


def _conv_out(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    return (size - kernel) // stride + 1


class Model:
    """Parameters plus the spec that gives them meaning."""

    def __init__(self, spec: ModelSpec, params: Dict[str, Tensor], input_mean: Optional[np.ndarray] = None):
        self.spec = spec
        self.params = params
        self.input_mean = (np.zeros(spec.input_shape[-1], dtype=DTYPE) if input_mean is None
                           else np.asarray(input_mean, dtype=DTYPE))

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def normalize(self, images: np.ndarray) -> np.ndarray:
        """uint8 NHWC -> float32 in [0, 1] minus the per-channel mean."""
        x = np.asarray(images)
        if x.dtype == np.uint8:
            x = x.astype(DTYPE) / DTYPE(255.0)
        return (x - self.input_mean).astype(DTYPE)

    def _block_layout(self):
        """Yield ``(block_index, conv_index, stride, padding)`` for every conv."""
        for b, block in enumerate(self.spec.blocks):
            for r in range(block.repeat):
                strided = block.downsample == "stride" and r == 0
                yield b, r, (2 if strided else 1), ("valid" if block.downsample == "stride" else "same")

    def forward(self, x, with_taps: bool = True):
        """Logits and the G layer-module taps for an N x H x W x C batch."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError("forward", x.shape, (None,) + self.spec.input_shape)
        entering: Dict[int, Tensor] = {}
        leaving: Dict[int, Tensor] = {}
        h = x
        for b, block in enumerate(self.spec.blocks):
            entering[b] = h
            for _, r, stride, padding in (c for c in self._block_layout() if c[0] == b):
                w = self.params[f"block{b}.conv{r}.w"]
                bias = self.params[f"block{b}.conv{r}.b"]
                h = ops.relu(ops.add(ops.conv2d(h, w, stride=stride, padding=padding), bias))
            leaving[b] = h
            if block.downsample == "pool":
                h = ops.maxpool2d(h, 2)
        n = h.shape[0]
        h = ops.reshape(h, (n, -1))
        for i in range(len(self.spec.hidden) + 1):
            h = ops.add(ops.matmul(h, self.params[f"fc{i}.w"]), self.params[f"fc{i}.b"])
            if i < len(self.spec.hidden):
                h = ops.relu(h)
        taps = []
        if with_taps:
            taps = [LayerModuleTap(entering[t.ffm_block], leaving[t.bfm_block], t.group) for t in self.spec.taps]
        return h, taps

    def __call__(self, x):
        return self.forward(x, with_taps=False)[0]

    def feature_shapes(self) -> List[Tuple[tuple, tuple]]:
        """Per-tap (FFM, BFM) H x W x D shapes without running the network."""
        hgt, wid, ch = self.spec.input_shape
        enter, leave = {}, {}
        k = self.spec.kernel
        for b, block in enumerate(self.spec.blocks):
            enter[b] = (hgt, wid, ch)
            for _, r, stride, padding in (c for c in self._block_layout() if c[0] == b):
                hgt, wid = _conv_out(hgt, k, stride, padding), _conv_out(wid, k, stride, padding)
                ch = block.channels
            leave[b] = (hgt, wid, ch)
            if block.downsample == "pool":
                hgt, wid = hgt // 2, wid // 2
        return [(enter[t.ffm_block], leave[t.bfm_block]) for t in self.spec.taps]

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return Model(copy.deepcopy(self.spec), params, self.input_mean.copy())

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.params.items()}
        state["meta/input_mean"] = self.input_mean
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = [k for k in self.params if k not in state]
        if missing:
            raise ValueError(f"checkpoint does not match {self.spec.name}: missing {missing}")
        extra = [k for k in state if k not in self.params and not k.startswith("meta/")]
        if extra:
            raise ValueError(f"checkpoint does not match {self.spec.name}: unexpected {extra}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"checkpoint tensor {k} has shape {state[k].shape}, "
                                 f"{self.spec.name} expects {p.shape}")
            p.data = np.array(state[k], dtype=DTYPE)
        if "meta/input_mean" in state:
            self.input_mean = np.array(state["meta/input_mean"], dtype=DTYPE)

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def summary(self) -> str:
        lines = [f"{self.spec.name}: {self.param_count()} parameters, G={len(self.spec.taps)}"]
        for t, (ffm, bfm) in zip(self.spec.taps, self.feature_shapes()):
            lines.append(f"  tap g={t.group}: FFM {ffm} -> BFM {bfm}")
        return "\n".join(lines)


def build(spec: ModelSpec, seed: int = 0, input_mean: Optional[np.ndarray] = None) -> Model:
    """He-initialised model; biases start at zero."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    k = spec.kernel
    cin = spec.input_shape[-1]
    hgt, wid = spec.input_shape[:2]
    for b, block in enumerate(spec.blocks):
        for r in range(block.repeat):
            stride = 2 if block.downsample == "stride" and r == 0 else 1
            padding = "valid" if block.downsample == "stride" else "same"
            std = np.sqrt(2.0 / (k * k * cin))
            params[f"block{b}.conv{r}.w"] = rng.normal(0.0, std, size=(k, k, cin, block.channels))
            params[f"block{b}.conv{r}.b"] = np.zeros(block.channels)
            hgt, wid = _conv_out(hgt, k, stride, padding), _conv_out(wid, k, stride, padding)
            if hgt < 1 or wid < 1:
                raise ValueError(f"{spec.name}: block {b} shrinks the feature map to nothing")
            cin = block.channels
        if block.downsample == "pool":
            hgt, wid = hgt // 2, wid // 2
            if hgt < 1 or wid < 1:
                raise ValueError(f"{spec.name}: pooling after block {b} shrinks the feature map to nothing")
    fan_in = hgt * wid * cin
    for i, width in enumerate(spec.hidden + (spec.classes,)):
        params[f"fc{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width))
        params[f"fc{i}.b"] = np.zeros(width)
        fan_in = width
    tensors = {name: Tensor(v, requires_grad=True, name=name) for name, v in params.items()}
    return Model(spec, tensors, input_mean)


def load_model(path, spec: ModelSpec) -> Model:
    model = build(spec, seed=0)
    model.load_state_dict(load_checkpoint(path))
    return model


def check_pairing(teacher: Model, student: Model) -> None:
    """Teacher and student taps must pair up with equal channel depths."""
    ts, ss = teacher.feature_shapes(), student.feature_shapes()
    if len(ts) != len(ss):
        raise ValueError(f"tap count mismatch: {teacher.spec.name} G={len(ts)}, {student.spec.name} G={len(ss)}")
    for g, ((tf, tb), (sf, sb)) in enumerate(zip(ts, ss), start=1):
        if tf[-1] != sf[-1] or tb[-1] != sb[-1]:
            raise ValueError(f"tap g={g}: depths differ, teacher FFM/BFM {tf}/{tb} vs student {sf}/{sb}")
