"""Construction of multi-level encoder-decoder (med) networks.

A med network is a chain of encoder-decoder (ed) blocks: a full-resolution
generator followed by up to two enhancers running at 1/2 and 1/4 of the
input resolution.  Each block's 3-channel sigmoid output is one head; the
head of level L is area-downsampled by 2 and fed to level L+1.

Block anatomy (depth k = number of encoder stages, decoder mirrors it):

* encoder stage i: stride-2 3x3 conv -> batch norm -> leaky ReLU(0.2)
* decoder stage i: 2x bilinear upsample -> 3x3 conv -> batch norm -> leaky ReLU
* output layer: 3x3 conv to 3 channels -> sigmoid

Channel widths start at ``base_channels`` on the outermost stage and double
inward, capped at 4x base.  Skip links concatenate a source activation into
a target layer's input and a 1x1 conv immediately restores the layer's
channel budget, so parameter counts stay comparable across skip modes:

* intra: encoder stage i -> decoder stage i of the same block, for
  i = 1..k-1 (the bottleneck is excluded);
* inter encoder-encoder: encoder stage j of level L -> encoder stage j of
  level L+1 (the stage whose input resolution matches the source output);
* inter decoder-encoder: decoder stage j+1 of level L -> encoder stage j of
  level L+1, the resolution-consistent pairing;
* full: intra plus inter encoder-encoder.

Links with no matching-resolution target stage are dropped.  Cascading
injects the network input, area-downsampled to each enhancer's resolution,
by concatenation in front of the enhancer's first layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import (
    Rng,
    Tensor,
    batch_norm,
    concat_channels,
    conv2d,
    downsample_area,
    leaky_relu,
    sigmoid,
    upsample_bilinear,
)

LEAKY_SLOPE = 0.2
KERNEL = 3
CHANNEL_CAP_FACTOR = 4
IMAGE_CHANNELS = 3


class SkipMode(str, Enum):
    NONE = "none"
    INTRA = "intra"
    FULL = "full"
    INTER_EE = "inter_ee"
    INTER_DE = "inter_de"


@dataclass(frozen=True)
class EdSpec:
    """A standalone encoder-decoder block.

    ``depth`` counts encoder stages; the decoder mirrors them, so input and
    output spatial sizes coincide.  Standalone blocks only support the
    no-skip and intra-skip wirings (the inter modes need a second level).
    """

    depth: int
    base_channels: int = 32
    skip: SkipMode = SkipMode.INTRA

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"ed depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.skip not in (SkipMode.NONE, SkipMode.INTRA):
            raise ValueError(f"a standalone ed block supports none/intra skips, not {self.skip.value}")


@dataclass(frozen=True)
class MedSpec:
    """Declarative description of a med network."""

    generator_depth: int
    enhancer_depths: tuple[int, ...] = ()
    skip: SkipMode = SkipMode.INTRA
    cascade: bool = False
    base_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "enhancer_depths", tuple(int(d) for d in self.enhancer_depths))
        object.__setattr__(self, "skip", SkipMode(self.skip))
        if self.generator_depth < 2:
            raise ValueError(f"generator depth must be >= 2, got {self.generator_depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if len(self.enhancer_depths) > 2:
            raise ValueError("at most two enhancers are supported")
        for d in self.enhancer_depths:
            if d < 2:
                raise ValueError(f"enhancer depth must be >= 2, got {d}")
            if d >= self.generator_depth:
                raise ValueError(
                    f"enhancer depth {d} must be strictly less than generator depth {self.generator_depth}"
                )
        if not self.enhancer_depths:
            if self.skip in (SkipMode.FULL, SkipMode.INTER_EE, SkipMode.INTER_DE):
                raise ValueError(f"{self.skip.value} skips need at least one enhancer")
            if self.cascade:
                raise ValueError("cascade needs at least one enhancer to inject into")

    @property
    def levels(self) -> int:
        return 1 + len(self.enhancer_depths)

    @property
    def depths(self) -> tuple[int, ...]:
        return (self.generator_depth, *self.enhancer_depths)

    @property
    def required_divisor(self) -> int:
        """Input extents must divide this so every stage of every level stays integral."""
        return max(2 ** (level + depth) for level, depth in enumerate(self.depths))


def spec_to_json(spec: MedSpec) -> str:
    """Canonical JSON form; stable key order so round-trips are bit-exact."""
    doc = {
        "generator_depth": spec.generator_depth,
        "enhancer_depths": list(spec.enhancer_depths),
        "skip": spec.skip.value,
        "cascade": spec.cascade,
        "base_channels": spec.base_channels,
        "seed": spec.seed,
    }
    return json.dumps(doc, sort_keys=True, separators=(", ", ": "))


_SPEC_KEYS = {"generator_depth", "enhancer_depths", "skip", "cascade", "base_channels", "seed"}


def spec_from_json(text: str) -> MedSpec:
    doc = json.loads(text)
    return spec_from_dict(doc)


def spec_from_dict(doc: dict) -> MedSpec:
    if not isinstance(doc, dict):
        raise ValueError("network spec must be a JSON object")
    unknown = set(doc) - _SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown network spec keys: {sorted(unknown)}")
    missing = _SPEC_KEYS - set(doc)
    if missing:
        raise ValueError(f"missing network spec keys: {sorted(missing)}")
    return MedSpec(
        generator_depth=int(doc["generator_depth"]),
        enhancer_depths=tuple(int(d) for d in doc["enhancer_depths"]),
        skip=SkipMode(doc["skip"]),
        cascade=bool(doc["cascade"]),
        base_channels=int(doc["base_channels"]),
        seed=int(doc["seed"]),
    )


_CLASS_TABLE = {
    (SkipMode.NONE, False): "MED",
    (SkipMode.INTRA, False): "MEDS",
    (SkipMode.FULL, False): "MEDSF",
    (SkipMode.NONE, True): "MEDC",
    (SkipMode.INTRA, True): "MEDSC",
    (SkipMode.FULL, True): "MEDSFC",
}

CLASS_NAMES = tuple(_CLASS_TABLE.values())

_NAME_TO_CLASS = {name: key for key, name in _CLASS_TABLE.items()}


def classify(skip: SkipMode, cascade: bool) -> str:
    """Canonical med class name for a (skip, cascade) combination."""
    key = (SkipMode(skip), bool(cascade))
    if key not in _CLASS_TABLE:
        raise ValueError(f"no class name for skip mode {SkipMode(skip).value!r}")
    return _CLASS_TABLE[key]


def class_lookup(name: str) -> tuple[SkipMode, bool]:
    """Inverse of :func:`classify`."""
    if name not in _NAME_TO_CLASS:
        raise ValueError(f"unknown med class name {name!r}")
    return _NAME_TO_CLASS[name]


def config_count(generator_depth: int) -> int:
    """Number of distinct structures for a depth-k generator.

    5 skip wirings x 2 cascade settings x (k-1) generator-enhancer
    compositions.
    """
    if generator_depth < 2:
        raise ValueError(f"generator depth must be >= 2, got {generator_depth}")
    return 10 * (generator_depth - 1)


def display_name(spec: MedSpec) -> str:
    """Experiment-facing variant name.

    Single-level networks are the ED/EDS-k baselines; two-level networks get
    the starred form of their class name; inter-skip wirings (which have no
    table class) use an explicit suffix.
    """
    if spec.levels == 1:
        return f"ED{'S' if spec.skip == SkipMode.INTRA else ''}{spec.generator_depth}"
    core = {
        SkipMode.NONE: "MED",
        SkipMode.INTRA: "MEDS",
        SkipMode.FULL: "MEDSF",
        SkipMode.INTER_EE: "MED-IEE",
        SkipMode.INTER_DE: "MED-IDE",
    }[spec.skip]
    if spec.cascade:
        core += "C"
    if spec.levels == 2:
        core += "*"
    return core


# ---------------------------------------------------------------------------
# Structural plan: where skips and cascade injections land


@dataclass(frozen=True)
class SkipLink:
    """One concat link in the built graph."""

    kind: str  # "intra" | "inter_ee" | "inter_de"
    level: int  # level owning the target layer
    target_stage: int  # 1-based; intra targets a decoder stage, inter an encoder stage
    source_stage: int  # 1-based stage in the source block (level-1 for inter kinds)


def _stage_channels(base: int, depth: int) -> list[int]:
    return [min(base * 2**i, CHANNEL_CAP_FACTOR * base) for i in range(depth)]


def plan_skip_links(spec: MedSpec) -> list[SkipLink]:
    """Enumerate every skip-induced concat link the forward pass will create."""
    links: list[SkipLink] = []
    depths = spec.depths
    intra = spec.skip in (SkipMode.INTRA, SkipMode.FULL)
    for level, depth in enumerate(depths):
        if intra:
            for stage in range(1, depth):
                links.append(SkipLink("intra", level, stage, stage))
        if level == 0:
            continue
        prev_depth = depths[level - 1]
        if spec.skip in (SkipMode.FULL, SkipMode.INTER_EE):
            for stage in range(1, min(depth, prev_depth) + 1):
                links.append(SkipLink("inter_ee", level, stage, stage))
        elif spec.skip == SkipMode.INTER_DE:
            # Decoder stage j+1 of the previous level sits at the resolution
            # of encoder stage j's input here.
            for stage in range(1, min(depth, prev_depth - 1) + 1):
                links.append(SkipLink("inter_de", level, stage, stage + 1))
    return links


def plan_cascade_points(spec: MedSpec) -> list[tuple[int, int]]:
    """(level, downsample factor) for every cascade injection of the network input."""
    if not spec.cascade:
        return []
    return [(level, 2**level) for level in range(1, spec.levels)]


def expected_concat_count(spec: MedSpec) -> int:
    """Closed-form number of concat nodes in the forward graph."""
    return len(plan_skip_links(spec)) + len(plan_cascade_points(spec))


# ---------------------------------------------------------------------------
# Parameters and the built network


@dataclass
class _Conv:
    w: Tensor
    b: Tensor


@dataclass
class _Norm:
    gamma: Tensor
    beta: Tensor


@dataclass
class _Stage:
    conv: _Conv
    norm: _Norm


@dataclass
class _Block:
    depth: int
    in_channels: int
    enc: list[_Stage]
    dec: list[_Stage]
    intra_merge: dict[int, _Conv]  # decoder stage -> 1x1 restore conv
    inter_merge: dict[int, _Conv]  # encoder stage -> 1x1 restore conv
    final: _Conv


class MedNetwork:
    """A built med network: parameters plus the graph constructor.

    ``forward`` returns one head per level, full resolution first.  All
    parameters require grad; the parameter list is ordered deterministically
    by construction so a fixed seed reproduces the network bit-exactly.
    """

    def __init__(self, spec: MedSpec, input_channels: int, blocks: list[_Block], params: list[Tensor]):
        self.spec = spec
        self.input_channels = input_channels
        self._blocks = blocks
        self.params = params

    @property
    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def forward(self, z: Tensor) -> list[Tensor]:
        _, c, h, w = z.shape
        if c != self.input_channels:
            raise ValueError(f"network expects {self.input_channels} input channels, got {c}")
        div = self.spec.required_divisor
        if h % div or w % div:
            raise ValueError(f"input extents {h}x{w} must be divisible by {div}")
        heads: list[Tensor] = []
        prev_enc: list[Tensor] | None = None
        prev_dec: list[Tensor] | None = None
        for level, block in enumerate(self._blocks):
            if level == 0:
                x = z
            else:
                x = downsample_area(heads[-1], 2)
                if self.spec.cascade:
                    x = concat_channels(x, downsample_area(z, 2**level))
            head, enc_acts, dec_acts = self._run_block(level, block, x, prev_enc, prev_dec)
            heads.append(head)
            prev_enc, prev_dec = enc_acts, dec_acts
        return heads

    def _run_block(self, level, block, x, prev_enc, prev_dec):
        mode = self.spec.skip
        intra = mode in (SkipMode.INTRA, SkipMode.FULL)
        enc_acts: list[Tensor] = []
        cur = x
        for stage in range(1, block.depth + 1):
            if stage in block.inter_merge:
                if mode == SkipMode.INTER_DE:
                    # prev_dec is ordered by decoder stage k..1.
                    src = prev_dec[len(prev_dec) - (stage + 1)]
                else:
                    src = prev_enc[stage - 1]
                merge = block.inter_merge[stage]
                cur = conv2d(concat_channels(cur, src), merge.w, merge.b, stride=1)
            st = block.enc[stage - 1]
            cur = leaky_relu(batch_norm(conv2d(cur, st.conv.w, st.conv.b, stride=2), st.norm.gamma, st.norm.beta), LEAKY_SLOPE)
            enc_acts.append(cur)
        dec_acts: list[Tensor] = []
        for stage in range(block.depth, 0, -1):
            if intra and stage in block.intra_merge:
                merge = block.intra_merge[stage]
                cur = conv2d(concat_channels(cur, enc_acts[stage - 1]), merge.w, merge.b, stride=1)
            st = block.dec[block.depth - stage]
            cur = leaky_relu(batch_norm(conv2d(upsample_bilinear(cur), st.conv.w, st.conv.b, stride=1), st.norm.gamma, st.norm.beta), LEAKY_SLOPE)
            dec_acts.append(cur)
        head = sigmoid(conv2d(cur, block.final.w, block.final.b, stride=1))
        return head, enc_acts, dec_acts


class _ParamFactory:
    def __init__(self, rng: Rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: list[Tensor] = []

    def _tensor(self, data) -> Tensor:
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, dtype=self.dtype)
        self.params.append(t)
        return t

    def conv(self, in_ch: int, out_ch: int, k: int) -> _Conv:
        # Kaiming-uniform-style bound for the leaky-ReLU stacks.
        fan_in = in_ch * k * k
        bound = math.sqrt(6.0 / ((1.0 + LEAKY_SLOPE**2) * fan_in))
        w = self._tensor(self.rng.uniform((out_ch, in_ch, k, k), -bound, bound, dtype=self.dtype))
        b = self._tensor(np.zeros((1, out_ch, 1, 1)))
        return _Conv(w, b)

    def norm(self, ch: int) -> _Norm:
        gamma = self._tensor(np.ones((1, ch, 1, 1)))
        beta = self._tensor(np.zeros((1, ch, 1, 1)))
        return _Norm(gamma, beta)


def build(spec: MedSpec, input_channels: int, rng: Rng | None = None, dtype=np.float32) -> MedNetwork:
    """Materialize a network from its spec.

    ``input_channels`` is the channel count of the network input z (noise
    planes, an image, or a flash/no-flash pair), which the task side owns.
    """
    if input_channels < 1:
        raise ValueError(f"input_channels must be >= 1, got {input_channels}")
    if rng is None:
        rng = Rng(spec.seed)
    factory = _ParamFactory(rng, dtype)
    links = plan_skip_links(spec)
    depths = spec.depths
    blocks: list[_Block] = []
    for level, depth in enumerate(depths):
        ch = _stage_channels(spec.base_channels, depth)
        if level == 0:
            block_in = input_channels
        else:
            block_in = IMAGE_CHANNELS + (input_channels if spec.cascade else 0)
        enc: list[_Stage] = []
        inter_merge: dict[int, _Conv] = {}
        prev_ch = _stage_channels(spec.base_channels, depths[level - 1]) if level else []
        for stage in range(1, depth + 1):
            in_ch = block_in if stage == 1 else ch[stage - 2]
            for link in links:
                if link.kind.startswith("inter") and link.level == level and link.target_stage == stage:
                    src_ch = prev_ch[link.source_stage - 1] if link.kind == "inter_ee" else prev_ch[link.source_stage - 2]
                    inter_merge[stage] = factory.conv(in_ch + src_ch, in_ch, 1)
            enc.append(_Stage(factory.conv(in_ch, ch[stage - 1], KERNEL), factory.norm(ch[stage - 1])))
        dec: list[_Stage] = []
        intra_merge: dict[int, _Conv] = {}
        for stage in range(depth, 0, -1):
            flow_ch = ch[stage - 1]
            if any(lk.kind == "intra" and lk.level == level and lk.target_stage == stage for lk in links):
                intra_merge[stage] = factory.conv(2 * flow_ch, flow_ch, 1)
            out_ch = ch[stage - 2] if stage >= 2 else ch[0]
            dec.append(_Stage(factory.conv(flow_ch, out_ch, KERNEL), factory.norm(out_ch)))
        final = factory.conv(ch[0], IMAGE_CHANNELS, KERNEL)
        blocks.append(_Block(depth, block_in, enc, dec, intra_merge, inter_merge, final))
    return MedNetwork(spec, input_channels, blocks, factory.params)


def build_ed(spec: EdSpec, input_channels: int, rng: Rng | None = None, seed: int = 0) -> MedNetwork:
    """Standalone encoder-decoder block (the single-level baseline)."""
    med = MedSpec(
        generator_depth=spec.depth,
        enhancer_depths=(),
        skip=spec.skip,
        cascade=False,
        base_channels=spec.base_channels,
        seed=seed,
    )
    return build(med, input_channels, rng=rng)
