"""Model construction: cross-connected dense paths, baselines, wiring plans.

A model is a flat registry of parameter tensors plus a :class:`WiringPlan`,
a topologically ordered node list that drives forward execution. Keeping
execution plan-driven means the exported graph, the shape map, and the
actual computation cannot drift apart.

Cross-connection rule (the architecture's core): at each block boundary,
path p's next block consumes transition(concat(out_p, out_succ(p))) where
succ is the cyclic shift 1->2, 2->3, 3->1. The final block outputs of all
paths are concatenated, pooled, and classified by a single head.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import DenseBlock, Head, PlainStage, Stem, TransitionLayer
from .tensor import Precision, Tensor

PLAN_NODE_KINDS = ("stem", "block", "transition", "concat", "gap", "head")

# floor for log(mean prob) in the ensemble fusion; keeps f32 losses finite
_PROB_EPS = 1e-7


@dataclass
class DccConfig:
    """Declarative description of a cross-connected dense ensemble net."""

    growth_rate: int = 8
    stem_channels: Optional[int] = None  # defaults to 2 * growth_rate
    num_paths: int = 3
    blocks_per_path: int = 2
    layers_per_block: Optional[list[list[int]]] = None  # [path][block], defaults to 4s
    compression: float = 0.5
    dropout_rate: float = 0.2
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    seed: int = 0
    shared_stem: bool = False

    def resolved(self) -> "DccConfig":
        cfg = replace(self)
        if cfg.stem_channels is None:
            cfg.stem_channels = 2 * cfg.growth_rate
        if cfg.layers_per_block is None:
            cfg.layers_per_block = [[4] * cfg.blocks_per_path
                                    for _ in range(cfg.num_paths)]
        cfg.input_shape = tuple(cfg.input_shape)
        return cfg

    def validate(self, min_paths: int = 2) -> "DccConfig":
        cfg = self.resolved()
        if cfg.num_paths < min_paths:
            raise ConfigError(f"num_paths must be >= {min_paths}, got {cfg.num_paths}")
        if cfg.blocks_per_path < 1:
            raise ConfigError(f"blocks_per_path must be >= 1, got {cfg.blocks_per_path}")
        if cfg.growth_rate < 1:
            raise ConfigError(f"growth_rate must be >= 1, got {cfg.growth_rate}")
        if cfg.stem_channels < 1:
            raise ConfigError(f"stem_channels must be >= 1, got {cfg.stem_channels}")
        if len(cfg.layers_per_block) != cfg.num_paths:
            raise ConfigError(
                f"layers_per_block must list {cfg.num_paths} paths, "
                f"got {len(cfg.layers_per_block)}")
        for p, row in enumerate(cfg.layers_per_block):
            if len(row) != cfg.blocks_per_path:
                raise ConfigError(
                    f"layers_per_block[{p}] must list {cfg.blocks_per_path} blocks")
            if any(l < 1 for l in row):
                raise ConfigError(f"layers_per_block[{p}] entries must be >= 1")
        if not 0.0 < cfg.compression <= 1.0:
            raise ConfigError(f"compression must be in (0,1], got {cfg.compression}")
        if not 0.0 <= cfg.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0,1), got {cfg.dropout_rate}")
        if cfg.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {cfg.num_classes}")
        if len(cfg.input_shape) != 3 or any(d < 1 for d in cfg.input_shape):
            raise ConfigError(f"input_shape must be (C,H,W) positive, got {cfg.input_shape}")
        return cfg


@dataclass(frozen=True)
class PlanNode:
    id: int
    kind: str
    ref: str  # unit name; empty for concat/gap
    inputs: tuple[int, ...]  # earlier node ids; empty means "model input"


@dataclass
class WiringPlan:
    nodes: list[PlanNode]
    outputs: tuple[int, ...]

    def edges(self) -> list[tuple[int, int, int]]:
        """(producer, consumer, slot) triples."""
        out = []
        for node in self.nodes:
            for slot, src in enumerate(node.inputs):
                out.append((src, node.id, slot))
        return out

    def concat_nodes(self) -> list[PlanNode]:
        return [n for n in self.nodes if n.kind == "concat"]


class _Planner:
    """Builds a plan plus per-node shapes and unit ctor specs, no params."""

    def __init__(self):
        self.nodes: list[PlanNode] = []
        self.shapes: dict[int, tuple] = {}
        self.unit_specs: dict[str, tuple] = {}

    def add(self, kind: str, ref: str, inputs: tuple[int, ...], shape: tuple) -> int:
        nid = len(self.nodes)
        assert kind in PLAN_NODE_KINDS
        assert all(i < nid for i in inputs)
        self.nodes.append(PlanNode(nid, kind, ref, inputs))
        self.shapes[nid] = shape
        return nid

    def _stem_shape(self, nid_hint: str, c0: int, h: int, w: int) -> tuple:
        if h < 8 or w < 8:
            raise ShapeError(
                f"node {len(self.nodes)} ({nid_hint}): input {h}x{w} too small for stem")
        hc, wc = (h - 1) // 2 + 1, (w - 1) // 2 + 1       # 7x7 s2 p3
        return (c0, (hc - 1) // 2 + 1, (wc - 1) // 2 + 1)  # 3x3 maxpool s2 p1

    def stem(self, ref: str, in_ch: int, c0: int, h: int, w: int) -> int:
        shape = self._stem_shape(ref, c0, h, w)
        self.unit_specs[ref] = ("stem", in_ch, c0)
        return self.add("stem", ref, (), shape)

    def block(self, ref: str, src: int, k: int, n_layers: int, dropout: float) -> int:
        c, h, w = self.shapes[src]
        self.unit_specs[ref] = ("block", c, k, n_layers, dropout)
        return self.add("block", ref, (src,), (c + n_layers * k, h, w))

    def transition(self, ref: str, src: int, theta: float) -> int:
        c, h, w = self.shapes[src]
        if h % 2 or w % 2 or h < 2 or w < 2:
            raise ShapeError(
                f"node {len(self.nodes)} ({ref}): input {h}x{w} too small or odd "
                "for a 2x2 transition pool")
        cout = int(math.floor(theta * c))
        if cout < 1:
            raise ConfigError(f"compression {theta} of {c} channels leaves none ({ref})")
        self.unit_specs[ref] = ("transition", c, theta)
        return self.add("transition", ref, (src,), (cout, h // 2, w // 2))

    def concat(self, srcs: tuple[int, ...]) -> int:
        shapes = [self.shapes[s] for s in srcs]
        if len({(s[1], s[2]) for s in shapes}) != 1:
            raise ShapeError(f"concat inputs disagree on spatial size: {shapes}")
        c = sum(s[0] for s in shapes)
        return self.add("concat", "", srcs, (c, shapes[0][1], shapes[0][2]))

    def gap(self, src: int) -> int:
        c = self.shapes[src][0]
        return self.add("gap", "", (src,), (c,))

    def head(self, ref: str, src: int, num_classes: int) -> int:
        (c,) = self.shapes[src]
        self.unit_specs[ref] = ("head", c, num_classes)
        return self.add("head", ref, (src,), (num_classes,))

    def stage(self, ref: str, src: int, cout: int, n_convs: int, pool: bool) -> int:
        c, h, w = self.shapes[src]
        self.unit_specs[ref] = ("stage", c, cout, n_convs, pool)
        if pool:
            h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        return self.add("block", ref, (src,), (cout, h, w))


def _plan_dense_paths(cfg: DccConfig, num_paths: int, planner: _Planner,
                      prefix: str = "") -> list[int]:
    """Lay out ``num_paths`` dense paths with cyclic cross-connections.

    With a single path the concats vanish and transitions link blocks
    directly. Returns the final block node id per path.
    """
    in_ch, h, w = cfg.input_shape
    k, theta = cfg.growth_rate, cfg.compression

    if cfg.shared_stem:
        shared = planner.stem(f"{prefix}stem", in_ch, cfg.stem_channels, h, w)
        stems = [shared] * num_paths
    else:
        stems = [planner.stem(f"{prefix}path{p + 1}.stem", in_ch, cfg.stem_channels, h, w)
                 for p in range(num_paths)]

    blocks = []
    for p in range(num_paths):
        ref = f"{prefix}path{p + 1}.block1"
        blocks.append(planner.block(ref, stems[p], k,
                                    cfg.layers_per_block[p][0], cfg.dropout_rate))

    for b in range(1, cfg.blocks_per_path):
        prev = list(blocks)
        for p in range(num_paths):
            if num_paths >= 2:
                succ = (p + 1) % num_paths
                merged = planner.concat((prev[p], prev[succ]))
            else:
                merged = prev[p]
            trans = planner.transition(f"{prefix}path{p + 1}.trans{b + 1}", merged, theta)
            blocks[p] = planner.block(f"{prefix}path{p + 1}.block{b + 1}", trans, k,
                                      cfg.layers_per_block[p][b], cfg.dropout_rate)
    return blocks


def _plan_model(cfg: DccConfig, num_paths: int) -> _Planner:
    planner = _Planner()
    finals = _plan_dense_paths(cfg, num_paths, planner)
    fused = planner.concat(tuple(finals)) if num_paths >= 2 else finals[0]
    pooled = planner.gap(fused)
    planner.head("head", pooled, cfg.num_classes)
    return planner


def _plan_standard_cnn(cfg: DccConfig, width: int, prefix: str = "") -> _Planner:
    planner = _Planner()
    in_ch, h, w = cfg.input_shape
    stem = planner.stem(f"{prefix}stem", in_ch, width, h, w)
    s1 = planner.stage(f"{prefix}stage1", stem, 2 * width, 2, pool=True)
    s2 = planner.stage(f"{prefix}stage2", s1, 2 * width, 2, pool=False)
    pooled = planner.gap(s2)
    planner.head(f"{prefix}head", pooled, cfg.num_classes)
    return planner


def _spec_param_count(unit_specs: dict[str, tuple]) -> int:
    """Closed-form trainable parameter count for a set of unit specs."""
    total = 0
    for spec in unit_specs.values():
        kind = spec[0]
        if kind == "stem":
            _, cin, c0 = spec
            total += c0 * cin * 49 + 2 * c0
        elif kind == "block":
            _, cin, k, n_layers, _ = spec
            for i in range(n_layers):
                c = cin + i * k
                total += 2 * c + k * c * 9
        elif kind == "transition":
            _, cin, theta = spec
            total += 2 * cin + int(math.floor(theta * cin)) * cin
        elif kind == "head":
            _, dfused, classes = spec
            total += classes * dfused + classes
        elif kind == "stage":
            _, cin, cout, n_convs, _ = spec
            c = cin
            for _ in range(n_convs):
                total += cout * c * 9 + 2 * cout
                c = cout
    return total


class Model:
    """Executable network: units, flat tensor registries, wiring plan."""

    def __init__(self, kind: str, config: DccConfig, plan: WiringPlan,
                 units: dict, precision: Precision, fusion: Optional[str] = None):
        self.kind = kind
        self.config = config
        self.plan = plan
        self.units = units
        self.precision = precision
        self.fusion = fusion
        c = config.input_shape[0]
        self.norm_mean = Tensor(np.zeros(c), dtype=precision.dtype)
        self.norm_std = Tensor(np.ones(c), dtype=precision.dtype)
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, Tensor] = {"input_norm.mean": self.norm_mean,
                                            "input_norm.std": self.norm_std}
        seen = set()
        for node in plan.nodes:
            if not node.ref or node.ref in seen:
                continue
            seen.add(node.ref)
            unit = units[node.ref]
            for n, t in unit.named_params():
                self._register_param(f"{node.ref}.{n}", t)
            for n, t in unit.named_buffers():
                name = f"{node.ref}.{n}"
                assert name not in self._buffers, f"duplicate buffer {name}"
                self._buffers[name] = t

    def _register_param(self, name: str, t: Tensor) -> None:
        assert name not in self._params, f"duplicate parameter {name}"
        self._params[name] = t

    def named_params(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def named_buffers(self) -> list[tuple[str, Tensor]]:
        return list(self._buffers.items())

    def param_count(self) -> int:
        return sum(t.size for t in self._params.values())

    @staticmethod
    def is_no_decay(name: str) -> bool:
        """BN affine terms and biases are excluded from weight decay."""
        return name.endswith((".gamma", ".beta", ".fc_b"))

    def set_input_normalization(self, mean, std) -> None:
        mean = np.asarray(mean, dtype=self.precision.dtype).reshape(-1)
        std = np.asarray(std, dtype=self.precision.dtype).reshape(-1)
        c = self.config.input_shape[0]
        if mean.shape != (c,) or std.shape != (c,):
            raise ShapeError(f"normalization stats must have length {c}")
        if np.any(std == 0):
            raise ShapeError("normalization std must be nonzero")
        self.norm_mean.data[...] = mean
        self.norm_std.data[...] = std

    def forward(self, x, mode: str = "eval",
                rng: Optional[np.random.Generator] = None,
                trace: Optional[dict] = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.precision.dtype)
        if x.data.ndim != 4 or x.shape[1:] != self.config.input_shape:
            raise ShapeError(
                f"input shape {x.shape} does not match (N, {self.config.input_shape})")
        xn = T.normalize_channels(x, self.norm_mean.data, self.norm_std.data)

        values: dict[int, Tensor] = {}
        for node in self.plan.nodes:
            srcs = [values[i] for i in node.inputs] if node.inputs else [xn]
            if node.kind == "concat":
                out = T.concat_channels(srcs)
            elif node.kind == "gap":
                out = T.global_avg_pool(srcs[0])
            elif node.kind == "head":
                out = self.units[node.ref].forward(srcs[0])
            elif node.kind == "block":
                out = self.units[node.ref].forward(srcs[0], mode, rng=rng)
            else:  # stem, transition
                out = self.units[node.ref].forward(srcs[0], mode)
            values[node.id] = out
            if trace is not None:
                trace[node.id] = out.shape

        heads = [values[i] for i in self.plan.outputs]
        if self.fusion is None:
            return heads[0]
        acc = heads[0] if self.fusion == "logit_mean" else T.softmax(heads[0])
        for h in heads[1:]:
            acc = T.add(acc, h if self.fusion == "logit_mean" else T.softmax(h))
        mean = T.scale(acc, 1.0 / len(heads))
        if self.fusion == "logit_mean":
            return mean
        return T.log(T.shift(mean, _PROB_EPS))

    def member_models(self) -> list["Model"]:
        """Split an ensemble into per-member single-head models."""
        if self.fusion is None:
            return [self]
        members = []
        for m, head_id in enumerate(self.plan.outputs):
            prefix = f"member{m + 1}."
            nodes = [n for n in self.plan.nodes if n.ref.startswith(prefix) or
                     (not n.ref and self._belongs_to_member(n, prefix))]
            remap = {n.id: i for i, n in enumerate(nodes)}
            sub_nodes = [PlanNode(remap[n.id], n.kind,
                                  n.ref[len(prefix):] if n.ref else "",
                                  tuple(remap[i] for i in n.inputs))
                         for n in nodes]
            sub_units = {n.ref[len(prefix):]: self.units[n.ref]
                         for n in nodes if n.ref}
            sub = Model(self.kind + "_member", self.config,
                        WiringPlan(sub_nodes, (remap[head_id],)),
                        sub_units, self.precision)
            sub.set_input_normalization(self.norm_mean.data, self.norm_std.data)
            members.append(sub)
        return members

    def _belongs_to_member(self, node: PlanNode, prefix: str) -> bool:
        return any(self.plan.nodes[i].ref.startswith(prefix) for i in node.inputs)


def _realize_units(unit_specs: dict[str, tuple], seed: int,
                   in_channels: int, precision: Precision) -> dict:
    dtype = precision.dtype
    units = {}
    for name, spec in unit_specs.items():
        rng = rng_mod.stream(seed, "init", name)
        kind = spec[0]
        if kind == "stem":
            units[name] = Stem(spec[1], spec[2], rng, dtype)
        elif kind == "block":
            units[name] = DenseBlock(spec[1], spec[2], spec[3], spec[4], rng, dtype)
        elif kind == "transition":
            units[name] = TransitionLayer(spec[1], spec[2], rng, dtype)
        elif kind == "head":
            units[name] = Head(spec[1], spec[2], rng, dtype)
        elif kind == "stage":
            units[name] = PlainStage(spec[1], spec[2], spec[3], spec[4], rng, dtype)
        else:
            raise AssertionError(f"unknown unit kind {kind}")
    return units


def _finish(kind: str, cfg: DccConfig, planner: _Planner,
            precision: Precision, fusion: Optional[str] = None,
            outputs: Optional[tuple[int, ...]] = None) -> Model:
    plan = WiringPlan(planner.nodes, outputs or (len(planner.nodes) - 1,))
    units = _realize_units(planner.unit_specs, cfg.seed,
                           cfg.input_shape[0], precision)
    return Model(kind, cfg, plan, units, precision, fusion=fusion)


def build_dcc_ecnn(cfg: DccConfig, precision: Precision = Precision.F32) -> Model:
    """The cross-connected multi-path model."""
    cfg = cfg.validate(min_paths=2)
    return _finish("dcc_ecnn", cfg, _plan_model(cfg, cfg.num_paths), precision)


def build_single_densenet(cfg: DccConfig, precision: Precision = Precision.F32) -> Model:
    """One dense path, no cross-connections, no concat nodes in the plan."""
    cfg = cfg.validate(min_paths=1)
    one_path = replace(cfg, num_paths=1,
                       layers_per_block=cfg.layers_per_block[:1])
    return _finish("single_densenet", one_path, _plan_model(one_path, 1), precision)


def solve_standard_width(cfg: DccConfig) -> int:
    """Width for the plain CNN whose parameter count best matches the
    cross-connected model built from the same config."""
    cfg = cfg.validate(min_paths=2)
    target = _spec_param_count(_plan_model(cfg, cfg.num_paths).unit_specs)
    best, best_diff = 1, float("inf")
    for width in range(1, 513):
        count = _spec_param_count(_plan_standard_cnn(cfg, width).unit_specs)
        diff = abs(count - target)
        if diff < best_diff:
            best, best_diff = width, diff
        if count > 2 * target:
            break
    return best


def build_standard_cnn(cfg: DccConfig, precision: Precision = Precision.F32,
                       width: Optional[int] = None) -> Model:
    """Plain stem + conv/BN/ReLU stack + GAP + head baseline, parameter
    count matched to the cross-connected model (within 20%)."""
    cfg = cfg.validate(min_paths=2)
    if width is None:
        width = solve_standard_width(cfg)
    planner = _plan_standard_cnn(cfg, width)
    target = _spec_param_count(_plan_model(cfg, cfg.num_paths).unit_specs)
    got = _spec_param_count(planner.unit_specs)
    if not 0.8 * target <= got <= 1.2 * target:
        raise ConfigError(
            f"standard CNN width {width} gives {got} params, "
            f"outside 20% of target {target}")
    return _finish("standard_cnn", cfg, planner, precision)


def build_ensemble_cnn(cfg: DccConfig, precision: Precision = Precision.F32,
                       members: int = 3, fusion: str = "prob_mean") -> Model:
    """Independent plain CNNs fused by averaging softmax probabilities
    (or logits, with fusion="logit_mean")."""
    cfg = cfg.validate(min_paths=2)
    if fusion not in ("prob_mean", "logit_mean"):
        raise ConfigError(f"fusion must be prob_mean or logit_mean, got {fusion}")
    width = solve_standard_width(cfg)
    planner = _Planner()
    outputs = []
    for m in range(members):
        sub = _plan_standard_cnn(cfg, width, prefix=f"member{m + 1}.")
        offset = len(planner.nodes)
        for node in sub.nodes:
            nid = planner.add(node.kind, node.ref,
                              tuple(i + offset for i in node.inputs),
                              sub.shapes[node.id])
            planner.unit_specs.update(sub.unit_specs)
        outputs.append(len(planner.nodes) - 1)
    return _finish("ensemble_cnn", cfg, planner, precision,
                   fusion=fusion, outputs=tuple(outputs))


_BUILDERS = {
    "dcc_ecnn": build_dcc_ecnn,
    "standard_cnn": build_standard_cnn,
    "ensemble_cnn": build_ensemble_cnn,
    "single_densenet": build_single_densenet,
}


def build_model(kind: str, cfg: DccConfig,
                precision: Precision = Precision.F32) -> Model:
    if kind not in _BUILDERS:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {sorted(_BUILDERS)}")
    return _BUILDERS[kind](cfg, precision)


def infer_shapes(cfg: DccConfig, kind: str = "dcc_ecnn") -> dict[int, tuple]:
    """Symbolic per-node output shapes (batch dim omitted), matching the
    shapes an executed forward pass produces."""
    if kind == "dcc_ecnn":
        return _plan_model(cfg.validate(min_paths=2), cfg.resolved().num_paths).shapes
    if kind == "single_densenet":
        one = replace(cfg.validate(min_paths=1), num_paths=1)
        one = replace(one, layers_per_block=one.layers_per_block[:1])
        return _plan_model(one, 1).shapes
    if kind == "standard_cnn":
        return _plan_standard_cnn(cfg.validate(min_paths=2),
                                  solve_standard_width(cfg)).shapes
    raise ConfigError(f"infer_shapes: unsupported kind {kind!r}")


def param_count(model: Model) -> int:
    return model.param_count()


# ---------------------------------------------------------------------------
# graph export

def export_graph(model: Model, format: str) -> str:
    if format == "dot":
        lines = ["digraph model {"]
        for node in model.plan.nodes:
            label = f"{node.ref} ({node.kind})" if node.ref else f"({node.kind})"
            lines.append(f'  n{node.id} [label="{label}"];')
        for src, dst, slot in model.plan.edges():
            lines.append(f'  n{src} -> n{dst} [label="{slot}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"
    if format == "json":
        doc = {
            "kind": model.kind,
            "nodes": [{"id": n.id, "kind": n.kind, "ref": n.ref,
                       "inputs": list(n.inputs)} for n in model.plan.nodes],
            "outputs": list(model.plan.outputs),
        }
        return json.dumps(doc, indent=2) + "\n"
    raise ConfigError(f"unknown graph format {format!r}; use dot or json")


def plan_from_json(text: str) -> WiringPlan:
    doc = json.loads(text)
    nodes = [PlanNode(n["id"], n["kind"], n["ref"], tuple(n["inputs"]))
             for n in doc["nodes"]]
    return WiringPlan(nodes, tuple(doc["outputs"]))
