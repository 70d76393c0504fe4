# backend/surgery.py
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint
from .transformer import ModelConfig, ParamSet, count_params, param_shapes, split_layer_name

logger = logging.getLogger(__name__)

EXPAND, SUBSET = "expand", "subset"
COPY, IDENTITY = "copy", "identity"
WIDTH_AXES = ("d_model", "n_heads", "d_ff")

# axis kinds of every per-tensor dimension, keyed by the layer-local name
AXES: Dict[str, Tuple[str, ...]] = {
    "embed.tok": ("vocab", "d_model"),
    "embed.pos": ("seq", "d_model"),
    "final.ln.g": ("d_model",),
    "final.ln.b": ("d_model",),
    "lm_head.w": ("d_model", "vocab"),
    "ln1.g": ("d_model",),
    "ln1.b": ("d_model",),
    "ln2.g": ("d_model",),
    "ln2.b": ("d_model",),
    "attn.wq": ("d_model", "heads"),
    "attn.wk": ("d_model", "heads"),
    "attn.wv": ("d_model", "heads"),
    "attn.wo": ("heads", "d_model"),
    "attn.bq": ("heads",),
    "attn.bk": ("heads",),
    "attn.bv": ("heads",),
    "attn.bo": ("d_model",),
    "ffn.w1": ("d_model", "d_ff"),
    "ffn.b1": ("d_ff",),
    "ffn.w2": ("d_ff", "d_model"),
    "ffn.b2": ("d_model",),
}

# residual-stream writers; zeroed to turn a replicated block into the identity
RESIDUAL_OUTPUTS = ("attn.wo", "attn.bo", "ffn.w2", "ffn.b2")


class SurgeryError(Exception):
    """Base error for structural transforms"""


class IncomparableConfigError(SurgeryError, ValueError):
    pass


class PlanError(SurgeryError, ValueError):
    pass


class ConfigMismatchError(SurgeryError, ValueError):
    pass


class AlphaRangeError(SurgeryError, ValueError):
    pass


class AnchorRangeError(SurgeryError, ValueError):
    pass


@dataclass(frozen=True)
class TransformPlan:
    """Index-level mapping realizing one structural transform

    layer_map: for expansions, the source layer of every target layer;
    for subsets, the sorted kept source layers.
    """
    kind: str
    src_config: ModelConfig
    dst_config: ModelConfig
    layer_map: Tuple[int, ...]
    replication_mode: str = COPY
    width_policy: Dict[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layer_map", tuple(int(i) for i in self.layer_map))
        if self.kind not in (EXPAND, SUBSET):
            raise PlanError(f"unknown plan kind {self.kind!r}")
        if self.replication_mode not in (COPY, IDENTITY):
            raise PlanError(f"unknown replication mode {self.replication_mode!r}")
        src, dst, lm = self.src_config, self.dst_config, self.layer_map
        if not src.comparable(dst):
            raise IncomparableConfigError("head_dim, vocab_size, max_seq_len and tied_lm_head must agree")
        if len(lm) != dst.n_layers:
            raise PlanError(f"layer map has {len(lm)} entries for {dst.n_layers} target layers")
        if self.kind == EXPAND:
            if not src.structurally_le(dst):
                raise PlanError("expansion target must be structurally >= source")
            if any(b < a for a, b in zip(lm, lm[1:])) or set(lm) != set(range(src.n_layers)):
                raise PlanError(f"expansion layer map {list(lm)} must be non-decreasing and cover every source layer")
        else:
            if not dst.structurally_le(src):
                raise PlanError("subset target must be structurally <= source")
            if any(b <= a for a, b in zip(lm, lm[1:])) or (lm and (lm[0] < 0 or lm[-1] >= src.n_layers)):
                raise PlanError(f"subset kept layers {list(lm)} must be strictly increasing within range")
        policy = "tail-zero-pad" if self.kind == EXPAND else "prefix-keep"
        object.__setattr__(self, "width_policy", {axis: policy for axis in WIDTH_AXES})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "src_config": self.src_config.to_dict(),
            "dst_config": self.dst_config.to_dict(),
            "layer_map": list(self.layer_map),
            "replication_mode": self.replication_mode,
            "width_policy": dict(self.width_policy),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TransformPlan":
        try:
            return cls(kind=data["kind"],
                       src_config=ModelConfig.from_dict(data["src_config"], "src_config"),
                       dst_config=ModelConfig.from_dict(data["dst_config"], "dst_config"),
                       layer_map=data["layer_map"],
                       replication_mode=data.get("replication_mode", COPY))
        except (KeyError, TypeError) as e:
            raise PlanError(f"malformed plan: {e}")


def _require_nested(small: ModelConfig, large: ModelConfig, what: str):
    if not small.comparable(large):
        raise IncomparableConfigError(f"{what}: configs differ in head_dim, vocab_size, max_seq_len or tied_lm_head")
    if not small.structurally_le(large):
        raise IncomparableConfigError(f"{what}: {small} is not structurally <= {large}")


def plan_expand(src_config: ModelConfig, dst_config: ModelConfig, mode: str = COPY) -> TransformPlan:
    """Floor layer map: target layer i copies source layer floor(i * src / dst)"""
    _require_nested(src_config, dst_config, "expand")
    s, d = src_config.n_layers, dst_config.n_layers
    return TransformPlan(EXPAND, src_config, dst_config, [i * s // d for i in range(d)], mode)


def plan_subset(src_config: ModelConfig, dst_config: ModelConfig) -> TransformPlan:
    """Evenly spaced kept layers, endpoints included, rounding half up"""
    _require_nested(dst_config, src_config, "subset")
    s, d = src_config.n_layers, dst_config.n_layers
    if d == 1:
        kept = [0]
    else:
        kept = [(2 * j * (s - 1) + (d - 1)) // (2 * (d - 1)) for j in range(d)]
    return TransformPlan(SUBSET, src_config, dst_config, kept)


def invert_expand(plan: TransformPlan) -> TransformPlan:
    """Subset plan keeping the first target copy of every source layer"""
    if plan.kind != EXPAND:
        raise PlanError("only expansion plans can be inverted")
    first: Dict[int, int] = {}
    for i, j in enumerate(plan.layer_map):
        first.setdefault(j, i)
    kept = [first[j] for j in range(plan.src_config.n_layers)]
    return TransformPlan(SUBSET, plan.dst_config, plan.src_config, kept)


def _axis_sizes(config: ModelConfig) -> Dict[str, int]:
    return {"d_model": config.d_model, "heads": config.n_heads, "d_ff": config.d_ff,
            "vocab": config.vocab_size, "seq": config.max_seq_len}


def _resize_axis(arr: np.ndarray, axis: int, new: int) -> np.ndarray:
    old = arr.shape[axis]
    if new == old:
        return arr
    if new < old:
        return np.take(arr, np.arange(new), axis=axis)
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (0, new - old)
    return np.pad(arr, pad)


def _transform_tensor(arr: np.ndarray, kinds: Tuple[str, ...], src: ModelConfig, dst: ModelConfig) -> np.ndarray:
    dst_sizes = _axis_sizes(dst)
    out = arr
    for axis, kind in enumerate(kinds):
        if kind == "heads":
            # view the inner axis as [n_heads, head_dim] and resize whole heads
            shape = list(out.shape)
            view = out.reshape(shape[:axis] + [src.n_heads, src.head_dim] + shape[axis + 1:])
            view = _resize_axis(view, axis, dst.n_heads)
            out = view.reshape(shape[:axis] + [dst.inner] + shape[axis + 1:])
        else:
            out = _resize_axis(out, axis, dst_sizes[kind])
    return out


def _transform_params(params: ParamSet, plan: TransformPlan) -> ParamSet:
    src, dst = plan.src_config, plan.dst_config
    seen = set()
    out: ParamSet = OrderedDict()
    for name, shape in param_shapes(dst).items():
        layer, local = split_layer_name(name)
        if layer is None:
            source = params[name]
            zero_residual = False
        else:
            j = plan.layer_map[layer]
            source = params[f"L{j}.{local}"]
            zero_residual = (plan.kind == EXPAND and plan.replication_mode == IDENTITY
                             and local in RESIDUAL_OUTPUTS and (j, local) in seen)
            seen.add((j, local))
        arr = _transform_tensor(source, AXES[local], src, dst)
        if zero_residual:
            arr = np.zeros_like(arr)
        out[name] = np.array(arr, dtype=source.dtype, copy=True)
        assert out[name].shape == shape
    return out


def apply_transform(ckpt: Checkpoint, plan: TransformPlan) -> Checkpoint:
    """Apply Trans(.) to a checkpoint; lineage gains one stage"""
    if ckpt.config != plan.src_config:
        raise ConfigMismatchError("checkpoint config does not match the plan's source config")
    params = _transform_params(ckpt.params, plan)
    stage = f"expanded:{plan.replication_mode}" if plan.kind == EXPAND else "subset"
    meta = ckpt.meta.with_stage(stage, parent=ckpt.name, layer_map=list(plan.layer_map))
    logger.debug(f"{stage} {ckpt.name}: {count_params(plan.src_config)} -> {count_params(plan.dst_config)} params")
    return Checkpoint(plan.dst_config, params, meta)


def default_alpha(p_small: int, p_large: int, p_target: int) -> float:
    """alpha = (p_large - p_target) / (p_large - p_small), clamped to [0, 1]"""
    if p_small == p_large:
        raise AnchorRangeError("anchors have equal parameter counts; alpha is undefined")
    if p_small > p_large:
        raise AnchorRangeError(f"small anchor ({p_small}) is larger than large anchor ({p_large})")
    if not p_small <= p_target <= p_large:
        raise AnchorRangeError(f"target size {p_target} lies outside [{p_small}, {p_large}]")
    alpha = (p_large - p_target) / (p_large - p_small)
    return float(min(1.0, max(0.0, alpha)))


def interpolate(small: Checkpoint, large: Checkpoint, dst_config: ModelConfig, alpha: float,
                mode: str = COPY, name: str = "") -> Checkpoint:
    """alpha * Trans(small) + (1 - alpha) * Trans(large), over every tensor"""
    if not (0.0 <= alpha <= 1.0):
        raise AlphaRangeError(f"alpha must lie in [0, 1], got {alpha}")
    _require_nested(small.config, dst_config, "interpolate (small -> target)")
    _require_nested(dst_config, large.config, "interpolate (target -> large)")
    expanded = apply_transform(small, plan_expand(small.config, dst_config, mode))
    subset = apply_transform(large, plan_subset(large.config, dst_config))
    if alpha == 1.0:
        params = OrderedDict((k, v.copy()) for k, v in expanded.params.items())
    elif alpha == 0.0:
        params = OrderedDict((k, v.copy()) for k, v in subset.params.items())
    else:
        params = OrderedDict()
        for key, a in expanded.params.items():
            b = subset.params[key]
            dtype = a.dtype.type
            params[key] = (dtype(alpha) * a + dtype(1.0 - alpha) * b).astype(a.dtype)
    meta = small.meta.with_stage(
        f"interpolated alpha={alpha:g} between {small.name or 'small'},{large.name or 'large'}",
        name=name or f"interp-{count_params(dst_config)}",
        alpha=float(alpha), small=small.name, large=large.name, mode=mode,
        large_lineage_depth=len(large.meta.lineage))
    logger.info(f"interpolated {count_params(dst_config)}-param target at alpha={alpha:.4f}")
    return Checkpoint(dst_config, params, meta)


def select_adjacent_anchors(anchors: Sequence[Checkpoint], target_params: int,
                            dst_config: Optional[ModelConfig] = None) -> Tuple[Checkpoint, Checkpoint]:
    """Tightest (small, large) bracket around target_params in a chain sorted by descending size

    An anchor of exactly target_params is returned as both ends. When dst_config
    is given that anchor must also have dst_config's structure.
    """
    if not anchors:
        raise AnchorRangeError("empty anchor list")
    sizes = [count_params(a.config) for a in anchors]
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise AnchorRangeError(f"anchors must be in strictly descending size order, got {sizes}")
    if not sizes[-1] <= target_params <= sizes[0]:
        raise AnchorRangeError(f"target size {target_params} outside chain range [{sizes[-1]}, {sizes[0]}]")
    for anchor, size in zip(anchors, sizes):
        if size == target_params:
            if dst_config is not None and anchor.config != dst_config:
                raise AnchorRangeError(f"anchor {anchor.name or '(unnamed)'} has the target's {size} params "
                                       f"but a different structure ({anchor.config} vs {dst_config})")
            return anchor, anchor
    for k in range(len(anchors) - 1):
        if sizes[k + 1] < target_params < sizes[k]:
            return anchors[k + 1], anchors[k]
    raise AnchorRangeError(f"no bracketing anchors for {target_params}")


def single_expand(anchors: Sequence[Checkpoint], dst_config: ModelConfig, mode: str = COPY) -> Checkpoint:
    """Baseline initialization from the smallest anchor alone"""
    smallest = min(anchors, key=lambda a: count_params(a.config))
    out = apply_transform(smallest, plan_expand(smallest.config, dst_config, mode))
    out.meta.name = f"single-{count_params(dst_config)}"
    return out


def interpolate_from_chain(anchors: Sequence[Checkpoint], dst_config: ModelConfig, alpha: float = None,
                           mode: str = COPY) -> Tuple[Checkpoint, float]:
    """Pick the adjacent anchors for dst_config and interpolate (auto alpha when None)"""
    target = count_params(dst_config)
    small, large = select_adjacent_anchors(anchors, target, dst_config)
    if alpha is None:
        if small is large:
            alpha = 1.0
        else:
            alpha = default_alpha(count_params(small.config), count_params(large.config), target)
    return interpolate(small, large, dst_config, alpha, mode), alpha
