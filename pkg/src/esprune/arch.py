"""Layer-graph descriptions of CNN, residual, and densely connected networks.

An architecture is an explicit, topologically ordered list of layers. Every
layer names its producers, so shape propagation and pruning bookkeeping are
plain graph walks. Specs are immutable; all operations here are pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

LAYER_KINDS = ("conv", "pool", "fully_connected", "residual_add", "concat", "global_pool")
FAMILIES = ("cnn", "resnet", "densenet")

INPUT_ID = "input"


class ArchError(ValueError):
    """Structurally invalid architecture description."""


class ShapeError(ArchError):
    """Shape propagation failed at a specific layer."""


@dataclass(frozen=True)
class LayerSpec:
    """One node of the layer graph.

    ``filters`` is the output width for conv and fully_connected layers.
    ``shortcut_align`` (residual_add only) maps each output channel to a
    channel of the second input, -1 meaning a zero pad; ``None`` means the
    default alignment: channel i of the shortcut adds to channel i of the
    main input, remaining channels are zero padded.
    """

    id: str
    kind: str
    inputs: tuple[str, ...]
    filters: int | None = None
    kernel: tuple[int, int] | None = None
    stride: int = 1
    padding: int = 0
    activation: str = "linear"  # relu | linear
    batch_norm: bool = False
    bias: bool = False
    pool_mode: str = "max"  # max | avg (pool layers only)
    shortcut_align: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArchError(f"layer {self.id!r}: unknown kind {self.kind!r}")
        if self.kind in ("conv", "fully_connected"):
            if self.filters is None or self.filters < 1:
                raise ArchError(f"layer {self.id!r}: needs filters >= 1, got {self.filters}")
        if self.kind == "conv":
            if self.kernel is None or min(self.kernel) < 1:
                raise ArchError(f"layer {self.id!r}: conv kernel dims must be >= 1")
        if self.kind == "pool" and self.kernel is None:
            raise ArchError(f"layer {self.id!r}: pool needs a kernel")
        if self.stride < 1:
            raise ArchError(f"layer {self.id!r}: stride must be positive")
        if self.activation not in ("relu", "linear"):
            raise ArchError(f"layer {self.id!r}: unknown activation {self.activation!r}")
        if self.pool_mode not in ("max", "avg"):
            raise ArchError(f"layer {self.id!r}: unknown pool_mode {self.pool_mode!r}")
        n_inputs = {"conv": 1, "pool": 1, "fully_connected": 1, "global_pool": 1,
                    "residual_add": 2}[self.kind] if self.kind != "concat" else None
        if n_inputs is not None and len(self.inputs) != n_inputs:
            raise ArchError(
                f"layer {self.id!r}: {self.kind} takes {n_inputs} input(s), got {len(self.inputs)}"
            )
        if self.kind == "concat" and len(self.inputs) < 1:
            raise ArchError(f"layer {self.id!r}: concat needs at least one input")


@dataclass(frozen=True)
class ArchSpec:
    """An immutable network description.

    Layers are topologically ordered: every input id refers to an earlier
    layer or to the reserved id ``"input"``.
    """

    family: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (channels, height, width)
    num_classes: int
    growth_rate: int | None = None  # densenet only
    initial_width: int | None = None  # densenet only
    blocks_per_stage: tuple[int, ...] | None = None  # resnet only

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ArchError(f"unknown family {self.family!r}")
        object.__setattr__(self, "layers", tuple(self.layers))
        seen = {INPUT_ID}
        for layer in self.layers:
            if layer.id in seen:
                raise ArchError(f"duplicate layer id {layer.id!r}")
            for src in layer.inputs:
                if src not in seen:
                    raise ArchError(
                        f"layer {layer.id!r}: input {src!r} does not refer to an earlier layer"
                    )
            seen.add(layer.id)

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def conv_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind == "conv")

    def depth(self) -> int:
        """Number of weight layers (conv + fully connected)."""
        return sum(1 for l in self.layers if l.kind in ("conv", "fully_connected"))

    def consumers(self, layer_id: str) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if layer_id in l.inputs)


@dataclass(frozen=True)
class FlopsReport:
    """Per-layer and total multiply-accumulate counts for one forward pass."""

    per_layer: tuple[tuple[str, int], ...]
    total: int

    def __post_init__(self):
        if self.total != sum(n for _, n in self.per_layer):
            raise ArchError("FlopsReport total does not match per-layer sum")


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"kernel {kernel} with stride {stride} exceeds input size {size}")
    return out


def propagate_shapes(arch: ArchSpec) -> list[tuple[str, tuple[int, int, int]]]:
    """Assign a concrete (channels, height, width) to every layer.

    Raises ShapeError naming the offending layer and the mismatched shapes.
    """
    shapes: dict[str, tuple[int, int, int]] = {INPUT_ID: arch.input_shape}
    out: list[tuple[str, tuple[int, int, int]]] = []
    for layer in arch.layers:
        srcs = [shapes[i] for i in layer.inputs]
        try:
            shape = _layer_output_shape(layer, srcs)
        except ShapeError as e:
            raise ShapeError(f"layer {layer.id!r}: {e}") from None
        shapes[layer.id] = shape
        out.append((layer.id, shape))
    return out


def _layer_output_shape(layer, srcs):
    if layer.kind == "conv":
        c, h, w = srcs[0]
        kh, kw = layer.kernel
        return (layer.filters,
                _conv_out(h, kh, layer.stride, layer.padding),
                _conv_out(w, kw, layer.stride, layer.padding))
    if layer.kind == "pool":
        c, h, w = srcs[0]
        kh, kw = layer.kernel
        return (c,
                _conv_out(h, kh, layer.stride, layer.padding),
                _conv_out(w, kw, layer.stride, layer.padding))
    if layer.kind == "global_pool":
        c, h, w = srcs[0]
        return (c, 1, 1)
    if layer.kind == "fully_connected":
        return (layer.filters, 1, 1)
    if layer.kind == "residual_add":
        (cm, hm, wm), (cs, hs, ws) = srcs
        if (hm, wm) != (hs, ws):
            raise ShapeError(
                f"residual_add spatial mismatch: main {srcs[0]} vs shortcut {srcs[1]}"
            )
        if layer.shortcut_align is None:
            if cs > cm:
                raise ShapeError(
                    f"shortcut has more channels than main input: {srcs[1]} vs {srcs[0]}"
                )
        else:
            if len(layer.shortcut_align) != cm:
                raise ShapeError(
                    f"shortcut_align length {len(layer.shortcut_align)} != {cm} output channels"
                )
            if any(a >= cs for a in layer.shortcut_align):
                raise ShapeError("shortcut_align refers past the shortcut's channels")
        return (cm, hm, wm)
    if layer.kind == "concat":
        c0, h0, w0 = srcs[0]
        for s in srcs[1:]:
            if s[1:] != (h0, w0):
                raise ShapeError(f"concat spatial mismatch: {srcs[0]} vs {s}")
        return (sum(s[0] for s in srcs), h0, w0)
    raise ArchError(f"unhandled kind {layer.kind!r}")


def count_flops(arch: ArchSpec) -> FlopsReport:
    """Multiply-accumulate count of a single forward pass (1 MAC = 1 FLOP).

    Convolutions cost kernel_h * kernel_w * in_channels * out_channels *
    out_h * out_w; fully connected layers cost in_features * out_features.
    Pooling, activations, batch norm, adds, and concatenations cost zero.
    """
    shapes = dict(propagate_shapes(arch))
    shapes[INPUT_ID] = arch.input_shape
    per_layer = []
    for layer in arch.layers:
        if layer.kind == "conv":
            cin = shapes[layer.inputs[0]][0]
            _, oh, ow = shapes[layer.id]
            kh, kw = layer.kernel
            n = kh * kw * cin * layer.filters * oh * ow
        elif layer.kind == "fully_connected":
            c, h, w = shapes[layer.inputs[0]]
            n = c * h * w * layer.filters
        else:
            n = 0
        per_layer.append((layer.id, n))
    return FlopsReport(per_layer=tuple(per_layer), total=sum(n for _, n in per_layer))


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _vgg(stage_plan, num_classes, input_shape):
    layers = []
    prev = INPUT_ID
    for si, (width, reps) in enumerate(stage_plan, start=1):
        for ri in range(1, reps + 1):
            lid = f"conv{si}_{ri}"
            layers.append(LayerSpec(lid, "conv", (prev,), filters=width, kernel=(3, 3),
                                    stride=1, padding=1, activation="relu", batch_norm=True))
            prev = lid
        pid = f"pool{si}"
        layers.append(LayerSpec(pid, "pool", (prev,), kernel=(2, 2), stride=2))
        prev = pid
    layers.append(LayerSpec("fc1", "fully_connected", (prev,), filters=512,
                            activation="relu", bias=True))
    layers.append(LayerSpec("fc2", "fully_connected", ("fc1",), filters=512,
                            activation="relu", bias=True))
    layers.append(LayerSpec("fc3", "fully_connected", ("fc2",), filters=num_classes, bias=True))
    return ArchSpec(family="cnn", layers=tuple(layers), input_shape=input_shape,
                    num_classes=num_classes)


def _plain_cnn(plan, num_classes, input_shape):
    """plan: list of ("conv", width) / ("pool",) entries, then global pool + FC."""
    layers = []
    prev = INPUT_ID
    ci = pi = 0
    for entry in plan:
        if entry[0] == "conv":
            ci += 1
            lid = f"conv{ci}"
            layers.append(LayerSpec(lid, "conv", (prev,), filters=entry[1], kernel=(3, 3),
                                    stride=1, padding=1, activation="relu", batch_norm=True))
        else:
            pi += 1
            lid = f"pool{pi}"
            layers.append(LayerSpec(lid, "pool", (prev,), kernel=(2, 2), stride=2))
        prev = lid
    layers.append(LayerSpec("gap", "global_pool", (prev,)))
    layers.append(LayerSpec("fc", "fully_connected", ("gap",), filters=num_classes, bias=True))
    return ArchSpec(family="cnn", layers=tuple(layers), input_shape=input_shape,
                    num_classes=num_classes)


def _resnet(blocks_per_stage, widths, num_classes, input_shape):
    layers = [LayerSpec("stem", "conv", (INPUT_ID,), filters=widths[0], kernel=(3, 3),
                        stride=1, padding=1, activation="relu", batch_norm=True)]
    prev = "stem"
    for si, (n_blocks, width) in enumerate(zip(blocks_per_stage, widths), start=1):
        for bi in range(1, n_blocks + 1):
            tag = f"s{si}b{bi}"
            stride = 2 if (si > 1 and bi == 1) else 1
            layers.append(LayerSpec(f"{tag}_conv1", "conv", (prev,), filters=width,
                                    kernel=(3, 3), stride=stride, padding=1,
                                    activation="relu", batch_norm=True))
            layers.append(LayerSpec(f"{tag}_conv2", "conv", (f"{tag}_conv1",), filters=width,
                                    kernel=(3, 3), stride=1, padding=1,
                                    activation="linear", batch_norm=True))
            shortcut = prev
            if stride == 2:
                # identity shortcut: spatial subsample, channels zero padded at the add
                layers.append(LayerSpec(f"{tag}_short", "pool", (prev,), kernel=(1, 1), stride=2))
                shortcut = f"{tag}_short"
            layers.append(LayerSpec(f"{tag}_add", "residual_add",
                                    (f"{tag}_conv2", shortcut), activation="relu"))
            prev = f"{tag}_add"
    layers.append(LayerSpec("gap", "global_pool", (prev,)))
    layers.append(LayerSpec("fc", "fully_connected", ("gap",), filters=num_classes, bias=True))
    return ArchSpec(family="resnet", layers=tuple(layers), input_shape=input_shape,
                    num_classes=num_classes, blocks_per_stage=tuple(blocks_per_stage))


def _densenet(units_per_block, growth_rate, initial_width, compression, num_classes,
              input_shape):
    k = growth_rate
    layers = [LayerSpec("stem", "conv", (INPUT_ID,), filters=initial_width, kernel=(3, 3),
                        stride=1, padding=1, activation="relu", batch_norm=True)]
    entry = "stem"
    entry_width = initial_width
    for bi, n_units in enumerate(units_per_block, start=1):
        produced = []
        for ui in range(1, n_units + 1):
            tag = f"b{bi}u{ui}"
            if produced:
                layers.append(LayerSpec(f"{tag}_cat", "concat", (entry, *produced)))
                neck_in = f"{tag}_cat"
            else:
                neck_in = entry
            layers.append(LayerSpec(f"{tag}_neck", "conv", (neck_in,), filters=4 * k,
                                    kernel=(1, 1), activation="relu", batch_norm=True))
            layers.append(LayerSpec(f"{tag}_conv", "conv", (f"{tag}_neck",), filters=k,
                                    kernel=(3, 3), stride=1, padding=1,
                                    activation="relu", batch_norm=True))
            produced.append(f"{tag}_conv")
        layers.append(LayerSpec(f"b{bi}_cat", "concat", (entry, *produced)))
        entry_width = entry_width + n_units * k
        if bi < len(units_per_block):
            t_width = int(entry_width * compression)
            layers.append(LayerSpec(f"t{bi}_conv", "conv", (f"b{bi}_cat",), filters=t_width,
                                    kernel=(1, 1), activation="relu", batch_norm=True))
            layers.append(LayerSpec(f"t{bi}_pool", "pool", (f"t{bi}_conv",), kernel=(2, 2),
                                    stride=2, pool_mode="avg"))
            entry = f"t{bi}_pool"
            entry_width = t_width
        else:
            entry = f"b{bi}_cat"
    layers.append(LayerSpec("gap", "global_pool", (entry,)))
    layers.append(LayerSpec("fc", "fully_connected", ("gap",), filters=num_classes, bias=True))
    return ArchSpec(family="densenet", layers=tuple(layers), input_shape=input_shape,
                    num_classes=num_classes, growth_rate=k, initial_width=initial_width)


PRESETS = ("vgg16", "vgg19", "resnet56", "resnet110", "densenet50", "densenet100",
           "tiny_cnn", "tiny_resnet", "tiny_densenet")


def build_preset(name: str, num_classes: int = 10, input_shape: tuple[int, int, int] | None = None,
                 growth_rate: int | None = None, compression: float | None = None) -> ArchSpec:
    """Build a named architecture.

    The six full-size presets target 32x32 RGB inputs. The tiny_* presets are
    scaled-down versions of each family for fast experiments and default to
    16x16 inputs. ``growth_rate`` and ``compression`` apply to densenet
    presets only.
    """
    k = growth_rate if growth_rate is not None else 12
    theta = compression if compression is not None else 0.5
    if name == "vgg16":
        shape = input_shape or (3, 32, 32)
        return _vgg([(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)], num_classes, shape)
    if name == "vgg19":
        shape = input_shape or (3, 32, 32)
        return _vgg([(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)], num_classes, shape)
    if name == "resnet56":
        shape = input_shape or (3, 32, 32)
        return _resnet((9, 9, 9), (16, 32, 64), num_classes, shape)
    if name == "resnet110":
        shape = input_shape or (3, 32, 32)
        return _resnet((18, 18, 18), (16, 32, 64), num_classes, shape)
    if name == "densenet50":
        # 1 stem + 46 block convs + 2 transition convs + 1 FC = 50 weight layers
        shape = input_shape or (3, 32, 32)
        return _densenet((8, 8, 7), k, 16, theta, num_classes, shape)
    if name == "densenet100":
        shape = input_shape or (3, 32, 32)
        return _densenet((16, 16, 16), k, 16, theta, num_classes, shape)
    if name == "tiny_cnn":
        shape = input_shape or (3, 16, 16)
        return _plain_cnn([("conv", 8), ("pool",), ("conv", 16), ("conv", 16),
                           ("pool",), ("conv", 32)], num_classes, shape)
    if name == "tiny_resnet":
        shape = input_shape or (3, 16, 16)
        return _resnet((2, 2, 2), (8, 16, 32), num_classes, shape)
    if name == "tiny_densenet":
        shape = input_shape or (3, 16, 16)
        kk = growth_rate if growth_rate is not None else 4
        return _densenet((3,), kk, 8, theta, num_classes, shape)
    raise ArchError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_LAYER_FIELDS = ("id", "kind", "inputs", "filters", "kernel", "stride", "padding",
                 "activation", "batch_norm", "bias", "pool_mode", "shortcut_align")


def arch_to_dict(arch: ArchSpec) -> dict:
    layers = []
    for l in arch.layers:
        rec = {f: getattr(l, f) for f in _LAYER_FIELDS}
        rec["inputs"] = list(l.inputs)
        rec["kernel"] = list(l.kernel) if l.kernel is not None else None
        rec["shortcut_align"] = list(l.shortcut_align) if l.shortcut_align is not None else None
        layers.append(rec)
    return {
        "family": arch.family,
        "input_shape": list(arch.input_shape),
        "num_classes": arch.num_classes,
        "growth_rate": arch.growth_rate,
        "initial_width": arch.initial_width,
        "blocks_per_stage": list(arch.blocks_per_stage) if arch.blocks_per_stage else None,
        "layers": layers,
    }


def arch_from_dict(doc: dict) -> ArchSpec:
    try:
        layers = tuple(
            LayerSpec(
                id=rec["id"], kind=rec["kind"], inputs=tuple(rec["inputs"]),
                filters=rec.get("filters"),
                kernel=tuple(rec["kernel"]) if rec.get("kernel") is not None else None,
                stride=rec.get("stride", 1), padding=rec.get("padding", 0),
                activation=rec.get("activation", "linear"),
                batch_norm=rec.get("batch_norm", False), bias=rec.get("bias", False),
                pool_mode=rec.get("pool_mode", "max"),
                shortcut_align=tuple(rec["shortcut_align"])
                if rec.get("shortcut_align") is not None else None,
            )
            for rec in doc["layers"]
        )
        return ArchSpec(
            family=doc["family"], layers=layers, input_shape=tuple(doc["input_shape"]),
            num_classes=doc["num_classes"], growth_rate=doc.get("growth_rate"),
            initial_width=doc.get("initial_width"),
            blocks_per_stage=tuple(doc["blocks_per_stage"])
            if doc.get("blocks_per_stage") else None,
        )
    except (KeyError, TypeError) as e:
        raise ArchError(f"malformed architecture document: {e}") from None


def save_arch(arch: ArchSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(arch_to_dict(arch), indent=2, sort_keys=True) + "\n")


def load_arch(path: str | Path) -> ArchSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ArchError(f"{path}: not a valid architecture document ({e})") from None
    return arch_from_dict(doc)
