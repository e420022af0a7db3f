"""Binary encodings of prunable convolution filters.

Each bit keeps (1) or removes (0) one filter. Plain CNNs use a single bit
string with one segment per conv layer. Residual nets use two strings: one
segment per block's first conv layer, plus per-stage tied segments that
govern the second conv of every block in the stage (and the stem), so the
tensors meeting at each shortcut stay the same size. Densely connected nets
use one string for bottleneck (1x1) layers and one for the 3x3 layers;
transition layers and the stem are not encoded, their input widths simply
adapt to the surviving concatenated channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import ArchSpec, INPUT_ID, LayerSpec, propagate_shapes


class GenomeError(ValueError):
    """Genome inconsistent with its layout or target architecture."""


@dataclass(frozen=True)
class Segment:
    """A contiguous bit span governing the filters of one or more conv layers."""

    id: str
    string: str  # "a" or "b"
    start: int
    stop: int
    targets: tuple[str, ...]
    tied: bool = False

    @property
    def width(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class GenomeLayout:
    family: str
    segments: tuple[Segment, ...]
    total_bits: int

    def __post_init__(self):
        pos = 0
        for seg in self.segments:
            if seg.start != pos:
                raise GenomeError(f"segment {seg.id!r} leaves a gap or overlap at bit {pos}")
            if seg.stop <= seg.start:
                raise GenomeError(f"segment {seg.id!r} is empty")
            pos = seg.stop
        if pos != self.total_bits:
            raise GenomeError(f"segments cover {pos} bits, layout declares {self.total_bits}")

    def segment_for(self, layer_id: str) -> Segment | None:
        for seg in self.segments:
            if layer_id in seg.targets:
                return seg
        return None


@dataclass(frozen=True, eq=False)
class Genome:
    layout: GenomeLayout
    bits: np.ndarray  # bool, shape (total_bits,)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != (self.layout.total_bits,):
            raise GenomeError(
                f"bit vector has length {bits.shape}, layout needs {self.layout.total_bits}"
            )
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        for seg in self.layout.segments:
            if not bits[seg.start:seg.stop].any():
                raise GenomeError(f"segment {seg.id!r} has no surviving filter")

    def __eq__(self, other):
        return (isinstance(other, Genome) and self.layout == other.layout
                and np.array_equal(self.bits, other.bits))

    def segment_bits(self, seg: Segment) -> np.ndarray:
        return self.bits[seg.start:seg.stop]

    def bits_set(self) -> int:
        return int(self.bits.sum())


def all_ones(layout: GenomeLayout) -> Genome:
    return Genome(layout, np.ones(layout.total_bits, dtype=bool))


def hamming(a: Genome, b: Genome) -> int:
    return int(np.count_nonzero(a.bits != b.bits))


# ---------------------------------------------------------------------------
# Layout derivation
# ---------------------------------------------------------------------------

def _resnet_structure(arch: ArchSpec):
    """Return (stem, first convs in block order, second convs in block order)."""
    seconds, firsts = [], []
    for layer in arch.layers:
        if layer.kind != "residual_add":
            continue
        second = arch.layer(layer.inputs[0])
        if second.kind != "conv":
            raise GenomeError(f"residual_add {layer.id!r} main input is not a conv layer")
        first = arch.layer(second.inputs[0])
        if first.kind != "conv":
            raise GenomeError(f"block conv {second.id!r} is not fed by a conv layer")
        firsts.append(first)
        seconds.append(second)
    stem = arch.conv_layers()[0]
    return stem, firsts, seconds


def _densenet_structure(arch: ArchSpec):
    """Return (bottleneck convs, 3x3 block convs) in order of appearance."""
    necks, convs = [], []
    for layer in arch.conv_layers():
        if layer.kernel == (1, 1):
            if any(c.kind == "conv" for c in arch.consumers(layer.id)):
                necks.append(layer)  # transition 1x1s feed pools, not convs
        elif layer.inputs[0] != INPUT_ID:
            producer = arch.layer(layer.inputs[0])
            if producer.kind == "conv" and producer.kernel == (1, 1):
                convs.append(layer)
    return necks, convs


def layout_for(arch: ArchSpec) -> GenomeLayout:
    """Derive the bit-string layout encoding an architecture's prunable filters."""
    segments: list[Segment] = []
    pos = 0

    def add(seg_id, string, width, targets, tied=False):
        nonlocal pos
        segments.append(Segment(seg_id, string, pos, pos + width, tuple(targets), tied))
        pos += width

    if arch.family == "cnn":
        for layer in arch.conv_layers():
            add(f"a:{layer.id}", "a", layer.filters, [layer.id])
    elif arch.family == "resnet":
        stem, firsts, seconds = _resnet_structure(arch)
        for layer in firsts:
            add(f"a:{layer.id}", "a", layer.filters, [layer.id])
        # second layers of blocks with the same width share one tied segment;
        # the stem joins the first group so the entry shortcut stays consistent
        groups: dict[int, list[str]] = {}
        for layer in [stem] + seconds:
            groups.setdefault(layer.filters, []).append(layer.id)
        for width, ids in groups.items():
            add(f"b:w{width}", "b", width, ids, tied=True)
    elif arch.family == "densenet":
        necks, convs = _densenet_structure(arch)
        for layer in necks:
            add(f"a:{layer.id}", "a", layer.filters, [layer.id])
        for layer in convs:
            add(f"b:{layer.id}", "b", layer.filters, [layer.id])
    else:
        raise GenomeError(f"unsupported family {arch.family!r}")
    return GenomeLayout(family=arch.family, segments=tuple(segments), total_bits=pos)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def channel_masks(base: ArchSpec, genome: Genome) -> dict[str, np.ndarray]:
    """Boolean keep-mask over every layer's output channels (and the input's)."""
    layout = genome.layout
    masks: dict[str, np.ndarray] = {INPUT_ID: np.ones(base.input_shape[0], dtype=bool)}
    for layer in base.layers:
        if layer.kind == "conv":
            seg = layout.segment_for(layer.id)
            if seg is not None:
                mask = genome.segment_bits(seg)
                if seg.width != layer.filters:
                    raise GenomeError(
                        f"segment {seg.id!r} has {seg.width} bits for layer "
                        f"{layer.id!r} with {layer.filters} filters"
                    )
            else:
                mask = np.ones(layer.filters, dtype=bool)
        elif layer.kind == "fully_connected":
            mask = np.ones(layer.filters, dtype=bool)
        elif layer.kind in ("pool", "global_pool"):
            mask = masks[layer.inputs[0]]
        elif layer.kind == "residual_add":
            mask = masks[layer.inputs[0]]
        elif layer.kind == "concat":
            mask = np.concatenate([masks[i] for i in layer.inputs])
        else:
            raise GenomeError(f"unhandled kind {layer.kind!r}")
        masks[layer.id] = mask
    return masks


def _base_align(layer: LayerSpec, main_width: int, short_width: int) -> list[int]:
    if layer.shortcut_align is not None:
        return list(layer.shortcut_align)
    return [c if c < short_width else -1 for c in range(main_width)]


def _pruned_align(layer, main_mask, short_mask):
    """Re-express a residual_add's channel alignment over surviving channels."""
    base = _base_align(layer, len(main_mask), len(short_mask))
    short_rank = np.cumsum(short_mask) - 1
    align = []
    for c in np.flatnonzero(main_mask):
        src = base[c]
        if src >= 0 and short_mask[src]:
            align.append(int(short_rank[src]))
        else:
            align.append(-1)
    n_short = int(short_mask.sum())
    if align == [c if c < n_short else -1 for c in range(len(align))]:
        return None  # default alignment, no explicit map needed
    return tuple(align)


def decode(genome: Genome, base: ArchSpec) -> ArchSpec:
    """Apply a genome to its base architecture, producing the pruned network.

    Target conv layers keep exactly the filters whose bits are set; every
    consumer's input width shrinks to match. Residual adds are rewired so
    surviving channels stay aligned by their original index.
    """
    if genome.layout != layout_for(base):
        raise GenomeError("genome layout does not match the base architecture")
    masks = channel_masks(base, genome)
    layers = []
    for layer in base.layers:
        if layer.kind == "conv":
            layers.append(_replace(layer, filters=int(masks[layer.id].sum())))
        elif layer.kind == "residual_add":
            align = _pruned_align(layer, masks[layer.inputs[0]], masks[layer.inputs[1]])
            layers.append(_replace(layer, shortcut_align=align))
        else:
            layers.append(layer)
    pruned = ArchSpec(
        family=base.family, layers=tuple(layers), input_shape=base.input_shape,
        num_classes=base.num_classes, growth_rate=base.growth_rate,
        initial_width=base.initial_width, blocks_per_stage=base.blocks_per_stage,
    )
    propagate_shapes(pruned)  # decoding must always yield a shape-valid net
    return pruned


def _replace(layer: LayerSpec, **kw) -> LayerSpec:
    fields = {f: getattr(layer, f) for f in (
        "id", "kind", "inputs", "filters", "kernel", "stride", "padding",
        "activation", "batch_norm", "bias", "pool_mode", "shortcut_align")}
    fields.update(kw)
    return LayerSpec(**fields)


def transfer_weights(base: ArchSpec, base_weights: dict, genome: Genome) -> dict:
    """Slice a weight store down to the filters a genome keeps.

    Surviving filters keep their original values; removed filters and the
    matching input slices of consumer layers are deleted. Nothing is
    re-initialized.
    """
    masks = channel_masks(base, genome)
    shapes = dict(propagate_shapes(base))
    shapes[INPUT_ID] = base.input_shape
    out: dict[str, dict[str, np.ndarray]] = {}
    for layer in base.layers:
        if layer.kind not in ("conv", "fully_connected"):
            continue
        params = base_weights.get(layer.id)
        if params is None:
            raise GenomeError(f"weight store is missing layer {layer.id!r}")
        w = params["w"]
        out_mask = masks[layer.id]
        in_mask = masks[layer.inputs[0]]
        if layer.kind == "conv":
            if w.shape[:2] != (len(out_mask), len(in_mask)):
                raise GenomeError(
                    f"layer {layer.id!r}: weight shape {w.shape} does not match "
                    f"({len(out_mask)}, {len(in_mask)}, ...)"
                )
            new = {"w": w[out_mask][:, in_mask]}
            for name in ("b", "gamma", "beta"):
                if name in params:
                    new[name] = params[name][out_mask]
        else:
            c, h, wd = shapes[layer.inputs[0]]
            col_mask = np.repeat(in_mask, h * wd)
            if w.shape != (layer.filters, len(col_mask)):
                raise GenomeError(
                    f"layer {layer.id!r}: weight shape {w.shape} does not match "
                    f"({layer.filters}, {len(col_mask)})"
                )
            new = {"w": w[:, col_mask]}
            if "b" in params:
                new["b"] = params["b"]
        out[layer.id] = {k: v.copy() for k, v in new.items()}
    return out


# ---------------------------------------------------------------------------
# Mutation
# ---------------------------------------------------------------------------

def mutate(genome: Genome, p_m: float, rng: np.random.Generator) -> Genome:
    """Flip each bit independently with probability p_m, then repair.

    A segment left with no set bit gets one uniformly random bit re-set so
    every decoded layer keeps at least one filter. Repair never clears a bit.
    """
    if not 0.0 <= p_m <= 1.0:
        raise GenomeError(f"mutation probability must be in [0, 1], got {p_m}")
    bits = genome.bits ^ (rng.random(genome.layout.total_bits) < p_m)
    for seg in genome.layout.segments:
        if not bits[seg.start:seg.stop].any():
            bits[int(rng.integers(seg.start, seg.stop))] = True
    return Genome(genome.layout, bits)


def random_genome(layout: GenomeLayout, rng: np.random.Generator,
                  density: float = 0.5) -> Genome:
    """Uniform random genome (each bit set with probability ``density``), repaired."""
    bits = rng.random(layout.total_bits) < density
    for seg in layout.segments:
        if not bits[seg.start:seg.stop].any():
            bits[int(rng.integers(seg.start, seg.stop))] = True
    return Genome(layout, bits)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def genome_to_dict(genome: Genome) -> dict:
    segs = []
    for seg in genome.layout.segments:
        segs.append({
            "id": seg.id, "string": seg.string, "targets": list(seg.targets),
            "tied": seg.tied,
            "bits": "".join("1" if b else "0" for b in genome.segment_bits(seg)),
        })
    return {"family": genome.layout.family, "total_bits": genome.layout.total_bits,
            "segments": segs}


def genome_from_dict(doc: dict) -> Genome:
    try:
        segments, bit_chunks, pos = [], [], 0
        for rec in doc["segments"]:
            width = len(rec["bits"])
            segments.append(Segment(rec["id"], rec["string"], pos, pos + width,
                                    tuple(rec["targets"]), rec.get("tied", False)))
            bit_chunks.append(np.frombuffer(rec["bits"].encode(), dtype=np.uint8) == ord("1"))
            pos += width
        layout = GenomeLayout(doc["family"], tuple(segments), doc["total_bits"])
    except (KeyError, TypeError) as e:
        raise GenomeError(f"malformed genome document: {e}") from None
    return Genome(layout, np.concatenate(bit_chunks))


def save_genome(genome: Genome, path: str | Path) -> None:
    Path(path).write_text(json.dumps(genome_to_dict(genome), indent=2) + "\n")


def load_genome(path: str | Path) -> Genome:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise GenomeError(f"{path}: not a valid genome document ({e})") from None
    return genome_from_dict(doc)
