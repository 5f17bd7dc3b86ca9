"""Layer and network specifications, architecture presets, cost accounting.

A network is a chain of layer specs. Spliced layers (TDNN-style) consume
temporal context: their effective input width is ``len(offsets) * producer
width`` and each one shortens the frame sequence by ``max(offsets) -
min(offsets)``. Projected LSTM layers are stateful and length-preserving.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from ..errors import RejectedInputError


class LayerKind(enum.Enum):
    TDNN_AFFINE = "tdnn_affine"
    RELU = "relu"
    LSTMP = "lstmp"
    FACTORIZED_AFFINE = "factorized_affine"
    OUTPUT = "output"


@dataclass(frozen=True)
class SpliceSpec:
    """Frame offsets gathered and concatenated to form a layer input."""

    offsets: tuple[int, ...]
    allow_offcenter: bool = field(default=False, compare=False)

    def __post_init__(self):
        offs = tuple(int(o) for o in self.offsets)
        object.__setattr__(self, "offsets", offs)
        if not offs:
            raise RejectedInputError("splice needs at least one offset")
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise RejectedInputError(f"splice offsets must strictly increase: {offs}")
        if 0 not in offs and not self.allow_offcenter:
            raise RejectedInputError(
                f"splice {offs} does not contain 0; pass allow_offcenter=True if intended"
            )

    @property
    def width_factor(self) -> int:
        return len(self.offsets)

    @property
    def left(self) -> int:
        return max(0, -self.offsets[0])

    @property
    def right(self) -> int:
        return max(0, self.offsets[-1])


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    input_dim: int
    output_dim: int
    splice: SpliceSpec | None = None
    cell_dim: int | None = None
    rec_proj_dim: int | None = None
    nonrec_proj_dim: int | None = None
    bottleneck_dim: int | None = None
    # Optional low-rank factorization of the LSTMP gate / projection matrices.
    gate_bottleneck_dim: int | None = None
    proj_bottleneck_dim: int | None = None

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise RejectedInputError("layer dims must be positive")
        k = self.kind
        if k in (LayerKind.TDNN_AFFINE, LayerKind.FACTORIZED_AFFINE):
            if self.splice is None:
                raise RejectedInputError(f"{k.value} layer requires a splice")
            if self.input_dim % self.splice.width_factor:
                raise RejectedInputError(
                    f"{k.value} input_dim {self.input_dim} not divisible by "
                    f"splice width {self.splice.width_factor}"
                )
        elif self.splice is not None:
            raise RejectedInputError(f"{k.value} layer must not carry a splice")
        if k is LayerKind.FACTORIZED_AFFINE:
            if self.bottleneck_dim is None:
                raise RejectedInputError("factorized layer requires bottleneck_dim")
            if not 1 <= self.bottleneck_dim <= min(self.input_dim, self.output_dim):
                raise RejectedInputError(
                    f"bottleneck {self.bottleneck_dim} out of range for "
                    f"{self.input_dim}->{self.output_dim}"
                )
        elif k is LayerKind.OUTPUT:
            if self.bottleneck_dim is not None and not (
                1 <= self.bottleneck_dim <= min(self.input_dim, self.output_dim)
            ):
                raise RejectedInputError("output bottleneck out of range")
        elif self.bottleneck_dim is not None:
            raise RejectedInputError(f"{k.value} layer must not carry bottleneck_dim")
        if k is LayerKind.LSTMP:
            if None in (self.cell_dim, self.rec_proj_dim, self.nonrec_proj_dim):
                raise RejectedInputError("lstmp requires cell/rec/nonrec dims")
            if self.output_dim != self.rec_proj_dim + self.nonrec_proj_dim:
                raise RejectedInputError(
                    "lstmp output_dim must equal rec_proj_dim + nonrec_proj_dim"
                )
            if self.gate_bottleneck_dim is not None and not (
                1 <= self.gate_bottleneck_dim <= min(4 * self.cell_dim, self.gate_input_dim)
            ):
                raise RejectedInputError("gate bottleneck out of range")
            if self.proj_bottleneck_dim is not None and not (
                1 <= self.proj_bottleneck_dim <= min(self.output_dim, self.cell_dim)
            ):
                raise RejectedInputError("projection bottleneck out of range")
        elif self.cell_dim is not None or self.gate_bottleneck_dim is not None \
                or self.proj_bottleneck_dim is not None:
            raise RejectedInputError(f"{k.value} layer must not carry lstmp fields")
        if k is LayerKind.RELU and self.input_dim != self.output_dim:
            raise RejectedInputError("relu layer must preserve width")

    @property
    def gate_input_dim(self) -> int:
        """Width of the concatenated (input, recurrent) gate input."""
        if self.kind is not LayerKind.LSTMP:
            raise RejectedInputError("gate_input_dim is only defined for lstmp layers")
        return self.input_dim + self.rec_proj_dim

    @property
    def effective_input_dim(self) -> int:
        """Input width of the layer's main matrix (gate input for LSTMP)."""
        if self.kind is LayerKind.LSTMP:
            return self.gate_input_dim
        return self.input_dim


def make_tdnn(prev_width: int, output_dim: int, offsets) -> LayerSpec:
    splice = offsets if isinstance(offsets, SpliceSpec) else SpliceSpec(tuple(offsets))
    return LayerSpec(
        kind=LayerKind.TDNN_AFFINE,
        input_dim=splice.width_factor * prev_width,
        output_dim=output_dim,
        splice=splice,
    )


def make_factorized(prev_width: int, output_dim: int, offsets, bottleneck_dim: int) -> LayerSpec:
    splice = offsets if isinstance(offsets, SpliceSpec) else SpliceSpec(tuple(offsets))
    return LayerSpec(
        kind=LayerKind.FACTORIZED_AFFINE,
        input_dim=splice.width_factor * prev_width,
        output_dim=output_dim,
        splice=splice,
        bottleneck_dim=bottleneck_dim,
    )


def make_relu(width: int) -> LayerSpec:
    return LayerSpec(kind=LayerKind.RELU, input_dim=width, output_dim=width)


def make_lstmp(
    input_dim: int,
    cell_dim: int,
    rec_proj_dim: int,
    nonrec_proj_dim: int,
    gate_bottleneck_dim: int | None = None,
    proj_bottleneck_dim: int | None = None,
) -> LayerSpec:
    return LayerSpec(
        kind=LayerKind.LSTMP,
        input_dim=input_dim,
        output_dim=rec_proj_dim + nonrec_proj_dim,
        cell_dim=cell_dim,
        rec_proj_dim=rec_proj_dim,
        nonrec_proj_dim=nonrec_proj_dim,
        gate_bottleneck_dim=gate_bottleneck_dim,
        proj_bottleneck_dim=proj_bottleneck_dim,
    )


def make_output(input_dim: int, num_targets: int, bottleneck_dim: int | None = None) -> LayerSpec:
    return LayerSpec(
        kind=LayerKind.OUTPUT,
        input_dim=input_dim,
        output_dim=num_targets,
        bottleneck_dim=bottleneck_dim,
    )


@dataclass(frozen=True)
class NetworkSpec:
    feature_dim: int
    layers: tuple[LayerSpec, ...]
    num_targets: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.feature_dim < 1 or self.num_targets < 1:
            raise RejectedInputError("feature_dim and num_targets must be positive")
        if not self.layers:
            raise RejectedInputError("network needs at least one layer")
        width = self.feature_dim
        for idx, layer in enumerate(self.layers):
            expected = width
            if layer.splice is not None:
                expected = layer.splice.width_factor * width
            if layer.input_dim != expected:
                raise RejectedInputError(
                    f"layer {idx} ({layer.kind.value}) input_dim {layer.input_dim} "
                    f"does not chain from producer width {width} (expected {expected})"
                )
            width = layer.output_dim
        last = self.layers[-1]
        if last.kind is not LayerKind.OUTPUT:
            raise RejectedInputError("final layer must be an output layer")
        if last.output_dim != self.num_targets:
            raise RejectedInputError(
                f"output dim {last.output_dim} != num_targets {self.num_targets}"
            )

    def context(self) -> tuple[int, int]:
        """(left, right) frames consumed by splicing across the network."""
        left = sum(l.splice.left for l in self.layers if l.splice is not None)
        right = sum(l.splice.right for l in self.layers if l.splice is not None)
        return left, right

    @property
    def total_context(self) -> int:
        left, right = self.context()
        return left + right

    def min_frames(self) -> int:
        return self.total_context + 1


def layer_names(spec: NetworkSpec) -> list[str]:
    """Conventional short names: td1..tdN / ls1..lsM / relu / out, in order."""
    names = []
    td = ls = 0
    for layer in spec.layers:
        if layer.kind in (LayerKind.TDNN_AFFINE, LayerKind.FACTORIZED_AFFINE):
            td += 1
            names.append(f"td{td}")
        elif layer.kind is LayerKind.LSTMP:
            ls += 1
            names.append(f"ls{ls}")
        elif layer.kind is LayerKind.OUTPUT:
            names.append("out")
        else:
            names.append(f"relu{td}")
    return names


# Preset geometry: nine spliced affine layers with four projected LSTM layers
# interleaved after the 3rd, 5th, 7th and 9th, then the output affine.
_HIDDEN_DIM = 1024
_CELL_DIM = 1024
_REC_PROJ = 256
_NONREC_PROJ = 256

_BASELINE_SPLICES = [
    (-2, -1, 0, 1, 2), (-1, 0, 1), (-1, 0, 1),
    (-3, 0, 3), (-3, 0, 3),
    (-3, 0, 3), (-3, 0, 3),
    (-3, 0, 3), (-3, 0, 3),
]
# Positions (among the 9 spliced layers) followed by an LSTM layer.
_LSTM_AFTER = {3, 5, 7, 9}

# Default per-layer ranks for the pre-shrunk preset: nine spliced-affine
# bottlenecks in network order, then the four LSTM projection ranks.
SVD_DEFAULT_TDNN_RANKS = (127, 319, 317, 183, 372, 164, 385, 173, 433)
SVD_DEFAULT_PROJ_RANKS = (406, 404, 427, 501)

PRESET_NAMES = ("baseline", "lstm-tdnn-1", "lstm-tdnn-2", "svd-default")


def build_preset(name: str, feature_dim: int, num_targets: int) -> NetworkSpec:
    """Build one of the standard architectures.

    ``baseline`` splices (-2..2) at the first layer; ``lstm-tdnn-1`` narrows it
    to (-1,0,1); ``lstm-tdnn-2`` collapses the last two spliced layers to a
    single-frame (0) window; ``svd-default`` is the baseline with every spliced
    affine replaced by a factor pair and every LSTM projection bottlenecked at
    the stock rank schedule.
    """
    if name not in PRESET_NAMES:
        raise RejectedInputError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
    splices = [tuple(s) for s in _BASELINE_SPLICES]
    if name == "lstm-tdnn-1":
        splices[0] = (-1, 0, 1)
    elif name == "lstm-tdnn-2":
        splices[7] = (0,)
        splices[8] = (0,)

    ranks = SVD_DEFAULT_TDNN_RANKS if name == "svd-default" else None
    proj_ranks = SVD_DEFAULT_PROJ_RANKS if name == "svd-default" else None

    layers: list[LayerSpec] = []
    width = feature_dim
    lstm_idx = 0
    for pos, offsets in enumerate(splices, start=1):
        if ranks is not None:
            layers.append(make_factorized(width, _HIDDEN_DIM, offsets, ranks[pos - 1]))
        else:
            layers.append(make_tdnn(width, _HIDDEN_DIM, offsets))
        layers.append(make_relu(_HIDDEN_DIM))
        width = _HIDDEN_DIM
        if pos in _LSTM_AFTER:
            proj_k = proj_ranks[lstm_idx] if proj_ranks is not None else None
            layers.append(
                make_lstmp(width, _CELL_DIM, _REC_PROJ, _NONREC_PROJ,
                           proj_bottleneck_dim=proj_k)
            )
            width = _REC_PROJ + _NONREC_PROJ
            lstm_idx += 1
    layers.append(make_output(width, num_targets))
    return NetworkSpec(feature_dim=feature_dim, layers=tuple(layers), num_targets=num_targets)


def toy_spec(
    feature_dim: int,
    num_targets: int,
    tdnn_dim: int = 96,
    cell_dim: int = 32,
    proj_dim: int = 8,
) -> NetworkSpec:
    """Small interleaved TDNN/LSTM network for desk-scale experiments.

    Same shape as the presets (spliced affine pairs with LSTM layers between
    them) at a fraction of the width, so it trains in seconds on a CPU.
    """
    layers = [
        make_tdnn(feature_dim, tdnn_dim, (-1, 0, 1)),
        make_relu(tdnn_dim),
        make_tdnn(tdnn_dim, tdnn_dim, (-1, 0, 1)),
        make_relu(tdnn_dim),
        make_lstmp(tdnn_dim, cell_dim, proj_dim, proj_dim),
        make_tdnn(2 * proj_dim, tdnn_dim, (-3, 0, 3)),
        make_relu(tdnn_dim),
        make_tdnn(tdnn_dim, tdnn_dim, (-3, 0, 3)),
        make_relu(tdnn_dim),
        make_lstmp(tdnn_dim, cell_dim, proj_dim, proj_dim),
        make_output(2 * proj_dim, num_targets),
    ]
    return NetworkSpec(feature_dim=feature_dim, layers=tuple(layers), num_targets=num_targets)


def layer_param_count(layer: LayerSpec) -> int:
    """Trainable parameters of one layer, biases and peepholes included."""
    m, n = layer.output_dim, layer.input_dim
    if layer.kind is LayerKind.RELU:
        return 0
    if layer.kind is LayerKind.TDNN_AFFINE:
        return m * n + m
    if layer.kind in (LayerKind.FACTORIZED_AFFINE, LayerKind.OUTPUT):
        k = layer.bottleneck_dim
        if k is None:
            return m * n + m
        return k * n + m * k + m
    # LSTMP
    c = layer.cell_dim
    gate_in = layer.gate_input_dim
    total = 4 * c + 3 * c  # gate bias + peephole diagonals
    if layer.gate_bottleneck_dim is None:
        total += 4 * c * gate_in
    else:
        kg = layer.gate_bottleneck_dim
        total += kg * gate_in + 4 * c * kg
    if layer.proj_bottleneck_dim is None:
        total += m * c
    else:
        kp = layer.proj_bottleneck_dim
        total += kp * c + m * kp
    return total


def layer_flop_count(layer: LayerSpec) -> int:
    """Multiply-accumulates one layer spends per output frame.

    Counts matrix products, peephole diagonals and the elementwise cell
    arithmetic; bias additions and nonlinearities are free.
    """
    m, n = layer.output_dim, layer.input_dim
    if layer.kind is LayerKind.RELU:
        return 0
    if layer.kind is LayerKind.TDNN_AFFINE:
        return m * n
    if layer.kind in (LayerKind.FACTORIZED_AFFINE, LayerKind.OUTPUT):
        k = layer.bottleneck_dim
        if k is None:
            return m * n
        return k * n + m * k
    # LSTMP
    c = layer.cell_dim
    gate_in = layer.gate_input_dim
    total = 3 * c + 3 * c  # peephole products + cell/output elementwise products
    if layer.gate_bottleneck_dim is None:
        total += 4 * c * gate_in
    else:
        kg = layer.gate_bottleneck_dim
        total += kg * gate_in + 4 * c * kg
    if layer.proj_bottleneck_dim is None:
        total += m * c
    else:
        kp = layer.proj_bottleneck_dim
        total += kp * c + m * kp
    return total


def param_count(spec: NetworkSpec) -> int:
    """Exact trainable parameter count, biases and peepholes included."""
    return sum(layer_param_count(layer) for layer in spec.layers)


def flop_count(spec: NetworkSpec) -> int:
    """Multiply-accumulate count per output frame, summed over layers."""
    return sum(layer_flop_count(layer) for layer in spec.layers)


_LAYER_INT_FIELDS = (
    "input_dim", "output_dim", "cell_dim", "rec_proj_dim", "nonrec_proj_dim",
    "bottleneck_dim", "gate_bottleneck_dim", "proj_bottleneck_dim",
)


def spec_to_dict(spec: NetworkSpec) -> dict:
    layers = []
    for layer in spec.layers:
        entry: dict = {"kind": layer.kind.value}
        for name in _LAYER_INT_FIELDS:
            value = getattr(layer, name)
            if value is not None:
                entry[name] = int(value)
        if layer.splice is not None:
            entry["splice"] = list(layer.splice.offsets)
        layers.append(entry)
    return {
        "feature_dim": spec.feature_dim,
        "num_targets": spec.num_targets,
        "layers": layers,
    }


def spec_from_dict(data: dict) -> NetworkSpec:
    try:
        layers = []
        for entry in data["layers"]:
            kwargs = {name: entry[name] for name in _LAYER_INT_FIELDS if name in entry}
            splice = entry.get("splice")
            if splice is not None:
                kwargs["splice"] = SpliceSpec(tuple(splice), allow_offcenter=True)
            layers.append(LayerSpec(kind=LayerKind(entry["kind"]), **kwargs))
        return NetworkSpec(
            feature_dim=int(data["feature_dim"]),
            layers=tuple(layers),
            num_targets=int(data["num_targets"]),
        )
    except (KeyError, TypeError) as exc:
        raise RejectedInputError(f"malformed network spec: {exc}") from exc
