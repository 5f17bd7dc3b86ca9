"""Low-rank compression of every affine transform in a trained network.

Each dense weight matrix is decomposed, its singular values pruned by an
energy threshold, and the matrix replaced by the resulting factor pair,
unless the factorization would not actually shrink the layer: when the
shrinkage ratio ``k * (m + n) / (m * n)`` exceeds the policy threshold the
layer is left untouched and the report marks it skipped.

Inside an LSTM cell, the gate matrix and the projection matrix are handled
independently; peephole diagonals and biases are never factorized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import linalg
from .errors import RejectedInputError
from .nnet.network import (
    AffineParams,
    FactorizedAffineParams,
    LstmpParams,
    Params,
    copy_params,
    validate_params,
)
from .nnet.spec import (
    LayerKind,
    LayerSpec,
    NetworkSpec,
    flop_count,
    layer_names,
    param_count,
    spec_from_dict,
    spec_to_dict,
)

RETAINED_ENERGY = "retained-energy"
PRUNED_ENERGY = "pruned-energy"

DEFAULT_ENERGY_THRESHOLD = 0.9
DEFAULT_SHRINKAGE_THRESHOLD = 0.75

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SvdPolicy:
    """Knobs controlling the compression pass.

    ``energy_threshold`` is the fraction of total squared singular-value mass
    the retained ranks must carry (retained-energy mode) or, in pruned-energy
    mode, the fraction the discarded tail must just exceed. Factorizations
    whose shrinkage ratio exceeds ``shrinkage_threshold`` are skipped.
    """

    energy_threshold: float = DEFAULT_ENERGY_THRESHOLD
    shrinkage_threshold: float = DEFAULT_SHRINKAGE_THRESHOLD
    prune_interpretation: str = RETAINED_ENERGY
    include_output_layer: bool = False

    def __post_init__(self):
        if not 0.0 < self.energy_threshold <= 1.0:
            raise RejectedInputError(
                f"energy_threshold must be in (0, 1], got {self.energy_threshold}"
            )
        if not self.shrinkage_threshold > 0.0:
            raise RejectedInputError("shrinkage_threshold must be positive")
        if self.prune_interpretation not in (RETAINED_ENERGY, PRUNED_ENERGY):
            raise RejectedInputError(
                f"prune_interpretation must be {RETAINED_ENERGY!r} or {PRUNED_ENERGY!r}"
            )


@dataclass(frozen=True)
class MatrixRecord:
    """One compressed (or skipped) matrix in network order."""

    layer_index: int
    layer_id: str
    role: str               # tdnn-affine | lstm-gate | lstm-projection | output
    rows: int
    cols: int
    rank: int               # energy-selected rank, recorded even when skipped
    energy_retained: float
    skipped: bool
    param_delta: int        # m*n - k*(m+n) when applied, else 0
    flop_delta: int

    def shrinkage(self) -> float:
        return shrinkage_ratio(self.rows, self.cols, self.rank)


@dataclass
class CompressionReport:
    records: list[MatrixRecord]
    params_before: int = 0
    params_after: int = 0
    flops_before: int = 0
    flops_after: int = 0
    spec: NetworkSpec | None = None  # spec the report was produced from

    @property
    def param_delta(self) -> int:
        return self.params_before - self.params_after

    @property
    def flop_delta(self) -> int:
        return self.flops_before - self.flops_after

    @property
    def num_skipped(self) -> int:
        return sum(r.skipped for r in self.records)


def energy_prune(sigma, policy: SvdPolicy) -> int:
    """Rank retained by the policy's energy rule. Always at least 1.

    retained-energy: the smallest k whose leading squared mass reaches
    ``energy_threshold`` times the total.
    pruned-energy: singular values are discarded from the bottom until the
    discarded mass first exceeds ``energy_threshold`` times the total; k is
    what remains.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or sigma.shape[0] < 1:
        raise RejectedInputError("sigma must be a non-empty 1-D vector")
    if np.any(sigma < 0) or np.any(sigma[1:] > sigma[:-1]):
        raise RejectedInputError("sigma must be non-negative and non-increasing")
    energy = sigma * sigma
    total = float(energy.sum())
    if total <= 0.0:
        raise RejectedInputError("all-zero singular values")
    if policy.prune_interpretation == RETAINED_ENERGY:
        cumulative = np.cumsum(energy)
        k = int(np.searchsorted(cumulative, policy.energy_threshold * total - 1e-12 * total) + 1)
        return min(k, int(np.count_nonzero(sigma)))
    # pruned-energy: accumulate the tail until it first exceeds the budget.
    tail = np.cumsum(energy[::-1])
    pruned = int(np.searchsorted(tail, policy.energy_threshold * total, side="right") + 1)
    return max(1, sigma.shape[0] - pruned)


def shrinkage_ratio(m: int, n: int, k: int) -> float:
    """Parameter ratio of the rank-k factor pair to the dense matrix."""
    if m < 1 or n < 1 or k < 1:
        raise RejectedInputError("shrinkage_ratio arguments must be positive")
    return k * (m + n) / (m * n)


def _select_rank(weight: np.ndarray, policy: SvdPolicy):
    factors = linalg.svd(weight)
    k = energy_prune(factors.sigma, policy)
    energy = factors.sigma * factors.sigma
    retained = float(energy[:k].sum() / energy.sum())
    return factors, k, retained


def compress_network(params: Params, spec: NetworkSpec, policy: SvdPolicy):
    """Factorize every dense affine transform allowed by the policy.

    Returns ``(new_params, new_spec, report)``. Layers that are already
    factorized pass through untouched, as do the peephole diagonals and all
    biases. The output layer participates only when
    ``policy.include_output_layer`` is set.
    """
    if params is None:
        raise RejectedInputError("compress_network requires trained params")
    validate_params(params, spec)

    names = layer_names(spec)
    new_params: Params = []
    new_layers: list[LayerSpec] = []
    records: list[MatrixRecord] = []

    for idx, (entry, layer) in enumerate(zip(params, spec.layers)):
        if layer.kind is LayerKind.TDNN_AFFINE:
            new_entry, new_layer, record = _compress_affine(
                idx, names[idx], "tdnn-affine", entry, layer, policy)
            new_params.append(new_entry)
            new_layers.append(new_layer)
            records.append(record)
        elif layer.kind is LayerKind.OUTPUT and isinstance(entry, AffineParams) \
                and policy.include_output_layer:
            new_entry, new_layer, record = _compress_affine(
                idx, names[idx], "output", entry, layer, policy)
            new_params.append(new_entry)
            new_layers.append(new_layer)
            records.append(record)
        elif layer.kind is LayerKind.OUTPUT and isinstance(entry, AffineParams):
            # Excluded by policy: report it for completeness, always skipped.
            m, n = entry.weight.shape
            records.append(MatrixRecord(
                layer_index=idx, layer_id=names[idx], role="output",
                rows=m, cols=n, rank=min(m, n), energy_retained=1.0,
                skipped=True, param_delta=0, flop_delta=0))
            new_params.append(AffineParams(entry.weight.copy(), entry.bias.copy()))
            new_layers.append(layer)
        elif layer.kind is LayerKind.LSTMP:
            new_entry, new_layer, cell_records = _compress_lstmp(
                idx, names[idx], entry, layer, policy)
            new_params.append(new_entry)
            new_layers.append(new_layer)
            records.extend(cell_records)
        else:
            new_params.append(copy_params([entry])[0])
            new_layers.append(layer)

    new_spec = NetworkSpec(feature_dim=spec.feature_dim, layers=tuple(new_layers),
                           num_targets=spec.num_targets)
    report = CompressionReport(
        records=records,
        params_before=param_count(spec),
        params_after=param_count(new_spec),
        flops_before=flop_count(spec),
        flops_after=flop_count(new_spec),
        spec=spec,
    )
    return new_params, new_spec, report


def _compress_affine(idx, name, role, entry: AffineParams, layer: LayerSpec,
                     policy: SvdPolicy):
    m, n = entry.weight.shape
    factors, k, retained = _select_rank(entry.weight, policy)
    ratio = shrinkage_ratio(m, n, k)
    if ratio > policy.shrinkage_threshold:
        record = MatrixRecord(layer_index=idx, layer_id=name, role=role,
                              rows=m, cols=n, rank=k, energy_retained=retained,
                              skipped=True, param_delta=0, flop_delta=0)
        return AffineParams(entry.weight.copy(), entry.bias.copy()), layer, record
    a, b = linalg.truncate(factors, k)
    delta = m * n - k * (m + n)
    record = MatrixRecord(layer_index=idx, layer_id=name, role=role,
                          rows=m, cols=n, rank=k, energy_retained=retained,
                          skipped=False, param_delta=delta, flop_delta=delta)
    new_entry = FactorizedAffineParams(factor_in=b, factor_out=a, bias=entry.bias.copy())
    if layer.kind is LayerKind.OUTPUT:
        new_layer = replace(layer, bottleneck_dim=k)
    else:
        new_layer = LayerSpec(kind=LayerKind.FACTORIZED_AFFINE,
                              input_dim=layer.input_dim, output_dim=layer.output_dim,
                              splice=layer.splice, bottleneck_dim=k)
    return new_entry, new_layer, record


def _compress_lstmp(idx, name, entry: LstmpParams, layer: LayerSpec, policy: SvdPolicy):
    records = []
    new_entry = LstmpParams(gate_bias=entry.gate_bias.copy(),
                            peepholes=entry.peepholes.copy())
    gate_k = layer.gate_bottleneck_dim
    proj_k = layer.proj_bottleneck_dim

    if entry.gate is not None:
        m, n = entry.gate.shape
        factors, k, retained = _select_rank(entry.gate, policy)
        ratio = shrinkage_ratio(m, n, k)
        if ratio > policy.shrinkage_threshold:
            records.append(MatrixRecord(idx, name, "lstm-gate", m, n, k, retained,
                                        True, 0, 0))
            new_entry.gate = entry.gate.copy()
        else:
            a, b = linalg.truncate(factors, k)
            delta = m * n - k * (m + n)
            records.append(MatrixRecord(idx, name, "lstm-gate", m, n, k, retained,
                                        False, delta, delta))
            new_entry.gate_in = b
            new_entry.gate_out = a
            gate_k = k
    else:
        new_entry.gate_in = entry.gate_in.copy()
        new_entry.gate_out = entry.gate_out.copy()

    if entry.proj is not None:
        m, n = entry.proj.shape
        factors, k, retained = _select_rank(entry.proj, policy)
        ratio = shrinkage_ratio(m, n, k)
        if ratio > policy.shrinkage_threshold:
            records.append(MatrixRecord(idx, name, "lstm-projection", m, n, k,
                                        retained, True, 0, 0))
            new_entry.proj = entry.proj.copy()
        else:
            a, b = linalg.truncate(factors, k)
            delta = m * n - k * (m + n)
            records.append(MatrixRecord(idx, name, "lstm-projection", m, n, k,
                                        retained, False, delta, delta))
            new_entry.proj_in = b
            new_entry.proj_out = a
            proj_k = k
    else:
        new_entry.proj_in = entry.proj_in.copy()
        new_entry.proj_out = entry.proj_out.copy()

    new_layer = replace(layer, gate_bottleneck_dim=gate_k, proj_bottleneck_dim=proj_k)
    return new_entry, new_layer, records


def derive_bottleneck_spec(spec: NetworkSpec, report: CompressionReport) -> NetworkSpec:
    """Fresh spec with the report's ranks baked in, for from-scratch training.

    No factor values are copied, only the shrunken dimensions; the result is
    meant to be randomly initialized and trained anew.
    """
    by_layer: dict[int, dict[str, MatrixRecord]] = {}
    for record in report.records:
        by_layer.setdefault(record.layer_index, {})[record.role] = record

    new_layers: list[LayerSpec] = []
    for idx, layer in enumerate(spec.layers):
        recs = by_layer.get(idx, {})
        if layer.kind is LayerKind.TDNN_AFFINE:
            rec = recs.get("tdnn-affine")
            if rec is None:
                raise RejectedInputError(
                    f"report has no record for spliced affine layer {idx}")
            _check_record(rec, layer.output_dim, layer.input_dim, idx)
            if rec.skipped:
                new_layers.append(layer)
            else:
                new_layers.append(LayerSpec(
                    kind=LayerKind.FACTORIZED_AFFINE, input_dim=layer.input_dim,
                    output_dim=layer.output_dim, splice=layer.splice,
                    bottleneck_dim=rec.rank))
        elif layer.kind is LayerKind.LSTMP:
            gate_rec = recs.get("lstm-gate")
            proj_rec = recs.get("lstm-projection")
            gate_k = layer.gate_bottleneck_dim
            proj_k = layer.proj_bottleneck_dim
            if gate_rec is not None:
                _check_record(gate_rec, 4 * layer.cell_dim, layer.gate_input_dim, idx)
                if not gate_rec.skipped:
                    gate_k = gate_rec.rank
            if proj_rec is not None:
                _check_record(proj_rec, layer.output_dim, layer.cell_dim, idx)
                if not proj_rec.skipped:
                    proj_k = proj_rec.rank
            new_layers.append(replace(layer, gate_bottleneck_dim=gate_k,
                                      proj_bottleneck_dim=proj_k))
        elif layer.kind is LayerKind.OUTPUT:
            rec = recs.get("output")
            if rec is not None:
                _check_record(rec, layer.output_dim, layer.input_dim, idx)
                if not rec.skipped:
                    new_layers.append(replace(layer, bottleneck_dim=rec.rank))
                    continue
            new_layers.append(layer)
        elif layer.kind is LayerKind.FACTORIZED_AFFINE:
            rec = recs.get("tdnn-affine")
            if rec is not None:
                _check_record(rec, layer.output_dim, layer.input_dim, idx)
                if not rec.skipped:
                    new_layers.append(replace(layer, bottleneck_dim=rec.rank))
                    continue
            new_layers.append(layer)
        else:
            if recs:
                raise RejectedInputError(
                    f"report carries records for parameterless layer {idx}")
            new_layers.append(layer)
    return NetworkSpec(feature_dim=spec.feature_dim, layers=tuple(new_layers),
                       num_targets=spec.num_targets)


def _check_record(rec: MatrixRecord, rows: int, cols: int, idx: int) -> None:
    if (rec.rows, rec.cols) != (rows, cols):
        raise RejectedInputError(
            f"report record for layer {idx} has dims {(rec.rows, rec.cols)}, "
            f"spec expects {(rows, cols)}; report and spec do not match"
        )


def synthesize_report(spec: NetworkSpec) -> CompressionReport:
    """Report equivalent to one that would have produced ``spec``.

    Factorized layers appear as applied records at their bottleneck ranks;
    dense layers appear as skipped full-rank records. Useful for loading a
    known rank schedule into the reporting and trend utilities.
    """
    names = layer_names(spec)
    records = []
    for idx, layer in enumerate(spec.layers):
        if layer.kind in (LayerKind.TDNN_AFFINE, LayerKind.FACTORIZED_AFFINE):
            m, n = layer.output_dim, layer.input_dim
            k = layer.bottleneck_dim
            applied = layer.kind is LayerKind.FACTORIZED_AFFINE
            rank = k if applied else min(m, n)
            delta = m * n - rank * (m + n) if applied else 0
            records.append(MatrixRecord(idx, names[idx], "tdnn-affine", m, n, rank,
                                        1.0, not applied, delta, delta))
        elif layer.kind is LayerKind.LSTMP:
            m, n = 4 * layer.cell_dim, layer.gate_input_dim
            kg = layer.gate_bottleneck_dim
            rank = kg if kg is not None else min(m, n)
            delta = m * n - rank * (m + n) if kg is not None else 0
            records.append(MatrixRecord(idx, names[idx], "lstm-gate", m, n, rank,
                                        1.0, kg is None, delta, delta))
            m, n = layer.output_dim, layer.cell_dim
            kp = layer.proj_bottleneck_dim
            rank = kp if kp is not None else min(m, n)
            delta = m * n - rank * (m + n) if kp is not None else 0
            records.append(MatrixRecord(idx, names[idx], "lstm-projection", m, n,
                                        rank, 1.0, kp is None, delta, delta))
        elif layer.kind is LayerKind.OUTPUT:
            m, n = layer.output_dim, layer.input_dim
            k = layer.bottleneck_dim
            rank = k if k is not None else min(m, n)
            delta = m * n - rank * (m + n) if k is not None else 0
            records.append(MatrixRecord(idx, names[idx], "output", m, n, rank,
                                        1.0, k is None, delta, delta))
    return CompressionReport(records=records, params_before=0, params_after=0,
                             flops_before=0, flops_after=0, spec=spec)


def rank_trend(report: CompressionReport, input_dim_filter: int) -> list[int]:
    """Ranks of every matrix whose original input width equals the filter.

    Returned in network order; a diagnostic for how retained ranks evolve
    through depth among same-shaped layers.
    """
    return [r.rank for r in report.records if r.cols == input_dim_filter]


def round_dims(ranks, multiple: int) -> list[int]:
    """Round each rank to the nearest multiple (ties up, minimum one multiple)."""
    if multiple not in (4, 8):
        raise RejectedInputError(f"multiple must be 4 or 8, got {multiple}")
    out = []
    for rank in ranks:
        if rank < 1:
            raise RejectedInputError("ranks must be positive")
        rounded = ((int(rank) * 2 + multiple) // (2 * multiple)) * multiple
        out.append(max(multiple, rounded))
    return out


# Report file round-tripping: one JSON document, records in network order.

def report_to_dict(report: CompressionReport) -> dict:
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "spec": None if report.spec is None else spec_to_dict(report.spec),
        "records": [
            {
                "layer_index": r.layer_index,
                "layer_id": r.layer_id,
                "role": r.role,
                "rows": r.rows,
                "cols": r.cols,
                "rank": r.rank,
                "energy_retained": r.energy_retained,
                "skipped": r.skipped,
                "param_delta": r.param_delta,
                "flop_delta": r.flop_delta,
            }
            for r in report.records
        ],
        "totals": {
            "params_before": report.params_before,
            "params_after": report.params_after,
            "param_delta": report.param_delta,
            "flops_before": report.flops_before,
            "flops_after": report.flops_after,
            "flop_delta": report.flop_delta,
            "num_skipped": report.num_skipped,
        },
    }


def report_from_dict(data: dict) -> CompressionReport:
    try:
        records = [
            MatrixRecord(
                layer_index=int(r["layer_index"]), layer_id=str(r["layer_id"]),
                role=str(r["role"]), rows=int(r["rows"]), cols=int(r["cols"]),
                rank=int(r["rank"]), energy_retained=float(r["energy_retained"]),
                skipped=bool(r["skipped"]), param_delta=int(r["param_delta"]),
                flop_delta=int(r["flop_delta"]))
            for r in data["records"]
        ]
        totals = data.get("totals", {})
        spec = None if data.get("spec") is None else spec_from_dict(data["spec"])
        return CompressionReport(
            records=records,
            params_before=int(totals.get("params_before", 0)),
            params_after=int(totals.get("params_after", 0)),
            flops_before=int(totals.get("flops_before", 0)),
            flops_after=int(totals.get("flops_after", 0)),
            spec=spec,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise RejectedInputError(f"malformed compression report: {exc}") from exc


def save_report(report: CompressionReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=1)
        fh.write("\n")


def load_report(path) -> CompressionReport:
    with open(path, "r", encoding="utf-8") as fh:
        return report_from_dict(json.load(fh))


def render_report_table(report: CompressionReport) -> str:
    """Fixed-width text table of the per-matrix records plus totals."""
    header = f"{'layer':<8}{'role':<16}{'dims':<14}{'rank':>6}{'energy':>9}{'ratio':>8}  {'status':<8}{'params':>10}"
    lines = [header, "-" * len(header)]
    for r in report.records:
        status = "skipped" if r.skipped else "applied"
        lines.append(
            f"{r.layer_id:<8}{r.role:<16}{f'{r.rows}x{r.cols}':<14}{r.rank:>6}"
            f"{r.energy_retained:>9.4f}{r.shrinkage():>8.3f}  {status:<8}{-r.param_delta:>+10}"
        )
    lines.append("-" * len(header))
    lines.append(
        f"params {report.params_before} -> {report.params_after} "
        f"(delta {report.param_delta}); flops/frame {report.flops_before} -> "
        f"{report.flops_after} (delta {report.flop_delta}); "
        f"skipped {report.num_skipped}/{len(report.records)}"
    )
    return "\n".join(lines)
