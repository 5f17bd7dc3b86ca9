"""Parameters, forward/backward passes, and model file round-tripping.

The forward pass walks the layer chain on a ``T x width`` frame matrix.
Spliced layers shorten the sequence by their context span; LSTM layers run
stateful left-to-right with zero initial state. The output layer applies
log-softmax, so the network emits per-frame log-probabilities.

Backward computes gradients of the mean per-frame cross-entropy with respect
to every parameter, including full backpropagation through time for the
projected LSTM cells.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import RejectedInputError
from .spec import LayerKind, LayerSpec, NetworkSpec, spec_from_dict, spec_to_dict

MODEL_FORMAT_VERSION = 1


@dataclass
class AffineParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    def arrays(self):
        return [("weight", self.weight), ("bias", self.bias)]


@dataclass
class FactorizedAffineParams:
    factor_in: np.ndarray   # (k, in)
    factor_out: np.ndarray  # (out, k)
    bias: np.ndarray        # (out,)

    def arrays(self):
        return [("factor_in", self.factor_in), ("factor_out", self.factor_out),
                ("bias", self.bias)]


@dataclass
class LstmpParams:
    """Gate matrix over [input; recurrent], peepholes, and the projection.

    Either the dense matrix or its (in, out) factor pair is present for the
    gate and for the projection, never both. ``peepholes`` rows are the
    input, forget and output diagonals.
    """

    gate_bias: np.ndarray   # (4C,)
    peepholes: np.ndarray   # (3, C)
    gate: np.ndarray | None = None       # (4C, I+R)
    gate_in: np.ndarray | None = None    # (kg, I+R)
    gate_out: np.ndarray | None = None   # (4C, kg)
    proj: np.ndarray | None = None       # (R+N, C)
    proj_in: np.ndarray | None = None    # (kp, C)
    proj_out: np.ndarray | None = None   # (R+N, kp)

    def arrays(self):
        out = []
        for name in ("gate", "gate_in", "gate_out"):
            arr = getattr(self, name)
            if arr is not None:
                out.append((name, arr))
        out.append(("gate_bias", self.gate_bias))
        out.append(("peepholes", self.peepholes))
        for name in ("proj", "proj_in", "proj_out"):
            arr = getattr(self, name)
            if arr is not None:
                out.append((name, arr))
        return out


Params = list  # one entry per layer; None for parameterless layers


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_params(spec: NetworkSpec, seed: int) -> Params:
    """Deterministic uniform initialization; biases and peepholes start at zero."""
    rng = np.random.default_rng(seed)
    params: Params = []
    for layer in spec.layers:
        m, n = layer.output_dim, layer.input_dim
        if layer.kind is LayerKind.RELU:
            params.append(None)
        elif layer.kind in (LayerKind.TDNN_AFFINE, LayerKind.OUTPUT) \
                and layer.bottleneck_dim is None:
            params.append(AffineParams(weight=_glorot(rng, m, n), bias=np.zeros(m)))
        elif layer.kind in (LayerKind.FACTORIZED_AFFINE, LayerKind.OUTPUT):
            k = layer.bottleneck_dim
            params.append(FactorizedAffineParams(
                factor_in=_glorot(rng, k, n),
                factor_out=_glorot(rng, m, k),
                bias=np.zeros(m),
            ))
        elif layer.kind is LayerKind.LSTMP:
            c = layer.cell_dim
            gate_in_dim = layer.gate_input_dim
            entry = LstmpParams(gate_bias=np.zeros(4 * c), peepholes=np.zeros((3, c)))
            if layer.gate_bottleneck_dim is None:
                entry.gate = _glorot(rng, 4 * c, gate_in_dim)
            else:
                kg = layer.gate_bottleneck_dim
                entry.gate_in = _glorot(rng, kg, gate_in_dim)
                entry.gate_out = _glorot(rng, 4 * c, kg)
            if layer.proj_bottleneck_dim is None:
                entry.proj = _glorot(rng, layer.output_dim, c)
            else:
                kp = layer.proj_bottleneck_dim
                entry.proj_in = _glorot(rng, kp, c)
                entry.proj_out = _glorot(rng, layer.output_dim, kp)
            params.append(entry)
        else:
            raise RejectedInputError(f"unhandled layer kind {layer.kind}")
    return params


def zeros_like_params(params: Params) -> Params:
    out = []
    for entry in params:
        if entry is None:
            out.append(None)
        elif isinstance(entry, AffineParams):
            out.append(AffineParams(np.zeros_like(entry.weight), np.zeros_like(entry.bias)))
        elif isinstance(entry, FactorizedAffineParams):
            out.append(FactorizedAffineParams(
                np.zeros_like(entry.factor_in), np.zeros_like(entry.factor_out),
                np.zeros_like(entry.bias)))
        else:
            out.append(LstmpParams(
                gate_bias=np.zeros_like(entry.gate_bias),
                peepholes=np.zeros_like(entry.peepholes),
                gate=None if entry.gate is None else np.zeros_like(entry.gate),
                gate_in=None if entry.gate_in is None else np.zeros_like(entry.gate_in),
                gate_out=None if entry.gate_out is None else np.zeros_like(entry.gate_out),
                proj=None if entry.proj is None else np.zeros_like(entry.proj),
                proj_in=None if entry.proj_in is None else np.zeros_like(entry.proj_in),
                proj_out=None if entry.proj_out is None else np.zeros_like(entry.proj_out),
            ))
    return out


def copy_params(params: Params) -> Params:
    out = []
    for entry in params:
        if entry is None:
            out.append(None)
        elif isinstance(entry, AffineParams):
            out.append(AffineParams(entry.weight.copy(), entry.bias.copy()))
        elif isinstance(entry, FactorizedAffineParams):
            out.append(FactorizedAffineParams(
                entry.factor_in.copy(), entry.factor_out.copy(), entry.bias.copy()))
        else:
            out.append(LstmpParams(
                gate_bias=entry.gate_bias.copy(),
                peepholes=entry.peepholes.copy(),
                gate=None if entry.gate is None else entry.gate.copy(),
                gate_in=None if entry.gate_in is None else entry.gate_in.copy(),
                gate_out=None if entry.gate_out is None else entry.gate_out.copy(),
                proj=None if entry.proj is None else entry.proj.copy(),
                proj_in=None if entry.proj_in is None else entry.proj_in.copy(),
                proj_out=None if entry.proj_out is None else entry.proj_out.copy(),
            ))
    return out


def param_arrays(params: Params) -> list[np.ndarray]:
    """All parameter arrays in a fixed traversal order."""
    out = []
    for entry in params:
        if entry is not None:
            out.extend(arr for _, arr in entry.arrays())
    return out


def validate_params(params: Params, spec: NetworkSpec) -> None:
    """Check the parameter tree matches the spec shapes and is finite."""
    if params is None or len(params) != len(spec.layers):
        raise RejectedInputError("params do not match spec layer count")
    for idx, (entry, layer) in enumerate(zip(params, spec.layers)):
        expected = _expected_shapes(layer)
        if expected is None:
            if entry is not None:
                raise RejectedInputError(f"layer {idx}: parameterless layer has params")
            continue
        if entry is None:
            raise RejectedInputError(f"layer {idx}: missing params")
        got = {name: arr.shape for name, arr in entry.arrays()}
        if got != expected:
            raise RejectedInputError(
                f"layer {idx} ({layer.kind.value}): param shapes {got} != expected {expected}"
            )
        for name, arr in entry.arrays():
            if not np.isfinite(arr).all():
                raise RejectedInputError(f"layer {idx}: non-finite entries in {name}")


def _expected_shapes(layer: LayerSpec):
    m, n = layer.output_dim, layer.input_dim
    if layer.kind is LayerKind.RELU:
        return None
    if layer.kind in (LayerKind.TDNN_AFFINE, LayerKind.OUTPUT) and layer.bottleneck_dim is None:
        return {"weight": (m, n), "bias": (m,)}
    if layer.kind in (LayerKind.FACTORIZED_AFFINE, LayerKind.OUTPUT):
        k = layer.bottleneck_dim
        return {"factor_in": (k, n), "factor_out": (m, k), "bias": (m,)}
    c = layer.cell_dim
    gi = layer.gate_input_dim
    shapes = {"gate_bias": (4 * c,), "peepholes": (3, c)}
    if layer.gate_bottleneck_dim is None:
        shapes["gate"] = (4 * c, gi)
    else:
        shapes["gate_in"] = (layer.gate_bottleneck_dim, gi)
        shapes["gate_out"] = (4 * c, layer.gate_bottleneck_dim)
    if layer.proj_bottleneck_dim is None:
        shapes["proj"] = (m, c)
    else:
        shapes["proj_in"] = (layer.proj_bottleneck_dim, c)
        shapes["proj_out"] = (m, layer.proj_bottleneck_dim)
    return shapes


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _splice(x: np.ndarray, splice) -> np.ndarray:
    span = splice.offsets[-1] - splice.offsets[0]
    t_out = x.shape[0] - span
    base = [o - splice.offsets[0] for o in splice.offsets]
    return np.concatenate([x[d:d + t_out] for d in base], axis=1)


def _unsplice(d_spliced: np.ndarray, splice, t_in: int, width: int) -> np.ndarray:
    t_out = d_spliced.shape[0]
    base = [o - splice.offsets[0] for o in splice.offsets]
    dx = np.zeros((t_in, width))
    for j, d in enumerate(base):
        dx[d:d + t_out] += d_spliced[:, j * width:(j + 1) * width]
    return dx


def _lstmp_forward(entry: LstmpParams, layer: LayerSpec, x: np.ndarray,
                   collect: bool = True):
    t_len = x.shape[0]
    c_dim = layer.cell_dim
    r_dim = layer.rec_proj_dim
    i_dim = layer.input_dim

    # The input contribution to the gates is time-independent: hoist it out of
    # the recurrence (bias folded in) so the loop only adds the recurrent part.
    # For factorized matrices the recurrent matvec uses the precomputed factor
    # product, which is exact (the maps are linear) and keeps the per-step cost
    # identical to a dense cell.
    if entry.gate is not None:
        gate_r = entry.gate[:, i_dim:]
        pre = x @ entry.gate[:, :i_dim].T + entry.gate_bias
    else:
        gate_r = entry.gate_out @ entry.gate_in[:, i_dim:]
        pre = (x @ entry.gate_in[:, :i_dim].T) @ entry.gate_out.T + entry.gate_bias
    if entry.proj is not None:
        proj_eff = entry.proj
    else:
        proj_eff = entry.proj_out @ entry.proj_in
    p_if = entry.peepholes[:2]
    p_o = entry.peepholes[2]

    out = np.empty((t_len, layer.output_dim))
    c = np.zeros(c_dim)
    r = np.zeros(r_dim)
    if not collect:
        for t in range(t_len):
            a = pre[t] + gate_r @ r
            a_if = a[:2 * c_dim].reshape(2, c_dim) + p_if * c
            gif = _sigmoid(a_if)
            gg = np.tanh(a[2 * c_dim:3 * c_dim])
            c = gif[1] * c + gif[0] * gg
            go = _sigmoid(a[3 * c_dim:] + p_o * c)
            y = proj_eff @ (go * np.tanh(c))
            out[t] = y
            r = y[:r_dim]
        return out, None

    cache = {
        "c_prev": np.empty((t_len, c_dim)), "i": np.empty((t_len, c_dim)),
        "f": np.empty((t_len, c_dim)), "g": np.empty((t_len, c_dim)),
        "o": np.empty((t_len, c_dim)), "c": np.empty((t_len, c_dim)),
        "tc": np.empty((t_len, c_dim)), "h": np.empty((t_len, c_dim)),
        "r_prev": np.empty((t_len, r_dim)),
    }
    for t in range(t_len):
        a = pre[t] + gate_r @ r
        a_if = a[:2 * c_dim].reshape(2, c_dim) + p_if * c
        gif = _sigmoid(a_if)
        gi = gif[0]
        gf = gif[1]
        gg = np.tanh(a[2 * c_dim:3 * c_dim])
        c_new = gf * c + gi * gg
        go = _sigmoid(a[3 * c_dim:] + p_o * c_new)
        tc = np.tanh(c_new)
        h = go * tc
        y = proj_eff @ h
        cache["c_prev"][t] = c
        cache["r_prev"][t] = r
        cache["i"][t] = gi
        cache["f"][t] = gf
        cache["g"][t] = gg
        cache["o"][t] = go
        cache["c"][t] = c_new
        cache["tc"][t] = tc
        cache["h"][t] = h
        out[t] = y
        c = c_new
        r = y[:r_dim]
    cache["x"] = x
    # Factor middles, needed for the factor gradients, reconstructed in batch.
    if entry.gate is None:
        z_all = np.concatenate([x, cache["r_prev"]], axis=1)
        cache["gate_mid"] = z_all @ entry.gate_in.T
    if entry.proj is None:
        cache["proj_mid"] = cache["h"] @ entry.proj_in.T
    return out, cache


def _lstmp_backward(entry: LstmpParams, grad: LstmpParams, layer: LayerSpec,
                    cache: dict, d_out: np.ndarray) -> np.ndarray:
    t_len = d_out.shape[0]
    c_dim = layer.cell_dim
    r_dim = layer.rec_proj_dim
    i_dim = layer.input_dim
    p_i, p_f, p_o = entry.peepholes

    # Same fusion as the forward pass: per-step matvecs go through the dense
    # factor products, factor gradients are recovered in batch afterwards.
    if entry.gate is not None:
        gate_r = entry.gate[:, i_dim:]
    else:
        gate_r = entry.gate_out @ entry.gate_in[:, i_dim:]
    if entry.proj is not None:
        proj_eff = entry.proj
    else:
        proj_eff = entry.proj_out @ entry.proj_in

    da_all = np.empty((t_len, 4 * c_dim))
    dy_all = np.empty((t_len, layer.output_dim))

    dr = np.zeros(r_dim)
    dc = np.zeros(c_dim)
    for t in range(t_len - 1, -1, -1):
        dy = d_out[t].copy()
        dy[:r_dim] += dr
        dy_all[t] = dy
        dh = proj_eff.T @ dy
        tc = cache["tc"][t]
        go = cache["o"][t]
        do = dh * tc
        dct = dc + dh * go * (1.0 - tc * tc)
        dao = do * go * (1.0 - go)
        dct += dao * p_o
        gi = cache["i"][t]
        gf = cache["f"][t]
        gg = cache["g"][t]
        c_prev = cache["c_prev"][t]
        dai = (dct * gg) * gi * (1.0 - gi)
        daf = (dct * c_prev) * gf * (1.0 - gf)
        dag = (dct * gi) * (1.0 - gg * gg)
        dc = dct * gf + dai * p_i + daf * p_f
        da = da_all[t]
        da[:c_dim] = dai
        da[c_dim:2 * c_dim] = daf
        da[2 * c_dim:3 * c_dim] = dag
        da[3 * c_dim:] = dao
        dr = gate_r.T @ da

    z_all = np.concatenate([cache["x"], cache["r_prev"]], axis=1)
    grad.gate_bias += da_all.sum(axis=0)
    grad.peepholes[0] += np.einsum("tc,tc->c", da_all[:, :c_dim], cache["c_prev"])
    grad.peepholes[1] += np.einsum("tc,tc->c", da_all[:, c_dim:2 * c_dim], cache["c_prev"])
    grad.peepholes[2] += np.einsum("tc,tc->c", da_all[:, 3 * c_dim:], cache["c"])
    if entry.gate is not None:
        grad.gate += da_all.T @ z_all
        dx = da_all @ entry.gate[:, :i_dim]
    else:
        dgm_all = da_all @ entry.gate_out
        grad.gate_out += da_all.T @ cache["gate_mid"]
        grad.gate_in += dgm_all.T @ z_all
        dx = dgm_all @ entry.gate_in[:, :i_dim]
    if entry.proj is not None:
        grad.proj += dy_all.T @ cache["h"]
    else:
        dpm_all = dy_all @ entry.proj_out
        grad.proj_out += dy_all.T @ cache["proj_mid"]
        grad.proj_in += dpm_all.T @ cache["h"]
    return dx


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_frames(spec: NetworkSpec, frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != spec.feature_dim:
        raise RejectedInputError(
            f"frames must be (T, {spec.feature_dim}), got {frames.shape}"
        )
    if frames.shape[0] < spec.min_frames():
        raise RejectedInputError(
            f"input has {frames.shape[0]} frames but the network consumes "
            f"{spec.total_context} frames of context and needs at least "
            f"{spec.min_frames()}"
        )
    return frames


def _forward_all(params: Params, spec: NetworkSpec, frames: np.ndarray,
                 collect: bool = True):
    """Run every layer; optionally keep per-layer caches for backward."""
    x = _check_frames(spec, frames)
    caches = []
    for entry, layer in zip(params, spec.layers):
        if layer.kind is LayerKind.RELU:
            if collect:
                caches.append({"mask": x > 0.0})
            x = np.maximum(x, 0.0)
        elif layer.kind is LayerKind.TDNN_AFFINE:
            s = _splice(x, layer.splice)
            if collect:
                caches.append({"s": s, "t_in": x.shape[0], "width": x.shape[1]})
            x = s @ entry.weight.T + entry.bias
        elif layer.kind is LayerKind.FACTORIZED_AFFINE:
            s = _splice(x, layer.splice)
            mid = s @ entry.factor_in.T
            if collect:
                caches.append({"s": s, "mid": mid, "t_in": x.shape[0],
                               "width": x.shape[1]})
            x = mid @ entry.factor_out.T + entry.bias
        elif layer.kind is LayerKind.LSTMP:
            x, cache = _lstmp_forward(entry, layer, x, collect)
            caches.append(cache)
        else:  # OUTPUT
            if isinstance(entry, AffineParams):
                logits = x @ entry.weight.T + entry.bias
                if collect:
                    caches.append({"s": x})
            else:
                mid = x @ entry.factor_in.T
                logits = mid @ entry.factor_out.T + entry.bias
                if collect:
                    caches.append({"s": x, "mid": mid})
            x = _log_softmax(logits)
    return x, caches


def forward(params: Params, spec: NetworkSpec, frames: np.ndarray) -> np.ndarray:
    """Per-frame log-probabilities, shape (T - total_context, num_targets)."""
    logp, _ = _forward_all(params, spec, frames, collect=False)
    return logp


def _splice_batch(x: np.ndarray, splice) -> np.ndarray:
    span = splice.offsets[-1] - splice.offsets[0]
    t_out = x.shape[1] - span
    base = [o - splice.offsets[0] for o in splice.offsets]
    return np.concatenate([x[:, d:d + t_out] for d in base], axis=2)


def _affine_batch(x: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    # One flat gemm instead of a loop of per-utterance products.
    batch, t_len, _ = x.shape
    out = x.reshape(batch * t_len, -1) @ weight.T
    if bias is not None:
        out += bias
    return out.reshape(batch, t_len, weight.shape[0])


def _lstmp_forward_batch(entry: LstmpParams, layer: LayerSpec, x: np.ndarray):
    batch, t_len, i_dim = x.shape
    c_dim = layer.cell_dim
    r_dim = layer.rec_proj_dim
    if entry.gate is not None:
        gate_r = entry.gate[:, i_dim:]
        pre = _affine_batch(x, entry.gate[:, :i_dim], entry.gate_bias)
    else:
        gate_r = entry.gate_out @ entry.gate_in[:, i_dim:]
        pre = _affine_batch(_affine_batch(x, entry.gate_in[:, :i_dim]),
                            entry.gate_out, entry.gate_bias)
    proj_eff = entry.proj if entry.proj is not None \
        else entry.proj_out @ entry.proj_in
    p_if = entry.peepholes[None, :2]
    p_o = entry.peepholes[2]

    out = np.empty((batch, t_len, layer.output_dim))
    c = np.zeros((batch, c_dim))
    r = np.zeros((batch, r_dim))
    for t in range(t_len):
        a = pre[:, t] + r @ gate_r.T
        a_if = a[:, :2 * c_dim].reshape(batch, 2, c_dim) + p_if * c[:, None, :]
        gif = _sigmoid(a_if)
        gg = np.tanh(a[:, 2 * c_dim:3 * c_dim])
        c = gif[:, 1] * c + gif[:, 0] * gg
        go = _sigmoid(a[:, 3 * c_dim:] + p_o * c)
        y = (go * np.tanh(c)) @ proj_eff.T
        out[:, t] = y
        r = y[:, :r_dim]
    return out


def forward_batch(params: Params, spec: NetworkSpec, frames: np.ndarray) -> np.ndarray:
    """Inference over a batch of equal-length utterances, shape (B, T, D).

    Identical math to ``forward`` per utterance, arranged as whole-batch
    matrix products so the work is BLAS-bound; used by the latency benchmark.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[2] != spec.feature_dim:
        raise RejectedInputError(
            f"frames must be (batch, T, {spec.feature_dim}), got {frames.shape}")
    if frames.shape[1] < spec.min_frames():
        raise RejectedInputError(
            f"inputs have {frames.shape[1]} frames but the network needs at "
            f"least {spec.min_frames()}")
    x = frames
    for entry, layer in zip(params, spec.layers):
        if layer.kind is LayerKind.RELU:
            x = np.maximum(x, 0.0)
        elif layer.kind is LayerKind.TDNN_AFFINE:
            x = _affine_batch(_splice_batch(x, layer.splice), entry.weight,
                              entry.bias)
        elif layer.kind is LayerKind.FACTORIZED_AFFINE:
            s = _splice_batch(x, layer.splice)
            x = _affine_batch(_affine_batch(s, entry.factor_in),
                              entry.factor_out, entry.bias)
        elif layer.kind is LayerKind.LSTMP:
            x = _lstmp_forward_batch(entry, layer, x)
        else:  # OUTPUT
            if isinstance(entry, AffineParams):
                logits = _affine_batch(x, entry.weight, entry.bias)
            else:
                logits = _affine_batch(_affine_batch(x, entry.factor_in),
                                       entry.factor_out, entry.bias)
            shifted = logits - logits.max(axis=2, keepdims=True)
            x = shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True))
    return x


def loss_and_gradients(params: Params, spec: NetworkSpec, frames: np.ndarray,
                       targets: np.ndarray):
    """Mean frame cross-entropy and its gradients for one utterance."""
    logp, caches = _forward_all(params, spec, frames)
    t_out = logp.shape[0]
    targets = np.asarray(targets)
    if targets.shape != (t_out,):
        raise RejectedInputError(
            f"targets must have shape ({t_out},) for this input, got {targets.shape}"
        )
    if targets.dtype.kind not in "iu":
        raise RejectedInputError("targets must be integer class indices")
    if targets.min() < 0 or targets.max() >= spec.num_targets:
        raise RejectedInputError(
            f"target index out of range [0, {spec.num_targets})"
        )
    loss = -float(logp[np.arange(t_out), targets].mean())

    grads = zeros_like_params(params)
    d_logits = np.exp(logp)
    d_logits[np.arange(t_out), targets] -= 1.0
    d_logits /= t_out

    dx = None
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        entry = params[idx]
        grad = grads[idx]
        cache = caches[idx]
        if layer.kind is LayerKind.OUTPUT:
            s = cache["s"]
            if isinstance(entry, AffineParams):
                grad.weight += d_logits.T @ s
                grad.bias += d_logits.sum(axis=0)
                dx = d_logits @ entry.weight
            else:
                mid = cache["mid"]
                grad.factor_out += d_logits.T @ mid
                grad.bias += d_logits.sum(axis=0)
                dmid = d_logits @ entry.factor_out
                grad.factor_in += dmid.T @ s
                dx = dmid @ entry.factor_in
        elif layer.kind is LayerKind.RELU:
            dx = dx * cache["mask"]
        elif layer.kind is LayerKind.TDNN_AFFINE:
            grad.weight += dx.T @ cache["s"]
            grad.bias += dx.sum(axis=0)
            ds = dx @ entry.weight
            dx = _unsplice(ds, layer.splice, cache["t_in"], cache["width"])
        elif layer.kind is LayerKind.FACTORIZED_AFFINE:
            grad.factor_out += dx.T @ cache["mid"]
            grad.bias += dx.sum(axis=0)
            dmid = dx @ entry.factor_out
            grad.factor_in += dmid.T @ cache["s"]
            ds = dmid @ entry.factor_in
            dx = _unsplice(ds, layer.splice, cache["t_in"], cache["width"])
        else:  # LSTMP
            dx = _lstmp_backward(entry, grad, layer, cache, dx)
    return loss, grads


def backward(params: Params, spec: NetworkSpec, frames: np.ndarray,
             targets: np.ndarray) -> Params:
    """Gradients of the mean frame cross-entropy, shaped like ``params``."""
    _, grads = loss_and_gradients(params, spec, frames, targets)
    return grads


def frame_accuracy(params: Params, spec: NetworkSpec, pairs) -> float:
    """Fraction of frames whose argmax matches the (context-trimmed) label."""
    left, right = spec.context()
    correct = 0
    total = 0
    for frames, labels in pairs:
        logp = forward(params, spec, frames)
        ref = labels[left:len(labels) - right] if right else labels[left:]
        correct += int((logp.argmax(axis=1) == ref).sum())
        total += logp.shape[0]
    return correct / total if total else 0.0


@dataclass
class Model:
    """A spec, its trained parameters, and provenance metadata."""

    spec: NetworkSpec
    params: Params
    seed: int = 0
    metadata: dict = field(default_factory=dict)


def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode_array(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return arr.reshape(blob["shape"])


def model_to_dict(model: Model) -> dict:
    layers = []
    for entry in model.params:
        if entry is None:
            layers.append({})
        else:
            layers.append({name: _encode_array(arr) for name, arr in entry.arrays()})
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "spec": spec_to_dict(model.spec),
        "layers": layers,
        "seed": model.seed,
        "training_metadata": model.metadata,
    }


def model_from_dict(data: dict) -> Model:
    if data.get("format_version") != MODEL_FORMAT_VERSION:
        raise RejectedInputError(
            f"unsupported model format_version {data.get('format_version')!r}"
        )
    spec = spec_from_dict(data["spec"])
    params: Params = []
    try:
        layer_blobs = list(data["layers"])
    except (KeyError, TypeError) as exc:
        raise RejectedInputError(f"malformed model file: {exc}") from exc
    for layer, blob in zip(spec.layers, layer_blobs):
        if not blob:
            params.append(None)
            continue
        arrays = {name: _decode_array(b) for name, b in blob.items()}
        try:
            if layer.kind in (LayerKind.TDNN_AFFINE, LayerKind.OUTPUT) and "weight" in arrays:
                params.append(AffineParams(weight=arrays["weight"], bias=arrays["bias"]))
            elif layer.kind in (LayerKind.FACTORIZED_AFFINE, LayerKind.OUTPUT):
                params.append(FactorizedAffineParams(
                    factor_in=arrays["factor_in"], factor_out=arrays["factor_out"],
                    bias=arrays["bias"]))
            elif layer.kind is LayerKind.LSTMP:
                params.append(LstmpParams(
                    gate_bias=arrays["gate_bias"], peepholes=arrays["peepholes"],
                    gate=arrays.get("gate"), gate_in=arrays.get("gate_in"),
                    gate_out=arrays.get("gate_out"), proj=arrays.get("proj"),
                    proj_in=arrays.get("proj_in"), proj_out=arrays.get("proj_out")))
            else:
                raise RejectedInputError("model layer blob does not match spec")
        except KeyError as exc:
            raise RejectedInputError(f"model layer blob missing field {exc}") from exc
    model = Model(spec=spec, params=params, seed=int(data.get("seed", 0)),
                  metadata=dict(data.get("training_metadata", {})))
    validate_params(model.params, model.spec)
    return model


def save_model(model: Model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_model(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
