"""Token-passing Viterbi decoding over a symbol HMM graph, with pruning.

The graph is a set of labelled emitting states plus one non-emitting start
state. Decoding keeps one token per state and frame: propagate along arcs,
add the scaled acoustic log-probability of the destination state's symbol,
keep the best incoming arc per state, then prune by beam (score window below
the frame best) and by max-active (top-N survivors, ties to the lowest state
id). The hypothesis is read off the best token at a final state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DecodeFailureError, RejectedInputError
from .nnet.network import Params, forward
from .nnet.spec import NetworkSpec

NO_LABEL = -1  # symbol of the start state / epsilon output on an arc

# Above this many stacked candidate entries, batched decoding resolves
# backpointers frame by frame instead of in one deferred pass.
BATCH_CANDIDATE_BUDGET = 20_000_000


@dataclass(frozen=True)
class Arc:
    src: int
    dst: int
    log_prob: float
    olabel: int = NO_LABEL  # segment symbol emitted when this arc is taken


@dataclass
class DecodeGraph:
    """Labelled state graph with a designated non-emitting start state."""

    symbols: np.ndarray        # per-state symbol id; NO_LABEL only for start
    arcs: list[Arc]
    start: int
    finals: frozenset[int]

    # Arc arrays sorted by (dst, src) for deterministic vectorized relaxation.
    _src: np.ndarray = field(init=False, repr=False)
    _dst: np.ndarray = field(init=False, repr=False)
    _logp: np.ndarray = field(init=False, repr=False)
    _olabel: np.ndarray = field(init=False, repr=False)
    _group_starts: np.ndarray = field(init=False, repr=False)
    _group_dsts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int32)
        self.finals = frozenset(int(s) for s in self.finals)
        n = self.num_states
        if not 0 <= self.start < n:
            raise RejectedInputError("start state out of range")
        if self.symbols[self.start] != NO_LABEL:
            raise RejectedInputError("start state must be non-emitting (symbol -1)")
        emitting = np.delete(np.arange(n), self.start)
        if np.any(self.symbols[emitting] < 0):
            raise RejectedInputError("every non-start state needs a symbol label")
        if not self.finals or not all(0 <= s < n and s != self.start for s in self.finals):
            raise RejectedInputError("finals must be non-empty, valid, and not the start")
        if not self.arcs:
            raise RejectedInputError("graph has no arcs")

        outgoing: dict[int, float] = {}
        for arc in self.arcs:
            if not (0 <= arc.src < n and 0 <= arc.dst < n):
                raise RejectedInputError(f"arc {arc} references unknown state")
            if arc.dst == self.start:
                raise RejectedInputError("arcs into the start state are not allowed")
            if arc.log_prob > 1e-9:
                raise RejectedInputError(f"arc log_prob must be <= 0, got {arc.log_prob}")
            outgoing.setdefault(arc.src, 0.0)
            outgoing[arc.src] += np.exp(arc.log_prob)
        for state, mass in outgoing.items():
            if np.log(mass) > 1e-9:
                raise RejectedInputError(
                    f"state {state} outgoing probabilities sum to {mass:.6f} > 1")

        # Reachability from start.
        succ: dict[int, list[int]] = {}
        for arc in self.arcs:
            succ.setdefault(arc.src, []).append(arc.dst)
        seen = {self.start}
        frontier = [self.start]
        while frontier:
            state = frontier.pop()
            for nxt in succ.get(state, ()):
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        if len(seen) != n:
            missing = sorted(set(range(n)) - seen)
            raise RejectedInputError(f"states unreachable from start: {missing[:8]}")

        order = sorted(range(len(self.arcs)),
                       key=lambda i: (self.arcs[i].dst, self.arcs[i].src))
        self._src = np.asarray([self.arcs[i].src for i in order], dtype=np.int64)
        self._dst = np.asarray([self.arcs[i].dst for i in order], dtype=np.int64)
        self._logp = np.asarray([self.arcs[i].log_prob for i in order], dtype=np.float64)
        self._olabel = np.asarray([self.arcs[i].olabel for i in order], dtype=np.int32)
        boundaries = np.flatnonzero(np.diff(self._dst)) + 1
        self._group_starts = np.concatenate([[0], boundaries])
        self._group_dsts = self._dst[self._group_starts]

    @property
    def num_states(self) -> int:
        return int(self.symbols.shape[0])


def build_symbol_graph(num_symbols: int, states_per_symbol: int = 3,
                       self_loop_prob: float = 0.5,
                       transition: np.ndarray | None = None,
                       history_depth: int = 0,
                       finals: str = "all") -> DecodeGraph:
    """Left-to-right HMM chain per symbol, closed over a symbol loop.

    ``transition`` weights the symbol-to-symbol hops (uniform when omitted).
    ``history_depth`` keys each chain by that many preceding symbols, which
    multiplies the state count without changing the best path's score; it
    exists to give the pruning knobs a realistically large search space.
    ``finals`` is ``"all"`` (any chain state may end the utterance, matching
    data whose last segment is truncated) or ``"exit"`` (the last segment
    must complete its chain).
    """
    if num_symbols < 1 or states_per_symbol < 1:
        raise RejectedInputError("num_symbols and states_per_symbol must be positive")
    if not 0.0 < self_loop_prob < 1.0:
        raise RejectedInputError("self_loop_prob must be in (0, 1)")
    if history_depth < 0:
        raise RejectedInputError("history_depth must be >= 0")
    if finals not in ("all", "exit"):
        raise RejectedInputError("finals must be 'all' or 'exit'")
    if transition is None:
        transition = np.full((num_symbols, num_symbols), 1.0 / num_symbols)
    transition = np.asarray(transition, dtype=np.float64)
    if transition.shape != (num_symbols, num_symbols) or np.any(transition < 0):
        raise RejectedInputError("transition must be non-negative and square over symbols")
    rows = transition.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-9):
        raise RejectedInputError("transition rows must sum to 1")

    loop = np.log(self_loop_prob)
    advance = np.log1p(-self_loop_prob)

    symbols: list[int] = [NO_LABEL]  # state 0 is the start
    state_ids: dict[tuple, int] = {}

    def state_for(history: tuple, symbol: int, pos: int) -> int:
        key = (history, symbol, pos)
        if key not in state_ids:
            state_ids[key] = len(symbols)
            symbols.append(symbol)
        return state_ids[key]

    def extend(history: tuple, symbol: int) -> tuple:
        if history_depth == 0:
            return ()
        return (history + (symbol,))[-history_depth:]

    arcs: list[Arc] = []
    initial = np.full(num_symbols, 1.0 / num_symbols)
    empty: tuple = ()
    pending = []
    for s in range(num_symbols):
        entry = state_for(empty, s, 0)
        arcs.append(Arc(0, entry, float(np.log(initial[s])), olabel=s))
        pending.append((empty, s))

    built = set()
    while pending:
        history, s = pending.pop()
        if (history, s) in built:
            continue
        built.add((history, s))
        for pos in range(states_per_symbol):
            state = state_for(history, s, pos)
            arcs.append(Arc(state, state, float(loop)))
            if pos + 1 < states_per_symbol:
                arcs.append(Arc(state, state_for(history, s, pos + 1), float(advance)))
        exit_state = state_for(history, s, states_per_symbol - 1)
        next_history = extend(history, s)
        for s2 in range(num_symbols):
            if transition[s, s2] <= 0.0:
                continue
            entry = state_for(next_history, s2, 0)
            arcs.append(Arc(exit_state, entry,
                            float(advance + np.log(transition[s, s2])), olabel=s2))
            if (next_history, s2) not in built:
                pending.append((next_history, s2))

    if finals == "exit":
        final_states = frozenset(
            state_ids[(h, s, states_per_symbol - 1)] for (h, s) in built)
    else:
        final_states = frozenset(range(1, len(symbols)))
    return DecodeGraph(symbols=np.asarray(symbols, dtype=np.int32), arcs=arcs,
                       start=0, finals=final_states)


@dataclass(frozen=True)
class DecodeConfig:
    beam: float = float("inf")
    max_active: int = 1_000_000
    acoustic_scale: float = 0.1

    def __post_init__(self):
        if not self.beam > 0:
            raise RejectedInputError("beam must be positive (inf disables it)")
        if self.max_active < 1:
            raise RejectedInputError("max_active must be positive")
        if not self.acoustic_scale > 0:
            raise RejectedInputError("acoustic_scale must be positive")


@dataclass
class DecodeResult:
    symbols: np.ndarray          # per-frame symbol of the best state path
    segment_symbols: np.ndarray  # arc output labels along the best path
    log_score: float
    frames: int
    tokens_expanded: int
    wall_seconds: float


def decode_scores(graph: DecodeGraph, log_probs: np.ndarray,
                  config: DecodeConfig) -> DecodeResult:
    """Viterbi search over precomputed per-frame log-probabilities."""
    started = time.perf_counter()
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 2:
        raise RejectedInputError("log_probs must be (frames, num_symbols)")
    t_total = log_probs.shape[0]
    if t_total < 1:
        raise RejectedInputError("no frames to decode")
    if int(graph.symbols.max()) >= log_probs.shape[1]:
        raise RejectedInputError(
            f"graph symbols exceed acoustic columns {log_probs.shape[1]}")

    num_states = graph.num_states
    scaled = config.acoustic_scale * log_probs
    arc_acoustic = scaled[:, graph.symbols[graph._dst]]  # (T, num_arcs)

    scores = np.full(num_states, -np.inf)
    scores[graph.start] = 0.0
    bp_states = np.empty((t_total, num_states), dtype=np.int64)
    bp_olabels = np.empty((t_total, num_states), dtype=np.int32)
    tokens_expanded = 0
    arange_arcs = np.arange(graph._src.shape[0], dtype=np.int64)
    group_of_arc = np.searchsorted(graph._group_starts, arange_arcs, side="right") - 1

    for t in range(t_total):
        cand = scores[graph._src] + graph._logp + arc_acoustic[t]
        group_max = np.maximum.reduceat(cand, graph._group_starts)
        # First arc achieving the group max; arcs are sorted by (dst, src), so
        # ties resolve to the lowest predecessor state id.
        winner_pos = np.where(cand == group_max[group_of_arc],
                              arange_arcs, np.iinfo(np.int64).max)
        first_winner = np.minimum.reduceat(winner_pos, graph._group_starts)

        new_scores = np.full(num_states, -np.inf)
        new_scores[graph._group_dsts] = group_max
        bp = np.full(num_states, -1, dtype=np.int64)
        ol = np.full(num_states, NO_LABEL, dtype=np.int32)
        valid = np.isfinite(group_max)
        win = first_winner[valid]
        bp[graph._group_dsts[valid]] = graph._src[win]
        ol[graph._group_dsts[valid]] = graph._olabel[win]

        best = new_scores.max()
        if not np.isfinite(best):
            raise DecodeFailureError(
                f"no token survived at frame {t}", frame_index=t)
        if np.isfinite(config.beam):
            new_scores[new_scores < best - config.beam] = -np.inf
        alive = np.flatnonzero(np.isfinite(new_scores))
        if alive.shape[0] > config.max_active:
            order = np.lexsort((alive, -new_scores[alive]))
            drop = alive[order[config.max_active:]]
            new_scores[drop] = -np.inf
            alive = alive[order[:config.max_active]]
        if alive.shape[0] == 0:
            raise DecodeFailureError(
                f"no token survived pruning at frame {t}", frame_index=t)
        tokens_expanded += int(alive.shape[0])
        bp_states[t] = bp
        bp_olabels[t] = ol
        scores = new_scores

    final_states = np.asarray(sorted(graph.finals), dtype=np.int64)
    final_scores = scores[final_states]
    if not np.isfinite(final_scores).any():
        raise DecodeFailureError(
            f"no token reached a final state at frame {t_total - 1}",
            frame_index=t_total - 1)
    best_state = int(final_states[int(np.argmax(final_scores))])
    log_score = float(scores[best_state])

    path = np.empty(t_total, dtype=np.int64)
    olabels = np.empty(t_total, dtype=np.int32)
    state = best_state
    for t in range(t_total - 1, -1, -1):
        path[t] = state
        olabels[t] = bp_olabels[t, state]
        state = int(bp_states[t, state])

    segment_symbols = olabels[olabels != NO_LABEL].astype(np.int32)
    return DecodeResult(
        symbols=graph.symbols[path].copy(),
        segment_symbols=segment_symbols,
        log_score=log_score,
        frames=t_total,
        tokens_expanded=tokens_expanded,
        wall_seconds=time.perf_counter() - started,
    )


def decode(params: Params, spec: NetworkSpec, graph: DecodeGraph,
           frames: np.ndarray, config: DecodeConfig) -> DecodeResult:
    """Forward the network then Viterbi-decode its log-probabilities."""
    started = time.perf_counter()
    log_probs = forward(params, spec, frames)
    result = decode_scores(graph, log_probs, config)
    result.wall_seconds = time.perf_counter() - started
    return result


def decode_scores_batch(graph: DecodeGraph, log_probs: np.ndarray,
                        config: DecodeConfig) -> list[DecodeResult]:
    """Viterbi search over a batch of equal-length score matrices.

    Same arithmetic as per-utterance ``decode_scores`` arranged across the
    batch axis, so results match exactly; used by the latency benchmark. A
    starved utterance raises for the whole batch.
    """
    started = time.perf_counter()
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 3:
        raise RejectedInputError("log_probs must be (batch, frames, num_symbols)")
    batch, t_total, _ = log_probs.shape
    if batch < 1 or t_total < 1:
        raise RejectedInputError("nothing to decode")
    if int(graph.symbols.max()) >= log_probs.shape[2]:
        raise RejectedInputError(
            f"graph symbols exceed acoustic columns {log_probs.shape[2]}")

    num_states = graph.num_states
    scaled = config.acoustic_scale * log_probs
    arc_acoustic = scaled[:, :, graph.symbols[graph._dst]]  # (B, T, A)
    num_arcs = graph._src.shape[0]
    arange_arcs = np.arange(num_arcs, dtype=np.int64)
    group_of_arc = np.searchsorted(graph._group_starts, arange_arcs, side="right") - 1
    rows = np.arange(batch)

    scores = np.full((batch, num_states), -np.inf)
    scores[:, graph.start] = 0.0
    tokens_expanded = np.zeros(batch, dtype=np.int64)
    prune_active = np.isfinite(config.beam) or config.max_active < num_states
    sentinel = np.iinfo(np.int64).max
    # When the candidate stack fits comfortably in memory, defer backpointer
    # identification to one vectorized pass after the recursion; otherwise
    # resolve winners frame by frame.
    defer_winners = t_total * batch * num_arcs <= BATCH_CANDIDATE_BUDGET
    if defer_winners:
        cand_all = np.empty((t_total, batch, num_arcs))
    else:
        bp_states = np.full((t_total, batch, num_states), -1, dtype=np.int64)
        bp_olabels = np.full((t_total, batch, num_states), NO_LABEL,
                             dtype=np.int32)
    kept_all = np.empty((t_total, batch, num_states))

    for t in range(t_total):
        cand = scores[:, graph._src] + graph._logp + arc_acoustic[:, t]
        group_max = np.maximum.reduceat(cand, graph._group_starts, axis=1)
        if defer_winners:
            cand_all[t] = cand
        else:
            winner_pos = np.where(cand == group_max[:, group_of_arc],
                                  arange_arcs, sentinel)
            first = np.minimum.reduceat(winner_pos, graph._group_starts, axis=1)
            valid = np.isfinite(group_max)
            safe = np.where(valid, first, 0)
            bp_states[t, :, graph._group_dsts] = \
                np.where(valid, graph._src[safe], -1).T
            bp_olabels[t, :, graph._group_dsts] = \
                np.where(valid, graph._olabel[safe], NO_LABEL).T
        new_scores = np.full((batch, num_states), -np.inf)
        new_scores[:, graph._group_dsts] = group_max

        best = new_scores.max(axis=1)
        if not np.isfinite(best).all():
            dead = int(np.flatnonzero(~np.isfinite(best))[0])
            raise DecodeFailureError(
                f"no token survived at frame {t} (utterance {dead})",
                frame_index=t)
        if prune_active:
            if np.isfinite(config.beam):
                new_scores[new_scores < best[:, None] - config.beam] = -np.inf
            alive_counts = np.isfinite(new_scores).sum(axis=1)
            if np.any(alive_counts > config.max_active):
                for b in np.flatnonzero(alive_counts > config.max_active):
                    alive = np.flatnonzero(np.isfinite(new_scores[b]))
                    order = np.lexsort((alive, -new_scores[b, alive]))
                    new_scores[b, alive[order[config.max_active:]]] = -np.inf
        kept_all[t] = new_scores
        scores = new_scores

    tokens_expanded += np.isfinite(kept_all).sum(axis=(0, 2))

    final_states = np.asarray(sorted(graph.finals), dtype=np.int64)
    final_scores = scores[:, final_states]
    finite_final = np.isfinite(final_scores).any(axis=1)
    if not finite_final.all():
        dead = int(np.flatnonzero(~finite_final)[0])
        raise DecodeFailureError(
            f"no token reached a final state at frame {t_total - 1} "
            f"(utterance {dead})", frame_index=t_total - 1)
    best_states = final_states[np.argmax(final_scores, axis=1)]
    log_scores = scores[rows, best_states]

    if defer_winners:
        # Backpointers for every (frame, state) at once: the first arc into
        # each dst group achieving the group max; lowest source wins ties.
        group_max_all = np.maximum.reduceat(cand_all, graph._group_starts, axis=2)
        winner_pos = np.where(cand_all == group_max_all[:, :, group_of_arc],
                              arange_arcs, sentinel)
        first_winner = np.minimum.reduceat(winner_pos, graph._group_starts, axis=2)
        valid = np.isfinite(group_max_all)
        safe = np.where(valid, first_winner, 0)
        bp_states = np.full((t_total, batch, num_states), -1, dtype=np.int64)
        bp_olabels = np.full((t_total, batch, num_states), NO_LABEL,
                             dtype=np.int32)
        bp_states[:, :, graph._group_dsts] = np.where(valid, graph._src[safe], -1)
        bp_olabels[:, :, graph._group_dsts] = np.where(valid, graph._olabel[safe],
                                                       NO_LABEL)

    paths = np.empty((batch, t_total), dtype=np.int64)
    olabels = np.empty((batch, t_total), dtype=np.int32)
    state = best_states.copy()
    for t in range(t_total - 1, -1, -1):
        paths[:, t] = state
        olabels[:, t] = bp_olabels[t, rows, state]
        state = bp_states[t, rows, state]

    elapsed = (time.perf_counter() - started) / batch
    results = []
    for b in range(batch):
        row_olabels = olabels[b]
        results.append(DecodeResult(
            symbols=graph.symbols[paths[b]].copy(),
            segment_symbols=row_olabels[row_olabels != NO_LABEL].astype(np.int32),
            log_score=float(log_scores[b]),
            frames=t_total,
            tokens_expanded=int(tokens_expanded[b]),
            wall_seconds=elapsed,
        ))
    return results


def token_error_rate(hypothesis, reference) -> float:
    """Levenshtein distance over symbols divided by the reference length."""
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref:
        raise RejectedInputError("reference must be non-empty")
    previous = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        current = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cost = 0 if r == h else 1
            current[j] = min(previous[j] + 1,        # deletion
                             current[j - 1] + 1,     # insertion
                             previous[j - 1] + cost)  # substitution / match
        previous = current
    return previous[-1] / len(ref)


def collapse_labels(labels: np.ndarray) -> np.ndarray:
    """Consecutive-duplicate collapse of a per-frame label sequence."""
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        return labels
    keep = np.ones(labels.shape[0], dtype=bool)
    keep[1:] = labels[1:] != labels[:-1]
    return labels[keep]


@dataclass
class SweepRow:
    beam: float
    max_active: int
    acoustic_scale: float
    utterances: int
    failures: int
    mean_token_error_rate: float
    mean_rtf: float
    mean_tokens_expanded: float


SWEEP_COLUMNS = ("beam", "max_active", "acoustic_scale", "utterances", "failures",
                 "mean_token_error_rate", "mean_rtf", "mean_tokens_expanded")


def sweep(params: Params, spec: NetworkSpec, graph: DecodeGraph, dataset,
          max_active_values, beam_values, acoustic_scale: float = 0.1,
          frame_period: float = 0.01) -> list[SweepRow]:
    """Decode the dataset under every (beam, max_active) combination.

    The reference for the error rate is the duplicate-collapsed context-trimmed
    frame labels; decode failures are recorded per row, not raised.
    """
    max_active_values = list(max_active_values)
    beam_values = list(beam_values)
    if not max_active_values or not beam_values:
        raise RejectedInputError("sweep needs at least one beam and one max_active")
    if not dataset.sequences:
        raise RejectedInputError("sweep dataset is empty")

    left, right = spec.context()
    rows = []
    for beam in beam_values:
        for max_active in max_active_values:
            config = DecodeConfig(beam=beam, max_active=max_active,
                                  acoustic_scale=acoustic_scale)
            ters = []
            rtfs = []
            tokens = []
            failures = 0
            for seq in dataset.sequences:
                audio_seconds = seq.frames.shape[0] * frame_period
                try:
                    result = decode(params, spec, graph, seq.frames, config)
                except DecodeFailureError:
                    failures += 1
                    continue
                trimmed = seq.labels[left:len(seq.labels) - right] if right \
                    else seq.labels[left:]
                reference = collapse_labels(trimmed)
                ters.append(token_error_rate(result.segment_symbols, reference))
                rtfs.append(result.wall_seconds / audio_seconds)
                tokens.append(result.tokens_expanded)
            rows.append(SweepRow(
                beam=beam, max_active=max_active, acoustic_scale=acoustic_scale,
                utterances=len(dataset.sequences), failures=failures,
                mean_token_error_rate=float(np.mean(ters)) if ters else float("nan"),
                mean_rtf=float(np.mean(rtfs)) if rtfs else float("nan"),
                mean_tokens_expanded=float(np.mean(tokens)) if tokens else float("nan"),
            ))
    return rows


def sweep_table(rows: list[SweepRow]) -> str:
    """Tab-separated sweep table with a stable column order."""
    lines = ["\t".join(SWEEP_COLUMNS)]
    for row in rows:
        lines.append("\t".join([
            f"{row.beam:g}", str(row.max_active), f"{row.acoustic_scale:g}",
            str(row.utterances), str(row.failures),
            f"{row.mean_token_error_rate:.6f}", f"{row.mean_rtf:.6f}",
            f"{row.mean_tokens_expanded:.2f}",
        ]))
    return "\n".join(lines)


def parse_sweep_table(text: str) -> list[SweepRow]:
    """Parse a table produced by ``sweep_table`` back into rows."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or tuple(lines[0].split("\t")) != SWEEP_COLUMNS:
        raise RejectedInputError("not a sweep table: bad header")
    rows = []
    for line in lines[1:]:
        cells = line.split("\t")
        if len(cells) != len(SWEEP_COLUMNS):
            raise RejectedInputError(f"malformed sweep row: {line!r}")
        rows.append(SweepRow(
            beam=float(cells[0]), max_active=int(cells[1]),
            acoustic_scale=float(cells[2]), utterances=int(cells[3]),
            failures=int(cells[4]), mean_token_error_rate=float(cells[5]),
            mean_rtf=float(cells[6]), mean_tokens_expanded=float(cells[7]),
        ))
    return rows
