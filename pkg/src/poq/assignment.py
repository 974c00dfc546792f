"""Set-prediction targets: Hungarian matching, exhaustive and aligned losses, decoding.

A LogitsGrid is an (O, c+1) array of raw scores; column ``c`` is the empty
token.  An assignment is an integer vector of length O giving each query's
target column.
"""
from __future__ import annotations

from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, log_softmax, mul, sum_
from .errors import ConfigError, InfeasibleAssignment


def hungarian(cost) -> Tuple[np.ndarray, np.ndarray]:
    """Minimum-cost matching of every target (column) to a distinct query (row).

    Returns ``(query_idx, target_idx)`` sorted by target.  With fewer rows
    than columns, zero-cost dummy rows are added and targets that land on a
    dummy are left out of the result.  Shortest-augmenting-path form with
    dual potentials, O(n^2 m).
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    n_q, n_t = c.shape
    if n_t == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    if n_q < n_t:
        c = np.vstack([c, np.zeros((n_t - n_q, n_t))])
    a = c.T  # rows: targets (n), columns: queries (m >= n)
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: target row (1-based) matched to query column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = sorted((p[j] - 1, j - 1) for j in range(1, m + 1) if p[j] and j - 1 < n_q)
    targets = np.array([t for t, _ in pairs], dtype=int)
    queries = np.array([q for _, q in pairs], dtype=int)
    return queries, targets


def _check_labels(labels: Iterable[int], num_classes: int) -> List[int]:
    out = sorted(set(int(i) for i in labels))
    for i in out:
        if not 0 <= i < num_classes:
            raise ValueError(f"label {i} outside 0..{num_classes - 1}")
    return out


def _class_weights(labels: Sequence[int], weights, num_classes: int) -> np.ndarray:
    w = np.zeros(num_classes)
    if weights is None:
        w[list(labels)] = 1.0
    else:
        w[:] = np.asarray(weights, dtype=np.float64)
    return w


def _query_loss(logp: np.ndarray, cls: np.ndarray, w: np.ndarray, empty: int) -> np.ndarray:
    """Per-query cross entropy for target ``cls`` (soft weight w[cls], rest on empty)."""
    out = -logp[np.arange(len(cls)), empty].copy()
    hit = cls != empty
    if hit.any():
        j = np.nonzero(hit)[0]
        k = cls[hit]
        out[hit] = -(w[k] * logp[j, k] + (1.0 - w[k]) * logp[j, empty])
    return out


def align_targets(
    logits,
    labels: Iterable[int],
    weights: Optional[np.ndarray] = None,
    relax: bool = False,
) -> np.ndarray:
    """Assign each query a target class in ``labels`` or the empty token.

    1. A query whose argmax class is in ``labels`` keeps that class, so a
       class may be assigned to several queries.
    2. Every other query starts at its cheapest target in ``labels`` or
       empty (empty on ties).  Labels not yet covered are then matched to
       those queries with ``hungarian``; the cost of giving label i to query
       j is the rise over its cheapest target.  The total is the minimum
       loss over all assignments that satisfy the constraints.

    If there are fewer free queries than uncovered labels, ``relax=False``
    raises ``InfeasibleAssignment``.  With ``relax=True`` only the most
    confident query is kept per stage-1 class and the others become free
    too.

    ``weights`` is an optional length-c soft target vector (mixup); a query
    given class i then targets i with weight w_i and empty with 1 - w_i.
    """
    x = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    n_q, n_cols = x.shape
    c = n_cols - 1
    labels = _check_labels(labels, c)
    if len(labels) > n_q:
        raise InfeasibleAssignment(f"{len(labels)} labels but only {n_q} object queries")
    logp = x - x.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    w = _class_weights(labels, weights, c)

    argmax = logp.argmax(axis=1)
    in_labels = np.isin(argmax, labels)
    assign = np.where(in_labels, argmax, c)
    uncovered = [i for i in labels if i not in set(argmax[in_labels].tolist())]

    candidates = list(np.nonzero(~in_labels)[0])
    relaxed = False
    if len(uncovered) > len(candidates):
        if not relax:
            raise InfeasibleAssignment(
                f"{len(uncovered)} uncovered labels but only {len(candidates)} free queries"
            )
        for cls in sorted(set(argmax[in_labels].tolist())):
            holders = np.nonzero(assign == cls)[0]
            keep = holders[np.argmax(logp[holders, cls])]
            candidates.extend(int(j) for j in holders if j != keep)
        candidates.sort()
        relaxed = True
    if not candidates:
        validate_assignment(assign, x, labels)
        return assign

    cand = np.array(candidates, dtype=int)
    # empty first so that ties keep a free query on empty
    options = np.array([c] + labels)
    opt_loss = np.stack([_query_loss(logp[cand], np.full(len(cand), k), w, c) for k in options],
                        axis=1)
    best = opt_loss.argmin(axis=1)
    assign[cand] = options[best]
    if uncovered:
        base = opt_loss[np.arange(len(cand)), best]
        cols_of = {int(k): n for n, k in enumerate(options)}
        cost = np.stack([opt_loss[:, cols_of[i]] - base for i in uncovered], axis=1)
        rows, cols = hungarian(cost)
        assign[cand[rows]] = np.asarray(uncovered)[cols]
    validate_assignment(assign, x, labels, relaxed=relaxed)
    return assign


def validate_assignment(assign: np.ndarray, logits, labels: Iterable[int],
                        relaxed: bool = False) -> None:
    """Raise ``AssertionError`` unless ``assign`` satisfies the matching constraints."""
    x = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    n_q, n_cols = x.shape
    c = n_cols - 1
    labels = set(_check_labels(labels, c))
    assign = np.asarray(assign)
    assert assign.shape == (n_q,), f"assignment covers {assign.shape} queries, expected {n_q}"
    outside = set(assign.tolist()) - labels - {c}
    assert not outside, f"classes outside the label set assigned: {sorted(outside)}"
    missing = labels - set(assign.tolist())
    assert not missing, f"labels not covered: {sorted(missing)}"
    if not relaxed:
        argmax = x.argmax(axis=1)
        for j in range(n_q):
            if argmax[j] in labels:
                assert assign[j] == argmax[j], f"query {j} predicts {argmax[j]} but got {assign[j]}"


def target_matrix(assign: np.ndarray, num_classes: int, weights: Optional[np.ndarray] = None,
                  dtype=np.float64) -> np.ndarray:
    """(O, c+1) distribution each query is trained toward."""
    n_q = len(assign)
    y = np.zeros((n_q, num_classes + 1), dtype=dtype)
    rows = np.arange(n_q)
    hit = assign != num_classes
    if weights is None:
        y[rows, assign] = 1.0
        return y
    w = np.asarray(weights, dtype=dtype)
    y[rows[~hit], num_classes] = 1.0
    y[rows[hit], assign[hit]] = w[assign[hit]]
    y[rows[hit], num_classes] = 1.0 - w[assign[hit]]
    return y


def targets_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """-(1/O) sum_j sum_i y_ji log S_ji, averaged over a leading batch axis if present."""
    logits = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    if targets.shape != logits.shape:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    n_q = logits.shape[-2]
    batch = logits.shape[0] if logits.ndim == 3 else 1
    logp = log_softmax(logits, axis=-1)
    total = sum_(mul(logp, Tensor(targets.astype(logits.dtype, copy=False))))
    return mul(total, -1.0 / (n_q * batch))


def _batched(logits, labels, weights):
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    single = x.ndim == 2
    if single:
        return [labels], None if weights is None else [weights], True
    if len(labels) != x.shape[0]:
        raise ValueError(f"{len(labels)} label sets for a batch of {x.shape[0]}")
    return list(labels), weights, False


def exhaustive_targets(num_queries: int, num_classes: int, labels: Iterable[int],
                       weights: Optional[np.ndarray] = None) -> np.ndarray:
    if num_queries != num_classes:
        raise ConfigError(
            f"exhaustive loss needs one query per class (O == c), got O={num_queries}, c={num_classes}"
        )
    labels = _check_labels(labels, num_classes)
    assign = np.full(num_queries, num_classes)
    assign[labels] = labels
    return target_matrix(assign, num_classes, weights)


def exhaustive_loss(logits, labels, weights=None) -> Tensor:
    """Query j is in charge of class j; absent classes target the empty token.

    ``logits`` is (O, c+1) with one label set, or (B, O, c+1) with B sets.
    """
    label_sets, w_list, single = _batched(logits, labels, weights)
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    n_q, c = x.shape[-2], x.shape[-1] - 1
    ys = [exhaustive_targets(n_q, c, ls, None if w_list is None else w_list[b])
          for b, ls in enumerate(label_sets)]
    y = ys[0] if single else np.stack(ys)
    return targets_loss(logits, y)


def aligned_targets(logits, labels, weights=None, relax: bool = False) -> np.ndarray:
    label_sets, w_list, single = _batched(logits, labels, weights)
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    grids = [x] if single else list(x)
    c = x.shape[-1] - 1
    ys = []
    for b, (grid, ls) in enumerate(zip(grids, label_sets)):
        w = None if w_list is None else w_list[b]
        ys.append(target_matrix(align_targets(grid, ls, w, relax=relax), c, w))
    return ys[0] if single else np.stack(ys)


def aligned_loss(logits, labels, weights=None, relax: bool = False) -> Tensor:
    """Cross entropy under the loss-minimising constrained assignment.

    The assignment is recomputed from the current logits and treated as a
    constant, so gradients flow through the softmax only.
    """
    return targets_loss(logits, aligned_targets(logits, labels, weights, relax=relax))


def _probs(logits) -> np.ndarray:
    x = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def decode_predictions(logits, threshold: float = 0.0):
    """Predicted label set and per-class scores.

    A class is predicted when some query's argmax is that class (the empty
    token is never predicted) and its score reaches ``threshold``.  The
    score of class k is max over queries of S_j[k].  Batched input returns
    a list of sets and a (B, c) score array.
    """
    s = _probs(logits)
    single = s.ndim == 2
    if single:
        s = s[None]
    c = s.shape[-1] - 1
    argmax = s.argmax(axis=-1)
    scores = s[..., :c].max(axis=1)
    sets = []
    for b in range(s.shape[0]):
        picked = {int(k) for k in argmax[b] if k != c}
        sets.append(frozenset(k for k in picked if scores[b, k] >= threshold))
    if single:
        return sets[0], scores[0]
    return sets, scores
