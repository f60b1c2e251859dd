"""Mask-guided bipartite token merging.

Two implementations of the same rule live here:

* a per-frame reference path over :class:`TokenState` that tracks provenance
  (which original tokens each merged token covers), and
* a batched torch path (:func:`merge_batch`) used inside the backbone.  Every
  frame in a batch merges the same number of tokens so the batch stays dense.

Matching rule: tokens at even positions form set A, odd positions set B.
Each A token picks its most cosine-similar B token; protected (person) tokens
score ``-inf`` on both sides.  Candidate pairs are visited in descending
score order (ties: lower A index first) and a pair is kept only if its B
token is still free, until ``n`` pairs are collected.  ``-inf`` pairs are
never returned.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .pose import MaskGrid

_EPS = 1e-12


@dataclass(frozen=True)
class MergeSchedule:
    """Merge ``per_layer`` tokens in each of the first ``layers`` layers, never
    going below ``floor`` tokens."""

    layers: int = 3
    per_layer: int = 40
    floor: int = 90
    use_mask: bool = True
    similarity: str = "features"  # or "keys"
    mode: str = "mean"  # or "weighted"
    protect_corners: bool = False

    def __post_init__(self):
        if self.layers < 0 or self.per_layer < 1 or self.floor < 1:
            raise ValueError(f"invalid merge schedule {self}")
        if self.similarity not in ("features", "keys"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.mode not in ("mean", "weighted"):
            raise ValueError(f"unknown averaging mode {self.mode!r}")


def plan_schedule(n_tokens: int, schedule: MergeSchedule) -> list[int]:
    """Tokens merged at each of the first ``schedule.layers`` layers."""
    if n_tokens < schedule.floor:
        raise ValueError(f"{n_tokens} tokens is below the retention floor {schedule.floor}")
    counts, remaining = [], n_tokens
    for _ in range(schedule.layers):
        k = min(schedule.per_layer, remaining - schedule.floor)
        counts.append(k)
        remaining -= k
    return counts


def terminal_count(n_tokens: int, schedule: MergeSchedule) -> int:
    return n_tokens - sum(plan_schedule(n_tokens, schedule))


# ---------------------------------------------------------------------------
# per-frame reference path


@dataclass
class TokenState:
    features: np.ndarray  # (n, d)
    person_mask: np.ndarray  # (n,) bool
    sizes: np.ndarray  # (n,) int
    provenance: list[frozenset]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.person_mask = np.asarray(self.person_mask, dtype=bool)
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        n = len(self.features)
        if not (len(self.person_mask) == len(self.sizes) == len(self.provenance) == n):
            raise ValueError("token fields disagree on the token count")

    @classmethod
    def initial(cls, features: np.ndarray, person_mask: np.ndarray | None = None) -> "TokenState":
        n = len(features)
        mask = np.zeros(n, bool) if person_mask is None else person_mask
        return cls(features, mask, np.ones(n, np.int64), [frozenset([i]) for i in range(n)])

    def __len__(self) -> int:
        return len(self.features)

    def check_invariants(self, n_original: int) -> None:
        if any(s != len(p) for s, p in zip(self.sizes, self.provenance)):
            raise AssertionError("size differs from provenance cardinality")
        seen: set[int] = set()
        for p in self.provenance:
            if seen & p:
                raise AssertionError("provenance sets overlap")
            seen |= p
        if seen != set(range(n_original)):
            raise AssertionError("provenance does not cover the original tokens")
        if np.any(self.sizes[self.person_mask] != 1):
            raise AssertionError("a person token has been merged")


def tokenize_mask(mask: MaskGrid, threshold: float = 0.0, grid: tuple[int, int] | None = None
                  ) -> np.ndarray:
    """Person bit per patch token: masked-pixel fraction strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    gh, gw = mask.grid
    if grid is not None and tuple(grid) != (gh, gw):
        raise ValueError(f"mask tiles into {gh}x{gw} patches, expected {grid}")
    p = mask.patch
    frac = mask.pixels.reshape(gh, p, gw, p).mean(axis=(1, 3))
    return (frac > threshold).ravel()


def corner_ids(grid: int) -> np.ndarray:
    return np.array([0, grid - 1, grid * (grid - 1), grid * grid - 1])


def _cosine(metric: np.ndarray) -> np.ndarray:
    return metric / np.maximum(np.linalg.norm(metric, axis=1, keepdims=True), _EPS)


def bipartite_match(tokens: TokenState, n: int, metric: np.ndarray | None = None,
                    protected: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Up to ``n`` disjoint (a, b) background pairs, best score first.

    Indices refer to positions in ``tokens``.  ``metric`` overrides the rows
    used for similarity (e.g. attention keys); ``protected`` overrides the
    person mask as the set of tokens excluded from merging.
    """
    count = len(tokens)
    if count % 2:
        raise ValueError(f"bipartite matching needs an even token count, got {count}")
    if n < 0:
        raise ValueError("n must be >= 0")
    rows = _cosine(tokens.features if metric is None else np.asarray(metric, dtype=np.float64))
    prot = tokens.person_mask if protected is None else np.asarray(protected, bool)
    a_idx, b_idx = np.arange(0, count, 2), np.arange(1, count, 2)
    scores = rows[a_idx] @ rows[b_idx].T
    scores[prot[a_idx], :] = -np.inf
    scores[:, prot[b_idx]] = -np.inf
    best_b = np.argmax(scores, axis=1)  # first maximum: lower B index on ties
    best = scores[np.arange(len(a_idx)), best_b]
    order = np.lexsort((np.arange(len(a_idx)), -best))
    pairs, used = [], set()
    for ai in order:
        if len(pairs) == n or best[ai] == -np.inf:
            break
        if best_b[ai] in used:
            continue
        used.add(best_b[ai])
        pairs.append((int(a_idx[ai]), int(b_idx[best_b[ai]])))
    return pairs


def merge_pairs(tokens: TokenState, pairs: Sequence[tuple[int, int]], mode: str = "mean"
                ) -> TokenState:
    """Collapse each pair into one token stored at the B position."""
    flat = [i for p in pairs for i in p]
    if len(set(flat)) != len(flat):
        raise ValueError("merge pairs must be disjoint")
    if any(tokens.person_mask[i] for i in flat):
        raise ValueError("merge pair touches a person token")
    if mode not in ("mean", "weighted"):
        raise ValueError(f"unknown averaging mode {mode!r}")
    feats = tokens.features.copy()
    sizes = tokens.sizes.copy()
    prov = list(tokens.provenance)
    drop = np.zeros(len(tokens), bool)
    for a, b in pairs:
        if mode == "mean":
            feats[b] = (feats[a] + feats[b]) / 2.0
        else:
            feats[b] = (sizes[a] * feats[a] + sizes[b] * feats[b]) / (sizes[a] + sizes[b])
        sizes[b] += sizes[a]
        prov[b] = prov[a] | prov[b]
        drop[a] = True
    keep = ~drop
    return TokenState(feats[keep], tokens.person_mask[keep], sizes[keep],
                      [p for p, k in zip(prov, keep) if k])


@dataclass
class MergeTrace:
    """Token counts and pair lists for one frame.

    ``pairs[layer]`` holds one pair list per matching round of that layer;
    positions refer to the token order at the start of the round.
    """

    counts: list[int] = field(default_factory=list)
    pairs: list[list[list[tuple[int, int]]]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"counts": self.counts,
                           "pairs": [[[list(p) for p in rnd] for rnd in layer] for layer in self.pairs]},
                          indent=1)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def run_schedule(tokens: TokenState, schedule: MergeSchedule, grid: int | None = None
                 ) -> tuple[TokenState, MergeTrace]:
    """Apply the merge schedule to bare tokens (features as the metric).

    One matching round keeps only each A token's best partner, so it can
    return fewer pairs than requested.  A layer therefore re-matches the
    remaining tokens until its quota is met or no valid pair is left.
    """
    trace = MergeTrace(counts=[len(tokens)])
    n0 = len(tokens)
    protected_ids = set(corner_ids(grid).tolist()) if (schedule.protect_corners and grid) else set()
    for _ in range(schedule.layers):
        want = min(schedule.per_layer, len(tokens) - schedule.floor)
        rounds = []
        while want > 0:
            prot = tokens.person_mask if schedule.use_mask else np.zeros(len(tokens), bool)
            if protected_ids:
                prot = prot | np.array([bool(p & protected_ids) for p in tokens.provenance])
            m = len(tokens) - len(tokens) % 2  # odd count: last token sits out this round
            sub = TokenState(tokens.features[:m], tokens.person_mask[:m], tokens.sizes[:m],
                             tokens.provenance[:m])
            pairs = bipartite_match(sub, want, protected=prot[:m])
            if not pairs:
                break
            if not schedule.use_mask:
                # mask ignored for matching; person bits then only record provenance
                tokens = TokenState(tokens.features, np.zeros(len(tokens), bool), tokens.sizes,
                                    tokens.provenance)
            tokens = merge_pairs(tokens, pairs, schedule.mode)
            rounds.append(pairs)
            want -= len(pairs)
        trace.pairs.append(rounds)
        trace.counts.append(len(tokens))
    assert sum(tokens.sizes) == n0
    return tokens, trace


# ---------------------------------------------------------------------------
# batched torch path


def match_batch(metric: torch.Tensor, protected: torch.Tensor, n: int
                ) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorised form of :func:`bipartite_match` for a (B, N, C) batch.

    Returns (a_pos, b_pos), each (B, n_eff), as positions in the full token
    axis, where ``n_eff = min(n, fewest valid pairs in any frame)``.
    """
    bsz, count, _ = metric.shape
    if count % 2:
        raise ValueError(f"bipartite matching needs an even token count, got {count}")
    rows = metric / metric.norm(dim=-1, keepdim=True).clamp_min(_EPS)
    a, b = rows[:, 0::2], rows[:, 1::2]
    scores = a @ b.transpose(1, 2)
    neg = torch.tensor(-torch.inf, dtype=scores.dtype)
    scores = torch.where(protected[:, 0::2, None] | protected[:, None, 1::2], neg, scores)
    half = scores.shape[-1]
    best, _ = scores.max(dim=-1)
    cand = torch.arange(half).expand_as(scores)
    best_b = torch.where(scores == best[..., None], cand, half).min(dim=-1).values
    best_b = best_b.clamp_max(half - 1)
    order = torch.sort(best, dim=-1, descending=True, stable=True).indices
    rank = torch.empty_like(order)
    rank.scatter_(1, order, torch.arange(half).expand_as(order))
    first = torch.full_like(rank, half).scatter_reduce(1, best_b, rank, reduce="amin")
    valid = (rank == first.gather(1, best_b)) & torch.isfinite(best)
    valid_sorted = valid.gather(1, order)
    n_eff = int(min(n, valid_sorted.sum(dim=1).min().item())) if bsz else 0
    if n_eff <= 0:
        empty = torch.zeros(bsz, 0, dtype=torch.long)
        return empty, empty
    # positions (within sorted order) of the first n_eff valid candidates
    take = torch.sort((~valid_sorted).to(torch.int8), dim=1, stable=True).indices[:, :n_eff]
    a_sel = order.gather(1, take)
    b_sel = best_b.gather(1, a_sel)
    return 2 * a_sel, 2 * b_sel + 1


def merge_batch(x: torch.Tensor, a_pos: torch.Tensor, b_pos: torch.Tensor, carry: Sequence[torch.Tensor],
                sizes: torch.Tensor, mode: str = "mean"):
    """Merge A rows into their B rows; drop the A rows from ``x`` and ``carry``."""
    bsz, count, dim = x.shape
    n = a_pos.shape[1]
    if n == 0:
        return x, list(carry), sizes
    idx = lambda p: p[..., None].expand(bsz, n, dim)
    xa, xb = x.gather(1, idx(a_pos)), x.gather(1, idx(b_pos))
    sa, sb = sizes.gather(1, a_pos), sizes.gather(1, b_pos)
    if mode == "mean":
        merged = (xa + xb) / 2.0
    else:
        wa, wb = sa[..., None].to(x.dtype), sb[..., None].to(x.dtype)
        merged = (wa * xa + wb * xb) / (wa + wb)
    x = x.scatter(1, idx(b_pos), merged)
    sizes = sizes.scatter(1, b_pos, sa + sb)
    keep = torch.ones(bsz, count, dtype=torch.bool).scatter(1, a_pos, False)
    new = count - n
    x = x[keep].view(bsz, new, dim)
    sizes = sizes[keep].view(bsz, new)
    carry = [c[keep].view(bsz, new) for c in carry]
    return x, carry, sizes


def schedule_to_dict(schedule: MergeSchedule) -> dict:
    return asdict(schedule)
