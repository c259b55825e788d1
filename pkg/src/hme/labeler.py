"""Linear-chain CRF with IOB transition constraints.

The log-partition comes from the forward algorithm run in log space with
log-sum-exp; decoding uses Viterbi with lowest-tag-index tie-breaking.
Illegal IOB transitions (to I-x from anything but B-x/I-x, and I-x at the
start) are additively masked to a large negative value so they never appear
in decoded paths.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Linear, neg_large


def iob_transition_masks(labels: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """(transition mask, start mask): 0 where allowed, a large negative
    penalty where the IOB scheme forbids the move."""
    T = len(labels)
    bad = neg_large()
    trans = np.zeros((T, T))
    start = np.zeros(T)
    for c, cur in enumerate(labels):
        if not cur.startswith("I-"):
            continue
        etype = cur[2:]
        start[c] = bad
        for p, prev in enumerate(labels):
            if prev not in (f"B-{etype}", f"I-{etype}"):
                trans[p, c] = bad
    return trans, start


class CrfModel:
    """Emission projection plus tag-pair transition scores.

    ``labels`` fixes tag indices for the whole model; Viterbi ties resolve to
    the lowest index.  ``constrain=False`` drops the IOB mask (useful for
    oracle checks against unconstrained enumeration).
    """

    def __init__(self, labels: list[str], d_model: int, rng: np.random.Generator,
                 constrain: bool = True):
        if not labels:
            raise ValueError("empty label vocabulary")
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate labels")
        self.labels = list(labels)
        self.label_index = {tag: i for i, tag in enumerate(labels)}
        self.constrain = constrain
        T = len(labels)
        self.emit = Linear(d_model, T, rng)
        self.transitions = Tensor(rng.uniform(-0.1, 0.1, (T, T)), requires_grad=True)
        self.start = Tensor(rng.uniform(-0.1, 0.1, (T,)), requires_grad=True)
        self.end = Tensor(rng.uniform(-0.1, 0.1, (T,)), requires_grad=True)
        self._trans_mask, self._start_mask = iob_transition_masks(labels)

    @property
    def num_tags(self) -> int:
        return len(self.labels)

    def emissions(self, h: Tensor) -> Tensor:
        """Per-token tag scores from encoder states (..., d_model)."""
        return self.emit(h)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.emit.parameters(f"{prefix}.emit")
        out[f"{prefix}.transitions"] = self.transitions
        out[f"{prefix}.start"] = self.start
        out[f"{prefix}.end"] = self.end
        return out

    # -- masked views -------------------------------------------------------

    def _effective(self) -> tuple[Tensor, Tensor]:
        if not self.constrain:
            return self.transitions, self.start
        return (ad.add(self.transitions, Tensor(self._trans_mask)),
                ad.add(self.start, Tensor(self._start_mask)))

    def _effective_np(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.constrain:
            return self.transitions.data, self.start.data
        return (self.transitions.data + self._trans_mask,
                self.start.data + self._start_mask)

    def _gold_indices(self, gold) -> list[int]:
        idx = [g if isinstance(g, (int, np.integer)) else self.label_index[g]
               for g in gold]
        if self.constrain:
            if self._start_mask[idx[0]] != 0:
                raise ValueError(f"illegal start tag {self.labels[idx[0]]!r}")
            for a, b in zip(idx, idx[1:]):
                if self._trans_mask[a, b] != 0:
                    raise ValueError(
                        f"illegal transition {self.labels[a]!r} -> {self.labels[b]!r}")
        return idx

    # -- training objective -------------------------------------------------

    def neg_log_likelihood(self, emissions: Tensor, gold) -> Tensor:
        """log Z(emissions) minus the gold path score; non-negative."""
        if emissions.ndim != 2 or emissions.shape[1] != self.num_tags:
            raise ShapeError(f"emissions must be (n, {self.num_tags})")
        n, T = emissions.shape
        if len(gold) != n:
            raise ShapeError("gold length does not match emissions")
        idx = self._gold_indices(gold)
        trans_eff, start_eff = self._effective()

        # forward algorithm in log space
        trans_t = ad.transpose(trans_eff, (1, 0))          # [cur, prev]
        alpha = ad.add(start_eff, emissions[0])
        for i in range(1, n):
            alpha = ad.add(ad.logsumexp(ad.add(trans_t, alpha), axis=-1),
                           emissions[i])
        log_z = ad.logsumexp(ad.add(alpha, self.end), axis=-1)

        # gold path score via indicator sums
        onehot = np.zeros((n, T))
        onehot[np.arange(n), idx] = 1.0
        score = ad.tensor_sum(ad.mul(emissions, Tensor(onehot)))
        if n > 1:
            pairs = np.zeros((T, T))
            for a, b in zip(idx, idx[1:]):
                pairs[a, b] += 1.0
            score = ad.add(score, ad.tensor_sum(ad.mul(trans_eff, Tensor(pairs))))
        first = np.zeros(T)
        first[idx[0]] = 1.0
        last = np.zeros(T)
        last[idx[-1]] = 1.0
        score = ad.add(score, ad.tensor_sum(ad.mul(start_eff, Tensor(first))))
        score = ad.add(score, ad.tensor_sum(ad.mul(self.end, Tensor(last))))
        return ad.sub(log_z, score)

    def log_partition(self, emissions: np.ndarray) -> float:
        """log Z on plain arrays (no gradient), for diagnostics and tests."""
        e = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions)
        trans, start = self._effective_np()
        alpha = start + e[0]
        for i in range(1, e.shape[0]):
            scores = alpha[:, None] + trans
            m = scores.max(axis=0, keepdims=True)
            alpha = m[0] + np.log(np.exp(scores - m).sum(axis=0)) + e[i]
        final = alpha + self.end.data
        m = final.max()
        return float(m + np.log(np.exp(final - m).sum()))

    # -- decoding -----------------------------------------------------------

    def viterbi_decode(self, emissions) -> tuple[list[str], float]:
        """Highest-scoring legal tag sequence and its score."""
        e = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions)
        if e.ndim != 2 or e.shape[1] != self.num_tags:
            raise ShapeError(f"emissions must be (n, {self.num_tags})")
        n, T = e.shape
        trans, start = self._effective_np()
        delta = start + e[0]
        back = np.zeros((n, T), dtype=np.int64)
        for i in range(1, n):
            scores = delta[:, None] + trans          # [prev, cur]
            back[i] = np.argmax(scores, axis=0)      # first max = lowest index
            delta = scores[back[i], np.arange(T)] + e[i]
        final = delta + self.end.data
        tag = int(np.argmax(final))
        best_score = float(final[tag])
        path = [tag]
        for i in range(n - 1, 0, -1):
            tag = int(back[i, tag])
            path.append(tag)
        path.reverse()
        return [self.labels[t] for t in path], best_score
