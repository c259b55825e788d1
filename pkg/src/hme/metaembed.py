"""Token representations: attention-weighted meta-embeddings per level.

Word level: project each language's embedding into a shared space, score each
projection with v . tanh(x'), softmax the scores over languages, and take the
weighted sum.  Subword level: per-language projection, a shared transformer
encoder over the word's subword positions, masked mean pooling, then the same
cross-language attention with its own scorer.  Character level: one trainable
table, an encoder, mean pooling.  The three outputs concatenate into the
hierarchical representation.  CONCAT / LINEAR / random-table baselines live
here too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import embeddings as emb
from .autodiff import ShapeError, Tensor
from .nn import Linear, TransformerEncoder, xavier_uniform


class ProjectionSet:
    """One trainable d_j -> shared-dim affine map per language."""

    def __init__(self, in_dims: list[int], out_dim: int, rng: np.random.Generator,
                 labels: list[str] | None = None):
        self.out_dim = out_dim
        self.labels = labels or [str(j) for j in range(len(in_dims))]
        self.linears = [Linear(d, out_dim, rng) for d in in_dims]

    def __len__(self) -> int:
        return len(self.linears)

    def project(self, j: int, x: Tensor) -> Tensor:
        return self.linears[j](x)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for label, lin in zip(self.labels, self.linears):
            out.update(lin.parameters(f"{prefix}.{label}"))
        return out


class AttentionScorer:
    """Scalar language score per token: v . tanh(x')."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.v = Tensor(xavier_uniform(rng, dim, 1), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(ad.tanh(x), self.v)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.v": self.v}


@dataclass
class MetaEmbeddingOutput:
    """Per-token combined vectors and the attention weights behind them."""

    u_word: Tensor | None
    u_subword: Tensor | None
    u_char: Tensor | None
    u_hme: Tensor
    alpha_word: Tensor | None
    alpha_subword: Tensor | None


def _flatten_leading(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    lead = x.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    return ad.reshape(x, (n, x.shape[-1])), lead


def attend_languages(projected: list[Tensor], scorer,
                     uniform: bool = False) -> tuple[Tensor, Tensor]:
    """Softmax-weighted combination of per-language vectors, all (N, d')."""
    n, dp = projected[0].shape
    L = len(projected)
    if uniform:
        alpha = Tensor(np.full((n, L), 1.0 / L))
    else:
        scores = ad.concat([scorer(x) for x in projected], axis=-1)
        alpha = ad.softmax(scores, axis=-1)
    stacked = ad.concat([ad.reshape(x, (n, 1, dp)) for x in projected], axis=1)
    u = ad.reshape(ad.matmul(ad.reshape(alpha, (n, 1, L)), stacked), (n, dp))
    return u, alpha


def mme_word(embeddings_per_language: list[Tensor], proj: ProjectionSet,
             scorer: AttentionScorer, uniform_attention: bool = False
             ) -> tuple[Tensor, Tensor]:
    """Word-level meta-embedding.

    Each entry is (..., d_j) with identical leading shape; returns the
    combined (..., d') vectors and the (..., L) attention weights.
    """
    if not embeddings_per_language:
        raise ShapeError("mme_word needs at least one language")
    lead = embeddings_per_language[0].shape[:-1]
    for e in embeddings_per_language:
        if e.shape[:-1] != lead:
            raise ShapeError("language inputs disagree on token count")
    flats = [_flatten_leading(e)[0] for e in embeddings_per_language]
    projected = [proj.project(j, x) for j, x in enumerate(flats)]
    u, alpha = attend_languages(projected, scorer, uniform_attention)
    L = len(projected)
    return (ad.reshape(u, lead + (proj.out_dim,)),
            ad.reshape(alpha, lead + (L,)))


def pad_sequences(seqs: list[Tensor]) -> tuple[Tensor, np.ndarray]:
    """Stack variable-length (m_i, d) tensors into (n, m_max, d) plus a mask."""
    if not seqs:
        raise ShapeError("no sequences to pad")
    if any(s.shape[0] == 0 for s in seqs):
        raise ShapeError("empty subunit sequence")
    d = seqs[0].shape[1]
    m_max = max(s.shape[0] for s in seqs)
    rows = []
    mask = np.zeros((len(seqs), m_max))
    for i, s in enumerate(seqs):
        mask[i, :s.shape[0]] = 1.0
        if s.shape[0] < m_max:
            s = ad.concat([s, Tensor(np.zeros((m_max - s.shape[0], d)))], axis=0)
        rows.append(ad.reshape(s, (1, m_max, d)))
    return ad.concat(rows, axis=0), mask


def encode_and_pool(x: Tensor, mask: np.ndarray, encoder: TransformerEncoder,
                    train: bool = False) -> Tensor:
    """Run the encoder over (N, m, d) and mean-pool the unmasked positions."""
    enc = encoder(x, mask=mask, train=train)
    weights = mask / np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
    pooled = ad.matmul(Tensor(weights[:, None, :]), enc)
    return ad.reshape(pooled, (x.shape[0], enc.shape[-1]))


def mme_subword(subword_embeddings: list[list[Tensor]], proj: ProjectionSet,
                encoder: TransformerEncoder, scorer: AttentionScorer,
                train: bool = False, uniform_attention: bool = False
                ) -> tuple[Tensor, Tensor]:
    """Subword-level meta-embedding.

    ``subword_embeddings[j][i]`` holds word i's (m_ij, d_j) subword vectors in
    language j.  Per language: project, encode with the shared transformer,
    mean-pool to one vector per word; then combine across languages with
    softmax attention.  Returns ((n, d'), (n, L)).
    """
    if not subword_embeddings:
        raise ShapeError("mme_subword needs at least one language")
    n = len(subword_embeddings[0])
    if any(len(group) != n for group in subword_embeddings):
        raise ShapeError("language inputs disagree on word count")
    pooled = []
    for j, group in enumerate(subword_embeddings):
        padded, mask = pad_sequences(group)
        projected = proj.project(j, padded)
        pooled.append(encode_and_pool(projected, mask, encoder, train))
    return attend_languages(pooled, scorer, uniform_attention)


def char_encode(char_embeddings: list[Tensor], encoder: TransformerEncoder,
                train: bool = False) -> Tensor:
    """Encode each word's (p_i, d_c) character vectors into one (d') vector."""
    padded, mask = pad_sequences(char_embeddings)
    return encode_and_pool(padded, mask, encoder, train)


def hme_concat(u_word: Tensor, u_subword: Tensor, u_char: Tensor) -> Tensor:
    """Concatenate the three per-token vectors in (word, subword, char) order."""
    if not (u_word.shape[:-1] == u_subword.shape[:-1] == u_char.shape[:-1]):
        raise ShapeError("token counts disagree across levels")
    return ad.concat([u_word, u_subword, u_char], axis=-1)


def concat_baseline(embeddings_per_language: list[Tensor]) -> Tensor:
    """Rowwise concatenation of the raw, unprojected embeddings."""
    if not embeddings_per_language:
        raise ShapeError("concat_baseline needs at least one language")
    lead = embeddings_per_language[0].shape[:-1]
    for e in embeddings_per_language:
        if e.shape[:-1] != lead:
            raise ShapeError("language inputs disagree on token count")
    return ad.concat(embeddings_per_language, axis=-1)


def linear_baseline(embeddings_per_language: list[Tensor],
                    proj: ProjectionSet) -> Tensor:
    """Unweighted sum of the projected embeddings (no attention)."""
    if not embeddings_per_language:
        raise ShapeError("linear_baseline needs at least one language")
    out = None
    for j, e in enumerate(embeddings_per_language):
        x = proj.project(j, e)
        out = x if out is None else ad.add(out, x)
    return out


def random_baseline(vocab_tokens, dim: int, seed: int) -> emb.EmbeddingTable:
    """Trainable uniform(-0.1, 0.1) word table for the lower-bound baseline."""
    return emb.init_random_word_table(vocab_tokens, dim, seed)


ATTENTION_TSV_HEADER = "token_index\ttoken\tlevel\tlanguage_id\tweight"


def write_attention_tsv(path: str, sentences, word_alphas, subword_alphas,
                        word_languages: list[str],
                        subword_languages: list[str]) -> None:
    """Write per-token attention rows, one blank-line-separated block per
    sentence: (token_index, token, level, language_id, weight)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(ATTENTION_TSV_HEADER + "\n")
        for s, sent in enumerate(sentences):
            rows_w = None if word_alphas is None else word_alphas[s]
            rows_s = None if subword_alphas is None else subword_alphas[s]
            for i, token in enumerate(sent.words):
                if rows_w is not None:
                    for lang, w in zip(word_languages, rows_w[i]):
                        fh.write(f"{i}\t{token}\tword\t{lang}\t{float(w)!r}\n")
                if rows_s is not None:
                    for lang, w in zip(subword_languages, rows_s[i]):
                        fh.write(f"{i}\t{token}\tsubword\t{lang}\t{float(w)!r}\n")
            fh.write("\n")
