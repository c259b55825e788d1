"""Tweet token preprocessing, BPE segmentation, characters, and CoNLL IO.

The placeholder tokens <USR>, <EMOJI> and <URL> are atomic everywhere: they
are never BPE-split and count as single pseudo-characters.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

SPECIAL_TOKENS = ("<USR>", "<EMOJI>", "<URL>")

END_OF_WORD = "</w>"

# Codepoint ranges treated as emoji; callers may pass their own list.
DEFAULT_EMOJI_RANGES = (
    (0x1F300, 0x1F5FF),   # misc symbols and pictographs
    (0x1F600, 0x1F64F),   # emoticons
    (0x1F680, 0x1F6FF),   # transport and map symbols
    (0x1F900, 0x1F9FF),   # supplemental symbols
    (0x1FA70, 0x1FAFF),   # symbols extended-A
    (0x2600, 0x26FF),     # misc symbols
    (0x2700, 0x27BF),     # dingbats
    (0x2B00, 0x2BFF),     # arrows / stars
    (0xFE00, 0xFE0F),     # variation selectors
    (0x200D, 0x200D),     # zero-width joiner
)

_URL_RE = re.compile(r"^(https?://|www\.)", re.IGNORECASE)
_TAG_RE = re.compile(r"^[BI]-[A-Za-z0-9_.]+$|^O$")


class ConllFormatError(ValueError):
    """Malformed CoNLL line or tag; the message names the line."""


def _is_emoji_token(token: str, ranges) -> bool:
    if not token:
        return False
    return all(any(lo <= ord(ch) <= hi for lo, hi in ranges) for ch in token)


def preprocess_token(token: str, emoji_ranges=DEFAULT_EMOJI_RANGES) -> str:
    """Replace mentions/hashtags, URLs and emoji with placeholder tokens."""
    if token.startswith("@") or token.startswith("#"):
        return "<USR>"
    if _URL_RE.match(token):
        return "<URL>"
    if _is_emoji_token(token, emoji_ranges):
        return "<EMOJI>"
    return token


@dataclass
class BpeModel:
    """Ordered merge list; rank equals position in the list.

    Segmentation starts from the character sequence with "</w>" appended to
    the last symbol, then repeatedly merges the adjacent pair with the lowest
    rank (leftmost occurrence on ties) until no merge applies.
    """

    language_id: str
    merges: list[tuple[str, str]]

    def __post_init__(self):
        self._ranks = {}
        for rank, pair in enumerate(self.merges):
            if pair in self._ranks:
                raise ValueError(f"duplicate merge {pair}")
            self._ranks[pair] = rank

    def segment(self, word: str) -> list[tuple[str, bool]]:
        """Subwords as (text, is_word_final) with the end marker stripped."""
        if not word:
            raise ValueError("cannot segment an empty word")
        if word in SPECIAL_TOKENS:
            return [(word, True)]
        symbols = list(word)
        symbols[-1] = symbols[-1] + END_OF_WORD
        while len(symbols) > 1:
            best_rank, best_pos = None, None
            for i in range(len(symbols) - 1):
                rank = self._ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_pos = rank, i
            if best_pos is None:
                break
            symbols[best_pos:best_pos + 2] = [symbols[best_pos] + symbols[best_pos + 1]]
        out = []
        for sym in symbols:
            final = sym.endswith(END_OF_WORD)
            out.append((sym[:-len(END_OF_WORD)] if final else sym, final))
        return out


def apply_bpe(model: BpeModel, word: str) -> list[str]:
    """Subword strings for ``word``; joining them reconstructs the word."""
    return [text for text, _ in model.segment(word)]


def load_bpe_merges(path: str, language_id: str = "") -> BpeModel:
    """Read a merges file: one "left right" pair per line, rank = line order.

    A leading "#version..." header line is ignored; so are blank lines.
    """
    merges: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line or (lineno == 1 and line.startswith("#version")):
                continue
            parts = line.split(" ")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ValueError(f"{path}:{lineno}: merge line must be 'left right'")
            merges.append((parts[0], parts[1]))
    return BpeModel(language_id=language_id, merges=merges)


def to_chars(word: str) -> list[str]:
    """Unicode codepoints of the word; placeholder tokens stay atomic."""
    if not word:
        raise ValueError("cannot split an empty word")
    if word in SPECIAL_TOKENS:
        return [word]
    return list(word)


@dataclass
class TokenizedSentence:
    """A sentence with raw tokens, preprocessed words and optional IOB labels.

    Subword lists (per language) and character lists are filled in by
    ``segment_sentence`` once the BPE models are known.
    """

    raw_tokens: list[str]
    words: list[str]
    labels: list[str] | None = None
    subwords: dict[str, list[list[str]]] | None = None
    chars: list[list[str]] | None = None
    repairs: int = 0

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.words):
            raise ValueError("labels and words length mismatch")

    def __len__(self) -> int:
        return len(self.words)


def segment_sentence(sentence: TokenizedSentence,
                     bpe_models: dict[str, BpeModel]) -> TokenizedSentence:
    """Populate per-language subwords and characters for every word."""
    sentence.subwords = {
        lang: [apply_bpe(model, w) for w in sentence.words]
        for lang, model in bpe_models.items()
    }
    sentence.chars = [to_chars(w) for w in sentence.words]
    return sentence


def _validate_tag(tag: str, path: str, lineno: int) -> None:
    if not _TAG_RE.match(tag):
        raise ConllFormatError(f"{path}:{lineno}: unknown tag {tag!r}")


def repair_iob(tags: list[str]) -> tuple[list[str], int]:
    """Turn I-x tags without a preceding B-x/I-x of the same type into B-x."""
    fixed: list[str] = []
    repairs = 0
    prev = "O"
    for tag in tags:
        if tag.startswith("I-"):
            etype = tag[2:]
            if not (prev == f"B-{etype}" or prev == f"I-{etype}"):
                tag = f"B-{etype}"
                repairs += 1
        fixed.append(tag)
        prev = tag
    return fixed, repairs


def read_conll(path: str) -> list[TokenizedSentence]:
    """Read "token<TAB>tag" lines; a blank line ends a sentence.

    Tokens go through ``preprocess_token``; inconsistent I- tags are repaired
    to B- and counted on the sentence, not rejected.
    """
    sentences: list[TokenizedSentence] = []
    tokens: list[str] = []
    tags: list[str] = []

    def flush():
        if not tokens:
            return
        fixed, repairs = repair_iob(tags)
        sentences.append(TokenizedSentence(
            raw_tokens=list(tokens),
            words=[preprocess_token(t) for t in tokens],
            labels=fixed, repairs=repairs))
        tokens.clear()
        tags.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                flush()
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise ConllFormatError(f"{path}:{lineno}: expected 'token<TAB>tag'")
            _validate_tag(parts[1], path, lineno)
            tokens.append(parts[0])
            tags.append(parts[1])
    flush()
    return sentences


def read_tokens(path: str) -> list[TokenizedSentence]:
    """Read unlabeled input: one token per line, blank line ends a sentence.

    Lines containing a tab are treated as CoNLL rows and the tag is ignored.
    """
    sentences: list[TokenizedSentence] = []
    tokens: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if not line:
                if tokens:
                    sentences.append(TokenizedSentence(
                        raw_tokens=list(tokens),
                        words=[preprocess_token(t) for t in tokens]))
                    tokens.clear()
                continue
            tokens.append(line.split("\t")[0])
    if tokens:
        sentences.append(TokenizedSentence(
            raw_tokens=list(tokens),
            words=[preprocess_token(t) for t in tokens]))
    return sentences


def write_conll(sentences: list[TokenizedSentence], path: str,
                tags: list[list[str]] | None = None) -> None:
    """Write sentences with raw (pre-preprocessing) tokens and tags."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, sent in enumerate(sentences):
            sent_tags = tags[i] if tags is not None else sent.labels
            if sent_tags is None or len(sent_tags) != len(sent.raw_tokens):
                raise ValueError(f"sentence {i}: missing or mismatched tags")
            for token, tag in zip(sent.raw_tokens, sent_tags):
                fh.write(f"{token}\t{tag}\n")
            fh.write("\n")
