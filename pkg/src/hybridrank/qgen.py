"""Extractive query generation with round-trip consistency filtering.

Queries are carved out of passages (whole sentences, or random token crops)
instead of being produced by a generative model.  A first encoder trained on
all generated pairs filters them: a pair survives only when the source passage
is the query's exact 1-nearest neighbour by cosine.  A second encoder is then
fine-tuned from the first on the survivors.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace

import numpy as np

from .corpus import DEFAULT_PASSAGE_LENGTH, DEFAULT_QUERY_LENGTH, _WORD_RE, \
    Corpus, Query
from .dense import DeTrainConfig, EncoderParams, encode_corpus, encode_text, \
    normalize_rows, train_de, TrainPair
from .results import top_k_order

GEN_MODES = ("sentence", "crop")
CROP_MIN_TOKENS = 4
CROP_MAX_TOKENS = 16
MIN_QUERY_TOKENS = 3

_SENTENCE_SPLIT = re.compile(r"(?<=[.?!])\s+")


@dataclass(frozen=True)
class SyntheticPair:
    query: Query
    source_passage_id: str


@dataclass(frozen=True)
class QgenConfig:
    """How to carve queries out of passages and how long to fine-tune."""

    mode: str = "sentence"
    max_per_passage: int = 1
    seed: int = 0
    sample_passages: int | None = None
    fine_tune_epochs: int | None = None

    def __post_init__(self):
        if self.mode not in GEN_MODES:
            raise ValueError(f"mode must be one of {GEN_MODES}, got {self.mode!r}")
        if self.max_per_passage < 1:
            raise ValueError(f"max_per_passage must be >= 1, got {self.max_per_passage}")
        if self.sample_passages is not None and self.sample_passages < 1:
            raise ValueError("sample_passages must be >= 1 when given")
        if self.fine_tune_epochs is not None and self.fine_tune_epochs < 0:
            raise ValueError("fine_tune_epochs must be >= 0 when given")


def split_sentences(text: str) -> list[str]:
    """Sentences delimited by '.', '?' or '!' followed by whitespace or the end."""
    out = []
    for chunk in _SENTENCE_SPLIT.split(text):
        s = chunk.strip().rstrip(".?!").strip()
        if s:
            out.append(s)
    return out


def sample_corpus(corpus: Corpus, n: int, seed: int) -> Corpus:
    """Seeded subsample of n passages, preserving corpus order."""
    if n >= len(corpus):
        return corpus
    rng = np.random.default_rng(seed)
    keep = sorted(rng.choice(len(corpus), size=n, replace=False).tolist())
    return Corpus([corpus.passages[i] for i in keep])


def generate_queries(corpus: Corpus, mode: str = "sentence",
                     max_per_passage: int = 1, seed: int = 0) -> list[SyntheticPair]:
    """Deterministic extractive pairs; queries under 3 tokens are discarded."""
    if mode not in GEN_MODES:
        raise ValueError(f"mode must be one of {GEN_MODES}, got {mode!r}")
    if max_per_passage < 1:
        raise ValueError(f"max_per_passage must be >= 1, got {max_per_passage}")
    rng = np.random.default_rng(seed)
    pairs: list[SyntheticPair] = []
    for passage in corpus:
        texts: list[str] = []
        if mode == "sentence":
            for sentence in split_sentences(passage.text):
                if len(texts) == max_per_passage:
                    break
                if len(_WORD_RE.findall(sentence)) >= MIN_QUERY_TOKENS:
                    texts.append(sentence)
        else:
            words = _WORD_RE.findall(passage.text)
            for _ in range(max_per_passage):
                if not words:
                    break
                span = int(rng.integers(CROP_MIN_TOKENS, CROP_MAX_TOKENS + 1))
                span = min(span, len(words))
                start = int(rng.integers(0, len(words) - span + 1))
                if span >= MIN_QUERY_TOKENS:
                    texts.append(" ".join(words[start:start + span]))
        for j, text in enumerate(texts):
            query = Query(id=f"{passage.id}-q{j}", text=text)
            pairs.append(SyntheticPair(query=query, source_passage_id=passage.id))
    return pairs


def round_trip_filter(pairs: list[SyntheticPair], de0: EncoderParams,
                      corpus: Corpus, query_max_length: int | None = None,
                      passage_max_length: int | None = None) -> list[SyntheticPair]:
    """Keep pairs whose exact cosine 1-NN over the corpus is the source passage.

    Ties are broken by ascending passage id and the source must win the
    tiebreak.  Input order is preserved.
    """
    qmax = query_max_length if query_max_length is not None else DEFAULT_QUERY_LENGTH
    pmax = passage_max_length if passage_max_length is not None else DEFAULT_PASSAGE_LENGTH
    rows = normalize_rows(encode_corpus(de0, corpus, pmax))
    ids = corpus.ids()
    order_ids = sorted(range(len(ids)), key=lambda i: ids[i])
    id_rank = np.empty(len(ids), dtype=np.int64)
    for rank, pos in enumerate(order_ids):
        id_rank[pos] = rank
    kept = []
    for pair in pairs:
        source_pos = corpus.position(pair.source_passage_id)
        q = encode_text(de0, pair.query.text, qmax)
        qn = float(np.linalg.norm(q))
        scores = rows @ (q / qn) if qn > 0.0 else np.zeros(len(ids))
        top = int(top_k_order(scores, id_rank, 1)[0])
        if top == source_pos:
            kept.append(pair)
    return kept


def _as_train_pairs(pairs: list[SyntheticPair], corpus: Corpus) -> list[TrainPair]:
    return [TrainPair(query=p.query, positive=corpus.get(p.source_passage_id))
            for p in pairs]


def iterative_train(corpus: Corpus, gen_config: QgenConfig,
                    de_config: DeTrainConfig) -> tuple[EncoderParams, EncoderParams, dict]:
    """Generate pairs, train a first encoder, filter, fine-tune into a second.

    Returns (first encoder, fine-tuned encoder, report); the report counts
    pairs before and after the filter.
    """
    if len(corpus) == 0:
        raise ValueError("corpus must be nonempty")
    source = corpus
    if gen_config.sample_passages is not None:
        source = sample_corpus(corpus, gen_config.sample_passages, gen_config.seed)
    pairs = generate_queries(source, gen_config.mode, gen_config.max_per_passage,
                             gen_config.seed)
    if not pairs:
        raise ValueError("query generation produced no pairs; check the mode and corpus")
    de0 = train_de(_as_train_pairs(pairs, corpus), de_config)
    survivors = round_trip_filter(pairs, de0, corpus,
                                  query_max_length=de_config.query_max_length,
                                  passage_max_length=de_config.passage_max_length)
    if not survivors:
        raise ValueError(
            "round-trip filter removed every generated pair; inspect the "
            "generation mode, max_per_passage and encoder training config")
    ft_epochs = gen_config.fine_tune_epochs
    if ft_epochs is None:
        ft_epochs = de_config.epochs
    de1 = train_de(_as_train_pairs(survivors, corpus),
                   replace(de_config, epochs=ft_epochs), init=de0)
    report = {"before": len(pairs), "after": len(survivors),
              "kept_ratio": len(survivors) / len(pairs)}
    return de0, de1, report


def save_pairs(pairs: list[SyntheticPair], path) -> None:
    """TSV rows "query_text<TAB>source_passage_id"."""
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            if "\t" in p.query.text or "\n" in p.query.text:
                raise ValueError(f"query text may not contain tabs/newlines: "
                                 f"{p.query.text!r}")
            f.write(f"{p.query.text}\t{p.source_passage_id}\n")


def load_pairs(path, corpus: Corpus | None = None) -> list[SyntheticPair]:
    """Read the TSV pair format; query ids are regenerated per source passage."""
    pairs: list[SyntheticPair] = []
    counts: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}: line {lineno}: expected TAB-separated "
                                 f"query and passage id")
            text, pid = line.split("\t", 1)
            if not text.strip():
                raise ValueError(f"{path}: line {lineno}: empty query text")
            if corpus is not None and pid not in corpus:
                raise ValueError(f"{path}: line {lineno}: unknown passage id {pid!r}")
            j = counts.get(pid, 0)
            counts[pid] = j + 1
            pairs.append(SyntheticPair(query=Query(id=f"{pid}-q{j}", text=text),
                                       source_passage_id=pid))
    return pairs


def save_filter_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
