"""Ranked candidate lists shared by all retrievers and the reranker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CandidateItem:
    passage_id: str
    score: float
    rank: int  # 1-based
    label: int = 0
    # rank in the retriever run this item was sampled from; 0 = not retrieved
    retriever_rank: int = 0


@dataclass
class CandidateList:
    """One query's ordered candidates; ranks run 1..n consecutively."""

    query_id: str
    items: list[CandidateItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def passage_ids(self) -> list[str]:
        return [it.passage_id for it in self.items]


def top_k_order(scores: np.ndarray, id_rank: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores, ties broken by ascending passage id.

    ``id_rank[i]`` must be the rank of passage i's id in ascending id order.
    """
    order = np.lexsort((id_rank, -scores))
    return order[:k]
