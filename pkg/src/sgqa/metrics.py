"""Accuracy and token co-occurrence metrics for explanatory subgraphs.

AT-COO is the fraction of examples whose answer token(s) appear among
the explanation subgraph's node tokens; QT-COO is the mean ratio of
question-relevant tokens retained by the subgraph. Both are computed on
normalized lowercase tokens (split on whitespace and hyphens); node
token sets are label tokens plus attribute tokens.
"""

from __future__ import annotations

import math
import re

_SPLIT = re.compile(r"[\s\-]+")

# Question-side function words ignored when building the relevant-token
# set Q_i. Everything else counts as content if it occurs anywhere in the
# example's full graph token universe.
STOPWORDS = frozenset(
    """a an the is are was were be been am do does did has have had what which
    who whom whose where when why how there here this that these those it its
    of in on at to from with and or not no yes like""".split()
)

UNDEFINED = math.nan


def normalize_tokens(text_or_tokens) -> list[str]:
    """Lowercase and split on whitespace/hyphens; drops empty pieces."""
    if isinstance(text_or_tokens, str):
        parts = _SPLIT.split(text_or_tokens.lower())
    else:
        parts = [p for tok in text_or_tokens for p in _SPLIT.split(str(tok).lower())]
    return [p for p in parts if p]


def token_set(tokens) -> set[str]:
    return set(normalize_tokens(tokens))


def indicator(answer: str, subgraph_tokens: set[str]) -> int:
    """1 iff every word of the (possibly multiword) answer is present."""
    words = normalize_tokens(answer)
    return int(bool(words) and all(w in subgraph_tokens for w in words))


def at_coo(subgraph_token_sets, answers, answer_in_graph=None) -> float:
    """Mean answer-token co-occurrence over examples flagged answer_in_graph.

    Returns NaN when no example contributes to the denominator.
    """
    if answer_in_graph is None:
        answer_in_graph = [True] * len(answers)
    if not (len(subgraph_token_sets) == len(answers) == len(answer_in_graph)):
        raise ValueError("inputs must be aligned")
    hits, total = 0, 0
    for s, a, flag in zip(subgraph_token_sets, answers, answer_in_graph):
        if not flag:
            continue
        total += 1
        hits += indicator(a, s)
    return hits / total if total else UNDEFINED


def relevant_question_tokens(question, graph_tokens: set[str]) -> set[str]:
    """Q_i: non-stopword question tokens present in the full graph's
    token universe."""
    return {t for t in normalize_tokens(question) if t not in STOPWORDS and t in graph_tokens}


def match_ratio(relevant: set[str], subgraph_tokens: set[str]) -> float:
    if not relevant:
        raise ValueError("match ratio undefined for empty relevant set")
    return sum(1 for q in relevant if q in subgraph_tokens) / len(relevant)


def qt_coo(subgraph_token_sets, questions, graph_token_sets) -> float:
    """Mean question-token match ratio; examples with empty Q_i are skipped.

    Returns NaN when every example is skipped.
    """
    if not (len(subgraph_token_sets) == len(questions) == len(graph_token_sets)):
        raise ValueError("inputs must be aligned")
    ratios = []
    for s, q, universe in zip(subgraph_token_sets, questions, graph_token_sets):
        relevant = relevant_question_tokens(q, universe)
        if relevant:
            ratios.append(match_ratio(relevant, s))
    return sum(ratios) / len(ratios) if ratios else UNDEFINED


def accuracy(predictions, golds) -> float:
    """Exact-match rate on normalized answer strings."""
    if len(predictions) != len(golds):
        raise ValueError("inputs must be aligned")
    if not golds:
        return UNDEFINED
    hits = sum(
        1 for p, g in zip(predictions, golds)
        if normalize_tokens(str(p)) == normalize_tokens(str(g))
    )
    return hits / len(golds)
