"""Deterministic synthetic scene-graph QA corpus generator.

Every example carries a gold rationale: the minimal node set from which
its question is answerable. Questions come in three balanced templates
(attribute-of-object, relation-target, existence) and are constructed so
the rationale subgraph alone determines the answer; a built-in checker
re-answers each question from the rationale to enforce that guarantee.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Node, QAExample, SceneGraph

# Relations are typed: each relation points at one disjoint class of
# objects (scene-graph style: one "holds" a cup, "rides" a horse). The
# question's relation token therefore narrows the answer to a class,
# which is what makes relation questions learnable for a model whose
# node scores see only node content.
RELATION_CLASSES = {
    "holding": ("ball", "book", "cup"),
    "wearing": ("hat", "shoe", "scarf"),
    "riding": ("horse", "bike", "boat"),
    "watching": ("bird", "plane", "kite"),
    "near": ("tree", "fence", "bench"),
    "behind": ("car", "house", "wall"),
    "facing": ("man", "woman", "dog"),
    "touching": ("table", "chair", "lamp"),
}

OBJECTS = tuple(obj for cls in RELATION_CLASSES.values() for obj in cls)
ATTRIBUTES = (
    "red", "blue", "green", "yellow", "black", "white",
    "brown", "small", "large", "old", "new", "shiny",
)
RELATIONS = tuple(RELATION_CLASSES)

_RELATION_OF_OBJECT = {
    obj: rel for rel, cls in RELATION_CLASSES.items() for obj in cls
}

TEMPLATES = ("attribute", "relation", "existence")


@dataclass(frozen=True)
class GeneratorSpec:
    num_examples: int = 2500
    nodes_min: int = 8
    nodes_max: int = 16
    objects: tuple[str, ...] = OBJECTS
    attributes: tuple[str, ...] = ATTRIBUTES
    relations: tuple[str, ...] = RELATIONS
    templates: tuple[str, ...] = TEMPLATES
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "templates", tuple(self.templates))
        if self.num_examples < 1:
            raise ValueError("num_examples must be >= 1")
        if not 2 <= self.nodes_min <= self.nodes_max:
            raise ValueError("need 2 <= nodes_min <= nodes_max")
        unknown = set(self.templates) - set(TEMPLATES)
        if not self.templates or unknown:
            raise ValueError(f"unknown templates: {sorted(unknown)}")
        # One spare object label is needed for negative-existence questions,
        # and labels are unique within a graph.
        if len(self.objects) < self.nodes_max + 1:
            raise ValueError("need more object labels than nodes_max to avoid ambiguity")
        if len(self.attributes) < 2:
            raise ValueError("need at least 2 attribute labels")
        untyped = [o for o in self.objects if o not in _RELATION_OF_OBJECT]
        if untyped:
            raise ValueError(f"objects without a typed relation class: {untyped}")
        bad_rel = [r for r in self.relations if r not in RELATION_CLASSES]
        if bad_rel:
            raise ValueError(f"relations without a target class: {bad_rel}")


def _random_graph(
    rng: np.random.Generator, spec: GeneratorSpec, reserve_leaf: bool = False
) -> tuple[list[str], list[list[str]], list[tuple[int, int, str]], int | None]:
    """Random labeled graph: spanning tree plus extra edges.

    Edge relations are typed by the target node's class. When
    ``reserve_leaf`` is set, one tree leaf keeps undirected degree 1 and
    its single edge points away from it (the relation-question anchor).
    """
    n = int(rng.integers(spec.nodes_min, spec.nodes_max + 1))
    labels = [spec.objects[i] for i in rng.choice(len(spec.objects), size=n, replace=False)]
    attrs = []
    for _ in range(n):
        count = int(rng.integers(0, 3))
        chosen = rng.choice(len(spec.attributes), size=count, replace=False)
        attrs.append([spec.attributes[i] for i in chosen])

    tree_pairs = [(int(rng.integers(0, v)), v) for v in range(1, n)]
    leaf = None
    if reserve_leaf:
        degree = [0] * n
        for u, v in tree_pairs:
            degree[u] += 1
            degree[v] += 1
        leaves = [i for i in range(n) if degree[i] == 1]
        leaf = leaves[int(rng.integers(0, len(leaves)))]

    pairs = list(tree_pairs)
    seen = {frozenset(p) for p in pairs}
    for _ in range(int(rng.integers(0, n // 2 + 1))):
        a, b = (int(x) for x in rng.integers(0, n, size=2))
        if a == b or leaf in (a, b) or frozenset((a, b)) in seen:
            continue
        seen.add(frozenset((a, b)))
        pairs.append((a, b))

    edges: list[tuple[int, int, str]] = []
    for a, b in pairs:
        if leaf is not None and b == leaf:
            a, b = b, a
        elif leaf != a and rng.random() < 0.5:
            a, b = b, a
        edges.append((a, b, _RELATION_OF_OBJECT[labels[b]]))
    return labels, attrs, edges, leaf


def _attribute_question(rng, spec, labels, attrs, edges, leaf):
    r = int(rng.integers(0, len(labels)))
    if len(attrs[r]) != 1:
        attrs[r] = [spec.attributes[int(rng.integers(0, len(spec.attributes)))]]
    question = ["what", "attribute", "has", "the", labels[r]]
    return question, attrs[r][0], [r], True


def _relation_question(rng, spec, labels, attrs, edges, leaf):
    """Ask for the unique node attached to a degree-1 source node.

    The answer class always has at least one other member in the graph,
    so naming the class (via the relation token) is not enough: the
    model must use the edge.
    """
    s = leaf
    s_edges = [e for e in edges if s in (e[0], e[1])]
    assert len(s_edges) == 1 and s_edges[0][0] == s
    _, t, rel = s_edges[0]
    siblings = [o for o in RELATION_CLASSES[rel] if o != labels[t]]
    if not any(lb in siblings for lb in labels):
        # plant a same-class distractor so the class alone is ambiguous
        fresh = [o for o in siblings if o not in labels]
        candidates = [i for i in range(len(labels)) if i not in (s, t)]
        victim = candidates[int(rng.integers(0, len(candidates)))]
        labels[victim] = fresh[int(rng.integers(0, len(fresh)))]
        for j, (a, b, _) in enumerate(edges):
            if b == victim:
                edges[j] = (a, b, _RELATION_OF_OBJECT[labels[victim]])
    question = ["what", "is", "the", labels[s], rel]
    return question, labels[t], sorted([s, t]), True


def _existence_question(rng, spec, labels, attrs, edges, leaf):
    if rng.random() < 0.5:
        r = int(rng.integers(0, len(labels)))
        return ["is", "there", "a", labels[r]], "yes", [r], False
    absent = [o for o in spec.objects if o not in labels]
    label = absent[int(rng.integers(0, len(absent)))]
    witness = int(rng.integers(0, len(labels)))
    return ["is", "there", "a", label], "no", [witness], False


_BUILDERS = {
    "attribute": _attribute_question,
    "relation": _relation_question,
    "existence": _existence_question,
}


def answer_from_rationale(example: QAExample) -> str | None:
    """Re-answer the question from the rationale-induced subgraph only.

    This is the generator's sufficiency checker and the oracle answerer:
    it must reproduce the gold answer for every generated example.
    """
    g = example.graph
    keep = set(example.rationale)
    labels = {g.nodes[i].label: i for i in keep}
    q = example.question
    if q[0] == "is":  # existence: closed-world on the rationale
        return "yes" if q[-1] in labels else "no"
    if q[1] == "attribute":
        i = labels.get(q[-1])
        if i is None or len(g.nodes[i].attributes) != 1:
            return None
        return g.nodes[i].attributes[0]
    # relation-target: unique outgoing edge of the named source node
    src = labels.get(q[3])
    if src is None:
        return None
    targets = [d for s, d, _ in g.edges if s == src and d in keep]
    if len(targets) != 1:
        return None
    return g.nodes[targets[0]].label


def generate(spec: GeneratorSpec) -> list[QAExample]:
    """Generate the corpus; deterministic under spec.seed."""
    examples = []
    for i in range(spec.num_examples):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        template = spec.templates[i % len(spec.templates)]
        labels, attrs, edges, leaf = _random_graph(
            rng, spec, reserve_leaf=template == "relation"
        )
        question, answer, rationale, in_graph = _BUILDERS[template](
            rng, spec, labels, attrs, edges, leaf
        )
        graph = SceneGraph(
            nodes=tuple(Node(label=l, attributes=tuple(a)) for l, a in zip(labels, attrs)),
            edges=tuple(edges),
        )
        ex = QAExample(
            id=f"ex{i:06d}",
            graph=graph,
            question=tuple(question),
            answer=answer,
            rationale=tuple(rationale),
            answer_in_graph=in_graph,
        )
        if answer_from_rationale(ex) != answer:
            raise AssertionError(f"rationale does not determine the answer for {ex.id}")
        examples.append(ex)
    return examples


def split(
    examples: list[QAExample], fractions: tuple[float, ...], seed: int
) -> list[list[QAExample]]:
    """Disjoint, exhaustive, seed-deterministic partition."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be nonnegative and sum to 1")
    order = np.random.default_rng(seed).permutation(len(examples))
    bounds = np.floor(np.cumsum(fractions) * len(examples) + 0.5).astype(int)
    parts, start = [], 0
    for end in bounds:
        parts.append([examples[i] for i in order[start:end]])
        start = end
    return parts


def example_to_record(ex: QAExample) -> dict:
    return {
        "id": ex.id,
        "question": list(ex.question),
        "answer": ex.answer,
        "graph": {
            "nodes": [{"label": nd.label, "attributes": list(nd.attributes)} for nd in ex.graph.nodes],
            "edges": [[s, t, rel] for s, t, rel in ex.graph.edges],
        },
        "rationale": list(ex.rationale),
        "answer_in_graph": ex.answer_in_graph,
    }


def record_to_example(rec: dict) -> QAExample:
    graph = SceneGraph(
        nodes=tuple(
            Node(label=nd["label"], attributes=tuple(nd["attributes"]))
            for nd in rec["graph"]["nodes"]
        ),
        edges=tuple((int(s), int(t), rel) for s, t, rel in rec["graph"]["edges"]),
    )
    return QAExample(
        id=rec["id"],
        graph=graph,
        question=tuple(rec["question"]),
        answer=rec["answer"],
        rationale=tuple(rec.get("rationale", ())),
        answer_in_graph=bool(rec.get("answer_in_graph", True)),
    )


def write_dataset(examples: list[QAExample], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex), sort_keys=True) + "\n")


def read_dataset(path) -> list[QAExample]:
    examples = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                examples.append(record_to_example(json.loads(line)))
    return examples
