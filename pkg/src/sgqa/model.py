"""Interpretable graph-QA model with a hard top-k subgraph bottleneck.

Pipeline per example: encode the question (bag of learned token
embeddings through a dense layer) and the nodes (mean of label and
attribute token embeddings), score nodes by a scaled dot product with
the question, sample a k-subset mask through the configured gradient
estimator, mask node features and adjacency, run a GAT stack, mean-pool
the selected nodes, and classify the answer from the pooled state
concatenated with the question vector.

Inference always uses the deterministic MAP mask (no noise). With the
NONE estimator the masking stage is skipped entirely, giving the
black-box baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics as metrics_mod
from . import nn
from .autodiff import Tensor
from .estimators import (
    AimleState,
    EstimatorConfig,
    Method,
    aimle_update_from_count,
    imle_grad,
    simple_grad,
    softsub_vjp,
    ste_grad,
)
from .subsets import gumbel_noise, topk_map

UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class Node:
    label: str
    attributes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.label:
            raise ValueError("node label must be nonempty")
        object.__setattr__(self, "attributes", tuple(self.attributes))


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[Node, ...]
    edges: tuple[tuple[int, int, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        if not self.nodes:
            raise ValueError("graph must have at least one node")
        n = len(self.nodes)
        for s, t, _ in self.edges:
            if not (0 <= s < n and 0 <= t < n):
                raise ValueError(f"edge endpoint out of range: ({s}, {t})")

    @property
    def n(self) -> int:
        return len(self.nodes)

    def node_token_sets(self) -> list[set[str]]:
        return [
            metrics_mod.token_set((nd.label,) + nd.attributes) for nd in self.nodes
        ]

    def token_universe(self) -> set[str]:
        out: set[str] = set()
        for s in self.node_token_sets():
            out |= s
        return out


@dataclass(frozen=True)
class QAExample:
    id: str
    graph: SceneGraph
    question: tuple[str, ...]
    answer: str
    rationale: tuple[int, ...] = ()
    answer_in_graph: bool = True

    def __post_init__(self):
        object.__setattr__(self, "question", tuple(self.question))
        object.__setattr__(self, "rationale", tuple(self.rationale))
        if not self.question:
            raise ValueError("question must be nonempty")
        if not self.answer:
            raise ValueError("answer must be nonempty")


@dataclass(frozen=True)
class Explanation:
    example_id: str
    mask: tuple[int, ...]
    predicted: str
    included_labels: tuple[str, ...]
    k: int


@dataclass(frozen=True)
class ModelConfig:
    k: int = 5
    embed_dim: int = 48
    hidden_dim: int = 64
    gat_layers: int = 2
    gat_heads: int = 2
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    batch_size: int = 64
    epochs: int = 50
    lr: float = 5e-3
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        for name in ("embed_dim", "hidden_dim", "gat_layers", "gat_heads",
                     "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")


class Vocab:
    """Token-to-id map with a reserved id 0 for unknown tokens."""

    def __init__(self, tokens):
        self.id_of = {UNK_TOKEN: 0}
        for t in sorted(set(tokens)):
            self.id_of.setdefault(t, len(self.id_of))

    def __len__(self):
        return len(self.id_of)

    def encode(self, tokens) -> np.ndarray:
        return np.array([self.id_of.get(t, 0) for t in tokens], dtype=np.int64)

    def tokens(self) -> list[str]:
        return list(self.id_of)


def build_vocabs(examples) -> tuple[Vocab, list[str]]:
    """Vocabulary over question/label/attribute/relation tokens plus the
    sorted answer vocabulary."""
    toks: set[str] = set()
    answers: set[str] = set()
    for ex in examples:
        toks.update(ex.question)
        answers.add(ex.answer)
        # answer tokens must be embeddable for the tied softmax head
        # (yes/no never occur in questions or graphs)
        toks.update(ex.answer.split())
        for nd in ex.graph.nodes:
            toks.add(nd.label)
            toks.update(nd.attributes)
        for _, _, rel in ex.graph.edges:
            toks.add(rel)
    return Vocab(toks), sorted(answers)


@dataclass
class Prepared:
    """Per-example constants: token ids, node bag matrix, adjacency."""

    example: QAExample
    q_ids: np.ndarray
    node_token_ids: np.ndarray
    bag: np.ndarray           # n x T averaging matrix over node tokens
    adj: np.ndarray           # n x n symmetric 0/1, no self loops
    answer_id: int
    k_eff: int


def mask_graph(h: Tensor, adj: np.ndarray, z: Tensor) -> tuple[Tensor, np.ndarray]:
    """Hard-attention masking: H' = diag(z) H and A' = diag(z) A diag(z).

    Excluded nodes lose their features and all incident edges. The
    masked adjacency is returned as plain data: it only gates attention,
    so no gradient flows through it.
    """
    n = h.data.shape[0]
    if z.data.shape != (n,):
        raise ValueError("mask length does not match node count")
    hm = ad.mul(ad.reshape(z, (n, 1)), h)
    am = np.outer(z.data, z.data) * adj
    return hm, am


def subset_junction(
    theta: Tensor,
    k: int,
    est: EstimatorConfig,
    rng: np.random.Generator,
    aimle_lam: float = 1.0,
    l0_sink: list | None = None,
) -> Tensor:
    """Straight-through tape node for the discrete top-k sample.

    Forward emits a hard mask from one noise draw; backward routes the
    incoming mask gradient through the configured estimator and
    accumulates the result into the score tensor's gradient.
    """
    td = theta.data
    n = td.shape[0]
    method = est.method
    if method is Method.GUMBEL_SOFTSUB_ST:
        perturbed = td + gumbel_noise(rng, n)
        hard = topk_map(perturbed, k)

        def bwd(gz):
            theta._accum(softsub_vjp(perturbed, k, est.tau, gz))

    else:
        eps = est.noise_scale * gumbel_noise(rng, n)
        hard = topk_map(td + eps, k)
        if method is Method.STE:

            def bwd(gz):
                theta._accum(ste_grad(gz))

        elif method is Method.IMLE:

            def bwd(gz):
                theta._accum(imle_grad(td, gz, k, est.lam, noise=eps))

        elif method is Method.AIMLE:
            lam = aimle_lam

            def bwd(gz):
                gt = imle_grad(td, gz, k, lam, noise=eps)
                if l0_sink is not None:
                    l0_sink.append(int(np.count_nonzero(gt)))
                theta._accum(gt)

        elif method is Method.SIMPLE:

            def bwd(gz):
                theta._accum(simple_grad(td, gz, k))

        else:
            raise ValueError(f"method {method} cannot be sampled through")
    return Tensor(hard, parents=(theta,), backward=bwd)


class GvqaModel:
    """Parameter container plus the forward pass.

    Node features entering the GAT stack are the node embedding
    concatenated with its elementwise product with the question vector
    (the multiplicative term is what lets layers detect question-node
    matches). Answer logits come from a tied-softmax head: the answer
    representation is compared against the answer tokens' embeddings.
    """

    def __init__(self, vocab: Vocab, answers: list[str], cfg: ModelConfig,
                 rng: np.random.Generator):
        self.vocab = vocab
        self.answers = list(answers)
        self.answer_id = {a: i for i, a in enumerate(self.answers)}
        self.cfg = cfg
        e, h = cfg.embed_dim, cfg.hidden_dim
        # GAT layers emit 2h features that a GLU halves back to h.
        self.gat_cfgs = [
            nn.GatLayerConfig(in_dim=2 * e if i == 0 else h, out_dim=2 * h, heads=cfg.gat_heads)
            for i in range(cfg.gat_layers)
        ]
        # The embedding table uses a fixed +-0.5 range (not fan-based):
        # question-node match signals are inner products of embeddings,
        # so they scale with the squared init range and a fan-based init
        # leaves them too weak to bootstrap the selection circuit.
        raw: dict[str, np.ndarray] = {
            "emb": rng.uniform(-0.5, 0.5, size=(len(vocab), e)),
            "ans_b": np.zeros(len(self.answers)),
        }
        for prefix, din, dout in [
            ("q", e, e),
            ("cls1", h + e, h),
            ("cls2", h, e),
        ]:
            d = nn.init_dense(rng, din, dout)
            raw[f"{prefix}_w"], raw[f"{prefix}_b"] = d["w"], d["b"]
        # Identity start keeps the question vector aligned with its token
        # embeddings, which the match features depend on from step one.
        raw["q_w"] = np.eye(e)
        for i, gcfg in enumerate(self.gat_cfgs):
            for name, arr in nn.init_gat_layer(rng, gcfg).items():
                raw[f"gat{i}_{name}"] = arr
        self.params = {k: Tensor(v) for k, v in raw.items()}
        # Answers may be multiword; the answer embedding is the mean of
        # its token embeddings (a bag matrix, like node encoding).
        ans_tokens: list[int] = []
        rows, cols, vals = [], [], []
        for i, ans in enumerate(self.answers):
            ids = self.vocab.encode(ans.split())
            w = 1.0 / len(ids)
            for tid in ids:
                rows.append(i)
                cols.append(len(ans_tokens))
                vals.append(w)
                ans_tokens.append(tid)
        self.ans_bag = np.zeros((len(self.answers), len(ans_tokens)))
        self.ans_bag[rows, cols] = vals
        self.ans_token_ids = np.array(ans_tokens, dtype=np.int64)

    # ------------------------------------------------------------------
    def prepare(self, ex: QAExample) -> Prepared:
        g = ex.graph
        n = g.n
        node_tokens: list[int] = []
        rows, cols, vals = [], [], []
        for i, nd in enumerate(g.nodes):
            toks = (nd.label,) + nd.attributes
            ids = self.vocab.encode(toks)
            w = 1.0 / len(ids)
            for tid in ids:
                rows.append(i)
                cols.append(len(node_tokens))
                vals.append(w)
                node_tokens.append(tid)
        bag = np.zeros((n, len(node_tokens)))
        bag[rows, cols] = vals
        adj = np.zeros((n, n))
        for s, t, _ in g.edges:
            adj[s, t] = 1.0
            adj[t, s] = 1.0
        k_eff = min(self.cfg.k, n)
        if k_eff < self.cfg.k:
            warnings.warn(
                f"example {ex.id}: graph has {n} < k={self.cfg.k} nodes; clamping",
                stacklevel=2,
            )
        return Prepared(
            example=ex,
            q_ids=self.vocab.encode(ex.question),
            node_token_ids=np.array(node_tokens, dtype=np.int64),
            bag=bag,
            adj=adj,
            answer_id=self.answer_id.get(ex.answer, -1),
            k_eff=k_eff,
        )

    # ------------------------------------------------------------------
    def _encode(self, prep: Prepared) -> tuple[Tensor, Tensor]:
        p = self.params
        qtok = ad.gather_rows(p["emb"], prep.q_ids)
        qmean = ad.tensor_mean(qtok, axis=0, keepdims=True)
        q = ad.tanh(nn.dense(qmean, p["q_w"], p["q_b"]))      # 1 x e
        ntok = ad.gather_rows(p["emb"], prep.node_token_ids)
        e_nodes = ad.const_matmul(prep.bag, ntok)             # n x e
        return q, e_nodes

    def _prior_scores(self, q: Tensor, e_nodes: Tensor) -> Tensor:
        return nn.scaled_dot(ad.reshape(q, (q.data.shape[-1],)), e_nodes)

    def _trunk(self, prep: Prepared, q: Tensor, e_nodes: Tensor, z: Tensor | None) -> Tensor:
        """Shared tail: mask, GAT stack, pooled readout, answer logits."""
        p = self.params
        n = prep.bag.shape[0]
        qrows = ad.const_matmul(np.ones((n, 1)), q)           # n x e
        h = ad.concat([e_nodes, ad.mul(e_nodes, qrows)], axis=1)  # n x 2e
        # question-match scores steer attention; computed on the tape as
        # a separate expression so the sampling junction keeps exclusive
        # ownership of the score tensor it differentiates
        match = self._prior_scores(q, e_nodes)
        if z is None:
            adj_eff = prep.adj
        else:
            h, adj_eff = mask_graph(h, prep.adj, z)
        for i, gcfg in enumerate(self.gat_cfgs):
            layer = {k: p[f"gat{i}_{k}"] for k in
                     ("w", "a_src", "a_dst", "a_match", "w_self", "b")}
            h = ad.glu(nn.gat_layer(h, adj_eff, layer, gcfg, match=match))
        if z is None:
            pooled = ad.const_matmul(np.full((1, n), 1.0 / n), h)
        else:
            pooled = ad.mul_const(ad.matmul(ad.reshape(z, (1, n)), h), 1.0 / prep.k_eff)
        cat = ad.concat([pooled, q], axis=1)
        hidden = ad.relu(nn.dense(cat, p["cls1_w"], p["cls1_b"]))
        ans_vec = nn.dense(hidden, p["cls2_w"], p["cls2_b"])  # 1 x e
        ans_emb = ad.const_matmul(self.ans_bag, ad.gather_rows(p["emb"], self.ans_token_ids))
        scores = ad.matmul(ans_emb, ad.transpose(ans_vec, (1, 0)))  # C x 1
        scale = 1.0 / np.sqrt(self.cfg.embed_dim)
        return ad.add(
            ad.mul_const(ad.reshape(scores, (len(self.answers),)), scale), p["ans_b"]
        )

    # ------------------------------------------------------------------
    def training_loss(
        self,
        prep: Prepared,
        rng: np.random.Generator,
        aimle_lam: float = 1.0,
        l0_sink: list | None = None,
    ) -> Tensor:
        """Cross-entropy loss with the sampling junction active."""
        if prep.answer_id < 0:
            raise ValueError(f"answer of {prep.example.id} missing from answer vocabulary")
        q, e_nodes = self._encode(prep)
        if self.cfg.estimator.method is Method.NONE:
            logits = self._trunk(prep, q, e_nodes, None)
        else:
            theta = self._prior_scores(q, e_nodes)
            z = subset_junction(theta, prep.k_eff, self.cfg.estimator, rng,
                                aimle_lam=aimle_lam, l0_sink=l0_sink)
            logits = self._trunk(prep, q, e_nodes, z)
        return ad.softmax_cross_entropy(logits, prep.answer_id)

    def predict(self, prep: Prepared) -> tuple[np.ndarray, Explanation | None]:
        """Deterministic inference: MAP mask, no noise, no tape."""
        with ad.no_grad():
            q, e_nodes = self._encode(prep)
            if self.cfg.estimator.method is Method.NONE:
                logits = self._trunk(prep, q, e_nodes, None)
                mask = None
            else:
                theta = self._prior_scores(q, e_nodes)
                zdata = topk_map(theta.data, prep.k_eff)
                logits = self._trunk(prep, q, e_nodes, Tensor(zdata))
                mask = zdata
        pred = self.answers[int(np.argmax(logits.data))]
        expl = None
        if mask is not None:
            g = prep.example.graph
            expl = Explanation(
                example_id=prep.example.id,
                mask=tuple(int(b) for b in mask),
                predicted=pred,
                included_labels=tuple(
                    g.nodes[i].label for i in range(g.n) if mask[i] > 0
                ),
                k=prep.k_eff,
            )
        return logits.data, expl

    def forward(self, ex: QAExample) -> tuple[np.ndarray, Explanation | None]:
        return self.predict(self.prepare(ex))


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def train(
    train_set: list[QAExample],
    cfg: ModelConfig,
    val_set: list[QAExample] = (),
    log=None,
) -> tuple[GvqaModel, list[dict]]:
    """Mini-batch cross-entropy training; deterministic under cfg.seed.

    Returns the trained model and a per-epoch history of mean loss and
    held-out metrics. The AIMLE lambda state advances once per batch
    using the batch-mean L0 of the score gradients.
    """
    if not train_set:
        raise ValueError("training set must be nonempty")
    vocab, answers = build_vocabs(train_set)
    s_init, s_shuffle, s_noise = np.random.SeedSequence(cfg.seed).spawn(3)
    model = GvqaModel(vocab, answers, cfg, np.random.default_rng(s_init))
    opt = nn.Adam(model.params, lr=cfg.lr)
    shuffle_rng = np.random.default_rng(s_shuffle)
    noise_rng = np.random.default_rng(s_noise)

    prepared = [model.prepare(ex) for ex in train_set]
    val_prepared = [model.prepare(ex) for ex in val_set]
    state = AimleState()
    is_aimle = cfg.estimator.method is Method.AIMLE

    history: list[dict] = []
    for epoch in range(cfg.epochs):
        # cosine decay to lr/10 stabilizes the late epochs
        if cfg.epochs > 1:
            frac = epoch / (cfg.epochs - 1)
            opt.lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * frac)))
        order = shuffle_rng.permutation(len(prepared))
        epoch_loss = 0.0
        for batch in _chunks(order, cfg.batch_size):
            opt.zero_grad()
            l0s: list = []
            batch_loss = 0.0
            for idx in batch:
                loss = model.training_loss(
                    prepared[idx], noise_rng, aimle_lam=state.lam, l0_sink=l0s
                )
                batch_loss += loss.item()
                loss.backward()
            if not np.isfinite(batch_loss):
                raise RuntimeError(f"non-finite loss in epoch {epoch}")
            scale = 1.0 / len(batch)
            for p in model.params.values():
                if p.grad is not None:
                    p.grad *= scale
            opt.step()
            epoch_loss += batch_loss
            if is_aimle:
                mean_l0 = float(np.sum(l0s)) / len(batch) if l0s else 0.0
                state = aimle_update_from_count(state, mean_l0, cfg.estimator)
        entry = {"epoch": epoch, "loss": epoch_loss / len(prepared)}
        if is_aimle:
            entry["aimle_lambda"] = state.lam
        if val_prepared:
            entry.update(_evaluate_prepared(model, val_prepared, with_explanations=False))
        history.append(entry)
        if log is not None:
            log(entry)
    return model, history


def _evaluate_prepared(model: GvqaModel, prepared: list[Prepared],
                       with_explanations: bool = True) -> dict:
    preds, golds = [], []
    subgraph_sets, answers, flags = [], [], []
    questions, universes = [], []
    explanations: list[Explanation] = []
    interpretable = model.cfg.estimator.method is not Method.NONE
    for prep in prepared:
        ex = prep.example
        logits, expl = model.predict(prep)
        preds.append(model.answers[int(np.argmax(logits))])
        golds.append(ex.answer)
        if interpretable and expl is not None:
            node_sets = ex.graph.node_token_sets()
            included = set()
            for i, bit in enumerate(expl.mask):
                if bit:
                    included |= node_sets[i]
            subgraph_sets.append(included)
            answers.append(ex.answer)
            flags.append(ex.answer_in_graph)
            questions.append(ex.question)
            universes.append(ex.graph.token_universe())
            if with_explanations:
                explanations.append(expl)
    out = {
        "accuracy": metrics_mod.accuracy(preds, golds),
        "at_coo": metrics_mod.at_coo(subgraph_sets, answers, flags)
        if interpretable else metrics_mod.UNDEFINED,
        "qt_coo": metrics_mod.qt_coo(subgraph_sets, questions, universes)
        if interpretable else metrics_mod.UNDEFINED,
    }
    if with_explanations:
        out["explanations"] = explanations
    return out


def evaluate(examples: list[QAExample], model: GvqaModel) -> dict:
    """MAP-inference pass: accuracy, AT-COO, QT-COO and explanations.

    The NONE baseline produces no explanations and undefined (NaN)
    co-occurrence metrics.
    """
    return _evaluate_prepared(model, [model.prepare(ex) for ex in examples])
