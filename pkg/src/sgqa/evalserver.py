"""Pairwise human-evaluation backend.

Serves blind A/B comparison pairs (two explanations of the same example
from two methods, equal k), records judgments to an append-only
line-delimited log, and exports the log for Bradley-Terry fitting.
Sessions are keyed by a salted one-way hash so no raw participant
identifier is ever persisted; left/right display order is randomized
per pair and unmapped back to true method ids before logging.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import read_dataset
from .model import QAExample
from .preference import ComparisonRecord, record_to_dict

GOLDEN_ANGLE = 2.399963229728653


@dataclass(frozen=True)
class StudyPlan:
    comparisons_per_participant: int = 18
    method_pairs: tuple[tuple[str, str], ...] = ()
    dataset: str = ""
    seed: int = 0
    allow_example_repeats: bool = False

    def __post_init__(self):
        object.__setattr__(
            self, "method_pairs", tuple(tuple(p) for p in self.method_pairs)
        )
        if self.comparisons_per_participant < 1:
            raise ValueError("comparisons_per_participant must be >= 1")
        for a, b in self.method_pairs:
            if a == b:
                raise ValueError("method pairs must name distinct methods")


def load_study_plan(path) -> StudyPlan:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return StudyPlan(
        comparisons_per_participant=raw.get("comparisons_per_participant", 18),
        method_pairs=tuple(tuple(p) for p in raw.get("method_pairs", ())),
        dataset=raw.get("dataset", ""),
        seed=raw.get("seed", 0),
        allow_example_repeats=raw.get("allow_example_repeats", False),
    )


def graph_layout(example: QAExample) -> list[dict]:
    """Deterministic node positions seeded by the example id.

    A golden-angle spiral with an id-dependent rotation: no physics, so
    both panels and every reload show the identical picture.
    """
    digest = hashlib.sha256(example.id.encode("utf-8")).digest()
    rot = int.from_bytes(digest[:8], "big") / 2**64 * 2 * np.pi
    n = example.graph.n
    out = []
    for i in range(n):
        r = 0.42 * np.sqrt((i + 0.7) / n)
        phi = rot + i * GOLDEN_ANGLE
        out.append(
            {
                "label": example.graph.nodes[i].label,
                "x": round(0.5 + r * float(np.cos(phi)), 4),
                "y": round(0.5 + r * float(np.sin(phi)), 4),
            }
        )
    return out


@dataclass
class Assignment:
    index: int
    example_id: str
    method_a: str
    method_b: str
    swap: bool  # True: method_b is displayed on the left ("A" side)

    @property
    def pair_id(self) -> str:
        return f"{self.example_id}:{self.index}"


class Study:
    """In-memory study state backed by a durable comparison log."""

    def __init__(
        self,
        plan: StudyPlan,
        examples: list[QAExample],
        explanations: dict[str, dict[str, dict]],
        log_path,
        salt: str | None = None,
    ):
        self.plan = plan
        self.examples = {ex.id: ex for ex in examples}
        self.explanations = explanations
        self.log_path = Path(log_path)
        self.salt = salt if salt is not None else "sgqa-study"
        self._lock = threading.Lock()
        self._sessions: dict[str, list[Assignment]] = {}
        self._answered: dict[str, int] = {}

        methods = sorted(explanations)
        if plan.method_pairs:
            self.pairs = list(plan.method_pairs)
        else:
            self.pairs = [
                (methods[i], methods[j])
                for i in range(len(methods))
                for j in range(i + 1, len(methods))
            ]
        if not self.pairs:
            raise ValueError("study needs at least one method pair")
        for a, b in self.pairs:
            missing = {a, b} - set(explanations)
            if missing:
                raise ValueError(f"no explanations supplied for {sorted(missing)}")
        self.eligible = self._eligible_by_pair()
        self._replay_log()

    # ------------------------------------------------------------------
    def _eligible_by_pair(self) -> dict[tuple[str, str], list[str]]:
        """Example ids where both methods produced equal-k explanations."""
        out = {}
        for a, b in self.pairs:
            ids = []
            for ex_id in self.examples:
                ea = self.explanations[a].get(ex_id)
                eb = self.explanations[b].get(ex_id)
                if ea and eb and ea["k"] == eb["k"]:
                    ids.append(ex_id)
            out[(a, b)] = ids
        return out

    def _replay_log(self) -> None:
        if not self.log_path.exists():
            return
        with self.log_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                token = rec["session"]
                self._answered[token] = self._answered.get(token, 0) + 1

    # ------------------------------------------------------------------
    def session_token(self, participant: str | None) -> str:
        """Salted one-way hash; raw identifiers are never stored."""
        raw = participant if participant else secrets.token_hex(16)
        return hashlib.sha256(f"{self.salt}:{raw}".encode("utf-8")).hexdigest()[:16]

    def _assignments(self, token: str) -> list[Assignment]:
        with self._lock:
            if token in self._sessions:
                return self._sessions[token]
            seed_bytes = hashlib.sha256(
                f"{self.plan.seed}:{token}".encode("utf-8")
            ).digest()
            rng = np.random.default_rng(int.from_bytes(seed_bytes[:8], "big"))
            total = self.plan.comparisons_per_participant
            pair_order = [self.pairs[i % len(self.pairs)] for i in range(total)]
            pools = {
                p: list(rng.permutation(np.array(ids, dtype=object)))
                for p, ids in self.eligible.items()
            }
            used: set[str] = set()
            plan: list[Assignment] = []
            for idx, pair in enumerate(pair_order):
                pick = None
                for cand in pools[pair]:
                    if self.plan.allow_example_repeats or cand not in used:
                        pick = str(cand)
                        break
                if pick is None:
                    raise RuntimeError(
                        f"example pool exhausted for pair {pair}; "
                        f"study needs more eligible examples"
                    )
                pools[pair].remove(pick)
                used.add(pick)
                plan.append(
                    Assignment(
                        index=idx,
                        example_id=pick,
                        method_a=pair[0],
                        method_b=pair[1],
                        swap=bool(rng.random() < 0.5),
                    )
                )
            self._sessions[token] = plan
            self._answered.setdefault(token, 0)
            return plan

    # ------------------------------------------------------------------
    def next_pair(self, token: str) -> dict:
        """Current unanswered pair (idempotent) or a completion signal."""
        plan = self._assignments(token)
        done = self._answered.get(token, 0)
        total = self.plan.comparisons_per_participant
        if done >= total:
            return {"done": True, "completed": done}
        a = plan[done]
        ex = self.examples[a.example_id]
        left_method, right_method = (
            (a.method_b, a.method_a) if a.swap else (a.method_a, a.method_b)
        )
        left = self.explanations[left_method][a.example_id]
        right = self.explanations[right_method][a.example_id]
        n = ex.graph.n

        def side(expl):
            mask = expl["mask"]
            return {
                "included": [bool(b) for b in mask],
                "predicted_answer": expl["predicted"],
            }

        return {
            "pair_id": a.pair_id,
            "index": done + 1,
            "total": total,
            "example_id": ex.id,
            "question": " ".join(ex.question),
            "gold_answer": ex.answer,
            "graph": {
                "nodes": graph_layout(ex),
                "edges": [[s, t] for s, t, _ in ex.graph.edges],
            },
            "sides": {"a": side(left), "b": side(right)},
        }

    def record_choice(self, token: str, pair_id: str, outcome: str) -> dict:
        """Durably append one judgment; reject unknown or repeated pairs."""
        if outcome not in ("A", "B", "TIE"):
            raise ValueError(f"outcome must be A, B or TIE, got {outcome!r}")
        plan = self._assignments(token)
        with self._lock:
            done = self._answered.get(token, 0)
            if done >= len(plan):
                raise ConflictError("session already completed")
            current = plan[done]
            if pair_id != current.pair_id:
                answered_ids = {p.pair_id for p in plan[:done]}
                if pair_id in answered_ids:
                    raise ConflictError(f"pair {pair_id} already answered")
                raise ConflictError(f"pair {pair_id} was not issued to this session")
            # Unmap the displayed order back to true method ids.
            if outcome == "TIE" or not current.swap:
                true_outcome = outcome
            else:
                true_outcome = "B" if outcome == "A" else "A"
            record = ComparisonRecord(
                session=token,
                pair=(current.method_a, current.method_b),
                outcome=true_outcome,
                example_id=current.example_id,
                timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat(),
            )
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record_to_dict(record), sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._answered[token] = done + 1
            return {"ok": True, "recorded": done + 1}

    def export_log(self) -> str:
        if not self.log_path.exists():
            return ""
        return self.log_path.read_text(encoding="utf-8")


class ConflictError(RuntimeError):
    pass


def load_explanation_file(path) -> tuple[str, dict[str, dict]]:
    """Read one method's explanation JSONL; returns (method, id -> record)."""
    method = None
    by_id: dict[str, dict] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "method" not in rec:
                continue
            method = rec["method"]
            by_id[rec["id"]] = {
                "mask": rec["mask"],
                "k": rec["k"],
                "predicted": rec["answer_pred"],
            }
    if method is None:
        raise ValueError(f"no explanation records in {path}")
    return method, by_id


def build_study(plan: StudyPlan, explanation_paths, log_path, salt=None) -> Study:
    examples = read_dataset(plan.dataset)
    explanations = {}
    for p in explanation_paths:
        method, by_id = load_explanation_file(p)
        explanations[method] = by_id
    return Study(plan, examples, explanations, log_path, salt=salt)


def create_app(study: Study, ui_dir=None, operator_key: str | None = None):
    """FastAPI app exposing the study endpoints plus an optional static
    UI mount."""
    from fastapi import FastAPI, HTTPException, Query
    from fastapi.responses import PlainTextResponse
    from pydantic import BaseModel

    app = FastAPI(title="sgqa pairwise study")

    class Choice(BaseModel):
        session: str
        pair_id: str
        outcome: str

    @app.get("/api/session")
    def new_session(participant: str | None = Query(default=None)):
        return {"session": study.session_token(participant)}

    @app.get("/api/pairs/next")
    def next_pair(session: str):
        try:
            return study.next_pair(session)
        except RuntimeError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    @app.post("/api/choice")
    def choice(body: Choice):
        try:
            return study.record_choice(body.session, body.pair_id, body.outcome)
        except ConflictError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.get("/api/export", response_class=PlainTextResponse)
    def export(key: str | None = Query(default=None)):
        if operator_key is not None and key != operator_key:
            raise HTTPException(status_code=403, detail="operator key required")
        return study.export_log()

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app
