"""The experience pool: islands of score-keyed clusters plus an insight store."""

from __future__ import annotations

import base64
import json
import math
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from .constraints import CheckReport
from .expr import Expression, length, parse, serialize
from .scoring import (
    BudgetState,
    PaceParams,
    TemperatureSchedule,
    cluster_distribution,
    normalize_scores,
    pace_score,
    temperature,
)

LENGTH_SCALE = 20.0
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def signature(score: float) -> float:
    """Cluster key: the score rounded to 6 significant digits."""
    return float(f"{score:.6g}")


@dataclass(frozen=True, eq=False)
class Candidate:
    expr: Expression
    params: np.ndarray
    score_mse: float
    valid: bool
    report: CheckReport | None = None
    residual: np.ndarray | None = field(default=None, repr=False)
    stage: str = ""
    parents: tuple = ()
    rationale: str = ""
    restarts_used: int = 0
    id: int | None = None
    infeasible: bool = False
    created_at: int = 0
    s_norm: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "params", np.asarray(self.params, dtype=np.float64))
        if not self.infeasible and self.score_mse > 0:
            raise ValueError("score_mse must be non-positive")
        if self.report is not None and bool(self.report.valid) != bool(self.valid):
            raise ValueError("valid must match report.valid")

    @classmethod
    def infeasible_of(cls, expr, params, stage="", parents=(), rationale="", restarts=0) -> "Candidate":
        return cls(expr, params, -math.inf, False, None, None, stage, tuple(parents), rationale, restarts,
                   infeasible=True)

    @property
    def text(self) -> str:
        return serialize(self.expr)

    @property
    def length(self) -> int:
        return length(self.expr)

    @property
    def failure_reason(self) -> str | None:
        return self.report.failure_reason if self.report else None

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "expr": self.text,
            "params": [float(p) for p in self.params],
            "score_mse": self.score_mse,
            "valid": bool(self.valid),
            "report": self.report.to_dict() if self.report else None,
            "residual": _encode(self.residual),
            "stage": self.stage,
            "parents": list(self.parents),
            "rationale": self.rationale,
            "restarts_used": self.restarts_used,
            "created_at": self.created_at,
        }

    @classmethod
    def from_record(cls, r: dict) -> "Candidate":
        return cls(
            expr=parse(r["expr"], max_nodes=None),
            params=np.array(r["params"], dtype=np.float64),
            score_mse=float(r["score_mse"]),
            valid=bool(r["valid"]),
            report=CheckReport.from_dict(r["report"]) if r.get("report") else None,
            residual=_decode(r.get("residual")),
            stage=r.get("stage", ""),
            parents=tuple(r.get("parents", ())),
            rationale=r.get("rationale", ""),
            restarts_used=int(r.get("restarts_used", 0)),
            id=r.get("id"),
            created_at=int(r.get("created_at", 0)),
        )

    def same_as(self, other: "Candidate") -> bool:
        """Field-wise equality on persisted content."""
        return json.dumps(self.to_record(), sort_keys=True) == json.dumps(other.to_record(), sort_keys=True)


def _encode(a: np.ndarray | None) -> str | None:
    if a is None:
        return None
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str | None) -> np.ndarray | None:
    if s is None:
        return None
    return np.frombuffer(base64.b64decode(s), dtype="<f8").copy()


@dataclass
class Cluster:
    signature: float
    members: list[Candidate] = field(default_factory=list)


@dataclass
class Island:
    id: int
    clusters: dict[float, Cluster] = field(default_factory=dict)
    registered_count: int = 0

    def candidates(self) -> Iterator[Candidate]:
        for cl in self.clusters.values():
            yield from cl.members

    def __len__(self) -> int:
        return sum(len(cl.members) for cl in self.clusters.values())

    def best(self) -> Candidate | None:
        best = None
        for c in self.candidates():
            if best is None or c.score_mse > best.score_mse:
                best = c
        return best

    def add(self, c: Candidate) -> None:
        sig = signature(c.score_mse)
        self.clusters.setdefault(sig, Cluster(sig)).members.append(c)


class ExperiencePool:
    """Islands of clusters keyed by rounded train score, plus insights.

    ``state`` holds run-level data (counters, RNG states) that is persisted in
    the checkpoint header; ``refine_history`` and ``repair_records`` are
    persisted alongside it.
    """

    def __init__(self, num_islands: int = 10):
        if num_islands < 1:
            raise ValueError("need at least one island")
        self.islands = [Island(i) for i in range(num_islands)]
        self.insights: list = []
        self.next_id = 0
        self.total_registered = 0
        self.state: dict[str, Any] = {}
        self.refine_history: list[dict] = []
        self.repair_records: list[dict] = []
        self._lock = threading.RLock()

    @property
    def num_islands(self) -> int:
        return len(self.islands)

    def __len__(self) -> int:
        return sum(len(isl) for isl in self.islands)

    def candidates(self) -> Iterator[Candidate]:
        for isl in self.islands:
            yield from isl.candidates()

    def best(self, valid_only: bool = False) -> Candidate | None:
        best = None
        for c in self.candidates():
            if valid_only and not c.valid:
                continue
            if best is None or c.score_mse > best.score_mse:
                best = c
        return best

    # ------------------------------------------------------------------
    def register(self, c: Candidate, island: int) -> Candidate:
        if c.infeasible or not math.isfinite(c.score_mse):
            raise ValueError("infeasible candidates cannot be registered")
        if not 0 <= island < self.num_islands:
            raise IndexError(f"island {island} out of range [0, {self.num_islands})")
        with self._lock:
            if c.id is None:
                c = replace(c, id=self.next_id)
                self.next_id += 1
            else:
                self.next_id = max(self.next_id, c.id + 1)
            c = replace(c, s_norm=None)
            self.islands[island].add(c)
            self.islands[island].registered_count += 1
            self.total_registered += 1
            return c

    def assign_warmup(self, cands: Sequence[Candidate]) -> list[Candidate]:
        return [self.register(c, i % self.num_islands) for i, c in enumerate(cands)]

    # ------------------------------------------------------------------
    def sample_context(
        self,
        budget: BudgetState | float,
        k: int = 2,
        rng: np.random.Generator | None = None,
        pace: PaceParams = PaceParams(),
        schedule: TemperatureSchedule = TemperatureSchedule(),
    ) -> tuple[int, list[Candidate]]:
        """Pick an island, then k clusters by softmax over PACE scores, then a
        member per cluster favouring valid and short expressions. Returned
        candidates carry ``s_norm`` and are ordered worst to best."""
        rng = rng or np.random.default_rng()
        with self._lock:
            nonempty = [isl for isl in self.islands if len(isl)]
            if not nonempty:
                raise ValueError("cannot sample from an empty pool")
            island = nonempty[int(rng.integers(len(nonempty)))]
            members = list(island.candidates())
            s_norm = dict(zip((id(c) for c in members), normalize_scores([c.score_mse for c in members])))
            clusters = list(island.clusters.values())
            cl_scores = [max(pace_score(float(s_norm[id(c)]), c.valid, budget, pace) for c in cl.members)
                         for cl in clusters]
            probs = cluster_distribution(cl_scores, temperature(self.total_registered, schedule))
            replace_draw = len(clusters) < k or int(np.count_nonzero(probs)) < k
            picks = rng.choice(len(clusters), size=k, replace=replace_draw, p=probs)
            chosen = []
            for ci in picks:
                pool_ = clusters[int(ci)].members
                valid = [c for c in pool_ if c.valid]
                pool_ = valid or pool_
                w = np.exp(-np.array([c.length for c in pool_], dtype=float) / LENGTH_SCALE)
                c = pool_[int(rng.choice(len(pool_), p=w / w.sum()))]
                chosen.append(replace(c, s_norm=float(s_norm[id(c)])))
            chosen.sort(key=lambda c: c.score_mse)
            return island.id, chosen

    def reset_weak_islands(self, rng: np.random.Generator | None = None) -> list[int]:
        """Clear the worse half of the islands and reseed each from a random survivor's best.

        Islands are ranked by best score; ties favour the lower island id.
        Returns the ids of the reset islands.
        """
        rng = rng or np.random.default_rng()
        with self._lock:
            if self.num_islands < 2:
                return []

            def key(isl):
                b = isl.best()
                return (-(b.score_mse if b else -math.inf), isl.id)

            ranked = sorted(self.islands, key=key)
            n_reset = self.num_islands // 2
            survivors, weak = ranked[: self.num_islands - n_reset], ranked[self.num_islands - n_reset:]
            seeds = [isl.best() for isl in survivors if isl.best() is not None]
            if not seeds:
                return []
            for isl in weak:
                isl.clusters = {}
                src = seeds[int(rng.integers(len(seeds)))]
                copy = replace(src, id=self.next_id, stage="reset", parents=(src.id,), s_norm=None)
                self.next_id += 1
                isl.add(copy)
                isl.registered_count = 1
            return sorted(isl.id for isl in weak)

    # ------------------------------------------------------------------
    def save(self, path: str | Path) -> int:
        """Write the pool as JSON lines; returns the record count."""
        with self._lock:
            meta = {
                "kind": "meta",
                "version": CHECKPOINT_VERSION,
                "num_islands": self.num_islands,
                "next_id": self.next_id,
                "total_registered": self.total_registered,
                "island_registered": [isl.registered_count for isl in self.islands],
                "state": self.state,
                "refine_history": self.refine_history,
                "repair_records": self.repair_records,
            }
            lines = [json.dumps(meta, sort_keys=True)]
            for isl in self.islands:
                for cl in isl.clusters.values():
                    for c in cl.members:
                        rec = {"kind": "candidate", "island": isl.id, "signature": cl.signature, **c.to_record()}
                        lines.append(json.dumps(rec, sort_keys=True))
            for ins in self.insights:
                lines.append(json.dumps({"kind": "insight", **ins.to_record()}, sort_keys=True))
        tmp = Path(str(path) + ".tmp")
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
        tmp.replace(path)
        return len(lines)

    @classmethod
    def load(cls, path: str | Path) -> "ExperiencePool":
        from .refine import Insight

        text = Path(path).read_text(encoding="utf-8")
        pool = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["kind"]
                if kind == "meta":
                    if pool is not None:
                        raise ValueError("duplicate meta record")
                    pool = cls(int(rec["num_islands"]))
                    pool.next_id = int(rec["next_id"])
                    pool.total_registered = int(rec["total_registered"])
                    for isl, n in zip(pool.islands, rec["island_registered"]):
                        isl.registered_count = int(n)
                    pool.state = rec.get("state", {})
                    pool.refine_history = rec.get("refine_history", [])
                    pool.repair_records = rec.get("repair_records", [])
                    continue
                if pool is None:
                    raise ValueError("record before meta header")
                if kind == "candidate":
                    c = Candidate.from_record(rec)
                    isl = pool.islands[int(rec["island"])]
                    if signature(c.score_mse) != rec["signature"]:
                        raise ValueError("signature does not match score")
                    isl.add(c)
                elif kind == "insight":
                    pool.insights.append(Insight.from_record(rec))
                else:
                    raise ValueError(f"unknown record kind {kind!r}")
            except CheckpointError:
                raise
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise CheckpointError(str(exc) or type(exc).__name__, lineno) from None
        return pool if pool is not None else cls()

    def same_contents(self, other: "ExperiencePool") -> bool:
        if self.num_islands != other.num_islands or len(self.insights) != len(other.insights):
            return False
        for a, b in zip(self.islands, other.islands):
            if list(a.clusters) != list(b.clusters) or a.registered_count != b.registered_count:
                return False
            for ca, cb in zip(a.candidates(), b.candidates()):
                if not ca.same_as(cb):
                    return False
            if len(a) != len(b):
                return False
        return all(x.to_record() == y.to_record() for x, y in zip(self.insights, other.insights)) and (
            self.next_id == other.next_id and self.total_registered == other.total_registered
            and self.state == other.state
        )
