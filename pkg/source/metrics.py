"""
Relation extraction scoring: RE-F1, Ign-F1, Evi-F1 and the official result file.

Result files use the DocRED submission layout, one object per predicted fact:
    [{"title", "h_idx", "t_idx", "r", "evidence", "score"}, ...]
sorted by (title, h_idx, t_idx, relation id).

Usage:
    report = evaluate(predictions, gold=dev, train=train)
    print(report.format_block())
    emit_official(predictions, dev.inventory, "run/result.json")
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union

from corpus import Dataset, NA_RELATION, RelationInventory


@dataclass
class PredictionRecord:
    """One predicted relation fact; score is the margin above the threshold class."""
    title: str
    h_idx: int
    t_idx: int
    r: int
    evidence: List[int] = field(default_factory=list)
    score: float = 0.0

    def __post_init__(self):
        if self.r == NA_RELATION:
            raise ValueError(f"Prediction for {self.title!r} ({self.h_idx}, {self.t_idx}) has the NA relation")
        if self.h_idx == self.t_idx:
            raise ValueError(f"Prediction for {self.title!r} has head == tail == {self.h_idx}")
        self.evidence = sorted(set(int(e) for e in self.evidence))

    @property
    def triple(self) -> Tuple[str, int, int, int]:
        return (self.title, self.h_idx, self.t_idx, self.r)

    def sort_key(self) -> Tuple[str, int, int, int]:
        return self.triple


@dataclass
class MetricScores:
    precision: float
    recall: float
    f1: float
    num_predicted: int = 0
    num_gold: int = 0
    num_correct: int = 0
    duplicates: int = 0
    undefined: bool = False

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "num_predicted": self.num_predicted, "num_gold": self.num_gold,
                "num_correct": self.num_correct, "duplicates": self.duplicates,
                "undefined": self.undefined}


def _micro(predicted: Set, gold: Set, duplicates: int = 0) -> MetricScores:
    correct = len(predicted & gold)
    precision = correct / len(predicted) if predicted else 0.0
    recall = correct / len(gold) if gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricScores(precision=precision, recall=recall, f1=f1, num_predicted=len(predicted),
                        num_gold=len(gold), num_correct=correct, duplicates=duplicates,
                        undefined=not predicted or not gold)


def gold_triples(gold: Dataset) -> Set[Tuple[str, int, int, int]]:
    return {(doc.title, f.head, f.tail, f.relation) for doc in gold for f in doc.facts}


def _predicted_triples(predictions: Iterable[PredictionRecord]) -> Tuple[Set, int]:
    triples = [p.triple for p in predictions]
    unique = set(triples)
    return unique, len(triples) - len(unique)


def re_f1(predictions: Iterable[PredictionRecord], gold: Dataset) -> MetricScores:
    """Micro P/R/F1 over exact (title, head, tail, relation) matches; duplicates are counted once."""
    predicted, duplicates = _predicted_triples(predictions)
    return _micro(predicted, gold_triples(gold), duplicates)


def train_fact_keys(train: Dataset) -> Set[Tuple[str, str, str]]:
    """(head mention name, tail mention name, relation name) for every training fact."""
    keys = set()
    for doc in train:
        for fact in doc.facts:
            relation = train.inventory.name_of(fact.relation)
            for head_name in doc.entities[fact.head].names:
                for tail_name in doc.entities[fact.tail].names:
                    keys.add((head_name, tail_name, relation))
    return keys


def ign_f1(predictions: Iterable[PredictionRecord], gold: Dataset, train: Optional[Dataset]) -> MetricScores:
    """
    re_f1 after removing, from both sides, every triple whose entity names and
    relation also occur as a training fact.
    """
    predicted, duplicates = _predicted_triples(predictions)
    gold_set = gold_triples(gold)
    if train is None:
        return _micro(predicted, gold_set, duplicates)
    keys = train_fact_keys(train)
    documents = gold.by_title()

    def in_train(triple) -> bool:
        title, head, tail, relation = triple
        doc = documents.get(title)
        if doc is None or not (0 <= head < len(doc.entities) and 0 <= tail < len(doc.entities)):
            return False
        relation_name = gold.inventory.name_of(relation)
        return any((h, t, relation_name) in keys
                   for h in doc.entities[head].names for t in doc.entities[tail].names)

    return _micro({t for t in predicted if not in_train(t)},
                  {t for t in gold_set if not in_train(t)}, duplicates)


def evi_f1(predictions: Iterable[PredictionRecord], gold: Dataset) -> MetricScores:
    """
    Micro P/R/F1 over (title, head, tail, relation, sentence) tuples. Evidence
    of a wrongly predicted triple can never match, so it only adds to the
    predicted count.
    """
    predicted = {p.triple + (s,) for p in predictions for s in p.evidence}
    gold_set = {(doc.title, f.head, f.tail, f.relation, s)
                for doc in gold for f in doc.facts for s in f.evidence}
    return _micro(predicted, gold_set)


@dataclass
class EvaluationReport:
    re: MetricScores
    ign: MetricScores
    evi: MetricScores

    def to_dict(self) -> dict:
        return {"re": self.re.to_dict(), "ign": self.ign.to_dict(), "evi": self.evi.to_dict()}

    def to_mlflow_metrics(self, prefix: str = "") -> Dict[str, float]:
        metrics = {}
        for name, scores in (("re", self.re), ("ign", self.ign), ("evi", self.evi)):
            metrics[f"{prefix}{name}_f1"] = scores.f1
            metrics[f"{prefix}{name}_precision"] = scores.precision
            metrics[f"{prefix}{name}_recall"] = scores.recall
        return metrics

    def format_block(self) -> str:
        lines = []
        for label, scores in (("F1", self.re), ("Ign-F1", self.ign), ("Evi-F1", self.evi)):
            flag = "  (undefined: empty side)" if scores.undefined else ""
            lines.append(f"{label:<7} {scores.f1:.4f} | P {scores.precision:.4f} | R {scores.recall:.4f}{flag}")
        if self.re.duplicates:
            lines.append(f"Duplicate predictions ignored: {self.re.duplicates}")
        return "\n".join(lines)


def evaluate(predictions: List[PredictionRecord], gold: Dataset, train: Optional[Dataset] = None) -> EvaluationReport:
    return EvaluationReport(re=re_f1(predictions, gold), ign=ign_f1(predictions, gold, train),
                            evi=evi_f1(predictions, gold))


# ---------------------------------------------------------------------------
# Official result file
# ---------------------------------------------------------------------------

def official_records(predictions: Iterable[PredictionRecord], inventory: RelationInventory) -> List[dict]:
    return [
        {"title": p.title, "h_idx": p.h_idx, "t_idx": p.t_idx, "r": inventory.name_of(p.r),
         "evidence": list(p.evidence), "score": p.score}
        for p in sorted(predictions, key=PredictionRecord.sort_key)
    ]


def emit_official(predictions: Iterable[PredictionRecord], inventory: RelationInventory,
                  path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(official_records(predictions, inventory), f, indent=1)
        f.write("\n")


def parse_official(path: Union[str, Path], inventory: RelationInventory) -> List[PredictionRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Result file not found: {path}")
    with open(path) as f:
        records = json.load(f)
    if not isinstance(records, list):
        raise ValueError(f"{path} must contain a JSON array of predictions")
    predictions = []
    for i, record in enumerate(records):
        try:
            relation = record["r"]
            relation = inventory.id_of(relation) if isinstance(relation, str) else int(relation)
            predictions.append(PredictionRecord(
                title=record["title"], h_idx=int(record["h_idx"]), t_idx=int(record["t_idx"]), r=relation,
                evidence=list(record.get("evidence", [])), score=float(record.get("score", 0.0))))
        except (KeyError, TypeError) as e:
            raise ValueError(f"Malformed prediction {i} in {path}: {e}") from None
    return predictions
